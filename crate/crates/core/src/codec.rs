//! Text ↔ class-index sequences over the 37-symbol charset.

use cmfn_tensor::Tensor;

use crate::error::CodecError;

/// Drawable symbols in class-index order. The end token follows at index 36.
pub const SYMBOLS: &str = "abcdefghijklmnopqrstuvwxyz0123456789";
pub const NUM_CLASSES: usize = 37;
pub const END: usize = 36;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Charset;

impl Charset {
    pub fn len(&self) -> usize {
        NUM_CLASSES
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn end(&self) -> usize {
        END
    }

    /// The charset as stored in checkpoints: the 36 drawable symbols in order.
    pub fn descriptor(&self) -> &'static str {
        SYMBOLS
    }

    /// Class index of a (case-insensitive) alphanumeric character.
    pub fn lookup(&self, c: char) -> Option<usize> {
        let c = c.to_ascii_lowercase();
        match c {
            'a'..='z' => Some(c as usize - 'a' as usize),
            '0'..='9' => Some(26 + c as usize - '0' as usize),
            _ => None,
        }
    }

    /// Symbol for a class index; `None` for the end token and out-of-range indices.
    pub fn symbol(&self, index: usize) -> Option<char> {
        SYMBOLS.as_bytes().get(index).map(|&b| b as char)
    }
}

/// Length-T label: text indices, then the end token repeated to T.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelSeq {
    indices: Vec<usize>,
    length: usize,
}

impl LabelSeq {
    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    /// Number of text symbols before the first end token.
    pub fn length(&self) -> usize {
        self.length
    }

    pub fn max_len(&self) -> usize {
        self.indices.len()
    }

    /// Loss targets: every text position plus the first end token; padding
    /// slots after it are `None`.
    pub fn masked_targets(&self) -> Vec<Option<usize>> {
        self.indices
            .iter()
            .enumerate()
            .map(|(i, &c)| (i <= self.length).then_some(c))
            .collect()
    }

    /// Targets over all T positions, padding included.
    pub fn all_targets(&self) -> Vec<Option<usize>> {
        self.indices.iter().map(|&c| Some(c)).collect()
    }

    pub fn text(&self) -> String {
        self.indices[..self.length]
            .iter()
            .map(|&i| Charset.symbol(i).expect("text positions hold symbols"))
            .collect()
    }

    /// One-hot `T × 37` rows.
    pub fn one_hot(&self) -> Tensor {
        let t = self.indices.len();
        let mut out = Tensor::zeros([t, NUM_CLASSES]);
        for (r, &c) in self.indices.iter().enumerate() {
            out.data_mut()[r * NUM_CLASSES + c] = 1.0;
        }
        out
    }
}

pub fn encode_label(text: &str, max_len: usize) -> Result<LabelSeq, CodecError> {
    let n = text.chars().count();
    if max_len == 0 || n > max_len - 1 {
        return Err(CodecError::TextTooLong { len: n, max: max_len.saturating_sub(1) });
    }
    let mut indices = Vec::with_capacity(max_len);
    for c in text.chars() {
        indices.push(Charset.lookup(c).ok_or(CodecError::UnsupportedChar(c))?);
    }
    indices.resize(max_len, END);
    Ok(LabelSeq { indices, length: n })
}

/// Argmax per row (lowest index wins ties), truncated at the first end token.
pub fn decode_greedy(probs: &Tensor) -> String {
    decode_indices(&probs.argmax_rows())
}

pub fn decode_indices(indices: &[usize]) -> String {
    indices
        .iter()
        .map_while(|&i| Charset.symbol(i))
        .collect()
}
