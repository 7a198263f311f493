//! Dataset file: magic `CMFD`, version, count, H, W, then per sample a
//! `u16` text length, the text bytes and `H·W·3` RGB bytes. Little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use cmfn_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::render::{render_text, DistortionSpec};
use crate::binio::{put_u16, put_u32, Reader};
use crate::codec::{encode_label, Charset, LabelSeq, SYMBOLS};
use crate::error::{CmfnError, FormatError, Result};
use crate::par;

pub const MAGIC: &str = "CMFD";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    pub text: String,
    pub height: usize,
    pub width: usize,
    /// Interleaved RGB bytes, row-major.
    pub pixels: Vec<u8>,
}

impl Sample {
    /// `H × W × 3` tensor scaled to `[0, 1]`.
    pub fn image(&self) -> Tensor {
        let data = self.pixels.iter().map(|&b| b as f64 / 255.0).collect();
        Tensor::new(vec![self.height, self.width, 3], data).expect("pixel payload matches the header")
    }

    pub fn label(&self, max_len: usize) -> Result<LabelSeq> {
        Ok(encode_label(&self.text, max_len)?)
    }
}

/// Streams samples without holding the whole file in memory.
pub struct DatasetReader<R> {
    reader: Reader<R>,
    count: usize,
    height: usize,
    width: usize,
    read: usize,
    failed: bool,
}

impl<R: Read> DatasetReader<R> {
    pub fn new(inner: R) -> Result<Self> {
        let mut reader = Reader::new(inner);
        reader.magic(MAGIC)?;
        let version = reader.u32()?;
        if version != VERSION {
            return Err(FormatError::Version {
                found: version,
                supported: VERSION,
            }
            .into());
        }
        let count = reader.u32()? as usize;
        let height = reader.u32()? as usize;
        let width = reader.u32()? as usize;
        if height == 0 || width == 0 || height * width > 1 << 24 {
            return Err(FormatError::Invalid(format!("implausible image size {height}×{width}")).into());
        }
        Ok(Self {
            reader,
            count,
            height,
            width,
            read: 0,
            failed: false,
        })
    }

    pub fn sample_count(&self) -> usize {
        self.count
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    fn next_sample(&mut self) -> Result<Sample> {
        let len = self.reader.u16()? as usize;
        let start = self.reader.offset();
        let text = self.reader.string(len)?;
        if let Some(bad) = text.chars().find(|&c| !SYMBOLS.contains(c)) {
            return Err(FormatError::Invalid(format!(
                "sample {} at offset {start} has symbol {bad:?} outside {:?}",
                self.read,
                Charset.descriptor()
            ))
            .into());
        }
        let pixels = self.reader.vec(self.height * self.width * 3)?;
        Ok(Sample {
            text,
            height: self.height,
            width: self.width,
            pixels,
        })
    }
}

impl<R: Read> Iterator for DatasetReader<R> {
    type Item = Result<Sample>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed {
            return None;
        }
        if self.read == self.count {
            self.failed = true;
            return match self.reader.at_end() {
                Ok(true) => None,
                Ok(false) => Some(Err(FormatError::Invalid(format!(
                    "trailing bytes after {} declared samples at offset {}",
                    self.count,
                    self.reader.offset()
                ))
                .into())),
                Err(e) => Some(Err(e)),
            };
        }
        let out = self.next_sample();
        self.read += 1;
        if out.is_err() {
            self.failed = true;
        }
        Some(out)
    }
}

pub fn open_dataset(path: impl AsRef<Path>) -> Result<DatasetReader<BufReader<File>>> {
    DatasetReader::new(BufReader::new(File::open(path)?))
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<Sample>> {
    open_dataset(path)?.collect()
}

pub fn write_dataset<'a>(
    mut w: impl Write,
    height: usize,
    width: usize,
    samples: impl ExactSizeIterator<Item = &'a Sample>,
) -> Result<()> {
    write_header(&mut w, samples.len(), height, width)?;
    for s in samples {
        write_sample(&mut w, s, height, width)?;
    }
    w.flush()?;
    Ok(())
}

fn write_header(w: &mut impl Write, count: usize, height: usize, width: usize) -> Result<()> {
    let as_u32 = |v: usize, what: &str| u32::try_from(v).map_err(|_| FormatError::Invalid(format!("{what} {v} too large")));
    w.write_all(MAGIC.as_bytes())?;
    put_u32(w, VERSION)?;
    put_u32(w, as_u32(count, "count")?)?;
    put_u32(w, as_u32(height, "height")?)?;
    put_u32(w, as_u32(width, "width")?)?;
    Ok(())
}

fn write_sample(w: &mut impl Write, s: &Sample, height: usize, width: usize) -> Result<()> {
    if s.height != height || s.width != width || s.pixels.len() != height * width * 3 {
        return Err(FormatError::Invalid(format!(
            "sample {:?} is {}×{} but the file holds {height}×{width}",
            s.text, s.height, s.width
        ))
        .into());
    }
    let len = u16::try_from(s.text.len()).map_err(|_| FormatError::Invalid("text longer than 65535 bytes".into()))?;
    put_u16(w, len)?;
    w.write_all(s.text.as_bytes())?;
    w.write_all(&s.pixels)?;
    Ok(())
}

/// Corpus recipe. Text lengths are uniform over `min_len..=max_len` and
/// symbols uniform over the 36 drawable characters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenerateSpec {
    pub count: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub distortion: DistortionSpec,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
}

impl GenerateSpec {
    pub fn new(count: usize, distortion: DistortionSpec, seed: u64) -> Self {
        Self {
            count,
            min_len: 2,
            max_len: 6,
            distortion,
            seed,
            height: 32,
            width: 128,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(CmfnError::config("sample count must be at least 1"));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(CmfnError::config(format!(
                "length range {}..={} must be non-empty and start at 1 or more",
                self.min_len, self.max_len
            )));
        }
        if self.height == 0 || self.width == 0 {
            return Err(CmfnError::config("image size must be positive"));
        }
        self.distortion.validate()
    }
}

/// splitmix64 finalizer over `seed + (index + 1)·φ`.
pub fn sample_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn random_text(rng: &mut impl Rng, min_len: usize, max_len: usize) -> String {
    let len = rng.random_range(min_len..=max_len);
    let symbols = SYMBOLS.as_bytes();
    (0..len).map(|_| symbols[rng.random_range(0..symbols.len())] as char).collect()
}

fn make_sample(spec: &GenerateSpec, index: usize) -> Result<Sample> {
    let seed = sample_seed(spec.seed, index as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let text = random_text(&mut rng, spec.min_len, spec.max_len);
    let pixels = render_text(&text, &spec.distortion, rng.random(), spec.height, spec.width)?;
    Ok(Sample {
        text,
        height: spec.height,
        width: spec.width,
        pixels,
    })
}

/// Renders samples `range` of the corpus in parallel.
fn render_range(spec: &GenerateSpec, start: usize, end: usize) -> Result<Vec<Sample>> {
    par::map_range(end - start, |i| make_sample(spec, start + i)).into_iter().collect()
}

pub fn generate_samples(spec: &GenerateSpec) -> Result<Vec<Sample>> {
    spec.validate()?;
    render_range(spec, 0, spec.count)
}

/// Renders in bounded chunks and appends them to `path` in order.
pub fn generate_dataset(spec: &GenerateSpec, path: impl AsRef<Path>) -> Result<()> {
    const CHUNK: usize = 512;
    spec.validate()?;
    let mut w = BufWriter::new(File::create(path)?);
    write_header(&mut w, spec.count, spec.height, spec.width)?;
    let mut start = 0;
    while start < spec.count {
        let end = (start + CHUNK).min(spec.count);
        for s in render_range(spec, start, end)? {
            write_sample(&mut w, &s, spec.height, spec.width)?;
        }
        start = end;
    }
    w.flush()?;
    Ok(())
}
