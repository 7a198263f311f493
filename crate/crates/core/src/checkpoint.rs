//! Binary checkpoint: magic `CMFN`, version, charset, canonical config text,
//! then named little-endian `f64` tensor records. Optimizer state, when
//! present, follows the model parameters as `optim.*` records.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use cmfn_tensor::Tensor;

use crate::binio::{put_len, put_u32, put_u64, Reader};
use crate::codec::Charset;
use crate::config::ModelConfig;
use crate::error::{CmfnError, FormatError, Result};
use crate::model::Cmfn;

pub const MAGIC: &str = "CMFN";
pub const VERSION: u32 = 1;
const OPTIM_STATE: &str = "optim.state";
const OPTIM_M: &str = "optim.m.";
const OPTIM_V: &str = "optim.v.";

/// Adam moments plus progress counters.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub step: u64,
    pub epochs_done: usize,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: Vec<(String, Tensor)>,
    pub optimizer: Option<OptimState>,
}

impl Checkpoint {
    pub fn from_model(model: &Cmfn, optimizer: Option<OptimState>) -> Self {
        Self {
            config: model.config().clone(),
            params: model.store.iter().map(|p| (p.name.clone(), p.value.clone())).collect(),
            optimizer,
        }
    }

    /// Builds the model described by the config and loads the stored values.
    pub fn into_model(self) -> Result<(Cmfn, Option<OptimState>)> {
        let mut model = Cmfn::new(&self.config)?;
        model.load_params(self.params).map_err(|e| match e {
            CmfnError::Config(msg) => FormatError::Invalid(msg).into(),
            other => other,
        })?;
        Ok((model, self.optimizer))
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(MAGIC.as_bytes())?;
        put_u32(&mut w, VERSION)?;
        let charset = Charset.descriptor();
        put_len(&mut w, charset.len(), "charset")?;
        w.write_all(charset.as_bytes())?;
        let text = self.config.to_text();
        put_len(&mut w, text.len(), "config")?;
        w.write_all(text.as_bytes())?;

        let mut records: Vec<(String, &Tensor)> = self.params.iter().map(|(n, t)| (n.clone(), t)).collect();
        let state;
        if let Some(opt) = &self.optimizer {
            if opt.m.len() != self.params.len() || opt.v.len() != self.params.len() {
                return Err(FormatError::Invalid("optimizer moments do not cover every parameter".into()).into());
            }
            state = Tensor::new(vec![2], vec![opt.step as f64, opt.epochs_done as f64])?;
            records.push((OPTIM_STATE.into(), &state));
            for ((name, _), m) in self.params.iter().zip(&opt.m) {
                records.push((format!("{OPTIM_M}{name}"), m));
            }
            for ((name, _), v) in self.params.iter().zip(&opt.v) {
                records.push((format!("{OPTIM_V}{name}"), v));
            }
        }
        put_len(&mut w, records.len(), "record count")?;
        for (name, tensor) in records {
            write_record(&mut w, &name, tensor)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from(r: impl Read) -> Result<Self> {
        let mut r = Reader::new(r);
        r.magic(MAGIC)?;
        let version = r.u32()?;
        if version != VERSION {
            return Err(FormatError::Version {
                found: version,
                supported: VERSION,
            }
            .into());
        }
        let len = r.u32()? as usize;
        let charset = r.string(len)?;
        if charset != Charset.descriptor() {
            return Err(FormatError::Charset {
                found: charset,
                expected: Charset.descriptor().into(),
            }
            .into());
        }
        let len = r.u32()? as usize;
        let text = r.string(len)?;
        let config = ModelConfig::from_text(&text).map_err(|e| FormatError::Invalid(format!("embedded config: {e}")))?;

        let count = r.u32()? as usize;
        let mut params = Vec::new();
        let mut state = None;
        let (mut m, mut v) = (Vec::new(), Vec::new());
        for _ in 0..count {
            let (name, tensor) = read_record(&mut r)?;
            if name == OPTIM_STATE {
                state = Some(tensor);
            } else if name.starts_with(OPTIM_M) {
                m.push(tensor);
            } else if name.starts_with(OPTIM_V) {
                v.push(tensor);
            } else {
                params.push((name, tensor));
            }
        }
        let optimizer = match state {
            None => None,
            Some(s) => {
                if s.len() != 2 || m.len() != params.len() || v.len() != params.len() {
                    return Err(FormatError::Invalid("incomplete optimizer state".into()).into());
                }
                Some(OptimState {
                    step: s.data()[0] as u64,
                    epochs_done: s.data()[1] as usize,
                    m,
                    v,
                })
            }
        };
        Ok(Self {
            config,
            params,
            optimizer,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

fn write_record(w: &mut impl Write, name: &str, tensor: &Tensor) -> Result<()> {
    put_len(w, name.len(), "record name")?;
    w.write_all(name.as_bytes())?;
    put_len(w, tensor.rank(), "rank")?;
    for &e in tensor.shape() {
        put_u64(w, e as u64)?;
    }
    for &x in tensor.data() {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn read_record(r: &mut Reader<impl Read>) -> Result<(String, Tensor)> {
    let len = r.u32()? as usize;
    let name = r.string(len)?;
    let rank = r.u32()? as usize;
    if rank == 0 || rank > 8 {
        return Err(FormatError::Invalid(format!("record {name} has rank {rank}")).into());
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(r.u64()? as usize);
    }
    let count = shape
        .iter()
        .try_fold(1usize, |acc, &e| acc.checked_mul(e))
        .filter(|&n| n > 0 && n <= 1 << 28)
        .ok_or_else(|| FormatError::Invalid(format!("record {name} has implausible shape {shape:?}")))?;
    let raw = r.vec(count * 8)?;
    let data = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let tensor = Tensor::new(shape, data).map_err(|e| FormatError::Invalid(format!("record {name}: {e}")))?;
    Ok((name, tensor))
}
