//! Sinusoidal position tables and the position self-enhanced encoder.
//!
//! The encoder refines the fixed 1-D table `P` (T × C_p): two SE blocks
//! produce channel-gated copies of `P` used as keys and values, `P` itself is
//! the query, and a multi-head attention with a residual back to `P` feeds a
//! layer norm. The output `P_se` is the query source for both branches.

use cmfn_tensor::{Tape, Tensor, Var};
use rand::Rng;

use crate::config::{ModelConfig, PositionMode};
use crate::error::{CmfnError, Result};
use crate::params::{glorot_conv, Bound, ParamId, ParamStore};

/// `value[t, 2i] = sin(t / 10000^(2i/C))`, `value[t, 2i+1] = cos(·)`.
pub fn sinusoid_1d(positions: usize, channels: usize) -> Result<Tensor> {
    if channels == 0 || !channels.is_multiple_of(2) {
        return Err(CmfnError::config(format!(
            "sinusoidal encoding needs an even channel count, got {channels}"
        )));
    }
    let mut out = Tensor::zeros([positions.max(1), channels]);
    fill_sinusoid(out.data_mut(), positions, channels, channels, 0, |t| t as f64);
    Ok(out)
}

fn fill_sinusoid(
    dst: &mut [f64],
    positions: usize,
    width: usize,
    stride: usize,
    offset: usize,
    coord: impl Fn(usize) -> f64,
) {
    for t in 0..positions {
        let x = coord(t);
        for i in 0..width / 2 {
            let freq = 10000f64.powf(2.0 * i as f64 / width as f64);
            dst[t * stride + offset + 2 * i] = (x / freq).sin();
            dst[t * stride + offset + 2 * i + 1] = (x / freq).cos();
        }
    }
}

/// 2-D table over an `h × w` grid, flattened row-major to `(h·w) × C`.
/// Channels `[0, C/2)` encode the column, `[C/2, C)` the row.
pub fn sinusoid_2d(h: usize, w: usize, channels: usize) -> Result<Tensor> {
    if channels == 0 || !channels.is_multiple_of(4) {
        return Err(CmfnError::config(format!(
            "2-D sinusoidal encoding needs channels divisible by 4, got {channels}"
        )));
    }
    let half = channels / 2;
    let mut out = Tensor::zeros([h * w, channels]);
    let data = out.data_mut();
    fill_sinusoid(data, h * w, half, channels, 0, |cell| (cell % w) as f64);
    fill_sinusoid(data, h * w, half, channels, half, |cell| (cell / w) as f64);
    Ok(out)
}

/// Squeeze-excitation over the channel axis of a position table.
#[derive(Debug, Clone)]
pub struct SeBlock {
    pub squeeze: ParamId,
    pub excite: ParamId,
}

impl SeBlock {
    pub fn new(store: &mut ParamStore, prefix: &str, channels: usize, reduction: usize, rng: &mut impl Rng) -> Self {
        let hidden = channels / reduction;
        Self {
            squeeze: store.add(format!("{prefix}.squeeze"), glorot_conv(rng, 1, 1, channels, hidden)),
            excite: store.add(format!("{prefix}.excite"), glorot_conv(rng, 1, 1, hidden, channels)),
        }
    }

    /// `p ⊙ σ(conv(relu(conv(mean_t p)))) + p`.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, p: Var) -> Result<Var> {
        let channels = tape.value(p).cols();
        let pooled = tape.avg_pool_axis(p, 0)?;
        let pooled = tape.reshape(pooled, &[1, 1, channels])?;
        let hidden = tape.conv2d(pooled, bound.var(self.squeeze), 1, 0)?;
        let hidden = tape.relu(hidden)?;
        let gate = tape.conv2d(hidden, bound.var(self.excite), 1, 0)?;
        let gate = tape.sigmoid(gate)?;
        let gate = tape.reshape(gate, &[channels])?;
        let scaled = tape.mul_row(p, gate)?;
        Ok(tape.add(scaled, p)?)
    }
}

#[derive(Debug, Clone)]
pub struct PositionEncoder {
    mode: PositionMode,
    table: Tensor,
    learnable: Option<ParamId>,
    pub se_key: SeBlock,
    pub se_value: SeBlock,
    pub norm_gain: ParamId,
    pub norm_bias: ParamId,
    heads: usize,
}

/// `P_se` plus the per-head attention weights that produced it.
#[derive(Debug, Clone)]
pub struct PositionOutput {
    pub p_se: Var,
    /// Attention output plus residual, before the layer norm (`M_p`).
    pub pre_norm: Option<Var>,
    pub attention: Vec<Var>,
}

impl PositionEncoder {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        let c = cfg.channels;
        let table = sinusoid_1d(cfg.max_len, c)?;
        let se_key = SeBlock::new(store, "pse.se_key", c, cfg.se_reduction, rng);
        let se_value = SeBlock::new(store, "pse.se_value", c, cfg.se_reduction, rng);
        let norm_gain = store.add("pse.norm.gain", Tensor::full([c], 1.0));
        let norm_bias = store.add("pse.norm.bias", Tensor::zeros([c]));
        let learnable = (cfg.position_mode == PositionMode::Learnable)
            .then(|| store.add("pse.learnable_table", table.clone()));
        Ok(Self {
            mode: cfg.position_mode,
            table,
            learnable,
            se_key,
            se_value,
            norm_gain,
            norm_bias,
            heads: cfg.pse_heads,
        })
    }

    /// The fixed sinusoidal table.
    pub fn table(&self) -> &Tensor {
        &self.table
    }

    pub fn mode(&self) -> PositionMode {
        self.mode
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound) -> Result<PositionOutput> {
        match self.mode {
            PositionMode::Fixed => Ok(PositionOutput {
                p_se: tape.constant(self.table.clone()),
                pre_norm: None,
                attention: Vec::new(),
            }),
            PositionMode::Learnable => Ok(PositionOutput {
                p_se: bound.var(self.learnable.expect("learnable mode registers a table")),
                pre_norm: None,
                attention: Vec::new(),
            }),
            PositionMode::SelfEnhanced => {
                let p = tape.constant(self.table.clone());
                self.enhance(tape, bound, p)
            }
        }
    }

    /// Self-enhancement of an arbitrary `T × C_p` table `p`.
    pub fn enhance(&self, tape: &mut Tape, bound: &Bound, p: Var) -> Result<PositionOutput> {
        let key = self.se_key.forward(tape, bound, p)?;
        let value = self.se_value.forward(tape, bound, p)?;
        let c = tape.value(p).cols();
        let d = c / self.heads;
        let scale = 1.0 / (d as f64).sqrt();
        let mut heads = Vec::with_capacity(self.heads);
        let mut attention = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let q = tape.slice_cols(p, h * d, d)?;
            let k = tape.slice_cols(key, h * d, d)?;
            let v = tape.slice_cols(value, h * d, d)?;
            let scores = tape.matmul_nt(q, k)?;
            let scores = tape.scale(scores, scale)?;
            let weights = tape.softmax(scores)?;
            heads.push(tape.matmul(weights, v)?);
            attention.push(weights);
        }
        let mixed = tape.concat_cols(&heads)?;
        let mixed = tape.add(mixed, p)?;
        let p_se = tape.layer_norm(mixed, bound.var(self.norm_gain), bound.var(self.norm_bias))?;
        Ok(PositionOutput {
            p_se,
            pre_norm: Some(mixed),
            attention,
        })
    }
}
