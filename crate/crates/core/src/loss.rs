//! Multi-objective loss over the visual, language and fused predictions.

use cmfn_tensor::{Tape, Var};

use crate::codec::LabelSeq;
use crate::config::{LossPositions, ModelConfig};
use crate::error::{CmfnError, Result};
use crate::language::IterationOutput;

/// Balance factors and target positions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub gamma_v: f64,
    pub gamma_l: f64,
    pub gamma_f: f64,
    pub positions: LossPositions,
}

impl From<&ModelConfig> for LossWeights {
    fn from(cfg: &ModelConfig) -> Self {
        Self {
            gamma_v: cfg.gamma_v,
            gamma_l: cfg.gamma_l,
            gamma_f: cfg.gamma_f,
            positions: cfg.loss_positions,
        }
    }
}

fn targets(label: &LabelSeq, positions: LossPositions) -> Vec<Option<usize>> {
    match positions {
        LossPositions::Masked => label.masked_targets(),
        LossPositions::All => label.all_targets(),
    }
}

/// Mean cross-entropy over positions `0..=length`.
pub fn masked_cross_entropy(tape: &mut Tape, logits: Var, label: &LabelSeq) -> Result<Var> {
    Ok(tape.cross_entropy(logits, &label.masked_targets())?)
}

/// `γ_v·L_Tv + (1/N)·Σ_i (γ_l·L_TL^i + γ_f·L_TF^i)`.
pub fn total_loss(
    tape: &mut Tape,
    visual_logits: Var,
    iterations: &[IterationOutput],
    label: &LabelSeq,
    weights: LossWeights,
) -> Result<Var> {
    if iterations.is_empty() {
        return Err(CmfnError::config("loss needs at least one iteration"));
    }
    let tgt = targets(label, weights.positions);
    let visual = tape.cross_entropy(visual_logits, &tgt)?;
    let mut total = tape.scale(visual, weights.gamma_v)?;
    let per_iter = 1.0 / iterations.len() as f64;
    for it in iterations {
        let l = tape.cross_entropy(it.language_logits, &tgt)?;
        let l = tape.scale(l, weights.gamma_l * per_iter)?;
        let f = tape.cross_entropy(it.fused_logits, &tgt)?;
        let f = tape.scale(f, weights.gamma_f * per_iter)?;
        total = tape.add(total, l)?;
        total = tape.add(total, f)?;
    }
    Ok(total)
}
