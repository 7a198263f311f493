//! Iterative semantic recognition: diagonal-masked multi-head attention over
//! the current prediction, visual-cue injection, language prediction and the
//! gated cross-modal fusion.

use cmfn_tensor::{Tape, Tensor, Var};
use rand::Rng;

use crate::config::{Feedback, ModelConfig};
use crate::error::{CmfnError, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::vision::{Linear, VisionOutput};

/// `T × T` additive mask: `-inf` on the diagonal, zero elsewhere.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskMatrix {
    size: usize,
    values: Vec<f64>,
}

impl MaskMatrix {
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.size + j]
    }
}

pub fn build_mask(size: usize) -> Result<MaskMatrix> {
    if size == 0 {
        return Err(CmfnError::config("mask size must be at least 1"));
    }
    let values = (0..size * size)
        .map(|k| if k / size == k % size { f64::NEG_INFINITY } else { 0.0 })
        .collect();
    Ok(MaskMatrix { size, values })
}

#[derive(Debug, Clone)]
pub struct LanguageLayer {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
    pub norm1: (ParamId, ParamId),
    pub norm2: (ParamId, ParamId),
}

impl LanguageLayer {
    fn new(store: &mut ParamStore, prefix: &str, c: usize, ffn: usize, rng: &mut impl Rng) -> Self {
        let mut norm = |name: &str| {
            (
                store.add(format!("{prefix}.{name}.gain"), Tensor::full([c], 1.0)),
                store.add(format!("{prefix}.{name}.bias"), Tensor::zeros([c])),
            )
        };
        let norm1 = norm("norm1");
        let norm2 = norm("norm2");
        Self {
            query: Linear::new(store, &format!("{prefix}.query"), c, c, rng),
            key: Linear::new(store, &format!("{prefix}.key"), c, c, rng),
            value: Linear::new(store, &format!("{prefix}.value"), c, c, rng),
            output: Linear::new(store, &format!("{prefix}.output"), c, c, rng),
            ffn_in: Linear::new(store, &format!("{prefix}.ffn_in"), c, ffn, rng),
            ffn_out: Linear::new(store, &format!("{prefix}.ffn_out"), ffn, c, rng),
            norm1,
            norm2,
        }
    }
}

/// Output of the masked language attention stack.
#[derive(Debug, Clone)]
pub struct LanguageAttention {
    pub f_l: Var,
    /// Per layer, per head `T × T` attention weights.
    pub weights: Vec<Vec<Var>>,
}

/// Per-iteration bundle.
#[derive(Debug, Clone, Copy)]
pub struct IterationOutput {
    pub f_l: Var,
    pub l_vc: Var,
    pub f_vl: Var,
    pub language_logits: Var,
    pub f_g: Var,
    pub fused_feature: Var,
    pub fused_logits: Var,
}

#[derive(Debug, Clone)]
pub struct LanguageBranch {
    pub embed: Linear,
    pub layers: Vec<LanguageLayer>,
    pub head: Linear,
    pub gate: Linear,
    pub fused_head: Option<Linear>,
    heads: usize,
    feedback: Feedback,
    detach_input: bool,
}

/// Inference-time switches.
#[derive(Debug, Clone, Copy, Default)]
pub struct RefineOptions {
    /// Zero `L_vc`, reproducing the no-visual-cue language module.
    pub drop_visual_cues: bool,
}

impl LanguageBranch {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let (c, cls) = (cfg.channels, cfg.num_classes());
        let embed = Linear::new(store, "language.embed", cls, c, rng);
        let layers = (0..cfg.language_layers)
            .map(|i| LanguageLayer::new(store, &format!("language.layer{i}"), c, cfg.ffn_dim, rng))
            .collect();
        let head = Linear::new(store, "language.head", c, cls, rng);
        let gate = Linear::new(store, "fusion.gate", 2 * c, c, rng);
        let fused_head = (!cfg.share_fusion_head).then(|| Linear::new(store, "fusion.head", c, cls, rng));
        Self {
            embed,
            layers,
            head,
            gate,
            fused_head,
            heads: cfg.heads,
            feedback: cfg.feedback,
            detach_input: cfg.detach_language_input,
        }
    }

    /// `F_L` from the position queries and a `T × cls` distribution.
    ///
    /// Keys and values come from `fully(probs_in)` at every layer and every
    /// attention is masked, so row `i` of the result never depends on row `i`
    /// of `probs_in`.
    pub fn attention(&self, tape: &mut Tape, bound: &Bound, p_se: Var, probs_in: Var, mask: &MaskMatrix) -> Result<LanguageAttention> {
        #[cfg(debug_assertions)]
        {
            let p = tape.value(probs_in);
            for r in 0..p.rows() {
                let row = p.row(r);
                let total: f64 = row.iter().sum();
                if (total - 1.0).abs() > 1e-6 || row.iter().any(|v| *v < 0.0) {
                    return Err(CmfnError::config(format!(
                        "language input row {r} is not a distribution (sum {total})"
                    )));
                }
            }
        }
        let t = tape.value(p_se).rows();
        if mask.size() != t || tape.value(probs_in).rows() != t {
            return Err(CmfnError::config(format!(
                "mask size {} and input rows {} must match T={t}",
                mask.size(),
                tape.value(probs_in).rows()
            )));
        }
        let c = tape.value(p_se).cols();
        let d = c / self.heads;
        let scale = 1.0 / (d as f64).sqrt();
        let embedded = self.embed.forward(tape, bound, probs_in)?;

        let mut state: Option<Var> = None;
        let mut weights = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let q_in = match state {
                None => p_se,
                Some(h) => tape.add(h, p_se)?,
            };
            let q = layer.query.forward(tape, bound, q_in)?;
            let k = layer.key.forward(tape, bound, embedded)?;
            let v = layer.value.forward(tape, bound, embedded)?;
            let mut head_out = Vec::with_capacity(self.heads);
            let mut layer_weights = Vec::with_capacity(self.heads);
            for h in 0..self.heads {
                let qh = tape.slice_cols(q, h * d, d)?;
                let kh = tape.slice_cols(k, h * d, d)?;
                let vh = tape.slice_cols(v, h * d, d)?;
                let scores = tape.matmul_nt(qh, kh)?;
                let scores = tape.scale(scores, scale)?;
                let scores = tape.add_mask(scores, mask.values())?;
                let w = tape.softmax(scores)?;
                head_out.push(tape.matmul(w, vh)?);
                layer_weights.push(w);
            }
            let attn = tape.concat_cols(&head_out)?;
            let attn = layer.output.forward(tape, bound, attn)?;
            let x = tape.add(q_in, attn)?;
            let x = tape.layer_norm(x, bound.var(layer.norm1.0), bound.var(layer.norm1.1))?;
            let f = layer.ffn_in.forward(tape, bound, x)?;
            let f = tape.relu(f)?;
            let f = layer.ffn_out.forward(tape, bound, f)?;
            let x2 = tape.add(x, f)?;
            state = Some(tape.layer_norm(x2, bound.var(layer.norm2.0), bound.var(layer.norm2.1))?);
            weights.push(layer_weights);
        }
        Ok(LanguageAttention {
            f_l: state.expect("at least one language layer"),
            weights,
        })
    }

    /// `F_vL = F_L + L_vc`; logits = `fully(F_vL)`.
    pub fn predict(&self, tape: &mut Tape, bound: &Bound, f_l: Var, l_vc: Var) -> Result<(Var, Var)> {
        let f_vl = tape.add(f_l, l_vc)?;
        let logits = self.head.forward(tape, bound, f_vl)?;
        Ok((f_vl, logits))
    }

    /// Gate `F_g = σ([F_v, F_vL]·W_g + b)`, mix `F_v(1−F_g) + F_vL·F_g`, classify.
    pub fn fuse(&self, tape: &mut Tape, bound: &Bound, f_v: Var, f_vl: Var) -> Result<(Var, Var, Var)> {
        let joined = tape.concat_cols(&[f_v, f_vl])?;
        let gate = self.gate.forward(tape, bound, joined)?;
        let f_g = tape.sigmoid(gate)?;
        let fused = tape.lerp(f_v, f_vl, f_g)?;
        let head = self.fused_head.as_ref().unwrap_or(&self.head);
        let logits = head.forward(tape, bound, fused)?;
        Ok((f_g, fused, logits))
    }

    /// Runs `iterations` language + fusion passes. The first consumes the
    /// visual prediction; later ones consume the previous fused (or language)
    /// prediction. `L_vc` is computed once and reused. With input detaching
    /// on, neither the probabilities nor `AT_m` pass gradient back into the
    /// visual branch.
    #[allow(clippy::too_many_arguments)]
    pub fn refine(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        vision: &VisionOutput,
        p_se: Var,
        p2d: Var,
        mask: &MaskMatrix,
        iterations: usize,
        opts: RefineOptions,
    ) -> Result<Vec<IterationOutput>> {
        if iterations == 0 {
            return Err(CmfnError::config("iteration count must be at least 1"));
        }
        let l_vc = if opts.drop_visual_cues {
            let shape = [tape.value(vision.at_m).rows(), tape.value(p2d).cols()];
            tape.constant(Tensor::zeros(shape))
        } else {
            let at_m = if self.detach_input {
                tape.constant(tape.value(vision.at_m).clone())
            } else {
                vision.at_m
            };
            visual_cue_embed(tape, at_m, p2d)?
        };
        let mut signal = vision.visual_logits;
        let mut out = Vec::with_capacity(iterations);
        for _ in 0..iterations {
            let probs = tape.softmax(signal)?;
            let probs = if self.detach_input {
                tape.constant(tape.value(probs).clone())
            } else {
                probs
            };
            let f_l = self.attention(tape, bound, p_se, probs, mask)?.f_l;
            let (f_vl, language_logits) = self.predict(tape, bound, f_l, l_vc)?;
            let (f_g, fused_feature, fused_logits) = self.fuse(tape, bound, vision.f_v, f_vl)?;
            out.push(IterationOutput {
                f_l,
                l_vc,
                f_vl,
                language_logits,
                f_g,
                fused_feature,
                fused_logits,
            });
            signal = match self.feedback {
                Feedback::Fused => fused_logits,
                Feedback::Language => language_logits,
            };
        }
        Ok(out)
    }
}

/// `L_vc = AT_m · P′`: attention-weighted 2-D position codes.
pub fn visual_cue_embed(tape: &mut Tape, at_m: Var, p2d: Var) -> Result<Var> {
    let (s_attn, s_table) = (tape.value(at_m).cols(), tape.value(p2d).rows());
    if s_attn != s_table {
        return Err(CmfnError::config(format!(
            "attention covers {s_attn} cells but the 2-D table has {s_table}"
        )));
    }
    Ok(tape.matmul(at_m, p2d)?)
}
