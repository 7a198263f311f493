//! Full forward composition: position encoder, vision branch, iterated
//! language + fusion passes.

use cmfn_tensor::{Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::codec::decode_greedy;
use crate::config::ModelConfig;
use crate::error::{CmfnError, Result};
use crate::language::{build_mask, IterationOutput, LanguageBranch, MaskMatrix, RefineOptions};
use crate::params::{Bound, ParamStore};
use crate::position::{sinusoid_2d, PositionEncoder, PositionOutput};
use crate::vision::{VisionBranch, VisionOutput};

/// Handles for everything recorded during one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub position: PositionOutput,
    pub p2d: Var,
    pub vision: VisionOutput,
    pub iterations: Vec<IterationOutput>,
}

impl ForwardPass {
    pub fn last(&self) -> &IterationOutput {
        self.iterations.last().expect("at least one iteration")
    }
}

/// Greedy strings for the three prediction heads (final iteration).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prediction {
    pub visual: String,
    pub language: String,
    pub fused: String,
    /// Fused prediction after each iteration.
    pub fused_per_iteration: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct Cmfn {
    cfg: ModelConfig,
    pub store: ParamStore,
    pub position: PositionEncoder,
    pub vision: VisionBranch,
    pub language: LanguageBranch,
    p2d: Tensor,
    mask: MaskMatrix,
}

impl Cmfn {
    /// Seeded random initialization; parameter order is fixed by construction.
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let position = PositionEncoder::new(&mut store, cfg, &mut rng)?;
        let vision = VisionBranch::new(&mut store, cfg, &mut rng);
        let language = LanguageBranch::new(&mut store, cfg, &mut rng);
        let p2d = sinusoid_2d(cfg.feature_height(), cfg.feature_width(), cfg.channels)?;
        let mask = build_mask(cfg.max_len)?;
        Ok(Self {
            cfg: cfg.clone(),
            store,
            position,
            vision,
            language,
            p2d,
            mask,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Replaces every parameter value; names and shapes must match.
    pub fn load_params(&mut self, values: Vec<(String, Tensor)>) -> Result<()> {
        if values.len() != self.store.len() {
            return Err(CmfnError::config(format!(
                "expected {} parameter records, found {}",
                self.store.len(),
                values.len()
            )));
        }
        for (param, (name, value)) in self.store.iter_mut().zip(values) {
            if param.name != name || param.value.shape() != value.shape() {
                return Err(CmfnError::config(format!(
                    "record {name} {:?} does not match parameter {} {:?}",
                    value.shape(),
                    param.name,
                    param.value.shape()
                )));
            }
            param.value = value;
        }
        Ok(())
    }

    pub fn mask(&self) -> &MaskMatrix {
        &self.mask
    }

    pub fn p2d(&self) -> &Tensor {
        &self.p2d
    }

    /// `H × W × 3` image with values in `[0, 1]`.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, image: &Tensor, opts: RefineOptions) -> Result<ForwardPass> {
        let expected = [self.cfg.image_height, self.cfg.image_width, 3];
        if image.shape() != expected {
            return Err(CmfnError::config(format!(
                "image shape {:?} does not match configured {expected:?}",
                image.shape()
            )));
        }
        let image = tape.constant(image.clone());
        self.forward_var(tape, bound, image, opts)
    }

    pub fn forward_var(&self, tape: &mut Tape, bound: &Bound, image: Var, opts: RefineOptions) -> Result<ForwardPass> {
        let position = self.position.forward(tape, bound)?;
        let p2d = tape.constant(self.p2d.clone());
        let vision = self.vision.forward(tape, bound, image, position.p_se, p2d)?;
        let opts = RefineOptions {
            drop_visual_cues: opts.drop_visual_cues || !self.cfg.visual_cues,
        };
        let iterations = self.language.refine(
            tape,
            bound,
            &vision,
            position.p_se,
            p2d,
            &self.mask,
            self.cfg.iterations,
            opts,
        )?;
        Ok(ForwardPass {
            position,
            p2d,
            vision,
            iterations,
        })
    }

    /// Inference on a fresh constant-only tape.
    pub fn predict(&self, image: &Tensor, opts: RefineOptions) -> Result<Prediction> {
        let mut tape = Tape::new();
        let bound = self.store.bind(&mut tape, false);
        let pass = self.forward(&mut tape, &bound, image, opts)?;
        Ok(self.decode(&tape, &pass))
    }

    pub fn decode(&self, tape: &Tape, pass: &ForwardPass) -> Prediction {
        let last = pass.last();
        Prediction {
            visual: decode_greedy(tape.value(pass.vision.visual_logits)),
            language: decode_greedy(tape.value(last.language_logits)),
            fused: decode_greedy(tape.value(last.fused_logits)),
            fused_per_iteration: pass
                .iterations
                .iter()
                .map(|it| decode_greedy(tape.value(it.fused_logits)))
                .collect(),
        }
    }
}
