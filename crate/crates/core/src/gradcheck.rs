//! Finite-difference check of the whole recognizer on the tiny configuration.

use cmfn_tensor::gradcheck::{analytic_gradients_on, compare_with_numeric, GradCheckReport, DEFAULT_EPS};
use cmfn_tensor::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::codec::encode_label;
use crate::config::ModelConfig;
use crate::error::Result;
use crate::language::RefineOptions;
use crate::loss::{total_loss, LossWeights};
use crate::model::Cmfn;
use crate::params::Bound;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheck {
    pub report: GradCheckReport,
    /// Parameter holding the worst element, `name[index]`.
    pub worst: Option<String>,
}

/// Tiny config (T=6, C=16, N=2) with the language-input detach off, so the
/// check covers every path of the graph.
pub fn check_config(seed: u64) -> ModelConfig {
    ModelConfig {
        detach_language_input: false,
        seed,
        ..ModelConfig::tiny()
    }
}

/// Randomizes every parameter (biases and norm affines included), then
/// compares the tape gradient of the total loss against central differences.
/// `fault` names a tape op whose backward rule is deliberately corrupted.
pub fn check_model(seed: u64, fault: Option<&str>) -> Result<ModelCheck> {
    let cfg = check_config(seed);
    let mut model = Cmfn::new(&cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for p in model.store.iter_mut() {
        let gain = p.name.ends_with(".gain");
        for x in p.value.data_mut() {
            *x = rng.random_range(-0.3..0.3) + if gain { 1.0 } else { 0.0 };
        }
    }
    let image = Tensor::from_fn([cfg.image_height, cfg.image_width, 3], |_| rng.random_range(0.0..1.0));
    let label = encode_label("a1z", cfg.max_len)?;
    let weights = LossWeights::from(&cfg);
    let f = |t: &mut Tape, v: &[Var]| -> cmfn_tensor::Result<Var> {
        let bound = Bound::from_vars(v.to_vec());
        let pass = model.forward(t, &bound, &image, RefineOptions::default())?;
        Ok(total_loss(t, pass.vision.visual_logits, &pass.iterations, &label, weights)?)
    };
    let inputs = model.store.values();
    let mut tape = Tape::new();
    if let Some(op) = fault {
        tape.inject_backward_fault(op);
    }
    let (_, analytic) = analytic_gradients_on(tape, &f, &inputs)?;
    let report = compare_with_numeric(&f, &inputs, &analytic, DEFAULT_EPS)?;
    let worst = report
        .worst
        .map(|(i, e)| format!("{}[{e}]", model.store.iter().nth(i).expect("index from this store").name));
    Ok(ModelCheck { report, worst })
}
