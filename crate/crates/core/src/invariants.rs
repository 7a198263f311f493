//! Randomized structural checks shared by the property tests and the
//! acceptance run. Every case is a pure function of its seed.

use cmfn_tensor::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::error::Result;
use crate::language::RefineOptions;
use crate::model::Cmfn;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Tiny model whose initialized parameters (zero biases included) are each
/// shifted by uniform noise in `±scale`. Text length, channel count and
/// iteration count vary with the seed.
pub fn random_model(seed: u64, scale: f64) -> Result<Cmfn> {
    let mut r = rng(seed);
    let cfg = ModelConfig {
        max_len: r.random_range(3..=8),
        channels: [8, 16, 24][r.random_range(0..3)],
        heads: 4,
        pse_heads: 4,
        iterations: r.random_range(1..=3),
        seed,
        ..ModelConfig::tiny()
    };
    let mut model = Cmfn::new(&cfg)?;
    for p in model.store.iter_mut() {
        p.value.data_mut().iter_mut().for_each(|x| *x += r.random_range(-scale..scale));
    }
    Ok(model)
}

pub fn random_image(cfg: &ModelConfig, seed: u64) -> Tensor {
    let mut r = rng(seed);
    Tensor::from_fn([cfg.image_height, cfg.image_width, 3], |_| r.random_range(0.0..1.0))
}

/// Random `rows × cols` row-stochastic matrix.
pub fn random_distribution(rows: usize, cols: usize, r: &mut impl Rng) -> Tensor {
    let mut t = Tensor::from_fn([rows, cols], |_| r.random_range(0.01..1.0));
    for row in t.data_mut().chunks_mut(cols) {
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|x| *x /= s);
    }
    t
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlackoutCase {
    /// Largest change of language-logit row `i` after replacing input row `i`.
    pub own_row_change: f64,
    /// Largest change on any other row; positive unless the model is degenerate.
    pub other_rows_change: f64,
}

fn language_logits(model: &Cmfn, probs: &Tensor, l_vc: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = model.store.bind(&mut tape, false);
    let pos = model.position.forward(&mut tape, &bound)?;
    let q = tape.constant(probs.clone());
    let l = tape.constant(l_vc.clone());
    let att = model.language.attention(&mut tape, &bound, pos.p_se, q, model.mask())?;
    let (_, logits) = model.language.predict(&mut tape, &bound, att.f_l, l)?;
    Ok(tape.value(logits).clone())
}

/// Replaces one row of the language input distribution and measures how far
/// each output row moves.
pub fn blackout_case(seed: u64) -> Result<BlackoutCase> {
    let model = random_model(seed, 0.5)?;
    let cfg = model.config();
    let (t, c) = (cfg.max_len, cfg.channels);
    let k = crate::codec::NUM_CLASSES;
    let mut r = rng(seed ^ 0xb1ac);
    let probs = random_distribution(t, k, &mut r);
    let l_vc = Tensor::from_fn([t, c], |_| r.random_range(-1.0..1.0));
    let base = language_logits(&model, &probs, &l_vc)?;
    let i = r.random_range(0..t);
    let mut changed = probs.clone();
    let fresh = random_distribution(1, k, &mut r);
    changed.data_mut()[i * k..(i + 1) * k].copy_from_slice(fresh.data());
    let out = language_logits(&model, &changed, &l_vc)?;
    let mut case = BlackoutCase {
        own_row_change: 0.0,
        other_rows_change: 0.0,
    };
    for row in 0..t {
        let d = out.row(row).iter().zip(base.row(row)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        if row == i {
            case.own_row_change = d;
        } else {
            case.other_rows_change = case.other_rows_change.max(d);
        }
    }
    Ok(case)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalizationCase {
    /// Largest `|Σ_j AT_m[t, j] − 1|`.
    pub spatial_row_error: f64,
    /// Largest row-sum error over every language-attention head and layer.
    pub language_row_error: f64,
    pub gate_min: f64,
    pub gate_max: f64,
    /// Largest distance of a fused feature outside `[min, max]` of its two
    /// sources, over every iteration.
    pub hull_excess: f64,
}

fn max_row_sum_error(t: &Tensor) -> f64 {
    t.data()
        .chunks(t.cols())
        .map(|row| (row.iter().sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max)
}

/// Full forward pass of a random model on a random image.
pub fn normalization_case(seed: u64) -> Result<NormalizationCase> {
    let model = random_model(seed, 0.2)?;
    let image = random_image(model.config(), seed ^ 0x1a6e);
    let mut tape = Tape::new();
    let bound = model.store.bind(&mut tape, false);
    let pass = model.forward(&mut tape, &bound, &image, RefineOptions::default())?;

    let spatial_row_error = max_row_sum_error(tape.value(pass.vision.at_m));

    let probs = tape.softmax(pass.vision.visual_logits)?;
    let att = model.language.attention(&mut tape, &bound, pass.position.p_se, probs, model.mask())?;
    let language_row_error = att
        .weights
        .iter()
        .flatten()
        .map(|&w| max_row_sum_error(tape.value(w)))
        .fold(0.0, f64::max);

    let (mut gate_min, mut gate_max, mut hull_excess) = (f64::INFINITY, f64::NEG_INFINITY, 0.0f64);
    for it in &pass.iterations {
        for &g in tape.value(it.f_g).data() {
            gate_min = gate_min.min(g);
            gate_max = gate_max.max(g);
        }
        let (v, vl, f) = (tape.value(pass.vision.f_v), tape.value(it.f_vl), tape.value(it.fused_feature));
        for ((a, b), x) in v.data().iter().zip(vl.data()).zip(f.data()) {
            let excess = (a.min(*b) - x).max(x - a.max(*b));
            hull_excess = hull_excess.max(excess);
        }
    }
    Ok(NormalizationCase {
        spatial_row_error,
        language_row_error,
        gate_min,
        gate_max,
        hull_excess,
    })
}
