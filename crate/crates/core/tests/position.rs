mod common;

use cmfn_core::config::ModelConfig;
use cmfn_core::params::{Bound, ParamStore};
use cmfn_core::position::{sinusoid_1d, sinusoid_2d, PositionEncoder, SeBlock};
use cmfn_tensor::gradcheck::{finite_diff_check, DEFAULT_EPS};
use cmfn_tensor::{Tape, Tensor, Var, LAYER_NORM_EPS};
use common::{randomize, random_tensor, rng, row_mean_var};

fn encoder(seed: u64, cfg: &ModelConfig) -> (ParamStore, PositionEncoder) {
    let mut store = ParamStore::new();
    let enc = PositionEncoder::new(&mut store, cfg, &mut rng(seed)).unwrap();
    randomize(&mut store, seed + 1, 0.5);
    (store, enc)
}

#[test]
fn tables_stay_in_unit_range() {
    let t = sinusoid_1d(26, 64).unwrap();
    assert!(t.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    let g = sinusoid_2d(8, 32, 64).unwrap();
    assert_eq!(g.shape(), &[256, 64]);
    assert!(g.data().iter().all(|v| (-1.0..=1.0).contains(v)));
}

#[test]
fn sinusoid_rows_pairwise_distinct() {
    for t in 1..=26 {
        let table = sinusoid_1d(t, 64).unwrap();
        for a in 0..t {
            for b in a + 1..t {
                assert_ne!(table.row(a), table.row(b), "T={t} rows {a},{b}");
            }
        }
    }
    let grid = sinusoid_2d(8, 32, 64).unwrap();
    for a in 0..256 {
        for b in a + 1..256 {
            assert_ne!(grid.row(a), grid.row(b), "cells {a},{b}");
        }
    }
}

#[test]
fn se_block_zero_excite_scales_by_one_and_a_half() {
    let mut store = ParamStore::new();
    let se = SeBlock::new(&mut store, "se", 16, 4, &mut rng(3));
    store.get_mut(se.excite).data_mut().fill(0.0);
    let p = random_tensor(&[6, 16], 4, -1.0, 1.0);
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape, false);
    let pv = tape.constant(p.clone());
    let out = se.forward(&mut tape, &bound, pv).unwrap();
    for (o, x) in tape.value(out).data().iter().zip(p.data()) {
        assert_eq!(*o, 1.5 * x);
    }
}

#[test]
fn se_block_zero_input_gives_zero() {
    let mut store = ParamStore::new();
    let se = SeBlock::new(&mut store, "se", 16, 4, &mut rng(5));
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape, false);
    let pv = tape.constant(Tensor::zeros([6, 16]));
    let out = se.forward(&mut tape, &bound, pv).unwrap();
    assert!(tape.value(out).data().iter().all(|v| *v == 0.0));
}

#[test]
fn se_block_kernel_gradients() {
    let mut store = ParamStore::new();
    let se = SeBlock::new(&mut store, "se", 8, 4, &mut rng(6));
    let p = random_tensor(&[5, 8], 7, -1.0, 1.0);
    let report = finite_diff_check(
        |t: &mut Tape, v: &[Var]| {
            let bound = Bound::from_vars(v.to_vec());
            let pv = t.constant(p.clone());
            let out = se.forward(t, &bound, pv)?;
            let sq = t.mul(out, out)?;
            t.sum(sq)
        },
        &store.values(),
        DEFAULT_EPS,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-5, "{report:?}");
}

#[test]
fn enhanced_table_shape_and_normalization() {
    let cfg = ModelConfig::default();
    for seed in 0..5 {
        let (store, enc) = encoder(seed, &cfg);
        let mut store = store;
        // Unit gain, zero bias: the output is the pre-affine normalization.
        store.get_mut(enc.norm_gain).data_mut().fill(1.0);
        store.get_mut(enc.norm_bias).data_mut().fill(0.0);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, false);
        let out = enc.forward(&mut tape, &bound).unwrap();
        let p_se = tape.value(out.p_se);
        assert_eq!(p_se.shape(), &[cfg.max_len, cfg.channels]);
        let pre = tape.value(out.pre_norm.unwrap());
        for r in 0..cfg.max_len {
            let (mean, var) = row_mean_var(p_se.row(r));
            let (_, sigma2) = row_mean_var(pre.row(r));
            assert!(mean.abs() < 1e-6, "row {r} mean {mean}");
            let expected = sigma2 / (sigma2 + LAYER_NORM_EPS);
            assert!((var - expected).abs() < 1e-6, "row {r} var {var} vs {expected}");
        }
        for w in &out.attention {
            for r in 0..cfg.max_len {
                assert!((tape.value(*w).row(r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn enhanced_rows_differ_from_raw_table_and_are_deterministic() {
    let cfg = ModelConfig::default();
    let run = || {
        let (store, enc) = encoder(11, &cfg);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, false);
        let out = enc.forward(&mut tape, &bound).unwrap();
        tape.value(out.p_se).clone()
    };
    let (a, b) = (run(), run());
    assert_eq!(a, b);
    let raw = sinusoid_1d(cfg.max_len, cfg.channels).unwrap();
    for r in 0..cfg.max_len {
        assert_ne!(a.row(r), raw.row(r));
    }
}

#[test]
fn permuting_rows_changes_output_rows() {
    let cfg = ModelConfig::tiny();
    let (store, enc) = encoder(21, &cfg);
    let raw = sinusoid_1d(cfg.max_len, cfg.channels).unwrap();
    let run = |table: &Tensor| {
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, false);
        let p = tape.constant(table.clone());
        let out = enc.enhance(&mut tape, &bound, p).unwrap();
        tape.value(out.p_se).clone()
    };
    let base = run(&raw);
    let mut r = rng(22);
    for _ in 0..20 {
        let mut perm: Vec<usize> = (0..cfg.max_len).collect();
        use rand::seq::SliceRandom;
        perm.shuffle(&mut r);
        if perm.iter().enumerate().all(|(i, &p)| i == p) {
            continue;
        }
        let rows: Vec<&[f64]> = perm.iter().map(|&i| raw.row(i)).collect();
        let permuted = Tensor::from_rows(&rows).unwrap();
        let out = run(&permuted);
        // Output row i must follow its input row, not stay with position i.
        let moved = (0..cfg.max_len).filter(|&i| perm[i] != i).any(|i| out.row(i) != base.row(i));
        assert!(moved, "permutation {perm:?} left every output row in place");
    }
}

#[test]
fn every_position_parameter_gets_gradient() {
    let cfg = ModelConfig::tiny();
    let (store, enc) = encoder(31, &cfg);
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape, true);
    let out = enc.forward(&mut tape, &bound).unwrap();
    let w = tape.constant(random_tensor(&[cfg.max_len, cfg.channels], 32, -1.0, 1.0));
    let prod = tape.mul(out.p_se, w).unwrap();
    let loss = tape.sum(prod).unwrap();
    tape.backward(loss).unwrap();
    for (p, g) in store.iter().zip(bound.gradients(&tape)) {
        assert!(g.l2_norm() > 0.0, "{} received no gradient", p.name);
    }
}
