use cmfn_tensor::gradcheck::{finite_diff_check, DEFAULT_EPS};
use cmfn_tensor::{Tape, Tensor, TensorError, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

fn rows(r: &[&[f64]]) -> Tensor {
    Tensor::from_rows(r).unwrap()
}

#[test]
fn matmul_identity_and_selector() {
    let mut t = Tape::new();
    let id = t.constant(rows(&[&[1.0, 0.0], &[0.0, 1.0]]));
    let m = t.constant(rows(&[&[1.0, 2.0], &[3.0, 4.0]]));
    let out = t.matmul(id, m).unwrap();
    assert_eq!(t.value(out).data(), &[1.0, 2.0, 3.0, 4.0]);

    let sel = t.constant(rows(&[&[1.0, 0.0], &[0.0, 0.0]]));
    let col = t.constant(rows(&[&[5.0], &[7.0]]));
    let out = t.matmul(sel, col).unwrap();
    assert_eq!(t.value(out).shape(), &[2, 1]);
    assert_eq!(t.value(out).data(), &[5.0, 0.0]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::zeros([2, 3]));
    let b = t.constant(Tensor::zeros([2, 3]));
    let err = t.matmul(a, b).unwrap_err();
    assert_eq!(
        err,
        TensorError::Dimension {
            op: "matmul",
            lhs: vec![2, 3],
            rhs: vec![2, 3]
        }
    );
    assert!(err.to_string().contains("[2, 3]"));
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let a = random(&[3, 4], 1);
    let b = random(&[4, 2], 2);
    let r = finite_diff_check(
        |t: &mut Tape, v: &[Var]| {
            let c = t.matmul(v[0], v[1])?;
            t.sum(c)
        },
        &[a, b],
        DEFAULT_EPS,
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-6, "{r:?}");
}

#[test]
fn matmul_nt_gradient() {
    let a = random(&[3, 4], 3);
    let b = random(&[5, 4], 4);
    let w = random(&[3, 5], 5);
    let r = finite_diff_check(
        |t: &mut Tape, v: &[Var]| {
            let c = t.matmul_nt(v[0], v[1])?;
            let c = t.mul(c, v[2])?;
            t.sum(c)
        },
        &[a, b, w],
        DEFAULT_EPS,
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-6, "{r:?}");
}

#[test]
fn softmax_uniform_and_mask() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::zeros([3]));
    let y = t.softmax(x).unwrap();
    for v in t.value(y).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }

    let x = t.constant(Tensor::zeros([2]));
    let masked = t.add_mask(x, &[0.0, f64::NEG_INFINITY]).unwrap();
    let y = t.softmax(masked).unwrap();
    assert_eq!(t.value(y).data(), &[1.0, 0.0]);
}

#[test]
fn softmax_all_masked_is_degenerate() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::zeros([1, 2]));
    let m = t.add_mask(x, &[f64::NEG_INFINITY; 2]).unwrap();
    assert_eq!(t.softmax(m).unwrap_err(), TensorError::DegenerateDistribution);
}

#[test]
fn masked_slots_receive_zero_gradient() {
    let mut t = Tape::new();
    let x = t.param(random(&[1, 4], 9));
    let w = t.constant(random(&[1, 4], 10));
    let m = t.add_mask(x, &[0.0, f64::NEG_INFINITY, 0.0, 0.0]).unwrap();
    let y = t.softmax(m).unwrap();
    let y = t.mul(y, w).unwrap();
    let s = t.sum(y).unwrap();
    t.backward(s).unwrap();
    let g = t.grad(x).unwrap();
    assert_eq!(g.data()[1], 0.0);
    assert!(g.data()[0] != 0.0);
}

#[test]
fn softmax_jacobian_matches_finite_differences() {
    let x = random(&[5], 11);
    let w = random(&[5], 12);
    let r = finite_diff_check(
        |t: &mut Tape, v: &[Var]| {
            let y = t.softmax(v[0])?;
            let y = t.mul(y, v[1])?;
            t.sum(y)
        },
        &[x, w],
        DEFAULT_EPS,
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-6, "{r:?}");
}

#[test]
fn layer_norm_examples() {
    let mut t = Tape::new();
    let gain = t.constant(Tensor::full([4], 1.0));
    let bias = t.constant(Tensor::zeros([4]));
    let x = t.constant(Tensor::full([1, 4], 5.0));
    let y = t.layer_norm(x, gain, bias).unwrap();
    assert_eq!(t.value(y).data(), &[0.0; 4]);

    let gain = t.constant(Tensor::full([2], 1.0));
    let bias = t.constant(Tensor::zeros([2]));
    let x = t.constant(rows(&[&[1.0, -1.0]]));
    let y = t.layer_norm(x, gain, bias).unwrap();
    // Variance 1 becomes 1/(1 + 1e-5) after the epsilon guard.
    for (got, want) in t.value(y).data().iter().zip([1.0, -1.0]) {
        assert!((got - want).abs() < 1e-5, "{got}");
    }
}

#[test]
fn layer_norm_rejects_single_column() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::zeros([3, 1]));
    let g = t.constant(Tensor::zeros([1]));
    let b = t.constant(Tensor::zeros([1]));
    assert!(matches!(t.layer_norm(x, g, b), Err(TensorError::Shape { .. })));
}

#[test]
fn layer_norm_gradient() {
    let x = random(&[3, 6], 13);
    let g = random(&[6], 14);
    let b = random(&[6], 15);
    let w = random(&[3, 6], 16);
    let r = finite_diff_check(
        |t: &mut Tape, v: &[Var]| {
            let y = t.layer_norm(v[0], v[1], v[2])?;
            let y = t.mul(y, v[3])?;
            t.sum(y)
        },
        &[x, g, b, w],
        DEFAULT_EPS,
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-5, "{r:?}");
}

#[test]
fn conv_identity_kernel() {
    let mut t = Tape::new();
    let xv = random(&[4, 5, 3], 17);
    let x = t.constant(xv.clone());
    let mut k = Tensor::zeros([1, 1, 3, 3]);
    for c in 0..3 {
        k.data_mut()[c * 3 + c] = 1.0;
    }
    let k = t.constant(k);
    let y = t.conv2d(x, k, 1, 0).unwrap();
    assert_eq!(t.value(y), &xv);
}

#[test]
fn conv_counting_case() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::full([5, 5, 1], 1.0));
    let k = t.constant(Tensor::full([3, 3, 1, 1], 1.0));
    let y = t.conv2d(x, k, 1, 1).unwrap();
    let yv = t.value(y);
    assert_eq!(yv.shape(), &[5, 5, 1]);
    assert_eq!(yv.at(&[2, 2, 0]), 9.0);
    assert_eq!(yv.at(&[0, 0, 0]), 4.0);
    assert_eq!(yv.at(&[4, 4, 0]), 4.0);
    assert_eq!(yv.at(&[0, 2, 0]), 6.0);
}

#[test]
fn conv_stride_two_halves_even_extents() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::zeros([32, 128, 3]));
    let k = t.constant(Tensor::zeros([3, 3, 3, 8]));
    let y = t.conv2d(x, k, 2, 1).unwrap();
    assert_eq!(t.shape(y), &[16, 64, 8]);
}

#[test]
fn conv_rejects_bad_geometry() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::zeros([4, 4, 1]));
    let even = t.constant(Tensor::zeros([2, 2, 1, 1]));
    assert!(matches!(t.conv2d(x, even, 1, 0), Err(TensorError::Shape { .. })));
    let k = t.constant(Tensor::zeros([3, 3, 1, 1]));
    assert!(matches!(t.conv2d(x, k, 3, 1), Err(TensorError::Shape { .. })));
    let big = t.constant(Tensor::zeros([7, 7, 1, 1]));
    assert!(matches!(t.conv2d(x, big, 1, 0), Err(TensorError::Shape { .. })));
    let wrong_cin = t.constant(Tensor::zeros([3, 3, 2, 1]));
    assert!(matches!(t.conv2d(x, wrong_cin, 1, 1), Err(TensorError::Dimension { .. })));
}

#[test]
fn conv_gradient() {
    for (stride, seed) in [(1usize, 18u64), (2, 19)] {
        let x = random(&[4, 4, 2], seed);
        let k = random(&[3, 3, 2, 3], seed + 100);
        let oh = (4 + 2 - 3) / stride + 1;
        let w = random(&[oh, oh, 3], seed + 200);
        let r = finite_diff_check(
            |t: &mut Tape, v: &[Var]| {
                let y = t.conv2d(v[0], v[1], stride, 1)?;
                let y = t.mul(y, v[2])?;
                t.sum(y)
            },
            &[x, k, w],
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-5, "stride {stride}: {r:?}");
    }
}

#[test]
fn avg_pool_examples() {
    let mut t = Tape::new();
    let x = t.constant(rows(&[&[1.0, 3.0], &[5.0, 7.0]]));
    let y = t.avg_pool_axis(x, 0).unwrap();
    assert_eq!(t.value(y).data(), &[3.0, 5.0]);
    let c = t.constant(Tensor::full([6, 4], 0.25));
    let y = t.avg_pool_axis(c, 0).unwrap();
    assert_eq!(t.value(y).data(), &[0.25; 4]);
    assert!(t.avg_pool_axis(c, 2).is_err());
}

#[test]
fn avg_pool_gradient_is_one_over_extent() {
    let mut t = Tape::new();
    let x = t.param(random(&[5, 3], 20));
    let y = t.avg_pool_axis(x, 0).unwrap();
    let s = t.sum(y).unwrap();
    t.backward(s).unwrap();
    for g in t.grad(x).unwrap().data() {
        assert!((g - 0.2).abs() < 1e-15);
    }
    let r = finite_diff_check(
        |t: &mut Tape, v: &[Var]| {
            let y = t.avg_pool_axis(v[0], 0)?;
            t.sum(y)
        },
        &[random(&[5, 3], 21)],
        DEFAULT_EPS,
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-6);
}

#[test]
fn affine_examples() {
    let mut t = Tape::new();
    let x = t.constant(random(&[2, 3, 4], 22));
    let w0 = t.constant(Tensor::zeros([4, 2]));
    let b = t.constant(Tensor::new([2], vec![0.5, -2.0]).unwrap());
    let y = t.affine(x, w0, b).unwrap();
    assert_eq!(t.shape(y), &[2, 3, 2]);
    for r in 0..6 {
        assert_eq!(t.value(y).row(r), &[0.5, -2.0]);
    }

    let xv = random(&[3, 3], 23);
    let x = t.constant(xv.clone());
    let mut id = Tensor::zeros([3, 3]);
    for i in 0..3 {
        id.data_mut()[i * 4] = 1.0;
    }
    let id = t.constant(id);
    let z = t.constant(Tensor::zeros([3]));
    let y = t.affine(x, id, z).unwrap();
    assert_eq!(t.value(y), &xv);

    let bad = t.constant(Tensor::zeros([2]));
    assert!(t.affine(x, id, bad).is_err());
}

#[test]
fn affine_gradient() {
    let r = finite_diff_check(
        |t: &mut Tape, v: &[Var]| {
            let y = t.affine(v[0], v[1], v[2])?;
            let y = t.mul(y, y)?;
            t.sum(y)
        },
        &[random(&[3, 4], 24), random(&[4, 5], 25), random(&[5], 26)],
        DEFAULT_EPS,
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-6, "{r:?}");
}

#[test]
fn backward_examples() {
    let mut t = Tape::new();
    let xv = random(&[2, 3], 27);
    let x = t.param(xv.clone());
    let s = t.sum(x).unwrap();
    t.backward(s).unwrap();
    assert_eq!(t.grad(x).unwrap().data(), &[1.0; 6]);

    let mut t = Tape::new();
    let x = t.param(xv.clone());
    let sq = t.mul(x, x).unwrap();
    let s = t.sum(sq).unwrap();
    let half = t.scale(s, 0.5).unwrap();
    t.backward(half).unwrap();
    assert_eq!(t.grad(x).unwrap(), xv);
}

#[test]
fn unreachable_leaf_gets_zero_grad_and_tape_goes_stale() {
    let mut t = Tape::new();
    let x = t.param(random(&[3], 28));
    let unused = t.param(random(&[2], 29));
    let c = t.constant(random(&[3], 30));
    let s = t.sum(x).unwrap();
    t.backward(s).unwrap();
    assert_eq!(t.grad(unused).unwrap().data(), &[0.0, 0.0]);
    assert!(t.grad(c).is_none());
    assert_eq!(t.backward(s), Err(TensorError::StaleTape));
}

#[test]
fn backward_requires_scalar() {
    let mut t = Tape::new();
    let x = t.param(random(&[3], 31));
    assert_eq!(t.backward(x), Err(TensorError::NotScalar(vec![3])));
}

#[test]
fn deterministic_outputs() {
    let run = || {
        let mut t = Tape::new();
        let x = t.param(random(&[6, 8], 32));
        let k = t.param(random(&[8, 8], 33));
        let y = t.matmul(x, k).unwrap();
        let y = t.softmax(y).unwrap();
        let s = t.sum(y).unwrap();
        t.backward(s).unwrap();
        (t.value(y).clone(), t.grad(k).unwrap())
    };
    assert_eq!(run(), run());
}

#[cfg(debug_assertions)]
#[test]
fn sentinel_flags_non_finite_kernel_output() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::full([2], 1e300));
    let err = t.mul(x, x).unwrap_err();
    assert_eq!(err, TensorError::NonFinite { op: "mul" });
}
