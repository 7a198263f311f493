//! One finite-difference check per differentiable tape operation.
//!
//! Each check contracts the kernel output with fixed random weights so every
//! output element reaches the scalar. Shapes and values come from a seed.
//! [`kernel_suite`] can record its analytic pass on a faulted tape (see
//! [`Tape::inject_backward_fault`]) to prove the harness catches a broken
//! backward rule.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::gradcheck::{analytic_gradients_on, compare_with_numeric, GradCheckReport, DEFAULT_EPS};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Result for one operation.
#[derive(Debug, Clone, PartialEq)]
pub struct OpCheck {
    pub op: &'static str,
    pub report: GradCheckReport,
}

struct Gen(ChaCha8Rng);

impl Gen {
    fn dim(&mut self, lo: usize, hi: usize) -> usize {
        self.0.random_range(lo..=hi)
    }

    fn tensor(&mut self, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape.to_vec(), |_| self.0.random_range(-1.5..1.5))
    }

    /// Entries bounded away from zero, for kernels with a kink there.
    fn off_zero(&mut self, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape.to_vec(), |_| {
            let m = self.0.random_range(0.05..1.5);
            if self.0.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
    }
}

fn weighted_sum(t: &mut Tape, y: Var, w: Var) -> Result<Var> {
    let p = t.mul(y, w)?;
    t.sum(p)
}

fn run(
    op: &'static str,
    fault: Option<&str>,
    f: impl Fn(&mut Tape, &[Var]) -> Result<Var>,
    inputs: Vec<Tensor>,
) -> Result<OpCheck> {
    let mut tape = Tape::new();
    if let Some(name) = fault {
        tape.inject_backward_fault(name);
    }
    let (_, analytic) = analytic_gradients_on(tape, &f, &inputs)?;
    let report = compare_with_numeric(&f, &inputs, &analytic, DEFAULT_EPS)?;
    Ok(OpCheck { op, report })
}

/// Names accepted by the suite, in report order.
pub const OPS: &[&str] = &[
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "add_row",
    "mul_row",
    "relu",
    "sigmoid",
    "softmax",
    "add_mask",
    "layer_norm",
    "conv2d",
    "avg_pool",
    "concat",
    "slice_cols",
    "reshape",
    "upsample",
    "sum",
    "lerp",
    "cross_entropy",
];

/// Checks every operation in [`OPS`] on seed-chosen shapes.
pub fn kernel_suite(seed: u64, fault: Option<&str>) -> Result<Vec<OpCheck>> {
    let mut g = Gen(ChaCha8Rng::seed_from_u64(seed));
    let (m, k, n) = (g.dim(1, 4), g.dim(1, 5), g.dim(2, 5));
    let mut out = Vec::with_capacity(OPS.len());

    out.push(run(
        "matmul",
        fault,
        |t, v| {
            let a = t.matmul(v[0], v[1])?;
            let b = t.matmul_nt(a, v[2])?;
            weighted_sum(t, b, v[3])
        },
        vec![g.tensor(&[m, k]), g.tensor(&[k, n]), g.tensor(&[m, n]), g.tensor(&[m, m])],
    )?);
    out.push(run(
        "add",
        fault,
        |t, v| {
            let y = t.add(v[0], v[1])?;
            weighted_sum(t, y, v[2])
        },
        vec![g.tensor(&[m, n]), g.tensor(&[m, n]), g.tensor(&[m, n])],
    )?);
    out.push(run(
        "sub",
        fault,
        |t, v| {
            let y = t.sub(v[0], v[1])?;
            weighted_sum(t, y, v[2])
        },
        vec![g.tensor(&[m, n]), g.tensor(&[m, n]), g.tensor(&[m, n])],
    )?);
    out.push(run(
        "mul",
        fault,
        |t, v| {
            let y = t.mul(v[0], v[1])?;
            t.sum(y)
        },
        vec![g.tensor(&[m, n]), g.tensor(&[m, n])],
    )?);
    let factor = g.0.random_range(-2.0..2.0);
    out.push(run(
        "scale",
        fault,
        |t, v| {
            let y = t.scale(v[0], factor)?;
            weighted_sum(t, y, v[1])
        },
        vec![g.tensor(&[m, n]), g.tensor(&[m, n])],
    )?);
    out.push(run(
        "add_row",
        fault,
        |t, v| {
            let y = t.add_row(v[0], v[1])?;
            weighted_sum(t, y, v[2])
        },
        vec![g.tensor(&[m, n]), g.tensor(&[n]), g.tensor(&[m, n])],
    )?);
    out.push(run(
        "mul_row",
        fault,
        |t, v| {
            let y = t.mul_row(v[0], v[1])?;
            weighted_sum(t, y, v[2])
        },
        vec![g.tensor(&[m, n]), g.tensor(&[n]), g.tensor(&[m, n])],
    )?);
    out.push(run(
        "relu",
        fault,
        |t, v| {
            let y = t.relu(v[0])?;
            weighted_sum(t, y, v[1])
        },
        vec![g.off_zero(&[m, n]), g.tensor(&[m, n])],
    )?);
    out.push(run(
        "sigmoid",
        fault,
        |t, v| {
            let y = t.sigmoid(v[0])?;
            weighted_sum(t, y, v[1])
        },
        vec![g.tensor(&[m, n]), g.tensor(&[m, n])],
    )?);
    out.push(run(
        "softmax",
        fault,
        |t, v| {
            let y = t.softmax(v[0])?;
            weighted_sum(t, y, v[1])
        },
        vec![g.tensor(&[m, n]), g.tensor(&[m, n])],
    )?);
    // Square mask with a -inf diagonal, as the language attention uses.
    let mask: Vec<f64> = (0..n * n)
        .map(|i| if i / n == i % n { f64::NEG_INFINITY } else { 0.0 })
        .collect();
    out.push(run(
        "add_mask",
        fault,
        |t, v| {
            let y = t.add_mask(v[0], &mask)?;
            let y = t.softmax(y)?;
            weighted_sum(t, y, v[1])
        },
        vec![g.tensor(&[n, n]), g.tensor(&[n, n])],
    )?);
    out.push(run(
        "layer_norm",
        fault,
        |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2])?;
            weighted_sum(t, y, v[3])
        },
        vec![g.tensor(&[m, n]), g.tensor(&[n]), g.tensor(&[n]), g.tensor(&[m, n])],
    )?);
    let (h, w, cin, cout) = (g.dim(2, 5), g.dim(2, 5), g.dim(1, 3), g.dim(1, 3));
    let stride = g.dim(1, 2);
    let (oh, ow) = ((h - 1) / stride + 1, (w - 1) / stride + 1);
    out.push(run(
        "conv2d",
        fault,
        |t, v| {
            let y = t.conv2d(v[0], v[1], stride, 1)?;
            weighted_sum(t, y, v[2])
        },
        vec![g.tensor(&[h, w, cin]), g.tensor(&[3, 3, cin, cout]), g.tensor(&[oh, ow, cout])],
    )?);
    out.push(run(
        "avg_pool",
        fault,
        |t, v| {
            let y = t.avg_pool_axis(v[0], 1)?;
            weighted_sum(t, y, v[1])
        },
        vec![g.tensor(&[m, k, n]), g.tensor(&[m, n])],
    )?);
    out.push(run(
        "concat",
        fault,
        |t, v| {
            let y = t.concat_cols(&[v[0], v[1]])?;
            weighted_sum(t, y, v[2])
        },
        vec![g.tensor(&[m, n]), g.tensor(&[m, k]), g.tensor(&[m, n + k])],
    )?);
    out.push(run(
        "slice_cols",
        fault,
        |t, v| {
            let y = t.slice_cols(v[0], 1, n - 1)?;
            weighted_sum(t, y, v[1])
        },
        vec![g.tensor(&[m, n]), g.tensor(&[m, n - 1])],
    )?);
    out.push(run(
        "reshape",
        fault,
        |t, v| {
            let y = t.reshape(v[0], &[m * n])?;
            weighted_sum(t, y, v[1])
        },
        vec![g.tensor(&[m, n]), g.tensor(&[m * n])],
    )?);
    // Odd target height exercises the cropped edge.
    let (uh, uw) = (2 * h - 1, 2 * w);
    out.push(run(
        "upsample",
        fault,
        |t, v| {
            let y = t.upsample2x(v[0], uh, uw)?;
            weighted_sum(t, y, v[1])
        },
        vec![g.tensor(&[h, w, cin]), g.tensor(&[uh, uw, cin])],
    )?);
    out.push(run(
        "sum",
        fault,
        |t, v| {
            let y = t.sum(v[0])?;
            t.scale(y, 0.7)
        },
        vec![g.tensor(&[m, n])],
    )?);
    out.push(run(
        "lerp",
        fault,
        |t, v| {
            let y = t.lerp(v[0], v[1], v[2])?;
            weighted_sum(t, y, v[3])
        },
        vec![g.tensor(&[m, n]), g.tensor(&[m, n]), g.tensor(&[m, n]), g.tensor(&[m, n])],
    )?);
    let targets: Vec<Option<usize>> = (0..m)
        .map(|i| (i == 0 || g.0.random_bool(0.7)).then(|| g.dim(0, n - 1)))
        .collect();
    out.push(run(
        "cross_entropy",
        fault,
        |t, v| t.cross_entropy(v[0], &targets),
        vec![g.tensor(&[m, n])],
    )?);
    debug_assert!(out.iter().map(|c| c.op).eq(OPS.iter().copied()));
    Ok(out)
}
