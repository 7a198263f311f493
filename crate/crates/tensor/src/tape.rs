//! Reverse-mode gradient tape.
//!
//! Every kernel appends one node holding its output value and enough saved
//! state to run its backward rule. `backward` walks the nodes in reverse
//! recording order exactly once.

use crate::error::{Result, TensorError};
use crate::gemm::{gemm, MatRef};
use crate::tensor::{check_shape, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    h: usize,
    w: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    cout: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.kh * self.kw * self.cin
    }
}

enum Op {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow { x: Var, row: Var },
    MulRow { x: Var, row: Var },
    Relu(Var),
    Sigmoid(Var),
    Softmax(Var),
    AddMask(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Conv2d { x: Var, k: Var, geom: ConvGeom, cols: Vec<f64> },
    AvgPool { x: Var, outer: usize, extent: usize, inner: usize },
    Concat { parts: Vec<(Var, usize)> },
    SliceCols { x: Var, start: usize, width: usize },
    Reshape(Var),
    Upsample { x: Var, w: usize, c: usize },
    Sum(Var),
    Lerp { a: Var, b: Var, g: Var },
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, probs: Vec<f64>, count: usize },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddRow { .. } => "add_row",
            Op::MulRow { .. } => "mul_row",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Softmax(_) => "softmax",
            Op::AddMask(_) => "add_mask",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Conv2d { .. } => "conv2d",
            Op::AvgPool { .. } => "avg_pool",
            Op::Concat { .. } => "concat",
            Op::SliceCols { .. } => "slice_cols",
            Op::Reshape(_) => "reshape",
            Op::Upsample { .. } => "upsample",
            Op::Sum(_) => "sum",
            Op::Lerp { .. } => "lerp",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records a forward computation for one backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    consumed: bool,
    fault: Option<String>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    /// Test fixture: scales the upstream gradient of every `op` node by 1.5
    /// during backward, producing a deliberately wrong rule for that kernel.
    pub fn inject_backward_fault(&mut self, op: &str) {
        self.fault = Some(op.to_owned());
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that participates in gradient computation.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push_leaf(value, requires_grad)
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` loss with respect to `v`.
    ///
    /// Returns `None` for constants and for anything recorded after the loss.
    /// A grad-requiring value the loss does not reach gets zeros.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        if !self.consumed || !self.nodes[v.0].requires_grad {
            return None;
        }
        let shape = self.nodes[v.0].value.shape().to_vec();
        match self.grads.get(v.0) {
            Some(Some(g)) => Some(Tensor::from_parts(shape, g.clone())),
            Some(None) => Some(Tensor::zeros(shape)),
            None => None,
        }
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        #[cfg(debug_assertions)]
        {
            let allow_neg_inf = matches!(op, Op::AddMask(_));
            let bad = value
                .data()
                .iter()
                .any(|v| v.is_nan() || *v == f64::INFINITY || (!allow_neg_inf && *v == f64::NEG_INFINITY));
            if bad {
                return Err(TensorError::NonFinite { op: op.name() });
            }
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    // ---- kernels -------------------------------------------------------

    /// `a · b` for `a: [..., k]`, `b: [k, n]`; leading axes of `a` are rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` for `a: [..., k]`, `b: [n, k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let mismatch = || TensorError::Dimension {
            op: "matmul",
            lhs: av.shape().to_vec(),
            rhs: bv.shape().to_vec(),
        };
        if bv.rank() != 2 {
            return Err(mismatch());
        }
        let (k, n) = if trans_b {
            (bv.shape()[1], bv.shape()[0])
        } else {
            (bv.shape()[0], bv.shape()[1])
        };
        if av.cols() != k {
            return Err(mismatch());
        }
        let m = av.rows();
        let mut out = vec![0.0; m * n];
        let bref = if trans_b {
            MatRef::t(bv.data(), n, k)
        } else {
            MatRef::new(bv.data(), k, n)
        };
        gemm(MatRef::new(av.data(), m, k), bref, &mut out, 0.0);
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        self.push(Tensor::from_parts(shape, out), Op::MatMul { a, b, trans_b }, &[a, b])
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::Dimension {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_parts(av.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip(a, b, |x, y| x + y);
        self.push(out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip(a, b, |x, y| x - y);
        self.push(out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip(a, b, |x, y| x * y);
        self.push(out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let out = self.value(x).map(|v| v * factor);
        self.push(out, Op::Scale(x, factor), &[x])
    }

    fn row_broadcast(&self, op: &'static str, x: Var, row: Var) -> Result<()> {
        let (xv, rv) = (self.value(x), self.value(row));
        if rv.len() != xv.cols() {
            return Err(TensorError::Dimension {
                op,
                lhs: xv.shape().to_vec(),
                rhs: rv.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// `x + row`, broadcasting `row: [n]` over the leading axes of `x: [..., n]`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        self.row_broadcast("add_row", x, row)?;
        let (xv, rv) = (self.value(x), self.value(row));
        let n = xv.cols();
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + rv.data()[i % n])
            .collect();
        let out = Tensor::from_parts(xv.shape().to_vec(), data);
        self.push(out, Op::AddRow { x, row }, &[x, row])
    }

    /// `x ⊙ row`, broadcasting `row: [n]` over the leading axes of `x: [..., n]`.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        self.row_broadcast("mul_row", x, row)?;
        let (xv, rv) = (self.value(x), self.value(row));
        let n = xv.cols();
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * rv.data()[i % n])
            .collect();
        let out = Tensor::from_parts(xv.shape().to_vec(), data);
        self.push(out, Op::MulRow { x, row }, &[x, row])
    }

    /// Fully connected layer: `x · w + b` over the trailing axis.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let bv = self.value(b);
        let wv = self.value(w);
        if wv.rank() != 2 || bv.len() != wv.shape()[1] {
            return Err(TensorError::Dimension {
                op: "affine",
                lhs: wv.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v.max(0.0));
        self.push(out, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(sigmoid);
        self.push(out, Op::Sigmoid(x), &[x])
    }

    /// Softmax over the trailing axis. `-inf` inputs get exactly zero weight.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let out = softmax_rows(xv.data(), xv.cols())?;
        let out = Tensor::from_parts(xv.shape().to_vec(), out);
        self.push(out, Op::Softmax(x), &[x])
    }

    /// Adds a constant additive mask (which may hold `-inf`) to `x`.
    pub fn add_mask(&mut self, x: Var, mask: &[f64]) -> Result<Var> {
        let xv = self.value(x);
        if mask.len() != xv.len() {
            return Err(TensorError::Dimension {
                op: "add_mask",
                lhs: xv.shape().to_vec(),
                rhs: vec![mask.len()],
            });
        }
        if mask.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
            return Err(TensorError::NonFinite { op: "add_mask" });
        }
        let data = xv.data().iter().zip(mask).map(|(a, m)| a + m).collect();
        let out = Tensor::from_parts(xv.shape().to_vec(), data);
        self.push(out, Op::AddMask(x), &[x])
    }

    /// Layer normalization over the trailing axis with epsilon
    /// [`LAYER_NORM_EPS`] inside the square root.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let n = xv.cols();
        if n < 2 {
            return Err(TensorError::Shape {
                op: "layer_norm",
                detail: format!("normalized axis needs at least 2 entries, got {n}"),
            });
        }
        if gv.len() != n || bv.len() != n {
            return Err(TensorError::Dimension {
                op: "layer_norm",
                lhs: xv.shape().to_vec(),
                rhs: gv.shape().to_vec(),
            });
        }
        let rows = xv.rows();
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            for j in 0..n {
                let h = (row[j] - mean) * is;
                xhat[r * n + j] = h;
                out[r * n + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let out = Tensor::from_parts(xv.shape().to_vec(), out);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        )
    }

    /// 2-D cross-correlation of `x: [h, w, cin]` with `kernels: [kh, kw, cin, cout]`.
    ///
    /// Output extent is `floor((h + 2·padding − kh) / stride) + 1`.
    pub fn conv2d(&mut self, x: Var, kernels: Var, stride: usize, padding: usize) -> Result<Var> {
        let (xv, kv) = (self.value(x), self.value(kernels));
        if xv.rank() != 3 || kv.rank() != 4 || xv.shape()[2] != kv.shape()[2] {
            return Err(TensorError::Dimension {
                op: "conv2d",
                lhs: xv.shape().to_vec(),
                rhs: kv.shape().to_vec(),
            });
        }
        let (h, w, cin) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let (kh, kw, cout) = (kv.shape()[0], kv.shape()[1], kv.shape()[3]);
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(TensorError::Shape {
                op: "conv2d",
                detail: format!("kernel extents must be odd, got {kh}x{kw}"),
            });
        }
        if !(1..=2).contains(&stride) {
            return Err(TensorError::Shape {
                op: "conv2d",
                detail: format!("stride must be 1 or 2, got {stride}"),
            });
        }
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(TensorError::Shape {
                op: "conv2d",
                detail: format!("{kh}x{kw} kernel does not fit {h}x{w} input with padding {padding}"),
            });
        }
        let geom = ConvGeom {
            h,
            w,
            cin,
            kh,
            kw,
            cout,
            stride,
            pad: padding,
            oh: (h + 2 * padding - kh) / stride + 1,
            ow: (w + 2 * padding - kw) / stride + 1,
        };
        let cols = im2col(xv.data(), &geom);
        let mut out = vec![0.0; geom.oh * geom.ow * cout];
        gemm(
            MatRef::new(&cols, geom.oh * geom.ow, geom.patch()),
            MatRef::new(kv.data(), geom.patch(), cout),
            &mut out,
            0.0,
        );
        let out = Tensor::from_parts(vec![geom.oh, geom.ow, cout], out);
        self.push(out, Op::Conv2d { x, k: kernels, geom, cols }, &[x, kernels])
    }

    /// Arithmetic mean along `axis`; the axis is removed (a rank-1 input
    /// pools to shape `[1]`).
    pub fn avg_pool_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        if axis >= xv.rank() {
            return Err(TensorError::Shape {
                op: "avg_pool_axis",
                detail: format!("axis {axis} out of range for {:?}", xv.shape()),
            });
        }
        let shape = xv.shape();
        let outer: usize = shape[..axis].iter().product();
        let extent = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for e in 0..extent {
                let src = &xv.data()[(o * extent + e) * inner..(o * extent + e + 1) * inner];
                for (dst, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *dst += s;
                }
            }
        }
        out.iter_mut().for_each(|v| *v /= extent as f64);
        let mut new_shape: Vec<usize> = shape.to_vec();
        new_shape.remove(axis);
        if new_shape.is_empty() {
            new_shape.push(1);
        }
        let out = Tensor::from_parts(new_shape, out);
        self.push(out, Op::AvgPool { x, outer, extent, inner }, &[x])
    }

    /// Concatenation along the trailing axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| TensorError::Shape {
            op: "concat",
            detail: "no inputs".into(),
        })?;
        let lead = self.shape(*first)[..self.shape(*first).len() - 1].to_vec();
        let rows = self.value(*first).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s[..s.len() - 1] != lead[..] {
                return Err(TensorError::Dimension {
                    op: "concat",
                    lhs: self.shape(*first).to_vec(),
                    rhs: s.to_vec(),
                });
            }
            widths.push((p, self.value(p).cols()));
        }
        let total: usize = widths.iter().map(|(_, w)| w).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &(p, _) in &widths {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let mut shape = lead;
        shape.push(total);
        self.push(Tensor::from_parts(shape, out), Op::Concat { parts: widths }, parts)
    }

    /// Columns `start..start + width` of the trailing axis.
    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.cols();
        if width == 0 || start + width > n {
            return Err(TensorError::Shape {
                op: "slice_cols",
                detail: format!("range {start}..{} outside 0..{n}", start + width),
            });
        }
        let mut out = Vec::with_capacity(xv.rows() * width);
        for r in 0..xv.rows() {
            out.extend_from_slice(&xv.row(r)[start..start + width]);
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = width;
        self.push(Tensor::from_parts(shape, out), Op::SliceCols { x, start, width }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        check_shape("reshape", shape)?;
        let out = self.value(x).clone().reshape(shape.to_vec())?;
        self.push(out, Op::Reshape(x), &[x])
    }

    /// Nearest-neighbour ×2 upsampling of `x: [h, w, c]`, cropped to `[out_h, out_w, c]`.
    pub fn upsample2x(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 3 || out_h == 0 || out_w == 0 || out_h > 2 * xv.shape()[0] || out_w > 2 * xv.shape()[1] {
            return Err(TensorError::Shape {
                op: "upsample",
                detail: format!("cannot upsample {:?} to {out_h}x{out_w}", xv.shape()),
            });
        }
        let (w, c) = (xv.shape()[1], xv.shape()[2]);
        let mut out = Vec::with_capacity(out_h * out_w * c);
        for i in 0..out_h {
            for j in 0..out_w {
                let src = ((i / 2) * w + j / 2) * c;
                out.extend_from_slice(&xv.data()[src..src + c]);
            }
        }
        let out = Tensor::from_parts(vec![out_h, out_w, c], out);
        self.push(out, Op::Upsample { x, w, c }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum(x), &[x])
    }

    /// `a ⊙ (1 − g) + b ⊙ g`.
    pub fn lerp(&mut self, a: Var, b: Var, g: Var) -> Result<Var> {
        self.same_shape("lerp", a, b)?;
        self.same_shape("lerp", a, g)?;
        let (av, bv, gv) = (self.value(a), self.value(b), self.value(g));
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .zip(gv.data())
            .map(|((&x, &y), &t)| x * (1.0 - t) + y * t)
            .collect();
        let out = Tensor::from_parts(av.shape().to_vec(), data);
        self.push(out, Op::Lerp { a, b, g }, &[a, b, g])
    }

    /// Mean over rows with a target of `−log softmax(logits)[row, target]`.
    /// Rows whose target is `None` contribute nothing.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let lv = self.value(logits);
        let cls = lv.cols();
        if targets.len() != lv.rows() {
            return Err(TensorError::Dimension {
                op: "cross_entropy",
                lhs: lv.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        if let Some(bad) = targets.iter().flatten().find(|&&t| t >= cls) {
            return Err(TensorError::Shape {
                op: "cross_entropy",
                detail: format!("target {bad} outside {cls} classes"),
            });
        }
        let count = targets.iter().flatten().count();
        if count == 0 {
            return Err(TensorError::Shape {
                op: "cross_entropy",
                detail: "no target rows".into(),
            });
        }
        let probs = softmax_rows(lv.data(), cls)?;
        let mut loss = 0.0;
        for (r, t) in targets.iter().enumerate() {
            if let Some(t) = *t {
                let row = lv.row(r);
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                loss += lse - row[t];
            }
        }
        let out = Tensor::scalar(loss / count as f64);
        self.push(
            out,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
            &[logits],
        )
    }

    // ---- backward -------------------------------------------------------

    /// Propagates gradients of the single-element `loss` to every
    /// grad-requiring value recorded before it. May run once per tape.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(TensorError::StaleTape);
        }
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(TensorError::NotScalar(lv.shape().to_vec()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        if !self.nodes[loss.0].requires_grad {
            self.grads = grads;
            return Ok(());
        }
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let (before, rest) = grads.split_at_mut(i);
            let Some(g) = rest[0].as_deref() else {
                continue;
            };
            if self.fault.as_deref() == Some(node.op.name()) {
                let skewed: Vec<f64> = g.iter().map(|x| x * 1.5).collect();
                backward_node(&self.nodes, node, &skewed, before);
            } else {
                backward_node(&self.nodes, node, g, before);
            }
        }
        self.grads = grads;
        Ok(())
    }
}

/// Accumulates `f`'s contribution into the gradient slot of `v` when it
/// requires a gradient.
fn accumulate(nodes: &[Node], grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
    if !nodes[v.0].requires_grad {
        return;
    }
    let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
    f(slot);
}

fn backward_node(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let val = |v: Var| &nodes[v.0].value;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul { a, b, trans_b } => {
            let (av, bv) = (val(*a), val(*b));
            let m = av.rows();
            let k = av.cols();
            let n = node.value.cols();
            accumulate(nodes, grads, *a, |da| {
                // dA = dC · Bᵀ  (B stored k×n), or dC · B  (B stored n×k).
                let bref = if *trans_b {
                    MatRef::new(bv.data(), n, k)
                } else {
                    MatRef::t(bv.data(), k, n)
                };
                gemm(MatRef::new(g, m, n), bref, da, 1.0);
            });
            accumulate(nodes, grads, *b, |db| {
                if *trans_b {
                    // dB (n×k) = dCᵀ · A
                    gemm(MatRef::t(g, m, n), MatRef::new(av.data(), m, k), db, 1.0);
                } else {
                    // dB (k×n) = Aᵀ · dC
                    gemm(MatRef::t(av.data(), m, k), MatRef::new(g, m, n), db, 1.0);
                }
            });
        }
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, |d| add_into(d, g));
            accumulate(nodes, grads, *b, |d| add_into(d, g));
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, |d| add_into(d, g));
            accumulate(nodes, grads, *b, |d| d.iter_mut().zip(g).for_each(|(d, g)| *d -= g));
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            accumulate(nodes, grads, *a, |d| {
                for ((d, g), y) in d.iter_mut().zip(g).zip(bv.data()) {
                    *d += g * y;
                }
            });
            accumulate(nodes, grads, *b, |d| {
                for ((d, g), x) in d.iter_mut().zip(g).zip(av.data()) {
                    *d += g * x;
                }
            });
        }
        Op::Scale(x, factor) => {
            accumulate(nodes, grads, *x, |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g * factor));
        }
        Op::AddRow { x, row } => {
            let n = val(*row).len();
            accumulate(nodes, grads, *x, |d| add_into(d, g));
            accumulate(nodes, grads, *row, |d| {
                for (i, gv) in g.iter().enumerate() {
                    d[i % n] += gv;
                }
            });
        }
        Op::MulRow { x, row } => {
            let (xv, rv) = (val(*x), val(*row));
            let n = rv.len();
            accumulate(nodes, grads, *x, |d| {
                for (i, (d, gv)) in d.iter_mut().zip(g).enumerate() {
                    *d += gv * rv.data()[i % n];
                }
            });
            accumulate(nodes, grads, *row, |d| {
                for (i, (gv, xv)) in g.iter().zip(xv.data()).enumerate() {
                    d[i % n] += gv * xv;
                }
            });
        }
        Op::Relu(x) => {
            let xv = val(*x);
            accumulate(nodes, grads, *x, |d| {
                for ((d, g), xv) in d.iter_mut().zip(g).zip(xv.data()) {
                    if *xv > 0.0 {
                        *d += g;
                    }
                }
            });
        }
        Op::Sigmoid(x) => {
            let y = node.value.data();
            accumulate(nodes, grads, *x, |d| {
                for ((d, g), y) in d.iter_mut().zip(g).zip(y) {
                    *d += g * y * (1.0 - y);
                }
            });
        }
        Op::Softmax(x) => {
            let y = node.value.data();
            let n = node.value.cols();
            accumulate(nodes, grads, *x, |d| {
                for r in 0..y.len() / n {
                    let (yr, gr) = (&y[r * n..(r + 1) * n], &g[r * n..(r + 1) * n]);
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        d[r * n + j] += yr[j] * (gr[j] - dot);
                    }
                }
            });
        }
        Op::AddMask(x) => {
            accumulate(nodes, grads, *x, |d| add_into(d, g));
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            inv_std,
        } => {
            let gv = val(*gain);
            let n = gv.len();
            let rows = xhat.len() / n;
            accumulate(nodes, grads, *x, |d| {
                for r in 0..rows {
                    let xh = &xhat[r * n..(r + 1) * n];
                    let gr = &g[r * n..(r + 1) * n];
                    let mut sum_dxh = 0.0;
                    let mut sum_dxh_xh = 0.0;
                    for j in 0..n {
                        let dxh = gr[j] * gv.data()[j];
                        sum_dxh += dxh;
                        sum_dxh_xh += dxh * xh[j];
                    }
                    let scale = inv_std[r] / n as f64;
                    for j in 0..n {
                        let dxh = gr[j] * gv.data()[j];
                        d[r * n + j] += scale * (n as f64 * dxh - sum_dxh - xh[j] * sum_dxh_xh);
                    }
                }
            });
            accumulate(nodes, grads, *gain, |d| {
                for (i, (gv, xh)) in g.iter().zip(xhat).enumerate() {
                    d[i % n] += gv * xh;
                }
            });
            accumulate(nodes, grads, *bias, |d| {
                for (i, gv) in g.iter().enumerate() {
                    d[i % n] += gv;
                }
            });
        }
        Op::Conv2d { x, k, geom, cols } => {
            let kv = val(*k);
            let npos = geom.oh * geom.ow;
            accumulate(nodes, grads, *k, |dk| {
                gemm(
                    MatRef::t(cols, npos, geom.patch()),
                    MatRef::new(g, npos, geom.cout),
                    dk,
                    1.0,
                );
            });
            accumulate(nodes, grads, *x, |dx| {
                let mut dcols = vec![0.0; npos * geom.patch()];
                gemm(
                    MatRef::new(g, npos, geom.cout),
                    MatRef::t(kv.data(), geom.patch(), geom.cout),
                    &mut dcols,
                    0.0,
                );
                col2im(&dcols, geom, dx);
            });
        }
        Op::AvgPool { x, outer, extent, inner } => {
            let scale = 1.0 / *extent as f64;
            accumulate(nodes, grads, *x, |d| {
                for o in 0..*outer {
                    for e in 0..*extent {
                        let dst = &mut d[(o * extent + e) * inner..(o * extent + e + 1) * inner];
                        for (dv, gv) in dst.iter_mut().zip(&g[o * inner..(o + 1) * inner]) {
                            *dv += gv * scale;
                        }
                    }
                }
            });
        }
        Op::Concat { parts } => {
            let total = node.value.cols();
            let rows = node.value.rows();
            let mut offset = 0;
            for &(p, width) in parts {
                accumulate(nodes, grads, p, |d| {
                    for r in 0..rows {
                        add_into(
                            &mut d[r * width..(r + 1) * width],
                            &g[r * total + offset..r * total + offset + width],
                        );
                    }
                });
                offset += width;
            }
        }
        Op::SliceCols { x, start, width } => {
            let n = val(*x).cols();
            let rows = node.value.rows();
            accumulate(nodes, grads, *x, |d| {
                for r in 0..rows {
                    add_into(
                        &mut d[r * n + start..r * n + start + width],
                        &g[r * width..(r + 1) * width],
                    );
                }
            });
        }
        Op::Reshape(x) => {
            accumulate(nodes, grads, *x, |d| add_into(d, g));
        }
        Op::Upsample { x, w, c, .. } => {
            let (oh, ow) = (node.value.shape()[0], node.value.shape()[1]);
            accumulate(nodes, grads, *x, |d| {
                for i in 0..oh {
                    for j in 0..ow {
                        let src = ((i / 2) * w + j / 2) * c;
                        let dst = (i * ow + j) * c;
                        add_into(&mut d[src..src + c], &g[dst..dst + c]);
                    }
                }
            });
        }
        Op::Sum(x) => {
            accumulate(nodes, grads, *x, |d| d.iter_mut().for_each(|d| *d += g[0]));
        }
        Op::Lerp { a, b, g: gate } => {
            let (av, bv, tv) = (val(*a), val(*b), val(*gate));
            accumulate(nodes, grads, *a, |d| {
                for ((d, gv), t) in d.iter_mut().zip(g).zip(tv.data()) {
                    *d += gv * (1.0 - t);
                }
            });
            accumulate(nodes, grads, *b, |d| {
                for ((d, gv), t) in d.iter_mut().zip(g).zip(tv.data()) {
                    *d += gv * t;
                }
            });
            accumulate(nodes, grads, *gate, |d| {
                for (i, (d, gv)) in d.iter_mut().zip(g).enumerate() {
                    *d += gv * (bv.data()[i] - av.data()[i]);
                }
            });
        }
        Op::CrossEntropy {
            logits,
            targets,
            probs,
            count,
        } => {
            let cls = val(*logits).cols();
            let scale = g[0] / *count as f64;
            accumulate(nodes, grads, *logits, |d| {
                for (r, t) in targets.iter().enumerate() {
                    if let Some(t) = *t {
                        for j in 0..cls {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            d[r * cls + j] += scale * (probs[r * cls + j] - onehot);
                        }
                    }
                }
            });
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-wise max-subtracted softmax. Fails if any row is entirely `-inf`.
pub fn softmax_rows(data: &[f64], n: usize) -> Result<Vec<f64>> {
    let mut out = vec![0.0; data.len()];
    for (src, dst) in data.chunks_exact(n).zip(out.chunks_exact_mut(n)) {
        let max = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(TensorError::DegenerateDistribution);
        }
        let mut total = 0.0;
        for (d, &s) in dst.iter_mut().zip(src) {
            // exp(-inf) is exactly 0.
            *d = (s - max).exp();
            total += *d;
        }
        dst.iter_mut().for_each(|d| *d /= total);
    }
    Ok(out)
}

fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let patch = g.patch();
    let mut cols = vec![0.0; g.oh * g.ow * patch];
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let base = (oy * g.ow + ox) * patch;
            for ki in 0..g.kh {
                let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                for kj in 0..g.kw {
                    let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                    if ix < 0 || ix >= g.w as isize {
                        continue;
                    }
                    let src = (iy as usize * g.w + ix as usize) * g.cin;
                    let dst = base + (ki * g.kw + kj) * g.cin;
                    cols[dst..dst + g.cin].copy_from_slice(&x[src..src + g.cin]);
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let patch = g.patch();
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let base = (oy * g.ow + ox) * patch;
            for ki in 0..g.kh {
                let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                for kj in 0..g.kw {
                    let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                    if ix < 0 || ix >= g.w as isize {
                        continue;
                    }
                    let dst = (iy as usize * g.w + ix as usize) * g.cin;
                    let src = base + (ki * g.kw + kj) * g.cin;
                    add_into(&mut dx[dst..dst + g.cin], &cols[src..src + g.cin]);
                }
            }
        }
    }
}
