//! Visual recognition branch: backbone features, U-Net keys, per-character
//! spatial attention, glimpse features and visual logits.

use cmfn_tensor::{Tape, Tensor, Var};
use rand::Rng;

use crate::config::ModelConfig;
use crate::error::{CmfnError, Result};
use crate::params::{glorot_linear, he_conv, Bound, ParamId, ParamStore};

/// 3×3 convolution with bias, He-initialized for the relu that follows.
#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub stride: usize,
}

impl ConvLayer {
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, stride: usize, rng: &mut impl Rng) -> Self {
        Self {
            kernel: store.add(format!("{name}.kernel"), he_conv(rng, 3, 3, cin, cout)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros([cout])),
            stride,
        }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let y = tape.conv2d(x, bound.var(self.kernel), self.stride, 1)?;
        Ok(tape.add_row(y, bound.var(self.bias))?)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, din: usize, dout: usize, rng: &mut impl Rng) -> Self {
        Self {
            weight: store.add(format!("{name}.weight"), glorot_linear(rng, din, dout)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros([dout])),
        }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        Ok(tape.affine(x, bound.var(self.weight), bound.var(self.bias))?)
    }
}

/// Four 3×3 stages (strides 2,1,2,1; channels 3→C/2→C/2→C→C) mapping an
/// `H × W × 3` image in `[0, 1]` to `H/4 × W/4 × C`.
#[derive(Debug, Clone)]
pub struct Backbone {
    pub stages: Vec<ConvLayer>,
}

impl Backbone {
    pub fn new(store: &mut ParamStore, c: usize, rng: &mut impl Rng) -> Self {
        let plan = [(3, c / 2, 2), (c / 2, c / 2, 1), (c / 2, c, 2), (c, c, 1)];
        let stages = plan
            .iter()
            .enumerate()
            .map(|(i, &(cin, cout, s))| ConvLayer::new(store, &format!("backbone.stage{i}"), cin, cout, s, rng))
            .collect();
        Self { stages }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, image: Var) -> Result<Var> {
        let shape = tape.shape(image).to_vec();
        if shape.len() != 3 || shape[2] != 3 || !shape[0].is_multiple_of(4) || !shape[1].is_multiple_of(4) {
            return Err(CmfnError::config(format!(
                "backbone expects an H×W×3 image with H, W divisible by 4, got {shape:?}"
            )));
        }
        // Pixels arrive in [0, 1]; centre them on zero.
        let scaled = tape.scale(image, 2.0)?;
        let offset = tape.constant(Tensor::full(shape, -1.0));
        let mut x = tape.add(scaled, offset)?;
        for stage in &self.stages {
            let y = stage.forward(tape, bound, x)?;
            x = tape.relu(y)?;
        }
        Ok(x)
    }
}

/// Two-level U-Net with additive skips; output shape equals input shape.
#[derive(Debug, Clone)]
pub struct MiniUnet {
    pub down1: ConvLayer,
    pub down2: ConvLayer,
    pub bottleneck: ConvLayer,
    pub up1: ConvLayer,
    pub up0: ConvLayer,
}

impl MiniUnet {
    pub fn new(store: &mut ParamStore, c: usize, rng: &mut impl Rng) -> Self {
        Self {
            down1: ConvLayer::new(store, "unet.down1", c, c, 2, rng),
            down2: ConvLayer::new(store, "unet.down2", c, c, 2, rng),
            bottleneck: ConvLayer::new(store, "unet.bottleneck", c, c, 1, rng),
            up1: ConvLayer::new(store, "unet.up1", c, c, 1, rng),
            up0: ConvLayer::new(store, "unet.up0", c, c, 1, rng),
        }
    }

    pub fn decoder_layers(&self) -> [&ConvLayer; 2] {
        [&self.up1, &self.up0]
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, v: Var) -> Result<Var> {
        let relu_conv = |tape: &mut Tape, layer: &ConvLayer, x: Var| -> Result<Var> {
            let y = layer.forward(tape, bound, x)?;
            Ok(tape.relu(y)?)
        };
        let e1 = relu_conv(tape, &self.down1, v)?;
        let e2 = relu_conv(tape, &self.down2, e1)?;
        let b = relu_conv(tape, &self.bottleneck, e2)?;

        let (h1, w1) = (tape.shape(e1)[0], tape.shape(e1)[1]);
        let u1 = tape.upsample2x(b, h1, w1)?;
        let d1 = relu_conv(tape, &self.up1, u1)?;
        let d1 = tape.add(d1, e1)?;

        let (h0, w0) = (tape.shape(v)[0], tape.shape(v)[1]);
        let u0 = tape.upsample2x(d1, h0, w0)?;
        let d0 = self.up0.forward(tape, bound, u0)?;
        Ok(tape.add(d0, v)?)
    }
}

/// Attention map `AT_m` (T × S) and glimpses `F_v` (T × C).
#[derive(Debug, Clone, Copy)]
pub struct SpatialAttention {
    pub at_m: Var,
    pub f_v: Var,
}

/// `AT_m = softmax(P_se · K_rᵀ / √C)` over the S spatial cells; `F_v = AT_m · V_r`.
pub fn spatial_attention(tape: &mut Tape, p_se: Var, k_r: Var, v_r: Var) -> Result<SpatialAttention> {
    let kshape = tape.shape(k_r).to_vec();
    if kshape.len() != 3 || tape.shape(v_r) != kshape.as_slice() {
        return Err(CmfnError::config(format!(
            "keys {kshape:?} and values {:?} must be matching h×w×C maps",
            tape.shape(v_r)
        )));
    }
    let (s, c) = (kshape[0] * kshape[1], kshape[2]);
    let cp = tape.value(p_se).cols();
    if cp != c {
        return Err(CmfnError::config(format!(
            "position width C_p={cp} must equal feature width C={c}"
        )));
    }
    let keys = tape.reshape(k_r, &[s, c])?;
    let values = tape.reshape(v_r, &[s, c])?;
    let scores = tape.matmul_nt(p_se, keys)?;
    let scores = tape.scale(scores, 1.0 / (c as f64).sqrt())?;
    let at_m = tape.softmax(scores)?;
    let f_v = tape.matmul(at_m, values)?;
    Ok(SpatialAttention { at_m, f_v })
}

/// Bundle produced once per image.
#[derive(Debug, Clone, Copy)]
pub struct VisionOutput {
    pub v_r: Var,
    pub k_r: Var,
    pub at_m: Var,
    pub f_v: Var,
    pub visual_logits: Var,
}

#[derive(Debug, Clone)]
pub struct VisionBranch {
    pub backbone: Backbone,
    pub unet: MiniUnet,
    pub key_gain: ParamId,
    pub key_bias: ParamId,
    pub head: Linear,
}

impl VisionBranch {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let c = cfg.channels;
        Self {
            backbone: Backbone::new(store, c, rng),
            unet: MiniUnet::new(store, c, rng),
            key_gain: store.add("vision.key_norm.gain", Tensor::full([c], 1.0)),
            key_bias: store.add("vision.key_norm.bias", Tensor::zeros([c])),
            head: Linear::new(store, "vision.head", c, cfg.num_classes(), rng),
        }
    }

    /// Keys see the backbone features plus the fixed 2-D position table `p2d`
    /// (`S × C`), so each character query can find its column; glimpses read
    /// the raw features. Each key is layer-normalized over channels, which
    /// keeps the attention logits on the same scale as the normalized queries.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, image: Var, p_se: Var, p2d: Var) -> Result<VisionOutput> {
        let v_r = self.backbone.forward(tape, bound, image)?;
        let shape = tape.shape(v_r).to_vec();
        let grid = tape.reshape(p2d, &shape)?;
        let located = tape.add(v_r, grid)?;
        let u = self.unet.forward(tape, bound, located)?;
        let rows = tape.reshape(u, &[shape[0] * shape[1], shape[2]])?;
        let normed = tape.layer_norm(rows, bound.var(self.key_gain), bound.var(self.key_bias))?;
        let k_r = tape.reshape(normed, &shape)?;
        let SpatialAttention { at_m, f_v } = spatial_attention(tape, p_se, k_r, v_r)?;
        let visual_logits = self.head.forward(tape, bound, f_v)?;
        Ok(VisionOutput {
            v_r,
            k_r,
            at_m,
            f_v,
            visual_logits,
        })
    }
}
