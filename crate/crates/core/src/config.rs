//! Model and training configuration with a canonical `key=value` text form.

use std::fmt;
use std::str::FromStr;

use crate::codec::NUM_CLASSES;
use crate::error::{CmfnError, Result};

/// Source of the sequence position embedding consumed by both branches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PositionMode {
    /// SE blocks plus cross-attention over the fixed table.
    SelfEnhanced,
    /// The fixed sinusoidal table used directly.
    Fixed,
    /// A trainable table initialized from the sinusoidal one.
    Learnable,
}

/// What re-enters the language module after the first iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Feedback {
    Fused,
    Language,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossPositions {
    /// Text positions plus the first end token.
    Masked,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LrSchedule {
    Constant,
    /// ×0.1 per epoch once `decay_after` epochs have completed.
    StepDecay,
}

macro_rules! keyword_enum {
    ($ty:ty { $($variant:path => $word:literal),+ $(,)? }) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($variant => $word),+ })
            }
        }
        impl FromStr for $ty {
            type Err = CmfnError;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($word => Ok($variant),)+
                    other => Err(CmfnError::config(format!(
                        "unknown value {other:?}, expected one of: {}",
                        [$($word),+].join(", ")
                    ))),
                }
            }
        }
    };
}

keyword_enum!(PositionMode {
    PositionMode::SelfEnhanced => "pse",
    PositionMode::Fixed => "fixed",
    PositionMode::Learnable => "learnable",
});
keyword_enum!(Feedback { Feedback::Fused => "fused", Feedback::Language => "language" });
keyword_enum!(LossPositions { LossPositions::Masked => "masked", LossPositions::All => "all" });
keyword_enum!(LrSchedule { LrSchedule::Constant => "constant", LrSchedule::StepDecay => "step" });

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Maximum sequence length T, end token included.
    pub max_len: usize,
    /// Feature width C; the position embedding width C_p equals it.
    pub channels: usize,
    pub heads: usize,
    pub pse_heads: usize,
    pub language_layers: usize,
    pub visual_attention_layers: usize,
    pub ffn_dim: usize,
    pub se_reduction: usize,
    /// Refinement iterations N.
    pub iterations: usize,
    pub gamma_v: f64,
    pub gamma_l: f64,
    pub gamma_f: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub grad_clip: f64,
    pub lr_schedule: LrSchedule,
    pub decay_after: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub image_height: usize,
    pub image_width: usize,
    pub position_mode: PositionMode,
    pub visual_cues: bool,
    pub feedback: Feedback,
    pub detach_language_input: bool,
    pub share_fusion_head: bool,
    pub loss_positions: LossPositions,
    pub holdout_fraction: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            max_len: 26,
            channels: 64,
            heads: 8,
            pse_heads: 8,
            language_layers: 4,
            visual_attention_layers: 1,
            ffn_dim: 128,
            se_reduction: 4,
            iterations: 3,
            gamma_v: 1.0,
            gamma_l: 1.0,
            gamma_f: 1.0,
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: 20.0,
            lr_schedule: LrSchedule::Constant,
            decay_after: 5,
            batch_size: 16,
            epochs: 10,
            seed: 0,
            image_height: 32,
            image_width: 128,
            position_mode: PositionMode::SelfEnhanced,
            visual_cues: true,
            feedback: Feedback::Fused,
            detach_language_input: true,
            share_fusion_head: false,
            loss_positions: LossPositions::Masked,
            holdout_fraction: 0.1,
        }
    }
}

impl ModelConfig {
    /// Small configuration used by gradient checks and quick tests.
    pub fn tiny() -> Self {
        Self {
            max_len: 6,
            channels: 16,
            heads: 8,
            pse_heads: 8,
            ffn_dim: 32,
            iterations: 2,
            image_height: 8,
            image_width: 16,
            ..Self::default()
        }
    }

    pub fn num_classes(&self) -> usize {
        NUM_CLASSES
    }

    pub fn feature_height(&self) -> usize {
        self.image_height / 4
    }

    pub fn feature_width(&self) -> usize {
        self.image_width / 4
    }

    pub fn spatial_cells(&self) -> usize {
        self.feature_height() * self.feature_width()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(CmfnError::Config(msg));
        if self.max_len < 2 {
            return fail(format!("max_len must be at least 2, got {}", self.max_len));
        }
        if self.channels < 4 || !self.channels.is_multiple_of(4) {
            return fail(format!("channels must be a positive multiple of 4, got {}", self.channels));
        }
        for (name, heads) in [("heads", self.heads), ("pse_heads", self.pse_heads)] {
            if heads == 0 || !self.channels.is_multiple_of(heads) {
                return fail(format!("{name}={heads} must divide channels={}", self.channels));
            }
        }
        if self.se_reduction == 0 || !self.channels.is_multiple_of(self.se_reduction) {
            return fail(format!(
                "se_reduction={} must divide channels={}",
                self.se_reduction, self.channels
            ));
        }
        if self.language_layers == 0 {
            return fail("language_layers must be at least 1".into());
        }
        if self.visual_attention_layers != 1 {
            return fail(format!(
                "the visual branch uses exactly one attention layer, got {}",
                self.visual_attention_layers
            ));
        }
        if self.ffn_dim == 0 {
            return fail("ffn_dim must be positive".into());
        }
        if self.iterations == 0 {
            return fail("iterations must be at least 1".into());
        }
        for (name, g) in [("gamma_v", self.gamma_v), ("gamma_l", self.gamma_l), ("gamma_f", self.gamma_f)] {
            if !(g.is_finite() && g >= 0.0) {
                return fail(format!("{name} must be a finite value >= 0, got {g}"));
            }
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return fail(format!("lr must be positive, got {}", self.lr));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return fail(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if !(self.adam_eps > 0.0 && self.grad_clip > 0.0) {
            return fail("adam_eps and grad_clip must be positive".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        if self.image_height == 0
            || self.image_width == 0
            || !self.image_height.is_multiple_of(4)
            || !self.image_width.is_multiple_of(4)
        {
            return fail(format!(
                "image extents must be positive multiples of 4, got {}x{}",
                self.image_height, self.image_width
            ));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return fail(format!("holdout_fraction must lie in [0, 1), got {}", self.holdout_fraction));
        }
        Ok(())
    }

    /// Field names in canonical order.
    pub const KEYS: &'static [&'static str] = &[
        "max_len",
        "channels",
        "heads",
        "pse_heads",
        "language_layers",
        "visual_attention_layers",
        "ffn_dim",
        "se_reduction",
        "iterations",
        "gamma_v",
        "gamma_l",
        "gamma_f",
        "lr",
        "beta1",
        "beta2",
        "adam_eps",
        "grad_clip",
        "lr_schedule",
        "decay_after",
        "batch_size",
        "epochs",
        "seed",
        "image_height",
        "image_width",
        "position_mode",
        "visual_cues",
        "feedback",
        "detach_language_input",
        "share_fusion_head",
        "loss_positions",
        "holdout_fraction",
    ];

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "max_len" => self.max_len.to_string(),
            "channels" => self.channels.to_string(),
            "heads" => self.heads.to_string(),
            "pse_heads" => self.pse_heads.to_string(),
            "language_layers" => self.language_layers.to_string(),
            "visual_attention_layers" => self.visual_attention_layers.to_string(),
            "ffn_dim" => self.ffn_dim.to_string(),
            "se_reduction" => self.se_reduction.to_string(),
            "iterations" => self.iterations.to_string(),
            "gamma_v" => float(self.gamma_v),
            "gamma_l" => float(self.gamma_l),
            "gamma_f" => float(self.gamma_f),
            "lr" => float(self.lr),
            "beta1" => float(self.beta1),
            "beta2" => float(self.beta2),
            "adam_eps" => float(self.adam_eps),
            "grad_clip" => float(self.grad_clip),
            "lr_schedule" => self.lr_schedule.to_string(),
            "decay_after" => self.decay_after.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "epochs" => self.epochs.to_string(),
            "seed" => self.seed.to_string(),
            "image_height" => self.image_height.to_string(),
            "image_width" => self.image_width.to_string(),
            "position_mode" => self.position_mode.to_string(),
            "visual_cues" => self.visual_cues.to_string(),
            "feedback" => self.feedback.to_string(),
            "detach_language_input" => self.detach_language_input.to_string(),
            "share_fusion_head" => self.share_fusion_head.to_string(),
            "loss_positions" => self.loss_positions.to_string(),
            "holdout_fraction" => float(self.holdout_fraction),
            _ => return None,
        })
    }

    /// Sets one field from its text form. Does not validate cross-field
    /// invariants; call [`validate`](Self::validate) afterwards.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "max_len" => self.max_len = parse(key, value)?,
            "channels" => self.channels = parse(key, value)?,
            "heads" => self.heads = parse(key, value)?,
            "pse_heads" => self.pse_heads = parse(key, value)?,
            "language_layers" => self.language_layers = parse(key, value)?,
            "visual_attention_layers" => self.visual_attention_layers = parse(key, value)?,
            "ffn_dim" => self.ffn_dim = parse(key, value)?,
            "se_reduction" => self.se_reduction = parse(key, value)?,
            "iterations" => self.iterations = parse(key, value)?,
            "gamma_v" => self.gamma_v = parse(key, value)?,
            "gamma_l" => self.gamma_l = parse(key, value)?,
            "gamma_f" => self.gamma_f = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "beta1" => self.beta1 = parse(key, value)?,
            "beta2" => self.beta2 = parse(key, value)?,
            "adam_eps" => self.adam_eps = parse(key, value)?,
            "grad_clip" => self.grad_clip = parse(key, value)?,
            "lr_schedule" => self.lr_schedule = value.parse()?,
            "decay_after" => self.decay_after = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "image_height" => self.image_height = parse(key, value)?,
            "image_width" => self.image_width = parse(key, value)?,
            "position_mode" => self.position_mode = value.parse()?,
            "visual_cues" => self.visual_cues = parse(key, value)?,
            "feedback" => self.feedback = value.parse()?,
            "detach_language_input" => self.detach_language_input = parse(key, value)?,
            "share_fusion_head" => self.share_fusion_head = parse(key, value)?,
            "loss_positions" => self.loss_positions = value.parse()?,
            "holdout_fraction" => self.holdout_fraction = parse(key, value)?,
            other => return Err(CmfnError::config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Canonical text: one `key=value` line per field in [`KEYS`](Self::KEYS) order.
    pub fn to_text(&self) -> String {
        Self::KEYS
            .iter()
            .map(|k| format!("{k}={}\n", self.get(k).expect("every key has a value")))
            .collect()
    }

    /// Parses `key=value` lines over the defaults. Blank lines and `#`
    /// comments are skipped. The result is validated.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                CmfnError::config(format!("line {}: expected key=value, got {line:?}", lineno + 1))
            })?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }
}

fn float(v: f64) -> String {
    // `{:?}` round-trips f64 exactly.
    format!("{v:?}")
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| CmfnError::config(format!("invalid value {value:?} for {key}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_reported_setup() {
        let c = ModelConfig::default();
        assert_eq!(c.max_len, 26);
        assert_eq!(c.num_classes(), 37);
        assert_eq!((c.language_layers, c.heads), (4, 8));
        assert_eq!(c.visual_attention_layers, 1);
        assert_eq!(c.iterations, 3);
        assert_eq!((c.gamma_v, c.gamma_l, c.gamma_f), (1.0, 1.0, 1.0));
        assert_eq!(c.lr, 1e-4);
        assert_eq!((c.beta1, c.beta2, c.adam_eps), (0.9, 0.999, 1e-8));
        c.validate().unwrap();
        ModelConfig::tiny().validate().unwrap();
    }

    #[test]
    fn text_round_trip() {
        let mut c = ModelConfig::tiny();
        c.lr = 3.3e-4;
        c.position_mode = PositionMode::Learnable;
        c.visual_cues = false;
        let back = ModelConfig::from_text(&c.to_text()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn rejects_bad_values() {
        let mut c = ModelConfig::default();
        c.gamma_l = -0.5;
        assert!(matches!(c.validate(), Err(CmfnError::Config(_))));
        let mut c = ModelConfig::default();
        c.visual_attention_layers = 2;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::default();
        c.heads = 6;
        assert!(c.validate().is_err());
        assert!(ModelConfig::from_text("nope=1").is_err());
        assert!(ModelConfig::from_text("iterations=0").is_err());
        assert!(ModelConfig::from_text("feedback=sideways").is_err());
    }
}
