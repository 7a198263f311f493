//! Glyph placement and bilinear rasterization with controllable distortion.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::font::{GlyphFont, GLYPH_H, GLYPH_W};
use crate::error::{CmfnError, CodecError, Result};

/// Pixels per bitmap unit before scale variation.
pub const BASE_SCALE: f64 = 2.2;
/// Horizontal cell pitch in bitmap units.
pub const PITCH_UNITS: f64 = 6.0;
pub const MARGIN: f64 = 4.0;
/// Horizontal period of the curved baseline, in pixels.
pub const CURVE_PERIOD: f64 = 128.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistortionSpec {
    /// Per-glyph rotation drawn from `±rotation_deg`.
    pub rotation_deg: f64,
    /// Amplitude of the sinusoidal baseline, pixels.
    pub curvature_px: f64,
    /// Per-glyph uniform offset in `±jitter_px` on both axes.
    pub jitter_px: f64,
    /// Gaussian pixel noise standard deviation.
    pub noise_std: f64,
    /// Per-sample glyph scale factor drawn from `1 ± scale_range`.
    pub scale_range: f64,
}

impl DistortionSpec {
    pub const NONE: Self = Self {
        rotation_deg: 0.0,
        curvature_px: 0.0,
        jitter_px: 0.0,
        noise_std: 0.0,
        scale_range: 0.0,
    };

    pub fn regular() -> Self {
        Self {
            noise_std: 0.03,
            ..Self::NONE
        }
    }

    pub fn irregular() -> Self {
        Self {
            rotation_deg: 15.0,
            curvature_px: 6.0,
            jitter_px: 1.0,
            noise_std: 0.05,
            scale_range: 0.1,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "regular" => Ok(Self::regular()),
            "irregular" => Ok(Self::irregular()),
            "none" => Ok(Self::NONE),
            other => Err(CmfnError::config(format!(
                "unknown preset {other:?}, expected regular, irregular or none"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("rotation_deg", self.rotation_deg),
            ("curvature_px", self.curvature_px),
            ("jitter_px", self.jitter_px),
            ("noise_std", self.noise_std),
            ("scale_range", self.scale_range),
        ];
        for (name, v) in fields {
            if !(v.is_finite() && v >= 0.0) {
                return Err(CmfnError::config(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        if self.scale_range >= 1.0 {
            return Err(CmfnError::config("scale_range must be below 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GlyphPlacement {
    pub symbol: char,
    /// Centre of the glyph box in image pixels.
    pub cx: f64,
    pub cy: f64,
    pub angle_rad: f64,
    /// Pixels per bitmap unit.
    pub scale: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub phase: f64,
    pub glyphs: Vec<GlyphPlacement>,
}

impl Layout {
    /// Baseline displacement at column `x`.
    pub fn curve(&self, curvature_px: f64, x: f64) -> f64 {
        curvature_px * (2.0 * PI * x / CURVE_PERIOD + self.phase).sin()
    }
}

/// Places glyphs left to right in fixed-pitch cells, then displaces each
/// centre along the curved baseline, jitters and rotates it.
pub fn layout(text: &str, spec: &DistortionSpec, height: usize, width: usize, rng: &mut impl Rng) -> Result<Layout> {
    spec.validate()?;
    let n = text.chars().count();
    if n == 0 {
        return Err(CmfnError::config("cannot render empty text"));
    }
    for c in text.chars() {
        if GlyphFont.bitmap(c).is_none() {
            return Err(CodecError::UnsupportedChar(c).into());
        }
    }
    let phase = rng.random_range(0.0..2.0 * PI);
    let factor = if spec.scale_range > 0.0 {
        rng.random_range(1.0 - spec.scale_range..=1.0 + spec.scale_range)
    } else {
        1.0
    };
    let fit = (width as f64 - 2.0 * MARGIN) / (PITCH_UNITS * n as f64);
    let scale = (BASE_SCALE * factor).min(fit);
    let pitch = PITCH_UNITS * scale;
    let mid = height as f64 / 2.0;
    let mut glyphs = Vec::with_capacity(n);
    for (i, symbol) in text.chars().enumerate() {
        let mut cx = MARGIN + (i as f64 + 0.5) * pitch;
        let mut cy = mid;
        if spec.jitter_px > 0.0 {
            cx += rng.random_range(-spec.jitter_px..=spec.jitter_px);
            cy += rng.random_range(-spec.jitter_px..=spec.jitter_px);
        }
        cy += spec.curvature_px * (2.0 * PI * cx / CURVE_PERIOD + phase).sin();
        let angle_rad = if spec.rotation_deg > 0.0 {
            rng.random_range(-spec.rotation_deg..=spec.rotation_deg).to_radians()
        } else {
            0.0
        };
        glyphs.push(GlyphPlacement {
            symbol,
            cx,
            cy,
            angle_rad,
            scale,
        });
    }
    Ok(Layout { phase, glyphs })
}

/// Bilinear lookup into a bitmap with cell centres at `+0.5`; zero outside.
fn sample_bitmap(bm: &[[bool; GLYPH_W]; GLYPH_H], u: f64, v: f64) -> f64 {
    let (x, y) = (u - 0.5, v - 0.5);
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let at = |r: f64, c: f64| -> f64 {
        if r < 0.0 || c < 0.0 || r >= GLYPH_H as f64 || c >= GLYPH_W as f64 {
            0.0
        } else if bm[r as usize][c as usize] {
            1.0
        } else {
            0.0
        }
    };
    at(y0, x0) * (1.0 - fx) * (1.0 - fy)
        + at(y0, x0 + 1.0) * fx * (1.0 - fy)
        + at(y0 + 1.0, x0) * (1.0 - fx) * fy
        + at(y0 + 1.0, x0 + 1.0) * fx * fy
}

/// Grayscale raster of a layout, values in `[0, 1]`, white ink on black.
pub fn rasterize(layout: &Layout, height: usize, width: usize) -> Vec<f64> {
    let mut out = vec![0.0f64; height * width];
    for g in &layout.glyphs {
        let bm = GlyphFont.bitmap(g.symbol).expect("layout holds drawable symbols");
        let (sin, cos) = g.angle_rad.sin_cos();
        let reach = 0.5 * ((GLYPH_W + 1) as f64).hypot((GLYPH_H + 1) as f64) * g.scale;
        let (r0, r1) = ((g.cy - reach).floor().max(0.0) as usize, ((g.cy + reach).ceil().max(0.0) as usize).min(height));
        let (c0, c1) = ((g.cx - reach).floor().max(0.0) as usize, ((g.cx + reach).ceil().max(0.0) as usize).min(width));
        for r in r0..r1 {
            for c in c0..c1 {
                let (dx, dy) = (c as f64 + 0.5 - g.cx, r as f64 + 0.5 - g.cy);
                // Inverse rotation into the glyph frame.
                let (lx, ly) = (cos * dx + sin * dy, -sin * dx + cos * dy);
                let u = lx / g.scale + GLYPH_W as f64 / 2.0;
                let v = ly / g.scale + GLYPH_H as f64 / 2.0;
                let ink = sample_bitmap(&bm, u, v);
                let px = &mut out[r * width + c];
                *px = f64::max(*px, ink);
            }
        }
    }
    out
}

/// Renders `text` as an `H × W` grayscale image replicated into RGB bytes.
/// The result is a pure function of `(text, spec, seed, size)`.
pub fn render_text(text: &str, spec: &DistortionSpec, seed: u64, height: usize, width: usize) -> Result<Vec<u8>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lay = layout(text, spec, height, width, &mut rng)?;
    let mut gray = rasterize(&lay, height, width);
    if spec.noise_std > 0.0 {
        let noise = Normal::new(0.0, spec.noise_std).expect("validated noise level");
        for px in &mut gray {
            *px = (*px + noise.sample(&mut rng)).clamp(0.0, 1.0);
        }
    }
    Ok(gray.iter().flat_map(|&g| [quantize(g); 3]).collect())
}

pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Bilinear resize of an interleaved `h × w × channels` byte image.
pub fn resize_bilinear(src: &[u8], h: usize, w: usize, channels: usize, out_h: usize, out_w: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(out_h * out_w * channels);
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    for r in 0..out_h {
        let y = ((r as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let (y0, fy) = (y.floor() as usize, y - y.floor());
        let y1 = (y0 + 1).min(h - 1);
        for c in 0..out_w {
            let x = ((c as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let (x0, fx) = (x.floor() as usize, x - x.floor());
            let x1 = (x0 + 1).min(w - 1);
            for ch in 0..channels {
                let p = |yy: usize, xx: usize| src[(yy * w + xx) * channels + ch] as f64;
                let v = p(y0, x0) * (1.0 - fx) * (1.0 - fy)
                    + p(y0, x1) * fx * (1.0 - fy)
                    + p(y1, x0) * (1.0 - fx) * fy
                    + p(y1, x1) * fx * fy;
                out.push(v.round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    out
}
