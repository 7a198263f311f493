//! Procedural glyph corpus: fonts, distorted rendering and the dataset file.

pub mod dataset;
pub mod font;
pub mod render;

pub use dataset::{
    generate_dataset, generate_samples, load_dataset, open_dataset, write_dataset, DatasetReader, GenerateSpec, Sample,
};
pub use font::GlyphFont;
pub use render::{layout, rasterize, render_text, DistortionSpec, Layout};
