//! Cross-modal fusion network for irregular scene text recognition.

mod binio;
pub mod checkpoint;
pub mod codec;
pub mod config;
pub mod datagen;
pub mod error;
pub mod export;
pub mod gradcheck;
pub mod invariants;
pub mod language;
pub mod loss;
pub mod model;
pub mod par;
pub mod params;
pub mod position;
pub mod train;
pub mod vision;

pub use checkpoint::Checkpoint;
pub use codec::{decode_greedy, encode_label, Charset, LabelSeq};
pub use config::ModelConfig;
pub use datagen::{DistortionSpec, GenerateSpec, Sample};
pub use error::{CmfnError, FormatError, Result};
pub use language::RefineOptions;
pub use model::{Cmfn, ForwardPass, Prediction};
pub use train::{evaluate, train, Accuracy, EpochMetrics, Trainer};
