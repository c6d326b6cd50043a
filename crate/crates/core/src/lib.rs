//! Multimodal emotion recognition with three transformer branches (image,
//! audio, text) and a learned convex fusion of their pooled representations.
//!
//! Everything runs in `f64` on a small reverse-mode autodiff tape; see
//! [`tape::Tape`].

pub mod branches;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod params;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod transformer;

pub use branches::{AudioSequence, ImageSequence, Modality, TextSequence};
pub use checkpoint::Checkpoint;
pub use config::{ModelConfig, TextMode, N_CLASSES};
pub use data::{Dataset, EmotionLabel, MultimodalSample};
pub use error::{Error, ErrorKind, Result};
pub use metrics::{EpochLog, EvalReport};
pub use model::{AblationMode, Model};
pub use synth::{generate_synthetic, SynthSpec};
pub use tensor::Tensor;
pub use train::{evaluate, train, TrainConfig, Trainer};
