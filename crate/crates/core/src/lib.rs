//! Text-to-mel model with mixture alignment, a VAE generator with a
//! volume-preserving flow prior, and a flow post-net with grouped parameter
//! sharing. Everything is generic over the scalar type; `f32` is used for
//! training and synthesis, `f64` for numerical oracles.

pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod diagnostics;
pub mod error;
pub mod linguistic_encoder;
pub mod model;
pub mod nn;
pub mod postnet;
pub mod synth;
pub mod trainer;
pub mod variational_generator;

pub use config::{ConfigFile, LinguisticEncoderConfig, ModelConfig, PostNetConfig, TrainConfig, VGConfig};
pub use corpus::N_MELS;
pub use error::{Error, Result};
pub use mixtts_tensor as tensor;
pub use model::Model;

pub type Model32 = Model<f32>;
pub type Model64 = Model<f64>;
pub type Trainer32 = trainer::Trainer<f32>;
