//! Speech anonymization by content/speaker disentanglement.
//!
//! Stage 1 learns per-utterance content latents, per-speaker latents and a
//! fusion decoder by latent optimization. Stage 2 distils those latents into a
//! content encoder and a speaker encoder. Inference swaps the speaker
//! embedding of one utterance into the content of another.

pub mod autodiff;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod features;
pub mod inference;
pub mod losses;
pub mod model;
pub mod pipeline;
pub mod tensor;
pub mod training;

pub use error::{Result, SaicError};
pub use features::{FeatureConfig, MelSpectrogram, MelStats, Waveform};
pub use model::{ContentEncoder, FusionDecoder, ModelConfig, Parameters, SpeakerEncoder};
pub use tensor::Tensor;
