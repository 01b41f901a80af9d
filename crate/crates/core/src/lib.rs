//! Autoregressive multi-scale patch selection for videos.
//!
//! A video is carved into a multi-scale patch vocabulary. A small
//! autoregressive model (the *gazer*) selects, frame by frame, the minimal
//! set of patches that lets a block-causal masked autoencoder (the
//! *reconstructor*) rebuild each frame below a loss threshold. The gazer is
//! pre-trained with next-token prediction on greedily searched selection
//! sequences and post-trained with group-relative RL on reconstruction
//! reward.
//!
//! The crate is generic over the scalar type (`f32`/`f64`) via
//! [`Scalar`]; concrete aliases for the common instantiations live at the
//! crate root.

pub mod analysis;
pub mod checkpoint;
pub mod codec;
pub mod curation;
pub mod error;
pub mod gazer;
pub mod nn;
pub mod parallel;
pub mod recon;
pub mod scalar;
pub mod tape;
pub mod tensor;
pub mod training;
pub mod video;

pub use codec::{GazeSequence, PatchToken, ScaleGrid};
pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::TensorData;
pub use video::{FlowStack, VideoTensor};

/// Default compute scalar for training and inference; f64 instantiations
/// back the finite-difference checks.
pub type Real = f32;

pub type ReconModel32 = recon::ReconModel<f32>;
pub type ReconModel64 = recon::ReconModel<f64>;
pub type Distance32 = recon::Distance<f32>;
pub type Distance64 = recon::Distance<f64>;
pub type Gazer32 = gazer::GazerParams<f32>;
pub type Gazer64 = gazer::GazerParams<f64>;

