//! Masked image modeling with a proxy-token bottleneck.
//!
//! Image tokens and mask tokens never attend to each other directly: image
//! content is first compressed into a handful of position-free proxy tokens,
//! and mask tokens reconstruct their targets by reading only those proxies
//! (plus each other). The reconstruction path is a pre-training plugin and
//! can be discarded afterwards.

pub mod analysis;
pub mod data;
pub mod encoder;
pub mod error;
pub mod model;
pub mod nn;
pub mod patchify;
pub mod pnm;
pub mod pretrain;
pub mod probe;
pub mod rng;
pub mod targets;
pub mod tensor;

pub use encoder::{AttentionRecord, EncoderConfig, ForwardOptions, Mode, TokenStates};
pub use error::{Error, Result};
pub use model::{Model, ModelConfig, TargetConfig};
pub use patchify::{Image, MaskingPlan, PatchGrid};
pub use tensor::{DType, Mat, Real};
