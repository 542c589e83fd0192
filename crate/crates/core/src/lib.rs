//! Video question answering learned from narrated videos.
//!
//! The crate covers the whole pipeline: turning timestamped narration into
//! (clip, question, answer) triplets, encoding them into fixed-shape model
//! inputs, a joint video-question / answer embedding transformer, the
//! contrastive and auxiliary training objectives, the training loops and the
//! evaluation harness.
//!
//! Numeric code is generic over [`Scalar`]; the aliases below fix the two
//! precisions used in practice.

pub mod autodiff;
pub mod corpus;
pub mod encode;
pub mod error;
pub mod evaluate;
pub mod model;
pub mod objectives;
pub mod qagen;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Matrix;

pub type Matrix32 = Matrix<f32>;
pub type Matrix64 = Matrix<f64>;
pub type VqaT32 = model::VqaT<f32>;
pub type VqaT64 = model::VqaT<f64>;
