//! Keypoint-driven generative video coding with 2D body-vertex prediction.
//!
//! The encoder sends one key-reference frame plus entropy-coded 3D keypoint
//! residuals per inter frame. The decoder turns the keypoints into a dense
//! motion field over a texture feature of the key-reference, then
//! synthesizes each frame and regresses its body vertices from the warped
//! feature.

pub mod codec;
pub mod config;
pub mod container;
pub mod error;
pub mod exec;
pub mod frame_io;
pub mod grid;
pub mod keypoints;
pub mod loss;
pub mod motion;
pub mod nn;
pub mod ops;
pub mod pipeline;
pub mod synthesis;
pub mod tensor;
pub mod weights;

pub use config::ModelConfig;
pub use error::{Error, Result};
pub use exec::Exec;
pub use tensor::{Tensor, TensorError};
