//! Unsupervised object discovery by cycle-consistent adversarial
//! translation between images and unordered object lists.
//!
//! An image generator renders lists of `(x, y, α, η)` rows into images via
//! Gaussian blob splatting and a U-Net; a list generator recovers such lists
//! from images through patch scoring, non-maximum suppression and a
//! differentiable top-k. Both are trained against a PatchGAN image critic and
//! a permutation-invariant attention list critic, tied together by image and
//! list cycle losses.

pub mod adversaries;
pub mod assignment;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod evaluation;
pub mod generators;
pub mod image;
pub mod io;
pub mod list;
pub mod nn;
pub mod scenes;
pub mod seed;
pub mod selection;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
