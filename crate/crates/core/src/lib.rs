//! Inductive-bias transformer for point clouds: local feature extraction
//! (relative position encoding and attentive pooling) feeding a channel gate
//! inside an offset-attention transformer, with the classification and part
//! segmentation networks built on top of it.

pub mod error;
pub mod data;
pub mod geometry;
pub mod gradcheck;
pub mod layers;
pub mod model;
pub mod numerics;
pub mod trainer;

pub use error::{IbtError, Result};
