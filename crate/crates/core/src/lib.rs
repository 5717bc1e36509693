//! Depth localisation from light-field epipolar-plane images: convolution
//! primitives, a synthetic light-field model, convolutional sparse coding,
//! and an unrolled ISTA network trained to read depth directly.

pub mod bench;
pub mod conv;
pub mod csc;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod format;
pub mod lightfield;
pub mod net;
pub mod selftest;
pub mod synth;

pub use conv::{ChannelStack, Matrix2};
pub use error::{Error, Result};
