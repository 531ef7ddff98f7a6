//! Sharpness- and shift-aware contrastive learning.
//!
//! InfoNCE training with a sharpness-aware two-step optimizer and a Fourier
//! amplitude-mixing positive augmentation, plus a shift-gap estimator, linear
//! and adversarial evaluation, and an exact lab for the loss inequalities on
//! small enumerable worlds.

pub mod bound_lab;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod fourier;
pub mod image;
pub mod losses;
pub mod objective;
pub mod sam;
pub mod seed;
pub mod shift_gap;
pub mod train;

pub use error::{Error, Result};
pub use image::Image;
