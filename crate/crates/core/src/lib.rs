//! Unsupervised histology segmentation by contrastive representation learning.
//!
//! The crate is `no_std` (with `alloc`) and holds every numeric piece of the
//! pipeline: a dense [`Tensor`], a tape-based reverse-mode autodiff
//! ([`autograd::Tape`]), the two-view augmentation family ([`augment`]), the
//! DU-Net encoder with its projection head ([`encoder`]), the NT-Xent loss
//! ([`contrastive`]), the convolutional CRF ([`convcrf`]), whole-slide
//! orchestration ([`pipeline`]) and a synthetic slide generator ([`datagen`]).
//!
//! File formats, PNG, configuration and the command-line driver live in the
//! companion `dclr` crate.

#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;

#[cfg(test)]
extern crate std;

mod error;

pub mod augment;
pub mod autograd;
pub mod contrastive;
pub mod convcrf;
pub mod datagen;
pub mod encoder;
pub mod exec;
pub mod mask;
pub mod ops;
pub mod pipeline;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use mask::Mask;
pub use tensor::Tensor;
