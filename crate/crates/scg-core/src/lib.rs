//! Semi-supervised cycle-GAN photo/sketch translation at desk scale.
//!
//! The crate is organized around a small reverse-mode tensor engine
//! ([`tensor`]), a frozen convolutional feature extractor ([`extractor`]),
//! a feature-space patch-matching engine that assembles pseudo sketch
//! supervision from a reference set ([`psf`]), the training losses
//! ([`losses`]), generator/discriminator definitions ([`networks`]), the
//! alternating trainer ([`trainer`]), and a synthetic laboratory that
//! measures cycle-training steganography and its disruption by noise
//! injection ([`stego`]).

pub mod error;
pub mod extractor;
pub mod tensor;

pub use error::{Result, ScgError};
pub use tensor::{Graph, Tensor, Var};
