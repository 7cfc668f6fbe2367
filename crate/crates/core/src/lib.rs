//! Conditional GAN training lab.
//!
//! A small reverse-mode autodiff engine ([`tensor`]) drives MLP generators and
//! projection critics ([`models`]) trained with hinge, multi-hinge, and
//! cross-entropy auxiliary objectives ([`losses`]), in supervised and
//! semi-supervised settings ([`train`]). [`metrics`] provides Fréchet
//! distances, an inception-like score over an oracle classifier, and the
//! conditioning diagnostics.

pub mod data;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod par;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
