//! CFFT-GAN: exemplar-based image translation built around a cross-domain
//! feature fusion transformer, trained adversarially on procedurally
//! generated paired data. Self-contained: tensors, autodiff, layers,
//! losses, data synthesis, optimization and metrics all live here.

pub mod cfft;
pub mod data;
pub mod losses;
pub mod nnblocks;
pub mod numcore;
pub mod trainkit;
pub mod translation;

pub use numcore::{Rng, Tensor};
