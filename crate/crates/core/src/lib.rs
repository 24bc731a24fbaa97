//! Benchmark toolkit for studying how the choice of segmentation loss
//! affects robustness to gradient-guided pixel replacement.
//!
//! The crate is self-contained: a small reverse-mode autodiff tape
//! ([`tensor`]), a U-Net built on it ([`nn`]), the loss families under
//! comparison ([`loss`]), synthetic data generation and container I/O
//! ([`data`]), saliency-driven attacks ([`attack`]), sweep orchestration
//! ([`experiment`]), and plain-text image/plot writers ([`render`]).

pub mod attack;
pub mod data;
mod error;
pub mod experiment;
pub mod loss;
pub mod nn;
pub mod render;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
