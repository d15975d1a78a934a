//! Adversarial robustness toolkit for hyperspectral patch classification.
//!
//! The crate bundles a small reverse-mode autodiff engine ([`tensor`]), HSI
//! cube handling and synthetic scenes ([`data`]), a compact residual CNN
//! ([`model`]), L∞ attacks ([`attack`]), hyperspectral RandAugment
//! ([`augment`]), the adversarial training loops ([`train`]), per-class and
//! spectral diagnostics ([`analysis`]) and the config-driven runner behind the
//! command-line tool ([`runner`]).

pub mod analysis;
pub mod attack;
pub mod augment;
pub mod config;
pub mod data;
pub mod error;
pub mod model;
pub mod rng;
pub mod runner;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Float, Precision, Tensor};
