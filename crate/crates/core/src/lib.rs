//! Simulation and analysis toolkit for photon-subtracted squeezed vacuum
//! ("kitten") states: truncated Fock-basis state preparation, lossy and
//! phase-noisy channels, homodyne sampling, temporal-mode extraction,
//! maximum-likelihood tomography with loss correction, and joint fitting of
//! phase-noise-dephased squeezing spectra.
//!
//! Conventions throughout: ħ = 1, vacuum quadrature variance 1/2, quadrature
//! `q_θ = x cos θ + p sin θ`, Wigner functions bounded by `1/π`.

pub mod error;
pub mod fock;
pub mod io;
pub mod par;
pub mod pipeline;
pub mod quadrature;
pub mod spectrum;
pub mod temporal;
pub mod tomography;

pub use error::{Error, Result};
pub use fock::{DensityMatrix, GaussianStateSpec, Parity, C64};
