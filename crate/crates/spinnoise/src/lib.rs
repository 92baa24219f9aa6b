//! Near-field magnetic spin-noise spectra of patterned ferromagnetic films
//! and their imprint on spin-qubit dephasing.
//!
//! The crate is organised bottom-up:
//!
//! * [`magnetics`] — Landau–Lifshitz–Gilbert susceptibility tensors.
//! * [`geometry`] — unit cells, reciprocal lattices and shape factors.
//! * [`greens`] — free-space propagators, thin-film reflection and cavity models.
//! * [`vie`] — the reciprocal-space volume integral equation and its
//!   matrix-free Krylov solver.
//! * [`spectrum`] — momentum-space quadrature of the dephasing noise spectrum.
//! * [`dephasing`] — filter functions, dephasing, T₂ and spectral reconstruction.
//! * [`fit`] — Lorentzian and two-bath least-squares fits.
//! * [`config`] — unit-suffixed TOML run configuration.
//! * [`io`] — outputs, kernel cache and manifests.
//! * [`validation`] — oracle comparisons run by the `validate` command.

pub mod config;
pub mod constants;
pub mod dephasing;
pub mod error;
pub mod fit;
pub mod geometry;
pub mod greens;
pub mod io;
pub mod krylov;
pub mod magnetics;
pub mod quadrature;
pub mod spectrum;
pub mod validation;
pub mod vie;

pub use error::{Error, Result};

/// Complex double.
pub type C64 = num_complex::Complex64;
/// 3×3 complex tensor.
pub type Mat3 = nalgebra::Matrix3<C64>;
