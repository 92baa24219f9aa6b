//! Physical constants (CODATA 2018 exact/recommended values) and fixed
//! model defaults shared across modules.

use std::f64::consts::PI;

/// Reduced Planck constant ħ in J·s.
pub const HBAR: f64 = 1.054_571_817e-34;
/// Boltzmann constant k_B in J/K.
pub const K_B: f64 = 1.380_649e-23;
/// Vacuum permeability μ₀ in T·m/A.
pub const MU_0: f64 = 1.256_637_062_12e-6;
/// Speed of light in vacuum in m/s.
pub const C_LIGHT: f64 = 299_792_458.0;
/// Bohr magneton μ_B in J/T.
pub const MU_B: f64 = 9.274_010_078_3e-24;
/// Free-electron gyromagnetic ratio in rad·s⁻¹·T⁻¹.
pub const GAMMA_E: f64 = 1.760_859_630_23e11;
/// NV-centre electron g-factor.
pub const G_NV: f64 = 2.003;
/// NV axis polar angle relative to the surface normal (54.7°, the ⟨111⟩ axes
/// of a (001) diamond surface).
pub const NV_POLAR_ANGLE: f64 = 54.7 * PI / 180.0;
/// NV ground-state zero-field splitting ω₀ = 2π·2.87 GHz in rad/s.
pub const NV_ZFS: f64 = 2.0 * PI * 2.87e9;
/// Tesla per gauss.
pub const TESLA_PER_GAUSS: f64 = 1e-4;

/// Thermal occupation factor coth(ħω / 2k_BT).
pub fn coth_thermal(omega: f64, temperature: f64) -> f64 {
    let x = HBAR * omega / (2.0 * K_B * temperature);
    if x < 1e-6 {
        // Series keeps full precision where tanh(x) ≈ x.
        1.0 / x + x / 3.0
    } else {
        1.0 / x.tanh()
    }
}

/// Magnitude of the NV spin magnetic moment |m| = g·μ_B in J/T.
pub fn nv_moment() -> f64 {
    G_NV * MU_B
}
