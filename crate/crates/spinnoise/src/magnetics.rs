//! Landau–Lifshitz–Gilbert susceptibility of a thin in-plane magnetized film.
//!
//! The material frame has the in-plane easy axis along x and the film normal
//! along z. In that frame the linear response is confined to the y/z block;
//! every x entry is zero. Susceptibilities are dimensionless SI (M = χH).

use crate::constants::GAMMA_E;
use crate::error::{Error, Result};
use crate::{Mat3, C64};
use serde::{Deserialize, Serialize};

/// LLG material parameters. Field-like quantities are stored as μ₀·H in tesla.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LlgParams {
    /// μ₀·M_s in tesla.
    pub saturation_magnetization: f64,
    /// μ₀·M_eff in tesla.
    pub effective_magnetization: f64,
    /// Dimensionless Gilbert damping.
    pub gilbert_damping: f64,
    /// μ₀·H_k (in-plane uniaxial anisotropy field) in tesla.
    pub inplane_anisotropy_field: f64,
    /// Easy-axis angle in radians, measured from the laboratory y-axis.
    pub easy_axis_angle: f64,
    /// Gyromagnetic ratio in rad·s⁻¹·T⁻¹.
    pub gyromagnetic_ratio: f64,
}

impl LlgParams {
    /// CoFeB parameters: μ₀M_s = μ₀M_eff = 12 500 G, α = 0.019, H_k = 5 G,
    /// easy axis π/12 from the laboratory y-axis.
    pub fn cofeb() -> Self {
        Self {
            saturation_magnetization: 1.25,
            effective_magnetization: 1.25,
            gilbert_damping: 0.019,
            inplane_anisotropy_field: 5e-4,
            easy_axis_angle: std::f64::consts::PI / 12.0,
            gyromagnetic_ratio: GAMMA_E,
        }
    }

    /// Upper resonance ω₁ = γ·μ₀(H_k + M_eff).
    pub fn omega_1(&self) -> f64 {
        self.gyromagnetic_ratio * (self.inplane_anisotropy_field + self.effective_magnetization)
    }

    /// Lower resonance ω₂ = γ·μ₀H_k.
    pub fn omega_2(&self) -> f64 {
        self.gyromagnetic_ratio * self.inplane_anisotropy_field
    }

    /// Magnetization frequency ω_m = γ·μ₀M_s.
    pub fn omega_m(&self) -> f64 {
        self.gyromagnetic_ratio * self.saturation_magnetization
    }

    /// Rotation angle (counter-clockwise from the laboratory x-axis) that
    /// carries the material easy axis onto its laboratory direction.
    pub fn lab_rotation_angle(&self) -> f64 {
        std::f64::consts::FRAC_PI_2 + self.easy_axis_angle
    }

    /// Checks the documented parameter invariants, collecting every violation.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !(self.saturation_magnetization >= 0.0) {
            v.push(format!(
                "saturation magnetization must be ≥ 0 T, got {}",
                self.saturation_magnetization
            ));
        }
        if !(self.effective_magnetization >= 0.0) {
            v.push(format!(
                "effective magnetization must be ≥ 0 T, got {}",
                self.effective_magnetization
            ));
        }
        if !(self.gilbert_damping > 0.0) {
            v.push(format!("Gilbert damping must be > 0, got {}", self.gilbert_damping));
        }
        if !(self.inplane_anisotropy_field > 0.0) {
            v.push(format!(
                "in-plane anisotropy field must be > 0 T (ω₂ > 0), got {}",
                self.inplane_anisotropy_field
            ));
        }
        if !(self.gyromagnetic_ratio > 0.0) {
            v.push(format!("gyromagnetic ratio must be > 0, got {}", self.gyromagnetic_ratio));
        }
        if !self.easy_axis_angle.is_finite() {
            v.push("easy-axis angle must be finite".into());
        }
        v
    }

    /// Returns an error listing all invariant violations, if any.
    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidInput(v.join("; ")))
        }
    }
}

/// Coordinate frame a susceptibility tensor is expressed in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Frame {
    /// Easy axis along x.
    Material,
    /// Laboratory axes of the metasurface.
    Laboratory,
}

/// A 3×3 complex susceptibility at one angular frequency.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SusceptibilityTensor {
    /// Dimensionless tensor components.
    pub value: Mat3,
    /// Angular frequency in rad/s.
    pub omega: f64,
    /// Frame of `value`.
    pub frame: Frame,
}

impl SusceptibilityTensor {
    /// The dissipative part (χ − χ†)/2i, Hermitian.
    pub fn dissipative(&self) -> Mat3 {
        anti_hermitian_part(&self.value)
    }
}

/// (A − A†)/2i for a 3×3 complex matrix.
pub fn anti_hermitian_part(a: &Mat3) -> Mat3 {
    (a - a.adjoint()) * C64::new(0.0, -0.5)
}

/// Material-frame LLG susceptibility at angular frequency ω.
pub fn llg_susceptibility(params: &LlgParams, omega: f64) -> Result<SusceptibilityTensor> {
    if !(omega > 0.0) || !omega.is_finite() {
        return Err(Error::InvalidInput(format!("ω must be positive and finite, got {omega}")));
    }
    if !(params.gilbert_damping > 0.0) {
        return Err(Error::InvalidInput("Gilbert damping must be > 0".into()));
    }
    let w1 = C64::new(params.omega_1(), -params.gilbert_damping * omega);
    let w2 = C64::new(params.omega_2(), -params.gilbert_damping * omega);
    let wm = params.omega_m();
    let den = C64::new(omega * omega, 0.0) - w1 * w2;
    let yy = -wm * w1 / den;
    let zz = -wm * w2 / den;
    let yz = C64::new(0.0, wm * omega) / den;
    let z = C64::new(0.0, 0.0);
    let value = Mat3::new(z, z, z, z, yy, yz, z, -yz, zz);
    if value.iter().any(|c| !c.re.is_finite() || !c.im.is_finite()) {
        return Err(Error::NumericalBreakdown(format!("non-finite susceptibility at ω = {omega}")));
    }
    Ok(SusceptibilityTensor { value, omega, frame: Frame::Material })
}

/// In-plane rotation by `angle` (counter-clockwise about z).
pub fn rotation_z(angle: f64) -> Mat3 {
    let (s, c) = angle.sin_cos();
    let r = |x: f64| C64::new(x, 0.0);
    Mat3::new(r(c), r(-s), r(0.0), r(s), r(c), r(0.0), r(0.0), r(0.0), r(1.0))
}

/// Laboratory-frame tensor R·χ·Rᵀ with R the in-plane rotation by `angle`.
pub fn rotate_to_lab(chi: &SusceptibilityTensor, angle: f64) -> Result<SusceptibilityTensor> {
    if chi.frame != Frame::Material {
        return Err(Error::InvalidInput("rotate_to_lab expects a material-frame tensor".into()));
    }
    let r = rotation_z(angle);
    Ok(SusceptibilityTensor {
        value: r * chi.value * r.transpose(),
        omega: chi.omega,
        frame: Frame::Laboratory,
    })
}

/// In-plane isotropic response diag(χ_yy, χ_yy, χ_zz) built from a
/// material-frame tensor.
pub fn isotropic_inplane(chi: &SusceptibilityTensor) -> Result<SusceptibilityTensor> {
    if chi.frame != Frame::Material {
        return Err(Error::InvalidInput("isotropic_inplane expects a material-frame tensor".into()));
    }
    let yy = chi.value[(1, 1)];
    let zz = chi.value[(2, 2)];
    let z = C64::new(0.0, 0.0);
    Ok(SusceptibilityTensor {
        value: Mat3::new(yy, z, z, z, yy, z, z, z, zz),
        omega: chi.omega,
        frame: Frame::Material,
    })
}

/// Laboratory-frame susceptibility used by the noise solvers.
pub fn lab_susceptibility(params: &LlgParams, omega: f64) -> Result<SusceptibilityTensor> {
    rotate_to_lab(&llg_susceptibility(params, omega)?, params.lab_rotation_angle())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn zero_magnetization_gives_zero_tensor() {
        let mut p = LlgParams::cofeb();
        p.saturation_magnetization = 0.0;
        let chi = llg_susceptibility(&p, 2.0 * PI * 1e6).unwrap();
        assert!(chi.value.iter().all(|c| c.norm() == 0.0));
    }

    #[test]
    fn antisymmetric_off_diagonal() {
        let chi = llg_susceptibility(&LlgParams::cofeb(), 2.0 * PI * 3e6).unwrap();
        assert_eq!(chi.value[(1, 2)] + chi.value[(2, 1)], C64::new(0.0, 0.0));
    }

    #[test]
    fn static_limit_matches_ms_over_hk() {
        // ω → 0: χ_yy → M_s/H_k and χ_zz → M_s/(H_k + M_eff).
        let p = LlgParams::cofeb();
        let chi = llg_susceptibility(&p, 1.0).unwrap();
        assert!((chi.value[(1, 1)].re - 1.25 / 5e-4).abs() / 2500.0 < 1e-9);
        assert!((chi.value[(2, 2)].re - 1.25 / 1.2505).abs() < 1e-9);
    }

    #[test]
    fn rejects_non_positive_frequency() {
        assert!(llg_susceptibility(&LlgParams::cofeb(), 0.0).is_err());
        assert!(llg_susceptibility(&LlgParams::cofeb(), -1.0).is_err());
    }

    #[test]
    fn zero_angle_rotation_is_identity() {
        let chi = llg_susceptibility(&LlgParams::cofeb(), 2.0 * PI * 1e6).unwrap();
        let lab = rotate_to_lab(&chi, 0.0).unwrap();
        assert_eq!(lab.value, chi.value);
    }
}
