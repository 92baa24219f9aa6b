//! Magnetic propagators: the free-space dyadic in the mixed (q, z)
//! representation, its slab-integrated form, the thin-film reflection
//! path and the single-mode cavity model.
//!
//! Momentum-space dyadics carry units of rad/m and relate to the real-space
//! Green function through G(r, r′) = (1/(4π²k₀²))∫d²q e^{iq·(ρ−ρ′)} G₀(q, z, z′).

use crate::constants::C_LIGHT;
use crate::error::{Error, Result};
use crate::quadrature::{EmbeddedSums, PolarGrid};
use crate::{Mat3, C64};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// Vacuum wavenumber k₀ = ω/c.
pub fn k0(omega: f64) -> f64 {
    omega / C_LIGHT
}

/// Out-of-plane wavenumber k_z = √(k₀² − q²) on the branch 𝓘m k_z ≥ 0.
pub fn kz(q: f64, k0: f64) -> C64 {
    if q > k0 {
        C64::new(0.0, ((q - k0) * (q + k0)).sqrt())
    } else {
        C64::new(((k0 - q) * (k0 + q)).sqrt(), 0.0)
    }
}

/// Free-space dyadic (i/2)(1/k_z)·M(q, k_z, s)·e^{ik_z|z−z′|} with
/// s = sgn(z − z′); at z = z′ the odd entries vanish (s = 0).
pub fn free_space_dyadic(q: [f64; 2], z: f64, zp: f64, omega: f64) -> Mat3 {
    let k0 = k0(omega);
    let qn = q[0].hypot(q[1]);
    let kz = kz(qn, k0);
    let dz = z - zp;
    let s = if dz > 0.0 {
        1.0
    } else if dz < 0.0 {
        -1.0
    } else {
        0.0
    };
    let pre = C64::new(0.0, 0.5) / kz * (C64::new(0.0, 1.0) * kz * dz.abs()).exp();
    dyadic_matrix(q, k0, kz, s) * pre
}

/// The bracketed 3×3 matrix of the free-space dyadic.
fn dyadic_matrix(q: [f64; 2], k0: f64, kz: C64, s: f64) -> Mat3 {
    let (qx, qy) = (q[0], q[1]);
    let r = |x: f64| C64::new(x, 0.0);
    let k02 = k0 * k0;
    let xz = -kz * (s * qx);
    let yz = -kz * (s * qy);
    Mat3::new(
        r(k02 - qx * qx),
        r(-qx * qy),
        xz,
        r(-qx * qy),
        r(k02 - qy * qy),
        yz,
        xz,
        yz,
        r(k02) - kz * kz,
    )
}

/// Σ_k Δz·G₀(q, z_qb, z_k): propagation from slab midpoints to the qubit.
pub fn z_integrated_dyadic(q: [f64; 2], z_qb: f64, slabs: &[f64], dz: f64, omega: f64) -> Mat3 {
    slabs.iter().map(|&zk| free_space_dyadic(q, z_qb, zk, omega) * C64::new(dz, 0.0)).sum()
}

/// How z-integrals over one slab of thickness Δz are evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SlabRule {
    /// Δz times the value at the slab midpoint.
    Midpoint,
    /// Exact average over uniformly magnetized slabs. Keeps the same-slab
    /// self-interaction bounded for q·Δz ≳ 1, where the midpoint value
    /// grows without limit.
    CellAverage,
}

/// sin(x)/x for complex x.
fn sinc(x: C64) -> C64 {
    if x.norm() < 1e-4 {
        1.0 - x * x / 6.0
    } else {
        x.sin() / x
    }
}

/// (1/Δz²)∫∫ e^{ik_z|z−z′|} over one slab, written in x = ik_zΔz:
/// (2/x)·((eˣ − 1)/x − 1).
fn self_slab_factor(x: C64) -> C64 {
    if x.norm() < 1e-3 {
        1.0 + x / 3.0 + x * x / 12.0 + x * x * x / 60.0
    } else {
        (((x.exp() - 1.0) / x) - 1.0) * 2.0 / x
    }
}

/// Δz-weighted coupling from slab l (midpoint z_l) to slab k (midpoint z_k).
pub fn slab_coupling(q: [f64; 2], z_k: f64, z_l: f64, dz: f64, omega: f64, rule: SlabRule) -> Mat3 {
    let g = free_space_dyadic(q, z_k, z_l, omega) * C64::new(dz, 0.0);
    match rule {
        SlabRule::Midpoint => g,
        SlabRule::CellAverage => {
            let kz = kz(q[0].hypot(q[1]), k0(omega));
            let factor = if z_k == z_l {
                self_slab_factor(C64::new(0.0, 1.0) * kz * dz)
            } else {
                let s = sinc(kz * (0.5 * dz));
                s * s
            };
            g * factor
        }
    }
}

/// Δz-weighted propagation from slab k (midpoint z_k) to a point z outside it.
pub fn slab_to_point(q: [f64; 2], z: f64, z_k: f64, dz: f64, omega: f64, rule: SlabRule) -> Mat3 {
    let g = free_space_dyadic(q, z, z_k, omega) * C64::new(dz, 0.0);
    match rule {
        SlabRule::Midpoint => g,
        SlabRule::CellAverage => g * slab_to_point_factor(q, dz, omega),
    }
}

/// Scalar factor sinc(k_zΔz/2) that converts a midpoint propagation to the
/// exact slab integral.
pub fn slab_to_point_factor(q: [f64; 2], dz: f64, omega: f64) -> C64 {
    sinc(kz(q[0].hypot(q[1]), k0(omega)) * (0.5 * dz))
}

/// Single-mode cavity parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CavityModel {
    /// Cavity angular frequency in rad/s.
    pub omega_cav: f64,
    /// Purcell factor P.
    pub purcell_factor: f64,
    /// Quality factor Q.
    pub quality_factor: f64,
}

impl CavityModel {
    /// ω_cav = 2π·0.1 MHz, P = 10⁵, Q = 5·10⁵.
    pub fn paper() -> Self {
        Self { omega_cav: 2.0 * PI * 0.1e6, purcell_factor: 1e5, quality_factor: 5e5 }
    }

    /// Invariant violations (P ≥ 0 is accepted so the vacuum limit is reachable).
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !(self.omega_cav > 0.0) {
            v.push("cavity frequency must be > 0".into());
        }
        if !(self.purcell_factor >= 0.0) {
            v.push("Purcell factor must be ≥ 0".into());
        }
        if !(self.quality_factor > 1.0) {
            v.push("quality factor must be > 1".into());
        }
        v
    }
}

/// Scalar s with 𝓘m G = s·I₃ at the cavity centre.
pub fn cavity_im_green(model: &CavityModel, omega: f64) -> f64 {
    let hw = model.omega_cav / (2.0 * model.quality_factor);
    let lor = hw * hw / (hw * hw + (omega - model.omega_cav).powi(2));
    omega / (6.0 * PI * C_LIGHT) * (1.0 + model.purcell_factor * lor)
}

/// Reflection coefficients of a magnetic thin film for one in-plane momentum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilmReflection {
    /// s→s coefficient.
    pub r_ss: C64,
    /// p→p coefficient.
    pub r_pp: C64,
    /// s→p coefficient.
    pub r_sp: C64,
    /// p→s coefficient.
    pub r_ps: C64,
}

/// Polarization vectors of the magnetic field for one q: the transverse
/// in-plane ŝ and the in-plane-of-incidence vectors for the up-going (p⁺)
/// and down-going (p⁻) waves.
fn polarizations(q: [f64; 2], k0: f64, kz: C64) -> ([C64; 3], [C64; 3], [C64; 3]) {
    let qn = q[0].hypot(q[1]);
    let r = |x: f64| C64::new(x, 0.0);
    let s = [r(q[1] / qn), r(-q[0] / qn), r(0.0)];
    let n = k0 * qn;
    let pp = [-kz * q[0] / n, -kz * q[1] / n, r(qn * qn / n)];
    let pm = [kz * q[0] / n, kz * q[1] / n, r(qn * qn / n)];
    (s, pp, pm)
}

fn outer(a: &[C64; 3], b: &[C64; 3]) -> Mat3 {
    Mat3::from_fn(|i, j| a[i] * b[j])
}

/// Film response operator 𝓡(q) of a uniformly magnetized slab of thickness
/// `t` whose top surface is the reference plane: the reflected momentum-space
/// field at height d is (i/(8π²k_z))e^{2ik_zd}·𝓡·(source). Uses the
/// thickness-averaged self field (exact slab demagnetization factors) and
/// exact thickness integration of the propagation factors, in the
/// magnetostatic near-field regime q ≫ k₀; returns zero for q ≤ k₀.
pub fn film_response(chi_lab: &Mat3, t: f64, q: [f64; 2], omega: f64) -> Mat3 {
    let k0 = k0(omega);
    let qn = q[0].hypot(q[1]);
    let kz = kz(qn, k0);
    if qn <= k0 {
        return Mat3::zeros();
    }
    let kappa = kz.im;
    let x = kappa * t;
    let phi = if x < 1e-6 { 1.0 - x / 2.0 + x * x / 6.0 } else { -(-x).exp_m1() / x };
    // Thickness-averaged self interaction minus the contact term.
    let avg = (1.0 - phi) / (kappa * kappa);
    let mut k_self = dyadic_matrix(q, k0, kz, 0.0) * C64::new(avg, 0.0);
    k_self[(2, 2)] -= C64::new(1.0, 0.0);
    let id = Mat3::identity();
    let t_mat = (id - chi_lab * k_self).try_inverse().unwrap_or_else(|| Mat3::from_element(C64::new(f64::NAN, 0.0)));
    let s_resp = t_mat * chi_lab;
    // Propagation to/from the top surface integrated over the thickness.
    let prop = t * phi / (2.0 * kappa);
    let up = dyadic_matrix(q, k0, kz, 1.0) * C64::new(prop, 0.0);
    let down = dyadic_matrix(q, k0, kz, -1.0) * C64::new(prop, 0.0);
    let g = up * s_resp * down * C64::new(1.0 / t, 0.0);
    // 𝒢 = (i/(2k_z))e^{2ik_zd}·(k₀²)… normalized so that 𝒢 = 𝓡·k₀²/(2κ)·e^{−2κd}.
    g * C64::new(2.0 * kappa / (k0 * k0), 0.0)
}

/// Projects a film response onto the s/p reflection coefficients.
pub fn reflection_coefficients(response: &Mat3, q: [f64; 2], omega: f64) -> FilmReflection {
    let k0 = k0(omega);
    let qn = q[0].hypot(q[1]);
    let (s, _, _) = polarizations(q, k0, kz(qn, k0));
    let sv = nalgebra::Vector3::new(s[0], s[1], s[2]);
    let zv = nalgebra::Vector3::new(C64::new(0.0, 0.0), C64::new(0.0, 0.0), C64::new(k0 / qn, 0.0));
    let bil = |a: &nalgebra::Vector3<C64>, b: &nalgebra::Vector3<C64>| (a.transpose() * response * b)[(0, 0)];
    FilmReflection { r_pp: bil(&sv, &sv), r_sp: bil(&zv, &sv), r_ps: bil(&sv, &zv), r_ss: bil(&zv, &zv) }
}

/// Reassembles the reflected dyadic's bracket from s/p coefficients:
/// r_pp ŝŝᵀ + r_ss p⁺p⁻ᵀ + r_ps ŝp⁻ᵀ + r_sp p⁺ŝᵀ.
pub fn reflected_bracket(r: &FilmReflection, q: [f64; 2], omega: f64) -> Mat3 {
    let k0 = k0(omega);
    let qn = q[0].hypot(q[1]);
    let (s, pp, pm) = polarizations(q, k0, kz(qn, k0));
    outer(&s, &s) * r.r_pp + outer(&pp, &pm) * r.r_ss + outer(&s, &pm) * r.r_ps + outer(&pp, &s) * r.r_sp
}

/// Reflected Green function of a thin magnetic film at height `d` above its
/// top surface, integrated over in-plane momentum on a polar grid, with the
/// grid's embedded-rule sums.
pub fn fresnel_thin_film_green(chi_lab: &Mat3, t_film: f64, d: f64, omega: f64, grid: &PolarGrid) -> Result<EmbeddedSums<Mat3>> {
    if !(d > 0.0 && t_film > 0.0 && omega > 0.0) {
        return Err(Error::InvalidInput(format!(
            "film Green function needs d > 0, t > 0, ω > 0; got d = {d}, t = {t_film}, ω = {omega}"
        )));
    }
    let k0v = k0(omega);
    let eval = |q: [f64; 2]| -> Mat3 {
        let qn = q[0].hypot(q[1]);
        if qn <= k0v {
            // Propagating waves: outside the near-field model (see film_response).
            return Mat3::zeros();
        }
        let kzv = kz(qn, k0v);
        let r = reflection_coefficients(&film_response(chi_lab, t_film, q, omega), q, omega);
        let bracket = reflected_bracket(&r, q, omega);
        bracket * (C64::new(0.0, 1.0 / (8.0 * PI * PI)) / kzv * (C64::new(0.0, 2.0) * kzv * d).exp())
    };
    let sums = grid.integrate_mat3_rules(&eval);
    let finite = |m: &Mat3| m.iter().all(|c| c.re.is_finite() && c.im.is_finite());
    if !(finite(&sums.full) && finite(&sums.radial) && finite(&sums.angular)) {
        return Err(Error::QuadratureFailure { estimate: f64::NAN, error: f64::NAN });
    }
    Ok(sums)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn branch_is_decaying() {
        let z = kz(1e7, 0.02);
        assert!(z.im > 0.0 && z.re == 0.0);
        let p = kz(0.01, 0.02);
        assert!(p.re > 0.0 && p.im == 0.0);
    }

    #[test]
    fn cavity_vacuum_limit() {
        let mut m = CavityModel::paper();
        m.purcell_factor = 0.0;
        let w = 2.0 * PI * 3e6;
        assert_eq!(cavity_im_green(&m, w), w / (6.0 * PI * C_LIGHT));
    }
}
