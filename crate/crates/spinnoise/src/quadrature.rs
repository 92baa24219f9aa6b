//! Quadrature rules: Gauss–Legendre nodes, adaptive Gauss–Kronrod and the
//! polar momentum grid used for in-plane q-integrals.

use crate::error::{Error, Result};
use crate::{Mat3, C64};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// Gauss–Legendre nodes and weights on [−1, 1], nodes ascending.
pub fn gauss_legendre(n: usize) -> Vec<(f64, f64)> {
    assert!(n >= 1, "Gauss–Legendre rule needs at least one node");
    let mut out = vec![(0.0, 0.0); n];
    let nf = n as f64;
    for i in 0..n.div_ceil(2) {
        // Chebyshev-like initial guess for the i-th largest root.
        let mut x = (PI * (i as f64 + 0.75) / (nf + 0.5)).cos();
        let mut dp = 1.0;
        for _ in 0..100 {
            let (p, d) = legendre_with_derivative(n, x);
            dp = d;
            let dx = p / d;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let (_, d) = legendre_with_derivative(n, x);
        if d.is_finite() {
            dp = d;
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        out[i] = (-x, w);
        out[n - 1 - i] = (x, w);
    }
    if n % 2 == 1 {
        out[n / 2].0 = 0.0;
    }
    out
}

fn legendre_with_derivative(n: usize, x: f64) -> (f64, f64) {
    let (mut p0, mut p1) = (1.0, x);
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let p = if n == 0 { 1.0 } else { p1 };
    let dp = n as f64 * (x * p - p0) / (x * x - 1.0);
    (p, dp)
}

/// Gauss–Legendre rule mapped onto [a, b].
pub fn gauss_legendre_on(a: f64, b: f64, n: usize) -> Vec<(f64, f64)> {
    let (h, m) = (0.5 * (b - a), 0.5 * (b + a));
    gauss_legendre(n).into_iter().map(|(x, w)| (m + h * x, h * w)).collect()
}

const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_8,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

/// One 15-point Kronrod evaluation on [a, b]: (estimate, |K15 − G7|).
pub fn gauss_kronrod_15<F: FnMut(f64) -> f64>(f: &mut F, a: f64, b: f64) -> (f64, f64) {
    let (h, m) = (0.5 * (b - a), 0.5 * (b + a));
    let fc = f(m);
    let mut k = fc * WGK[7];
    let mut g = fc * WG[3];
    for j in 0..7 {
        let x = h * XGK[j];
        let s = f(m - x) + f(m + x);
        k += WGK[j] * s;
        if j % 2 == 1 {
            g += WG[j / 2] * s;
        }
    }
    (k * h, ((k - g) * h).abs())
}

/// Globally adaptive Gauss–Kronrod integration of f over [a, b]. Stops when
/// the summed error estimate is below max(abs_tol, rel_tol·|estimate|).
pub fn integrate_adaptive<F: FnMut(f64) -> f64>(
    mut f: F,
    a: f64,
    b: f64,
    abs_tol: f64,
    rel_tol: f64,
    max_intervals: usize,
) -> Result<(f64, f64)> {
    let mut intervals = vec![{
        let (v, e) = gauss_kronrod_15(&mut f, a, b);
        (a, b, v, e)
    }];
    loop {
        let total: f64 = intervals.iter().map(|s| s.2).sum();
        let err: f64 = intervals.iter().map(|s| s.3).sum();
        if !total.is_finite() {
            return Err(Error::QuadratureFailure { estimate: total, error: err });
        }
        if err <= abs_tol.max(rel_tol * total.abs()) {
            return Ok((total, err));
        }
        if intervals.len() >= max_intervals {
            return Err(Error::QuadratureFailure { estimate: total, error: err });
        }
        // Split the interval with the largest error (first one on ties).
        let worst = intervals
            .iter()
            .enumerate()
            .fold(0, |best, (i, s)| if s.3 > intervals[best].3 { i } else { best });
        let (lo, hi, _, _) = intervals.swap_remove(worst);
        let mid = 0.5 * (lo + hi);
        let (v1, e1) = gauss_kronrod_15(&mut f, lo, mid);
        let (v2, e2) = gauss_kronrod_15(&mut f, mid, hi);
        intervals.push((lo, mid, v1, e1));
        intervals.push((mid, hi, v2, e2));
    }
}

/// Kronrod nodes and weights on [−1, 1] with the embedded Gauss weights
/// (zero for Kronrod-only nodes), nodes ascending.
pub(crate) fn kronrod_15_nodes() -> [(f64, f64, f64); 15] {
    let mut out = [(0.0, 0.0, 0.0); 15];
    for j in 0..8 {
        let g = if j % 2 == 1 { WG[j / 2] } else { 0.0 };
        let g = if j == 7 { WG[3] } else { g };
        out[j] = (-XGK[j], WGK[j], g);
        out[14 - j] = (XGK[j], WGK[j], g);
    }
    out
}

/// Layout of a polar momentum grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolarGridSpec {
    /// Lower radial bound in rad/m.
    pub q_min: f64,
    /// Upper radial bound in rad/m.
    pub q_max: f64,
    /// Number of radial 15-point Gauss–Kronrod panels, equally spaced in ln q.
    pub panels: usize,
    /// Number of equally spaced azimuthal nodes (even).
    pub angular: usize,
}

impl PolarGridSpec {
    /// Invariant violations.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !(self.q_min > 0.0 && self.q_max > self.q_min) {
            v.push(format!("radial range must satisfy 0 < q_min < q_max, got [{}, {}]", self.q_min, self.q_max));
        }
        if self.panels == 0 {
            v.push("at least one radial panel is required".into());
        }
        if self.angular < 4 || self.angular % 2 != 0 {
            v.push(format!("angular node count must be even and ≥ 4, got {}", self.angular));
        }
        v
    }
}

/// One radial node of a polar grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RadialNode {
    /// |q| in rad/m.
    pub q: f64,
    /// Kronrod weight including the q²·d(ln q) Jacobian.
    pub weight: f64,
    /// Weight of the embedded 7-point Gauss rule (0 on Kronrod-only nodes).
    pub gauss_weight: f64,
}

/// Tensor-product polar grid: radial Gauss–Kronrod panels in ln q and a
/// periodic midpoint rule in the azimuth.
///
/// Two embedded lower-order rules reuse the same nodes: the 7-point Gauss
/// rule of each radial panel and the azimuthal rule on every other node.
/// Their deviations from the full rule form the error estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct PolarGrid {
    /// Construction parameters.
    pub spec: PolarGridSpec,
    /// Radial nodes, ascending.
    pub radial: Vec<RadialNode>,
    /// Azimuthal nodes (θ, w) with Σ w = 2π.
    pub angular: Vec<(f64, f64)>,
}

/// A 2D node with its weight in the full rule and the two embedded rules.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridPoint {
    /// Cartesian in-plane momentum.
    pub q: [f64; 2],
    /// Full-rule weight.
    pub weight: f64,
    /// Weight with the radial Gauss rule.
    pub radial_coarse: f64,
    /// Weight with the half azimuthal rule.
    pub angular_coarse: f64,
}

/// A quadrature result with its error estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate<T> {
    /// Full-rule value.
    pub value: T,
    /// |radial-embedded − full| + |angular-embedded − full| (in norm).
    pub error: f64,
}

/// Sums of one integrand under the full rule and the two embedded rules.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmbeddedSums<T> {
    /// Full-rule sum.
    pub full: T,
    /// Sum with the radial Gauss rule.
    pub radial: T,
    /// Sum with the half azimuthal rule.
    pub angular: T,
}

impl<T> EmbeddedSums<T> {
    /// Maps all three sums through `f` and forms the scalar estimate.
    pub fn estimate_by<E, F: Fn(&T) -> std::result::Result<f64, E>>(&self, f: F) -> std::result::Result<Estimate<f64>, E> {
        let full = f(&self.full)?;
        let error = (full - f(&self.radial)?).abs() + (full - f(&self.angular)?).abs();
        Ok(Estimate { value: full, error })
    }
}

impl PolarGrid {
    /// Builds the grid, validating the layout.
    pub fn new(spec: PolarGridSpec) -> Result<Self> {
        let v = spec.violations();
        if !v.is_empty() {
            return Err(Error::InvalidInput(v.join("; ")));
        }
        let (l0, l1) = (spec.q_min.ln(), spec.q_max.ln());
        let h = (l1 - l0) / spec.panels as f64;
        let rule = kronrod_15_nodes();
        let mut radial = Vec::with_capacity(spec.panels * rule.len());
        for p in 0..spec.panels {
            let mid = l0 + h * (p as f64 + 0.5);
            for &(x, wk, wg) in &rule {
                let q = (mid + 0.5 * h * x).exp();
                let jac = 0.5 * h * q * q;
                radial.push(RadialNode { q, weight: wk * jac, gauss_weight: wg * jac });
            }
        }
        let n = spec.angular;
        let dth = 2.0 * PI / n as f64;
        let angular = (0..n).map(|j| ((j as f64 + 0.5) * dth, dth)).collect();
        Ok(Self { spec, radial, angular })
    }

    /// Nodes in radial-major order with their weights.
    pub fn points(&self) -> Vec<GridPoint> {
        let mut out = Vec::with_capacity(self.len());
        for r in &self.radial {
            for (j, &(th, wt)) in self.angular.iter().enumerate() {
                let half = if j % 2 == 0 { 2.0 * wt } else { 0.0 };
                out.push(GridPoint {
                    q: [r.q * th.cos(), r.q * th.sin()],
                    weight: r.weight * wt,
                    radial_coarse: r.gauss_weight * wt,
                    angular_coarse: r.weight * half,
                });
            }
        }
        out
    }

    /// Number of 2D nodes.
    pub fn len(&self) -> usize {
        self.radial.len() * self.angular.len()
    }

    /// True when the grid has no nodes (never for a validated grid).
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Grid with twice the radial panels and twice the azimuths.
    pub fn refined(&self) -> Self {
        let mut s = self.spec;
        s.panels *= 2;
        s.angular *= 2;
        Self::new(s).expect("refining a valid grid stays valid")
    }

    /// Combines node values (in [`Self::points`] order) into the full-rule
    /// sum and its error estimate, in fixed order.
    pub fn combine_scalar(&self, values: &[f64]) -> Estimate<f64> {
        let (mut full, mut rad, mut ang) = (0.0, 0.0, 0.0);
        for (p, v) in self.points().iter().zip(values) {
            full += p.weight * v;
            rad += p.radial_coarse * v;
            ang += p.angular_coarse * v;
        }
        Estimate { value: full, error: (full - rad).abs() + (full - ang).abs() }
    }

    /// ∫d²q f(q) for a tensor-valued integrand, summed in fixed order.
    pub fn integrate_mat3<F: Fn([f64; 2]) -> Mat3>(&self, f: &F) -> Estimate<Mat3> {
        let sums = self.integrate_mat3_rules(f);
        Estimate { value: sums.full, error: (sums.full - sums.radial).norm() + (sums.full - sums.angular).norm() }
    }

    /// ∫d²q f(q) under the full rule and both embedded rules, so that a
    /// derived scalar can carry its own error estimate.
    pub fn integrate_mat3_rules<F: Fn([f64; 2]) -> Mat3>(&self, f: &F) -> EmbeddedSums<Mat3> {
        let (mut full, mut radial, mut angular) = (Mat3::zeros(), Mat3::zeros(), Mat3::zeros());
        for p in self.points() {
            let v = f(p.q);
            full += v * C64::new(p.weight, 0.0);
            radial += v * C64::new(p.radial_coarse, 0.0);
            angular += v * C64::new(p.angular_coarse, 0.0);
        }
        EmbeddedSums { full, radial, angular }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn legendre_integrates_polynomials_exactly() {
        for n in 1..12 {
            let rule = gauss_legendre(n);
            for k in 0..(2 * n) {
                let s: f64 = rule.iter().map(|(x, w)| w * x.powi(k as i32)).sum();
                let exact = if k % 2 == 1 { 0.0 } else { 2.0 / (k as f64 + 1.0) };
                assert!((s - exact).abs() < 1e-13, "n={n} k={k}: {s} vs {exact}");
            }
        }
    }

    #[test]
    fn kronrod_nodes_embed_gauss_rule() {
        let rule = kronrod_15_nodes();
        let wk: f64 = rule.iter().map(|r| r.1).sum();
        let wg: f64 = rule.iter().map(|r| r.2).sum();
        assert!((wk - 2.0).abs() < 1e-14 && (wg - 2.0).abs() < 1e-14);
        // The embedded rule is the 7-point Gauss–Legendre rule.
        let g7 = gauss_legendre(7);
        let embedded: Vec<_> = rule.iter().filter(|r| r.2 > 0.0).collect();
        for (e, g) in embedded.iter().zip(&g7) {
            assert!((e.0 - g.0).abs() < 1e-15 && (e.2 - g.1).abs() < 1e-14);
        }
    }

    #[test]
    fn adaptive_handles_oscillation() {
        let (v, _) = integrate_adaptive(|x| (50.0 * x).sin().powi(2), 0.0, 3.0, 1e-12, 1e-12, 10_000).unwrap();
        let exact = 1.5 - (300.0f64).sin() / 200.0;
        assert!((v - exact).abs() < 1e-10);
    }

    #[test]
    fn polar_grid_gaussian() {
        let grid = PolarGrid::new(PolarGridSpec { q_min: 1e-6, q_max: 12.0, panels: 16, angular: 16 }).unwrap();
        let s = grid.integrate_mat3(&|q| Mat3::identity() * C64::new((-(q[0] * q[0] + q[1] * q[1])).exp(), 0.0));
        let err = (s.value[(0, 0)].re - PI).abs();
        assert!(err < 1e-9, "{err:e}");
        assert!(s.error >= err && s.error < 1e-3);
    }
}
