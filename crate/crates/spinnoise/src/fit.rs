//! Spin-bath spectrum fits.
//!
//! Models are fitted to ln J so every decade carries equal weight.
//! Parameters are optimized as logarithms (keeping them positive) by a
//! box-constrained Levenberg–Marquardt iteration, restarted from eight
//! points on a (Δ, τ_c) grid; the lowest residual wins.

use crate::dephasing::{ou_bath_spectrum, reconstruct_spectrum, CoherenceTrace, FilterQuadrature, PulseSequence};
use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

const MAX_ITERATIONS: usize = 500;
/// Largest acceptable condition number of the final Jacobian.
const CONDITION_LIMIT: f64 = 1e10;

/// Fitted parameters with uncertainty estimates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    /// Parameter names.
    pub names: Vec<String>,
    /// Parameter values (SI units).
    pub values: Vec<f64>,
    /// Standard errors from the scaled covariance.
    pub standard_errors: Vec<f64>,
    /// Covariance of the parameters (SI units), row-major.
    pub covariance: Vec<Vec<f64>>,
    /// Root-mean-square weighted log residual.
    pub residual_rms: f64,
    /// LM iterations of the winning start.
    pub iterations: usize,
    /// Index of the winning start.
    pub start: usize,
}

impl FitReport {
    /// Value of a named parameter.
    pub fn get(&self, name: &str) -> Option<f64> {
        self.names.iter().position(|n| n == name).map(|k| self.values[k])
    }

    /// Fitted Δ in s⁻¹.
    pub fn delta(&self) -> f64 {
        self.values[0]
    }

    /// Fitted τ_c in seconds.
    pub fn tau_c(&self) -> f64 {
        self.values[1]
    }
}

/// Fit data: samples (ω, J) with optional one-sigma errors of J.
#[derive(Debug, Clone, Copy)]
pub struct FitData<'a> {
    /// Angular frequencies in rad/s.
    pub omega: &'a [f64],
    /// Spectrum values in s⁻¹.
    pub values: &'a [f64],
    /// Optional standard deviations of the values.
    pub sigma: Option<&'a [f64]>,
}

impl FitData<'_> {
    fn logs(&self) -> Vec<f64> {
        self.values.iter().map(|v| v.ln()).collect()
    }

    fn check(&self, params: usize) -> Result<Vec<f64>> {
        let mut v = Vec::new();
        let n = self.omega.len();
        if self.values.len() != n || self.sigma.is_some_and(|s| s.len() != n) {
            v.push("fit data arrays differ in length".to_string());
        }
        if n < 4.max(params + 1) {
            v.push(format!("fit needs at least {} points, got {n}", 4.max(params + 1)));
        }
        if self.omega.iter().any(|w| !(*w > 0.0)) {
            v.push("fit frequencies must be > 0".into());
        }
        if self.values.iter().any(|j| !(*j > 0.0 && j.is_finite())) {
            v.push("fit values must be finite and > 0 (log residuals)".into());
        }
        let (lo, hi) = self.omega.iter().fold((f64::INFINITY, 0.0f64), |(a, b), w| (a.min(*w), b.max(*w)));
        if n > 0 && hi < 10.0 * lo {
            v.push(format!("fit data must span at least a decade, got {lo:.3e}..{hi:.3e} rad/s"));
        }
        if let Some(s) = self.sigma {
            if s.iter().any(|x| !(*x > 0.0)) {
                v.push("fit sigmas must be > 0".into());
            }
        }
        if !v.is_empty() {
            return Err(Error::InvalidInput(v.join("; ")));
        }
        // Weight of ln J: J/σ (first-order error propagation), else 1.
        Ok(match self.sigma {
            Some(s) => self.values.iter().zip(s).map(|(j, s)| j / s).collect(),
            None => vec![1.0; n],
        })
    }
}

/// Box-constrained Levenberg–Marquardt on r(u) with Jacobian J(u).
/// Returns (u, ½‖r‖², iterations).
fn levenberg_marquardt<R, D>(
    residual: &R,
    jacobian: &D,
    mut u: DVector<f64>,
    lower: &DVector<f64>,
    upper: &DVector<f64>,
) -> Result<(DVector<f64>, f64, usize)>
where
    R: Fn(&DVector<f64>) -> DVector<f64>,
    D: Fn(&DVector<f64>) -> DMatrix<f64>,
{
    let clamp = |v: DVector<f64>| v.zip_zip_map(lower, upper, |x, a, b| x.clamp(a, b));
    u = clamp(u);
    let mut r = residual(&u);
    let mut cost = 0.5 * r.norm_squared();
    let mut lambda = 1e-3;
    for it in 1..=MAX_ITERATIONS {
        let jac = jacobian(&u);
        let jtj = jac.transpose() * &jac;
        let g = jac.transpose() * &r;
        if g.amax() <= 1e-14 * (1.0 + cost) || cost <= 1e-30 {
            return Ok((u, cost, it));
        }
        let mut improved = false;
        while lambda < 1e16 {
            let mut a = jtj.clone();
            for k in 0..a.nrows() {
                a[(k, k)] += lambda * jtj[(k, k)].max(1e-12);
            }
            let Some(step) = a.cholesky().map(|c| c.solve(&(-&g))) else {
                lambda *= 10.0;
                continue;
            };
            let trial = clamp(&u + &step);
            let rt = residual(&trial);
            let ct = 0.5 * rt.norm_squared();
            if ct.is_finite() && ct < cost {
                let moved = (&trial - &u).amax();
                let drop = cost - ct;
                u = trial;
                r = rt;
                cost = ct;
                lambda = (lambda / 3.0).max(1e-12);
                improved = true;
                if moved <= 1e-12 || drop <= 1e-15 * cost {
                    return Ok((u, cost, it));
                }
                break;
            }
            lambda *= 4.0;
        }
        if !improved {
            // No descent possible at any damping: a (possibly bounded) minimum.
            return Ok((u, cost, it));
        }
    }
    Err(Error::NonConvergence { residual: (2.0 * cost).sqrt() })
}

/// A log-space model: ln of sample i at parameters u, and its gradient.
trait LogModel {
    fn names(&self) -> Vec<String>;
    fn eval(&self, i: usize, u: &DVector<f64>) -> (f64, Vec<f64>);
}

/// ∂ln L/∂ln τ_c of the Lorentzian at ω.
fn lorentzian_tau_slope(omega: f64, tau: f64) -> f64 {
    let x = (omega * tau).powi(2);
    1.0 - 2.0 * x / (1.0 + x)
}

struct Lorentzian<'a> {
    omega: &'a [f64],
}

impl LogModel for Lorentzian<'_> {
    fn names(&self) -> Vec<String> {
        vec!["delta".into(), "tau_c".into()]
    }

    fn eval(&self, i: usize, u: &DVector<f64>) -> (f64, Vec<f64>) {
        let (d, tau) = (u[0].exp(), u[1].exp());
        let w = self.omega[i];
        (ou_bath_spectrum(d, tau, w).ln(), vec![2.0, lorentzian_tau_slope(w, tau)])
    }
}

struct TwoBath<'a, E: Fn(f64) -> f64> {
    omega: &'a [f64],
    em: &'a E,
    fit_scale: bool,
}

impl<E: Fn(f64) -> f64> LogModel for TwoBath<'_, E> {
    fn names(&self) -> Vec<String> {
        let mut n = vec!["delta".to_string(), "tau_c".to_string()];
        if self.fit_scale {
            n.push("em_scale".into());
        }
        n
    }

    fn eval(&self, i: usize, u: &DVector<f64>) -> (f64, Vec<f64>) {
        let (d, tau) = (u[0].exp(), u[1].exp());
        let w = self.omega[i];
        let l = ou_bath_spectrum(d, tau, w);
        let s = if self.fit_scale { u[2].exp() } else { 1.0 };
        let e = s * (self.em)(w);
        let m = l + e;
        let mut g = vec![2.0 * l / m, l * lorentzian_tau_slope(w, tau) / m];
        if self.fit_scale {
            g.push(e / m);
        }
        (m.ln(), g)
    }
}

/// Lorentzian seen through each point's filter: ln Φ_i(Δ, τ_c).
struct FilteredLorentzian<'a> {
    rules: &'a [FilterQuadrature],
}

impl LogModel for FilteredLorentzian<'_> {
    fn names(&self) -> Vec<String> {
        vec!["delta".into(), "tau_c".into()]
    }

    fn eval(&self, i: usize, u: &DVector<f64>) -> (f64, Vec<f64>) {
        let (d, tau) = (u[0].exp(), u[1].exp());
        let rule = &self.rules[i];
        let (mut phi, mut dtau) = (0.0, 0.0);
        for (w, c) in rule.nodes.iter().zip(&rule.weights) {
            let l = c * ou_bath_spectrum(d, tau, *w);
            phi += l;
            dtau += l * lorentzian_tau_slope(*w, tau);
        }
        (phi.ln(), vec![2.0, dtau / phi])
    }
}

fn run_fit<M: LogModel>(
    model: &M,
    logs: &[f64],
    weights: &[f64],
    starts: &[DVector<f64>],
    lower: &DVector<f64>,
    upper: &DVector<f64>,
) -> Result<FitReport> {
    let p = lower.len();
    let n = logs.len();
    let residual =
        |u: &DVector<f64>| DVector::from_iterator(n, (0..n).map(|i| weights[i] * (model.eval(i, u).0 - logs[i])));
    let jacobian = |u: &DVector<f64>| {
        let mut j = DMatrix::zeros(n, p);
        for i in 0..n {
            let (_, g) = model.eval(i, u);
            for k in 0..p {
                j[(i, k)] = weights[i] * g[k];
            }
        }
        j
    };
    let mut best: Option<(DVector<f64>, f64, usize, usize)> = None;
    let mut first_err = None;
    for (s, u0) in starts.iter().enumerate() {
        match levenberg_marquardt(&residual, &jacobian, u0.clone(), lower, upper) {
            Ok((u, c, it)) if c.is_finite() => {
                if best.as_ref().is_none_or(|b| c < b.1) {
                    best = Some((u, c, it, s));
                }
            }
            Ok(_) => {}
            Err(e) => {
                first_err.get_or_insert(e);
            }
        }
    }
    let Some((u, cost, iterations, start)) = best else {
        return Err(first_err.unwrap_or(Error::NonConvergence { residual: f64::NAN }));
    };
    let jac = jacobian(&u);
    let sv = jac.clone().svd(false, false).singular_values;
    let (smax, smin) = (sv.max(), sv.min());
    if !(smin > 0.0) || smax / smin > CONDITION_LIMIT {
        return Err(Error::IllConditioned(format!(
            "fit Jacobian condition number {:.3e} (singular values {:?})",
            smax / smin,
            sv.as_slice()
        )));
    }
    let dof = (n - p).max(1) as f64;
    let s2 = 2.0 * cost / dof;
    let cov_u = (jac.transpose() * &jac)
        .try_inverse()
        .ok_or_else(|| Error::IllConditioned("singular normal matrix".into()))?
        * s2;
    let values: Vec<f64> = u.iter().map(|x| x.exp()).collect();
    let covariance: Vec<Vec<f64>> =
        (0..p).map(|a| (0..p).map(|b| values[a] * values[b] * cov_u[(a, b)]).collect()).collect();
    Ok(FitReport {
        names: model.names(),
        standard_errors: (0..p).map(|k| covariance[k][k].max(0.0).sqrt()).collect(),
        values,
        covariance,
        residual_rms: (2.0 * cost / n as f64).sqrt(),
        iterations,
        start,
    })
}

/// Eight starts: τ_c at four log-spaced multiples of the data's inverse
/// frequency span, each with Δ at ½ and 2× the value matching the
/// lowest-frequency sample.
fn starts(data: &FitData, tau_range: (f64, f64)) -> Vec<(f64, f64)> {
    let k = (0..data.omega.len()).min_by(|a, b| data.omega[*a].total_cmp(&data.omega[*b])).unwrap_or(0);
    let (w0, j0) = (data.omega[k], data.values[k]);
    let (lo, hi) = (tau_range.0.ln(), tau_range.1.ln());
    let mut out = Vec::with_capacity(8);
    for i in 0..4 {
        let tau = (lo + (hi - lo) * (i as f64 + 0.5) / 4.0).exp();
        let d = (std::f64::consts::PI * j0 * (1.0 + (w0 * tau).powi(2)) / tau).sqrt();
        for f in [0.5, 2.0] {
            out.push((f * d, tau));
        }
    }
    out
}

/// Lorentzian (OU bath) fit J = (Δ²τ_c/π)/(1 + (ωτ_c)²).
pub fn fit_lorentzian(data: &FitData) -> Result<FitReport> {
    let weights = data.check(2)?;
    let (wmin, wmax) = data.omega.iter().fold((f64::INFINITY, 0.0f64), |(a, b), w| (a.min(*w), b.max(*w)));
    let s = starts(data, (0.1 / wmax, 10.0 / wmin))
        .into_iter()
        .map(|(d, t)| DVector::from_vec(vec![d.ln(), t.ln()]))
        .collect::<Vec<_>>();
    let inf = f64::INFINITY;
    let (lower, upper) = (DVector::from_vec(vec![-inf, -inf]), DVector::from_vec(vec![inf, inf]));
    run_fit(&Lorentzian { omega: data.omega }, &data.logs(), &weights, &s, &lower, &upper)
}

/// Options of the two-bath fit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TwoBathOptions {
    /// Intrinsic coupling Δ in s⁻¹; Δ′ is bounded to [0.5, 2]·Δ.
    pub intrinsic_delta: f64,
    /// Bounds of τ_c′ in seconds.
    pub tau_bounds: (f64, f64),
    /// Also fit a positive amplitude of the J_em model.
    pub fit_em_scale: bool,
}

impl TwoBathOptions {
    /// Default bounds τ_c′ ∈ [1, 10³] ns, fixed J_em model.
    pub fn new(intrinsic_delta: f64) -> Self {
        Self { intrinsic_delta, tau_bounds: (1e-9, 1e-6), fit_em_scale: false }
    }
}

/// Two-bath fit J = Lorentzian(Δ′, τ_c′) + s·J_em(ω) with J_em held fixed
/// (s = 1 unless `fit_em_scale`).
pub fn fit_two_bath<E: Fn(f64) -> f64>(data: &FitData, em: &E, opts: &TwoBathOptions) -> Result<FitReport> {
    if !(opts.intrinsic_delta > 0.0 && opts.tau_bounds.0 > 0.0 && opts.tau_bounds.1 > opts.tau_bounds.0) {
        return Err(Error::InvalidInput("two-bath fit needs Δ > 0 and 0 < τ_min < τ_max".into()));
    }
    let weights = data.check(2 + opts.fit_em_scale as usize)?;
    let model = TwoBath { omega: data.omega, em, fit_scale: opts.fit_em_scale };
    let (dl, du) = ((0.5 * opts.intrinsic_delta).ln(), (2.0 * opts.intrinsic_delta).ln());
    let (tl, tu) = (opts.tau_bounds.0.ln(), opts.tau_bounds.1.ln());
    let mut lower = vec![dl, tl];
    let mut upper = vec![du, tu];
    if opts.fit_em_scale {
        lower.push((1e-6f64).ln());
        upper.push((1e6f64).ln());
    }
    let mut s = Vec::with_capacity(8);
    for i in 0..4 {
        let t = tl + (tu - tl) * (i as f64 + 0.5) / 4.0;
        for f in [0.25, 0.75] {
            let mut u = vec![dl + f * (du - dl), t];
            if opts.fit_em_scale {
                u.push(0.0);
            }
            s.push(DVector::from_vec(u));
        }
    }
    run_fit(&model, &data.logs(), &weights, &s, &DVector::from_vec(lower), &DVector::from_vec(upper))
}

/// Lorentzian fit of CPMG coherence data through the filter: minimizes
/// Σ [ln Φ_i(Δ, τ_c) − ln(−ln C_i)]² with Φ_i the exact filtered dephasing
/// of each (N, t) point, so no narrowband-filter approximation enters.
/// Starts are derived from the peak-point reconstruction.
pub fn fit_lorentzian_filtered(trace: &CoherenceTrace, cutoff: f64) -> Result<FitReport> {
    let rec = reconstruct_spectrum(trace, cutoff)?;
    let s = &rec.spectrum;
    let data = FitData { omega: &s.omega, values: &s.values, sigma: None };
    data.check(2)?;
    if trace.points.iter().any(|p| p.coherence >= 1.0) {
        return Err(Error::InvalidInput("filtered fit needs C < 1 at every point".into()));
    }
    let rules = trace
        .points
        .iter()
        .map(|p| FilterQuadrature::new(&PulseSequence::cpmg(p.pulses, p.time)?, cutoff))
        .collect::<Result<Vec<_>>>()?;
    let logs: Vec<f64> = trace.points.iter().map(|p| (-p.coherence.ln()).ln()).collect();
    let weights: Vec<f64> = trace
        .points
        .iter()
        .map(|p| p.sigma.map_or(1.0, |sg| -p.coherence.ln() * p.coherence / sg))
        .collect();
    let (wmin, wmax) = (s.omega[0], s.omega[s.len() - 1]);
    let starts = starts(&data, (0.1 / wmax, 10.0 / wmin))
        .into_iter()
        .map(|(d, t)| DVector::from_vec(vec![d.ln(), t.ln()]))
        .collect::<Vec<_>>();
    let inf = f64::INFINITY;
    let (lower, upper) = (DVector::from_vec(vec![-inf, -inf]), DVector::from_vec(vec![inf, inf]));
    run_fit(&FilteredLorentzian { rules: &rules }, &logs, &weights, &starts, &lower, &upper)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_lorentzian_is_recovered() {
        let omega: Vec<f64> = (0..20).map(|k| 1e6 * 10f64.powf(k as f64 / 6.0)).collect();
        let j: Vec<f64> = omega.iter().map(|w| ou_bath_spectrum(4.5e6, 19e-9, *w)).collect();
        let fit = fit_lorentzian(&FitData { omega: &omega, values: &j, sigma: None }).unwrap();
        assert!((fit.delta() / 4.5e6 - 1.0).abs() < 1e-6, "{fit:?}");
        assert!((fit.tau_c() / 19e-9 - 1.0).abs() < 1e-6, "{fit:?}");
    }

    #[test]
    fn narrow_data_is_rejected() {
        let omega = [1.0, 2.0, 3.0, 4.0];
        let j = [1.0; 4];
        assert!(matches!(fit_lorentzian(&FitData { omega: &omega, values: &j, sigma: None }), Err(Error::InvalidInput(_))));
    }
}
