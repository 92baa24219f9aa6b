//! Pulse-sequence filter functions, the dephasing function Φ(t), coherence
//! C(t) = e^{−Φ}, T₂ extraction, and CPMG spectral reconstruction.
//!
//! Conventions: F(ω, t) = |∫₀ᵗ f(s)e^{iωs}ds|² with f the ±1 toggling
//! function, and Φ(t) = (1/π)∫₀^{ω_c} F(ω, t)·J(ω) dω. By Parseval
//! (1/π)∫₀^∞ F dω = t for every sequence, so a flat spectrum J₀ gives
//! Φ = κ_N·J₀·t with κ_N → 1 as ω_c → ∞.

use crate::error::{Error, Result};
use crate::quadrature::{gauss_kronrod_15, integrate_adaptive, kronrod_15_nodes, Estimate};
use crate::spectrum::{NoiseSpectrum, Provenance, SpectrumMetadata};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// Default ultraviolet cutoff ω_c = 2π·1 GHz.
pub const DEFAULT_CUTOFF: f64 = 2.0 * PI * 1e9;

/// Filter lobes (in units of π/t) resolved panel by panel per pulse before
/// switching to the lobe-averaged tail.
const LOBES_PER_PULSE: f64 = 128.0;

/// Echo sequence family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SequenceKind {
    /// Single refocusing pulse at t/2.
    Hahn,
    /// N equally spaced pulses at t_j = (j − ½)t/N.
    Cpmg,
}

/// An ideal (instantaneous π pulse) dynamical-decoupling sequence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PulseSequence {
    /// Sequence family.
    pub kind: SequenceKind,
    /// Number of π pulses.
    pub pulses: usize,
    /// Total evolution time in seconds.
    pub duration: f64,
}

impl PulseSequence {
    /// Hahn echo of total duration t.
    pub fn hahn(duration: f64) -> Result<Self> {
        Self::new(SequenceKind::Hahn, 1, duration)
    }

    /// N-pulse CPMG of total duration t.
    pub fn cpmg(pulses: usize, duration: f64) -> Result<Self> {
        Self::new(SequenceKind::Cpmg, pulses, duration)
    }

    /// Validated constructor (Hahn requires exactly one pulse).
    pub fn new(kind: SequenceKind, pulses: usize, duration: f64) -> Result<Self> {
        if pulses == 0 || (kind == SequenceKind::Hahn && pulses != 1) {
            return Err(Error::InvalidInput(format!("{kind:?} sequence cannot have {pulses} pulses")));
        }
        if !(duration > 0.0 && duration.is_finite()) {
            return Err(Error::InvalidInput(format!("sequence duration must be > 0, got {duration}")));
        }
        Ok(Self { kind, pulses, duration })
    }

    /// The same sequence with another duration.
    pub fn with_duration(self, duration: f64) -> Result<Self> {
        Self::new(self.kind, self.pulses, duration)
    }

    /// π-pulse times t_j = (j − ½)t/N, j = 1..N.
    pub fn pulse_times(&self) -> Vec<f64> {
        let n = self.pulses as f64;
        (1..=self.pulses).map(|j| (j as f64 - 0.5) * self.duration / n).collect()
    }

    /// Segment boundaries 0, t₁, …, t_N, t.
    pub fn boundaries(&self) -> Vec<f64> {
        let mut b = Vec::with_capacity(self.pulses + 2);
        b.push(0.0);
        b.extend(self.pulse_times());
        b.push(self.duration);
        b
    }

    /// Nominal filter centre πN/t.
    pub fn nominal_center(&self) -> f64 {
        PI * self.pulses as f64 / self.duration
    }
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-4 {
        1.0 - x * x / 6.0
    } else {
        x.sin() / x
    }
}

/// F(ω, t) = |Σ_k (±1)∫_{segment k} e^{iωs}ds|², evaluated per segment as
/// e^{iωm}·ℓ·sinc(ωℓ/2) (m the segment midpoint, ℓ its length).
pub fn filter_function(seq: &PulseSequence, omega: f64) -> f64 {
    let b = seq.boundaries();
    let (mut re, mut im) = (0.0, 0.0);
    for (k, w) in b.windows(2).enumerate() {
        let (len, mid) = (w[1] - w[0], 0.5 * (w[0] + w[1]));
        let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
        let amp = sign * len * sinc(0.5 * omega * len);
        let (s, c) = (omega * mid).sin_cos();
        re += amp * c;
        im += amp * s;
    }
    re * re + im * im
}

/// Closed-form Hahn filter 16 sin⁴(ωt/4)/ω².
pub fn hahn_filter(omega: f64, duration: f64) -> f64 {
    16.0 * (omega * duration / 4.0).sin().powi(4) / (omega * omega)
}

/// Lobe-averaged filter (4N + 2)/ω² (valid for ω ≫ πN/t).
fn tail_filter(seq: &PulseSequence, omega: f64) -> f64 {
    (4.0 * seq.pulses as f64 + 2.0) / (omega * omega)
}

/// Location of the dominant filter peak, found on a fine scan and refined
/// by golden-section search.
pub fn filter_peak(seq: &PulseSequence) -> f64 {
    let t = seq.duration;
    let h = PI / (16.0 * t);
    let upper = 2.0 * seq.nominal_center() + 8.0 * PI / t;
    let steps = (upper / h).ceil() as usize;
    let mut best = (h, filter_function(seq, h));
    for k in 2..=steps {
        let w = k as f64 * h;
        let f = filter_function(seq, w);
        if f > best.1 {
            best = (w, f);
        }
    }
    let (mut a, mut b) = (best.0 - h, best.0 + h);
    let g = 0.5 * (5f64.sqrt() - 1.0);
    let (mut c, mut d) = (b - g * (b - a), a + g * (b - a));
    while b - a > 1e-12 * best.0 {
        if filter_function(seq, c) > filter_function(seq, d) {
            b = d;
        } else {
            a = c;
        }
        c = b - g * (b - a);
        d = a + g * (b - a);
    }
    0.5 * (a + b)
}

/// Φ(t) = (1/π)∫₀^{ω_c} F(ω, t)·J(ω) dω.
///
/// Gauss–Kronrod panels one lobe (π/t) wide resolve the filter up to
/// 128·max(N, 2) lobes; beyond that F is replaced by its lobe average
/// (4N + 2)/ω² and the slowly varying remainder is integrated adaptively
/// in ln ω. The returned error is the summed Kronrod–Gauss difference.
pub fn dephasing_function<J: Fn(f64) -> f64>(j: &J, seq: &PulseSequence, cutoff: f64) -> Result<Estimate<f64>> {
    if !(cutoff > 0.0) {
        return Err(Error::InvalidInput(format!("cutoff must be > 0, got {cutoff}")));
    }
    let t = seq.duration;
    let width = PI / t;
    let limit = cutoff.min(LOBES_PER_PULSE * (seq.pulses.max(2) as f64) * width);
    let mut negative = None;
    let mut integrand = |w: f64| {
        let v = j(w);
        if v < 0.0 || !v.is_finite() {
            negative.get_or_insert((w, v));
        }
        filter_function(seq, w) * v
    };
    let (mut value, mut error) = (0.0, 0.0);
    let panels = (limit / width).ceil() as usize;
    for k in 0..panels {
        let a = k as f64 * width;
        let b = ((k + 1) as f64 * width).min(limit);
        let (v, e) = gauss_kronrod_15(&mut integrand, a, b);
        value += v;
        error += e;
    }
    if let Some((w, v)) = negative {
        return Err(Error::NegativeSpectrum { value: v, scale: 0.0, context: format!("J at ω = {w:.6e} rad/s") });
    }
    if cutoff > limit {
        let (v, e) = integrate_adaptive(
            |u: f64| {
                let w = u.exp();
                w * tail_filter(seq, w) * j(w).max(0.0)
            },
            limit.ln(),
            cutoff.ln(),
            0.0,
            1e-10,
            4096,
        )?;
        value += v;
        error += e;
    }
    Ok(Estimate { value: value / PI, error: error / PI })
}

/// A fixed quadrature rule Φ[J] ≈ Σ_n w_n·J(ω_n) for one sequence, with
/// the filter and 1/π folded into the weights. It uses the same panels as
/// [`dephasing_function`], with fixed ln ω panels for the tail. Suited to
/// repeated evaluation with many spectra (forward-model fitting).
#[derive(Debug, Clone, PartialEq)]
pub struct FilterQuadrature {
    /// Nodes in rad/s.
    pub nodes: Vec<f64>,
    /// Weights in s (Φ is dimensionless for J in s⁻¹).
    pub weights: Vec<f64>,
}

impl FilterQuadrature {
    /// Rule for `seq` up to `cutoff`.
    pub fn new(seq: &PulseSequence, cutoff: f64) -> Result<Self> {
        if !(cutoff > 0.0) {
            return Err(Error::InvalidInput(format!("cutoff must be > 0, got {cutoff}")));
        }
        let rule = kronrod_15_nodes();
        let width = PI / seq.duration;
        let limit = cutoff.min(LOBES_PER_PULSE * (seq.pulses.max(2) as f64) * width);
        let (mut nodes, mut weights) = (Vec::new(), Vec::new());
        let panels = (limit / width).ceil() as usize;
        for k in 0..panels {
            let a = k as f64 * width;
            let b = ((k + 1) as f64 * width).min(limit);
            let (h, m) = (0.5 * (b - a), 0.5 * (a + b));
            for &(x, w, _) in &rule {
                let om = m + h * x;
                nodes.push(om);
                weights.push(h * w * filter_function(seq, om) / PI);
            }
        }
        if cutoff > limit {
            let (ua, ub) = (limit.ln(), cutoff.ln());
            let panels = ((ub - ua) / 0.25).ceil() as usize;
            let du = (ub - ua) / panels as f64;
            for k in 0..panels {
                let m = ua + (k as f64 + 0.5) * du;
                for &(x, w, _) in &rule {
                    let om = (m + 0.5 * du * x).exp();
                    nodes.push(om);
                    weights.push(0.5 * du * w * om * tail_filter(seq, om) / PI);
                }
            }
        }
        Ok(Self { nodes, weights })
    }

    /// Φ[J] = Σ w_n·J(ω_n).
    pub fn apply<J: Fn(f64) -> f64>(&self, j: &J) -> f64 {
        self.nodes.iter().zip(&self.weights).map(|(w, c)| c * j(*w)).sum()
    }
}

/// κ_N(ω_c) = (1/πt)∫₀^{ω_c} F dω: the flat-spectrum normalization.
pub fn filter_normalization(seq: &PulseSequence, cutoff: f64) -> Result<f64> {
    Ok(dephasing_function(&|_| 1.0, seq, cutoff)?.value / seq.duration)
}

/// C = e^{−Φ}.
pub fn coherence(phi: f64) -> f64 {
    (-phi).exp()
}

/// T₂ defined by Φ(T₂) = 1, bracketed by doubling from `t_max`/2²⁰ and
/// bisected to 10⁻⁶ relative. Φ must be non-decreasing in t.
pub fn t2_extract<P: FnMut(f64) -> Result<f64>>(mut phi: P, t_max: f64) -> Result<f64> {
    if !(t_max > 0.0) {
        return Err(Error::InvalidInput(format!("t_max must be > 0, got {t_max}")));
    }
    let mut lo = t_max / (1u64 << 20) as f64;
    if phi(lo)? >= 1.0 {
        return Err(Error::InvalidInput(format!("Φ already ≥ 1 at t = {lo:.3e} s; lower the search start")));
    }
    let mut hi = lo;
    loop {
        hi = (2.0 * hi).min(t_max);
        let v = phi(hi)?;
        if v >= 1.0 {
            break;
        }
        if hi >= t_max {
            return Err(Error::NoCrossing { t_max, phi_max: v });
        }
        lo = hi;
    }
    while hi - lo > 1e-6 * hi {
        let mid = 0.5 * (lo + hi);
        if phi(mid)? >= 1.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// T₂ of a fixed-N sequence family under spectrum J (the sequence's
/// duration is varied).
pub fn t2_for_sequence<J: Fn(f64) -> f64>(j: &J, seq: &PulseSequence, cutoff: f64, t_max: f64) -> Result<f64> {
    t2_extract(|t| Ok(dephasing_function(j, &seq.with_duration(t)?, cutoff)?.value), t_max)
}

/// How a coupling strength quoted in MHz maps to rad/s.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DeltaConvention {
    /// Δ = Δ_MHz·10⁶ s⁻¹.
    #[default]
    Plain,
    /// Δ = 2π·Δ_MHz·10⁶ rad/s.
    Angular,
}

impl DeltaConvention {
    /// Δ in s⁻¹ from a value in MHz.
    pub fn from_mhz(self, mhz: f64) -> f64 {
        match self {
            Self::Plain => mhz * 1e6,
            Self::Angular => 2.0 * PI * mhz * 1e6,
        }
    }
}

/// Ornstein–Uhlenbeck spin bath with Lorentzian spectrum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OuBath {
    /// Coupling strength Δ in s⁻¹.
    pub delta: f64,
    /// Correlation time τ_c in seconds.
    pub tau_c: f64,
}

impl OuBath {
    /// Validated constructor.
    pub fn new(delta: f64, tau_c: f64) -> Result<Self> {
        if !(delta > 0.0 && tau_c > 0.0 && delta.is_finite() && tau_c.is_finite()) {
            return Err(Error::InvalidInput(format!("OU bath needs Δ > 0 and τ_c > 0, got {delta}, {tau_c}")));
        }
        Ok(Self { delta, tau_c })
    }

    /// From Δ in MHz (under `convention`) and τ_c in ns.
    pub fn from_mhz_ns(delta_mhz: f64, tau_c_ns: f64, convention: DeltaConvention) -> Result<Self> {
        Self::new(convention.from_mhz(delta_mhz), tau_c_ns * 1e-9)
    }

    /// J(ω) = (Δ²τ_c/π)/(1 + (ωτ_c)²).
    pub fn spectrum(&self, omega: f64) -> f64 {
        ou_bath_spectrum(self.delta, self.tau_c, omega)
    }

    /// Stationary variance Δ²/π of the detuning process whose spectrum, in
    /// the one-sided convention of Φ, is [`Self::spectrum`].
    pub fn variance(&self) -> f64 {
        self.delta * self.delta / PI
    }
}

/// (Δ²τ_c/π)/(1 + (ωτ_c)²).
pub fn ou_bath_spectrum(delta: f64, tau_c: f64, omega: f64) -> f64 {
    delta * delta * tau_c / PI / (1.0 + (omega * tau_c).powi(2))
}

/// Monte-Carlo estimate of Φ = −ln|⟨e^{iφ}⟩| for an OU detuning process
/// under an echo sequence, with its one-sigma statistical error.
///
/// Each trajectory draws from its own ChaCha stream (stream index =
/// trajectory index), starts in the stationary distribution, advances by
/// the exact OU transition, and accumulates φ = ∫f(s)δ(s)ds by the
/// trapezoid rule on a grid aligned with the pulse times.
pub fn ou_monte_carlo(
    bath: &OuBath,
    seq: &PulseSequence,
    trajectories: usize,
    steps_per_tau: usize,
    seed: u64,
) -> Result<Estimate<f64>> {
    if trajectories < 2 || steps_per_tau == 0 {
        return Err(Error::InvalidInput("Monte-Carlo needs ≥ 2 trajectories and ≥ 1 step per τ_c".into()));
    }
    let bounds = seq.boundaries();
    // Steps per segment so that h ≤ τ_c/steps_per_tau.
    let segments: Vec<(f64, usize)> = bounds
        .windows(2)
        .map(|w| {
            let len = w[1] - w[0];
            let n = ((len / bath.tau_c) * steps_per_tau as f64).ceil().max(1.0) as usize;
            (len / n as f64, n)
        })
        .collect();
    let sigma = bath.variance().sqrt();
    let (mut sum_c, mut sum_s, mut sum_c2) = (0.0, 0.0, 0.0);
    for k in 0..trajectories {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(k as u64);
        let z0: f64 = StandardNormal.sample(&mut rng);
        let mut x = sigma * z0;
        let mut phase = 0.0;
        for (s, &(h, n)) in segments.iter().enumerate() {
            let sign = if s % 2 == 0 { 1.0 } else { -1.0 };
            let decay = (-h / bath.tau_c).exp();
            let kick = sigma * (1.0 - decay * decay).sqrt();
            for _ in 0..n {
                let z: f64 = StandardNormal.sample(&mut rng);
                let next = x * decay + kick * z;
                phase += sign * 0.5 * h * (x + next);
                x = next;
            }
        }
        let (s, c) = phase.sin_cos();
        sum_c += c;
        sum_s += s;
        sum_c2 += c * c;
    }
    let m = trajectories as f64;
    let mean_c = sum_c / m;
    let mean_s = sum_s / m;
    let mag = mean_c.hypot(mean_s);
    let var_c = (sum_c2 / m - mean_c * mean_c).max(0.0) * m / (m - 1.0);
    let se = (var_c / m).sqrt();
    Ok(Estimate { value: -mag.ln(), error: se / mag })
}

/// One measured or synthesized coherence value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoherencePoint {
    /// CPMG pulse count N.
    pub pulses: usize,
    /// Total evolution time in seconds.
    pub time: f64,
    /// Coherence C ∈ (0, 1].
    pub coherence: f64,
    /// Optional one-sigma uncertainty of C.
    pub sigma: Option<f64>,
}

/// A set of coherence points.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CoherenceTrace {
    /// Points in acquisition order.
    pub points: Vec<CoherencePoint>,
}

/// A (pulses, time) acquisition schedule.
pub type Schedule = Vec<(usize, f64)>;

/// Default CPMG schedule: N ∈ {8, 16, 32, 64}, each with `per_n` times
/// placing πN/t log-uniformly over 2π·[0.5, 8] MHz.
pub fn default_schedule(per_n: usize) -> Schedule {
    let mut out = Vec::new();
    for n in [8usize, 16, 32, 64] {
        for k in 0..per_n {
            let frac = if per_n == 1 { 0.5 } else { k as f64 / (per_n - 1) as f64 };
            let f = 0.5e6 * 16f64.powf(frac);
            out.push((n, n as f64 / (2.0 * f)));
        }
    }
    out
}

/// C(N, t) = e^{−Φ} under CPMG for each schedule entry.
pub fn synthesize_trace<J: Fn(f64) -> f64>(j: &J, schedule: &[(usize, f64)], cutoff: f64) -> Result<CoherenceTrace> {
    let points = schedule
        .iter()
        .map(|&(n, t)| {
            let phi = dephasing_function(j, &PulseSequence::cpmg(n, t)?, cutoff)?.value;
            Ok(CoherencePoint { pulses: n, time: t, coherence: coherence(phi), sigma: None })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CoherenceTrace { points })
}

/// Result of a spectral reconstruction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reconstruction {
    /// Reconstructed J at the filter peaks, sorted by frequency.
    pub spectrum: NoiseSpectrum,
    /// Non-fatal warnings (e.g. broadband filters for N < 8).
    pub warnings: Vec<String>,
}

/// Reconstructs J from CPMG coherence: each (N, t, C) gives
/// J(ω_peak) = −ln C/(κ_N·t), with ω_peak the filter maximum and κ_N the
/// flat-spectrum normalization at the cutoff (exact for flat spectra).
pub fn reconstruct_spectrum(trace: &CoherenceTrace, cutoff: f64) -> Result<Reconstruction> {
    let mut violations = Vec::new();
    for (i, p) in trace.points.iter().enumerate() {
        if !(p.coherence > 0.0 && p.coherence <= 1.0) {
            violations.push(format!("point {i}: coherence must lie in (0, 1], got {}", p.coherence));
        }
        if p.pulses == 0 || !(p.time > 0.0) {
            violations.push(format!("point {i}: needs N ≥ 1 and t > 0"));
        }
    }
    if trace.points.is_empty() {
        violations.push("trace has no points".into());
    }
    if !violations.is_empty() {
        return Err(Error::InvalidInput(violations.join("; ")));
    }
    let mut warnings = Vec::new();
    let mut samples = Vec::with_capacity(trace.points.len());
    for p in &trace.points {
        if p.pulses < 8 {
            warnings.push(format!("N = {} < 8: filter is broadband, reconstruction is biased", p.pulses));
        }
        let seq = PulseSequence::cpmg(p.pulses, p.time)?;
        let kappa = filter_normalization(&seq, cutoff)?;
        let j = -p.coherence.ln() / (kappa * p.time);
        let err = p.sigma.map_or(0.0, |s| s / p.coherence / (kappa * p.time));
        samples.push((filter_peak(&seq), j.max(0.0), err));
    }
    samples.sort_by(|a, b| a.0.total_cmp(&b.0));
    if samples.windows(2).any(|w| w[1].0 <= w[0].0) {
        return Err(Error::InvalidInput("two trace points map to the same filter frequency".into()));
    }
    let metadata = SpectrumMetadata { label: Some("CPMG reconstruction".into()), ..Default::default() };
    let spectrum = NoiseSpectrum::new(
        samples.iter().map(|s| s.0).collect(),
        samples.iter().map(|s| s.1).collect(),
        samples.iter().map(|s| s.2).collect(),
        Provenance::Measured,
        metadata,
    )?;
    Ok(Reconstruction { spectrum, warnings })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pulse_times_follow_cpmg_convention() {
        let s = PulseSequence::cpmg(4, 8.0).unwrap();
        assert_eq!(s.pulse_times(), vec![1.0, 3.0, 5.0, 7.0]);
        assert_eq!(PulseSequence::hahn(2.0).unwrap().pulse_times(), vec![1.0]);
        assert!(PulseSequence::new(SequenceKind::Hahn, 2, 1.0).is_err());
    }

    #[test]
    fn segment_filter_matches_hahn_closed_form() {
        let t = 3.7e-6;
        let seq = PulseSequence::hahn(t).unwrap();
        for k in 1..200 {
            let w = k as f64 * 1.3e5;
            let (a, b) = (filter_function(&seq, w), hahn_filter(w, t));
            assert!((a - b).abs() <= 1e-10 * b.max(1e-30), "ω = {w}: {a} vs {b}");
        }
    }

    #[test]
    fn flat_spectrum_gives_unit_normalization_without_cutoff() {
        for n in [1, 2, 8, 33] {
            let seq = PulseSequence::cpmg(n, 5e-6).unwrap();
            let kappa = filter_normalization(&seq, 1e15).unwrap();
            assert!((kappa - 1.0).abs() < 1e-6, "N = {n}: κ = {kappa}");
        }
    }

    #[test]
    fn linear_phi_gives_its_time_constant() {
        let t2 = t2_extract(|t| Ok(t / 3e-6), 1e-3).unwrap();
        assert!((t2 / 3e-6 - 1.0).abs() < 1e-5);
        assert!(matches!(t2_extract(|t| Ok(t), 0.5), Err(Error::NoCrossing { .. })));
    }

    #[test]
    fn ou_spectrum_half_width() {
        let b = OuBath::new(2e6, 1e-8).unwrap();
        assert!((b.spectrum(0.0) - 4e12 * 1e-8 / PI).abs() < 1e-9);
        assert!((b.spectrum(1e8) / b.spectrum(0.0) - 0.5).abs() < 1e-15);
    }
}
