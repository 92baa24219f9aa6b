//! Dephasing oracles: closed-form Ornstein–Uhlenbeck decay and frozen T₂.

use spinnoise::dephasing::{
    default_schedule, dephasing_function, reconstruct_spectrum, synthesize_trace, t2_for_sequence, DeltaConvention, OuBath,
    PulseSequence, DEFAULT_CUTOFF,
};

/// Hahn-echo Φ for a Lorentzian bath J = (Δ²τ/π)/(1 + ω²τ²).
fn hahn_closed_form(bath: &OuBath, t: f64) -> f64 {
    let (d, tau) = (bath.delta, bath.tau_c);
    d * d * tau * tau / std::f64::consts::PI * (t / tau - 3.0 + 4.0 * (-t / (2.0 * tau)).exp() - (-t / tau).exp())
}

#[test]
fn hahn_matches_closed_form() {
    let bath = OuBath::from_mhz_ns(4.5, 19.0, DeltaConvention::Plain).unwrap();
    for t in [0.1e-6, 1e-6, 5e-6, 20e-6] {
        let phi = dephasing_function(&|w| bath.spectrum(w), &PulseSequence::hahn(t).unwrap(), DEFAULT_CUTOFF).unwrap().value;
        let exact = hahn_closed_form(&bath, t);
        assert!((phi / exact - 1.0).abs() < 1e-6, "t = {t:e}: {phi:e} vs {exact:e}");
    }
}

#[test]
fn intrinsic_bath_t2_is_frozen() {
    // Far-from-surface bath, plain Δ convention: Φ(T₂) = 1 at 8.2223 µs.
    let bath = OuBath::from_mhz_ns(4.5, 19.0, DeltaConvention::Plain).unwrap();
    let t2 = t2_for_sequence(&|w| bath.spectrum(w), &PulseSequence::hahn(1e-6).unwrap(), DEFAULT_CUTOFF, 1e-3).unwrap();
    assert!((t2 * 1e6 - 8.2223).abs() < 1e-3, "T2 = {} µs", t2 * 1e6);
}

#[test]
fn flat_spectrum_reconstructs_exactly() {
    let j0 = 3.0e4;
    let trace = synthesize_trace(&|_| j0, &default_schedule(3), DEFAULT_CUTOFF).unwrap();
    let rec = reconstruct_spectrum(&trace, DEFAULT_CUTOFF).unwrap();
    for v in &rec.spectrum.values {
        assert!((v / j0 - 1.0).abs() < 1e-9, "{v} vs {j0}");
    }
}

#[test]
fn cpmg_suppresses_slow_noise_relative_to_hahn() {
    let bath = OuBath::from_mhz_ns(4.5, 19.0, DeltaConvention::Plain).unwrap();
    let j = |w: f64| bath.spectrum(w);
    let t = 5e-6;
    let hahn = dephasing_function(&j, &PulseSequence::hahn(t).unwrap(), DEFAULT_CUTOFF).unwrap().value;
    let cpmg = dephasing_function(&j, &PulseSequence::cpmg(16, t).unwrap(), DEFAULT_CUTOFF).unwrap().value;
    // On a decreasing spectrum the CPMG window samples higher frequencies.
    assert!(cpmg < hahn);
}
