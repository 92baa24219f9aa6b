//! WebAssembly bindings for a single static demo page.
//!
//! Each exported function takes plain numbers and returns a JSON string,
//! so the page needs no bindings beyond `wasm-bindgen`'s generated glue.
//! The same functions are ordinary Rust and are tested natively.

use serde::Serialize;
use spinnoise::dephasing::{dephasing_function, t2_for_sequence, DeltaConvention, OuBath, PulseSequence, DEFAULT_CUTOFF};
use spinnoise::magnetics::{lab_susceptibility, LlgParams};
use spinnoise::spectrum::{jem_film, MetasurfaceSettings, QubitProbe};
use std::f64::consts::PI;
use wasm_bindgen::prelude::*;

#[derive(Serialize)]
struct Failure {
    error: String,
}

fn to_json<T: Serialize>(r: spinnoise::Result<T>) -> String {
    match r {
        Ok(v) => serde_json::to_string(&v),
        Err(e) => serde_json::to_string(&Failure { error: e.to_string() }),
    }
    .unwrap_or_else(|e| format!("{{\"error\":\"{e}\"}}"))
}

fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let n = n.max(2);
    (0..n).map(|k| lo * (hi / lo).powf(k as f64 / (n - 1) as f64)).collect()
}

#[derive(Serialize)]
pub struct SusceptibilitySweep {
    pub frequency_mhz: Vec<f64>,
    /// 𝓘m χ_yy and 𝓘m χ_zz in the laboratory frame.
    pub im_yy: Vec<f64>,
    pub im_zz: Vec<f64>,
    pub re_yy: Vec<f64>,
}

/// Laboratory-frame CoFeB susceptibility on a log frequency grid, with the
/// damping and anisotropy field (gauss) taken from the page.
pub fn susceptibility_sweep(f_min_mhz: f64, f_max_mhz: f64, points: usize, damping: f64, anisotropy_gauss: f64) -> spinnoise::Result<SusceptibilitySweep> {
    let mut llg = LlgParams::cofeb();
    llg.gilbert_damping = damping;
    llg.inplane_anisotropy_field = anisotropy_gauss * 1e-4;
    llg.validate()?;
    let freqs = log_grid(f_min_mhz, f_max_mhz, points);
    let mut out = SusceptibilitySweep { frequency_mhz: freqs.clone(), im_yy: vec![], im_zz: vec![], re_yy: vec![] };
    for f in freqs {
        let chi = lab_susceptibility(&llg, 2.0 * PI * f * 1e6)?.value;
        out.im_yy.push(chi[(1, 1)].im);
        out.im_zz.push(chi[(2, 2)].im);
        out.re_yy.push(chi[(1, 1)].re);
    }
    Ok(out)
}

#[derive(Serialize)]
pub struct FilmSpectrum {
    pub frequency_mhz: Vec<f64>,
    pub j_per_s: Vec<f64>,
}

/// NV-ensemble J_em above a uniform CoFeB film (reflection path).
pub fn film_spectrum(height_nm: f64, thickness_nm: f64, f_min_mhz: f64, f_max_mhz: f64, points: usize) -> spinnoise::Result<FilmSpectrum> {
    let probe = QubitProbe::nv_ensemble(height_nm * 1e-9);
    let freqs = log_grid(f_min_mhz, f_max_mhz, points);
    let omegas: Vec<f64> = freqs.iter().map(|f| 2.0 * PI * f * 1e6).collect();
    let settings = MetasurfaceSettings { panels: 1, angular: 64, q_min: 1e5, workers: 1, ..Default::default() };
    let s = jem_film(&LlgParams::cofeb(), thickness_nm * 1e-9, &probe, &omegas, &settings.grid(probe.height))?;
    Ok(FilmSpectrum { frequency_mhz: freqs, j_per_s: s.values })
}

#[derive(Serialize)]
pub struct EchoDecay {
    pub t2_us: f64,
    pub time_us: Vec<f64>,
    pub coherence: Vec<f64>,
}

/// Hahn-echo decay for a Lorentzian bath (Δ in MHz, plain convention;
/// τ_c in ns) plus a flat extra noise floor J₀ in s⁻¹.
pub fn hahn_echo(delta_mhz: f64, tau_ns: f64, floor_per_s: f64) -> spinnoise::Result<EchoDecay> {
    let bath = OuBath::from_mhz_ns(delta_mhz, tau_ns, DeltaConvention::Plain)?;
    let floor = floor_per_s.max(0.0);
    let j = |w: f64| bath.spectrum(w) + floor;
    let seq = PulseSequence::hahn(1e-6)?;
    let t2 = t2_for_sequence(&j, &seq, DEFAULT_CUTOFF, 1e-3)?;
    let times = log_grid(t2 / 20.0, t2 * 4.0, 48);
    let coherence = times
        .iter()
        .map(|&t| Ok((-dephasing_function(&j, &seq.with_duration(t)?, DEFAULT_CUTOFF)?.value).exp()))
        .collect::<spinnoise::Result<Vec<_>>>()?;
    Ok(EchoDecay { t2_us: t2 * 1e6, time_us: times.iter().map(|t| t * 1e6).collect(), coherence })
}

/// JSON form of [`susceptibility_sweep`].
#[wasm_bindgen(js_name = susceptibilitySweep)]
pub fn susceptibility_sweep_json(f_min_mhz: f64, f_max_mhz: f64, points: usize, damping: f64, anisotropy_gauss: f64) -> String {
    to_json(susceptibility_sweep(f_min_mhz, f_max_mhz, points, damping, anisotropy_gauss))
}

/// JSON form of [`film_spectrum`].
#[wasm_bindgen(js_name = filmSpectrum)]
pub fn film_spectrum_json(height_nm: f64, thickness_nm: f64, f_min_mhz: f64, f_max_mhz: f64, points: usize) -> String {
    to_json(film_spectrum(height_nm, thickness_nm, f_min_mhz, f_max_mhz, points))
}

/// JSON form of [`hahn_echo`].
#[wasm_bindgen(js_name = hahnEcho)]
pub fn hahn_echo_json(delta_mhz: f64, tau_ns: f64, floor_per_s: f64) -> String {
    to_json(hahn_echo(delta_mhz, tau_ns, floor_per_s))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dissipation_is_positive_and_linear_at_low_frequency() {
        let s = susceptibility_sweep(0.001, 0.01, 2, 0.019, 5.0).unwrap();
        assert!(s.im_yy.iter().all(|v| *v > 0.0));
        let ratio = s.im_yy[1] / s.im_yy[0];
        assert!((ratio / 10.0 - 1.0).abs() < 1e-3, "{ratio}");
    }

    #[test]
    fn film_noise_is_flat_in_the_mhz_range() {
        let s = film_spectrum(45.0, 5.0, 0.5, 5.0, 2).unwrap();
        let slope = (s.j_per_s[1] / s.j_per_s[0]).ln() / 10f64.ln();
        assert!(slope.abs() < 0.05, "{slope}");
    }

    #[test]
    fn noise_floor_shortens_t2() {
        let bare = hahn_echo(4.5, 19.0, 0.0).unwrap();
        let noisy = hahn_echo(4.5, 19.0, 2e5).unwrap();
        assert!(noisy.t2_us < bare.t2_us);
        assert!((bare.t2_us - 8.2223).abs() < 1e-2, "{}", bare.t2_us);
    }

    #[test]
    fn errors_are_reported_as_json() {
        let text = hahn_echo_json(-1.0, 19.0, 0.0);
        assert!(text.starts_with("{\"error\""), "{text}");
    }
}
