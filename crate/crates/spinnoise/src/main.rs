//! Command-line driver: every subcommand reads one TOML configuration,
//! writes its results to an output directory and finishes with a manifest.

use clap::{Args, Parser, Subcommand};
use spinnoise::config::{OutputFormat, RunConfig, SpectrumTarget};
use spinnoise::dephasing::{
    coherence, default_schedule, dephasing_function, reconstruct_spectrum, synthesize_trace, t2_extract, OuBath,
    PulseSequence,
};
use spinnoise::error::{Error, Result};
use spinnoise::fit::{fit_lorentzian, fit_lorentzian_filtered, FitData, FitReport};
use spinnoise::io::{fmt_f64, hash_bytes, read_trace_csv, spectrum_rows, trace_rows, KernelCache, OutputSink, ResultManifest};
use spinnoise::magnetics::lab_susceptibility;
use spinnoise::spectrum::{jem_averaged, jem_cavity, jem_film, momentum_filter_map, NoiseSpectrum, SweepStats};
use spinnoise::validation::{run_all, SuiteResult, ValidationInputs};
use serde::Serialize;
use std::f64::consts::PI;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

/// Magnetic dephasing noise of spin qubits near ferromagnetic metasurfaces.
#[derive(Parser, Debug)]
#[command(name = "spinnoise", version, about)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct GlobalArgs {
    /// Run configuration (TOML with unit-suffixed keys); defaults apply when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Output directory (overrides `output.directory`).
    #[arg(long, global = true, value_name = "DIR")]
    output: Option<PathBuf>,
    /// Worker threads (overrides `solver.workers`; 0 = all cores).
    #[arg(long, global = true, value_name = "N")]
    workers: Option<usize>,
    /// Kernel cache directory; solved momentum nodes are reused across runs.
    #[arg(long, global = true, value_name = "DIR")]
    cache: Option<PathBuf>,
    /// Seed of the stochastic oracles (overrides `run.seed`).
    #[arg(long, global = true, value_name = "U64")]
    seed: Option<u64>,
    /// Reciprocal-lattice truncation order (overrides `solver.truncation`).
    #[arg(long, global = true, value_name = "ORDER")]
    truncation: Option<usize>,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Laboratory-frame LLG susceptibility over the sweep frequencies.
    Susceptibility,
    /// Noise spectra J(ω) of the configured targets at every sweep height.
    Spectrum,
    /// Momentum filter map of the configured geometry.
    FilterMap,
    /// Φ(t), C(t) and T₂ for the intrinsic and near-surface noise models.
    Dephasing,
    /// Spectrum reconstruction and Lorentzian fit from CPMG coherence data.
    Reconstruct,
    /// Oracle comparisons; exits with 4 when any suite fails.
    Validate,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Susceptibility => "susceptibility",
            Command::Spectrum => "spectrum",
            Command::FilterMap => "filter-map",
            Command::Dephasing => "dephasing",
            Command::Reconstruct => "reconstruct",
            Command::Validate => "validate",
        }
    }
}

const EXIT_VALIDATION: u8 = 4;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(EXIT_VALIDATION),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn load_config(g: &GlobalArgs) -> Result<RunConfig> {
    let mut config = match &g.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::from_toml("", None)?,
    };
    if let Some(dir) = &g.output {
        config.output.directory = dir.clone();
    }
    if let Some(w) = g.workers {
        config.solver.workers = w;
    }
    if let Some(s) = g.seed {
        config.seed = s;
    }
    if let Some(t) = g.truncation {
        config.solver.order = t;
    }
    let v = config.violations();
    if !v.is_empty() {
        return Err(Error::Config(v));
    }
    Ok(config)
}

/// Per-run state: configuration, writer and solver statistics.
struct Run {
    config: RunConfig,
    sink: OutputSink,
    cache: Option<KernelCache>,
    stats: SweepStats,
}

impl Run {
    fn wants(&self, f: OutputFormat) -> bool {
        self.config.output.formats.contains(&f)
    }

    fn settings(&self) -> spinnoise::spectrum::MetasurfaceSettings {
        let mut s = self.config.solver;
        s.workers = self.config.resolved_workers();
        s
    }

    fn absorb(&mut self, s: &SweepStats) {
        self.stats.nodes += s.nodes;
        self.stats.cache_hits += s.cache_hits;
        self.stats.iterations += s.iterations;
        self.stats.max_residual = self.stats.max_residual.max(s.max_residual);
    }

    fn csv(&mut self, name: &str, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
        if self.wants(OutputFormat::Csv) {
            self.sink.write_csv(name, header, rows)?;
        }
        Ok(())
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        if self.wants(OutputFormat::Json) {
            self.sink.write_json(name, value)?;
        }
        Ok(())
    }
}

fn run(cli: &Cli) -> Result<bool> {
    let start = Instant::now();
    let config = load_config(&cli.global)?;
    let sink = OutputSink::create(&config.output.directory)?;
    let cache = cli.global.cache.as_ref().map(KernelCache::open).transpose()?;
    // The saved configuration drops the worker count and output location,
    // neither of which changes results, so that outputs are byte-identical
    // for any --workers and --output.
    let mut canonical = config.clone();
    canonical.solver.workers = 0;
    canonical.output.directory = PathBuf::from("out");
    let canonical = canonical.to_toml();
    let mut run = Run { config, sink, cache, stats: SweepStats::default() };
    run.sink.write_bytes("config.toml", canonical.as_bytes())?;

    let command = cli.command;
    eprintln!("spinnoise {}: writing to {}", command.name(), run.sink.dir().display());
    let ok = match command {
        Command::Susceptibility => susceptibility(&mut run).map(|_| true),
        Command::Spectrum => spectrum(&mut run).map(|_| true),
        Command::FilterMap => filter_map(&mut run).map(|_| true),
        Command::Dephasing => dephasing(&mut run).map(|_| true),
        Command::Reconstruct => reconstruct(&mut run).map(|_| true),
        Command::Validate => validate(&mut run),
    }?;

    let manifest = ResultManifest {
        artifact_version: env!("CARGO_PKG_VERSION").into(),
        command: command.name().into(),
        config_hash: hash_bytes(canonical.as_bytes()),
        outputs: run.sink.records().to_vec(),
        wall_clock_seconds: start.elapsed().as_secs_f64(),
        solver_iterations: run.stats.iterations,
        max_residual: run.stats.max_residual,
        cache_hits: run.stats.cache_hits,
    };
    run.sink.write_json("manifest.json", &manifest)?;
    Ok(ok)
}

fn susceptibility(run: &mut Run) -> Result<()> {
    const NAMES: [&str; 3] = ["x", "y", "z"];
    let mut header = vec!["frequency_hz".to_string(), "omega_rad_per_s".to_string()];
    for a in NAMES {
        for b in NAMES {
            header.push(format!("re_chi_{a}{b}"));
            header.push(format!("im_chi_{a}{b}"));
        }
    }
    let mut rows = Vec::new();
    for &w in &run.config.sweep.omegas {
        let chi = lab_susceptibility(&run.config.material, w)?.value;
        let mut row = vec![fmt_f64(w / (2.0 * PI)), fmt_f64(w)];
        for a in 0..3 {
            for b in 0..3 {
                row.push(fmt_f64(chi[(a, b)].re));
                row.push(fmt_f64(chi[(a, b)].im));
            }
        }
        rows.push(row);
    }
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    run.csv("susceptibility.csv", &header, &rows)?;
    let m = &run.config.material;
    #[derive(Serialize)]
    struct Summary {
        omega_1_rad_per_s: f64,
        omega_2_rad_per_s: f64,
        omega_m_rad_per_s: f64,
        lab_rotation_rad: f64,
    }
    let summary = Summary {
        omega_1_rad_per_s: m.omega_1(),
        omega_2_rad_per_s: m.omega_2(),
        omega_m_rad_per_s: m.omega_m(),
        lab_rotation_rad: m.lab_rotation_angle(),
    };
    run.json("susceptibility.json", &summary)
}

fn height_tag(h: f64) -> String {
    format!("{:.1}nm", h * 1e9)
}

fn write_spectrum(run: &mut Run, stem: &str, s: &NoiseSpectrum) -> Result<()> {
    let (header, rows) = spectrum_rows(s);
    run.csv(&format!("{stem}.csv"), &header, &rows)?;
    run.json(&format!("{stem}.json"), s)
}

fn metasurface_spectrum(run: &mut Run, height: f64) -> Result<NoiseSpectrum> {
    let settings = run.settings();
    let mut probe = run.config.probe;
    probe.height = height;
    let (s, stats) = jem_averaged(
        &run.config.geometry,
        &run.config.material,
        &probe,
        &run.config.sweep.omegas,
        &settings,
        run.cache.as_ref(),
    )?;
    run.absorb(&stats);
    Ok(s)
}

fn spectrum(run: &mut Run) -> Result<()> {
    let targets = run.config.sweep.targets.clone();
    let heights = run.config.sweep.heights.clone();
    let omegas = run.config.sweep.omegas.clone();
    for &h in &heights {
        let mut probe = run.config.probe;
        probe.height = h;
        for &target in &targets {
            eprintln!("  {} at d = {}", target.name(), height_tag(h));
            let s = match target {
                SpectrumTarget::Metasurface => metasurface_spectrum(run, h)?,
                SpectrumTarget::Film => {
                    let grid = run.config.solver.grid(h);
                    jem_film(&run.config.material, run.config.geometry.thickness, &probe, &omegas, &grid)?
                }
                SpectrumTarget::Cavity => jem_cavity(&run.config.cavity, &probe, &omegas)?,
            };
            write_spectrum(run, &format!("spectrum_{}_{}", target.name(), height_tag(h)), &s)?;
        }
    }
    Ok(())
}

fn filter_map(run: &mut Run) -> Result<()> {
    let fm = run.config.filter_map;
    let settings = run.settings();
    let map = momentum_filter_map(
        &run.config.geometry,
        &run.config.material,
        &run.config.probe,
        fm.omega,
        fm.q_max,
        fm.side,
        &settings,
        run.cache.as_ref(),
    )?;
    let n = map.side;
    let rows: Vec<Vec<String>> = (0..n)
        .flat_map(|j| (0..n).map(move |i| (i, j)))
        .map(|(i, j)| vec![fmt_f64(map.coordinate(i)), fmt_f64(map.coordinate(j)), fmt_f64(map.values[j * n + i])])
        .collect();
    run.csv("filter_map.csv", &["qx_per_m", "qy_per_m", "integrand"], &rows)?;
    if run.wants(OutputFormat::Pgm) {
        run.sink.write_pgm("filter_map.pgm", n, n, &map.values)?;
    }
    #[derive(Serialize)]
    struct Summary {
        omega_rad_per_s: f64,
        q_max_per_m: f64,
        side: usize,
        total: f64,
        peak_momentum_per_m: f64,
        residual_quarter_turn: f64,
        residual_half_turn: f64,
        geometry_hash: String,
    }
    let summary = Summary {
        omega_rad_per_s: map.omega,
        q_max_per_m: map.q_max,
        side: n,
        total: map.total(),
        peak_momentum_per_m: map.peak_momentum(),
        residual_quarter_turn: map.rotation_residual(1),
        residual_half_turn: map.rotation_residual(2),
        geometry_hash: map.geometry_hash.clone(),
    };
    run.json("filter_map.json", &summary)
}

/// Φ(t) of one noise model on a time grid, plus its T₂.
#[derive(Serialize)]
struct DephasingCurve {
    label: String,
    t2_seconds: Option<f64>,
    times: Vec<f64>,
    phi: Vec<f64>,
}

fn dephasing(run: &mut Run) -> Result<()> {
    let d = run.config.dephasing;
    let seq0 = PulseSequence::new(d.sequence, d.pulses, d.t_max)?;
    let em = if d.include_em { Some(metasurface_spectrum(run, run.config.probe.height)?) } else { None };
    if let Some(em) = &em {
        write_spectrum(run, "jem_metasurface", em)?;
    }
    let far = d.intrinsic;
    let near = d.near_surface;
    let models: Vec<(&str, Box<dyn Fn(f64) -> f64>)> = vec![
        ("intrinsic", Box::new(move |w| far.spectrum(w))),
        (
            "near-surface",
            Box::new(move |w| near.spectrum(w) + em.as_ref().map_or(0.0, |s| s.value_at(w))),
        ),
    ];
    let mut curves = Vec::new();
    for (label, j) in &models {
        let t2 = match t2_extract(|t| Ok(dephasing_function(j, &seq0.with_duration(t)?, d.cutoff)?.value), d.t_max) {
            Ok(t) => Some(t),
            Err(Error::NoCrossing { .. }) => None,
            Err(e) => return Err(e),
        };
        curves.push(DephasingCurve { label: label.to_string(), t2_seconds: t2, times: Vec::new(), phi: Vec::new() });
    }
    // Common time grid spanning both decays.
    let t2s: Vec<f64> = curves.iter().filter_map(|c| c.t2_seconds).collect();
    let lo = t2s.iter().copied().fold(d.t_max, f64::min) / 20.0;
    let hi = (t2s.iter().copied().fold(0.0, f64::max) * 5.0).min(d.t_max).max(lo * 10.0);
    let n = d.time_points;
    let times: Vec<f64> = (0..n).map(|k| lo * (hi / lo).powf(k as f64 / (n - 1) as f64)).collect();
    for (curve, (_, j)) in curves.iter_mut().zip(&models) {
        curve.times = times.clone();
        curve.phi = times
            .iter()
            .map(|&t| Ok(dephasing_function(j, &seq0.with_duration(t)?, d.cutoff)?.value))
            .collect::<Result<Vec<_>>>()?;
    }
    let rows: Vec<Vec<String>> = (0..n)
        .map(|k| {
            let mut row = vec![fmt_f64(times[k])];
            for c in &curves {
                row.push(fmt_f64(c.phi[k]));
                row.push(fmt_f64(coherence(c.phi[k])));
            }
            row
        })
        .collect();
    run.csv("dephasing.csv", &["t_seconds", "phi_intrinsic", "c_intrinsic", "phi_near_surface", "c_near_surface"], &rows)?;
    for c in &curves {
        match c.t2_seconds {
            Some(t) => eprintln!("  T2 ({}) = {:.4} µs", c.label, t * 1e6),
            None => eprintln!("  T2 ({}) beyond t_max", c.label),
        }
    }
    run.json("dephasing.json", &curves)
}

#[derive(Serialize)]
struct ReconstructReport {
    synthesized: bool,
    warnings: Vec<String>,
    point_fit: Option<FitReport>,
    filtered_fit: Option<FitReport>,
    fit_errors: Vec<String>,
}

fn reconstruct(run: &mut Run) -> Result<()> {
    let d = run.config.dephasing;
    let (trace, synthesized) = match &run.config.reconstruct.trace {
        Some(path) => (read_trace_csv(path)?, false),
        None => {
            let bath: OuBath = d.intrinsic;
            (synthesize_trace(&|w| bath.spectrum(w), &default_schedule(6), d.cutoff)?, true)
        }
    };
    if synthesized {
        let (header, rows) = trace_rows(&trace);
        run.csv("trace.csv", &header, &rows)?;
    }
    let rec = reconstruct_spectrum(&trace, d.cutoff)?;
    write_spectrum(run, "reconstructed", &rec.spectrum)?;
    let mut fit_errors = Vec::new();
    let s = &rec.spectrum;
    let sigma: Option<Vec<f64>> = s.errors.iter().all(|e| *e > 0.0).then(|| s.errors.clone());
    let data = FitData { omega: &s.omega, values: &s.values, sigma: sigma.as_deref() };
    let point_fit = fit_lorentzian(&data).map_err(|e| fit_errors.push(format!("point fit: {e}"))).ok();
    let filtered_fit = fit_lorentzian_filtered(&trace, d.cutoff).map_err(|e| fit_errors.push(format!("filtered fit: {e}"))).ok();
    if let Some(f) = &filtered_fit {
        eprintln!("  Δ = {:.4e} s⁻¹, τ_c = {:.4e} s", f.delta(), f.tau_c());
    }
    let report = ReconstructReport { synthesized, warnings: rec.warnings, point_fit, filtered_fit, fit_errors };
    run.json("reconstruct.json", &report)
}

fn validate(run: &mut Run) -> Result<bool> {
    let inputs = ValidationInputs {
        material: run.config.material,
        probe: run.config.probe,
        cavity: run.config.cavity,
        cutoff: run.config.dephasing.cutoff,
        workers: run.config.resolved_workers(),
        seed: run.config.seed,
    };
    let results: Vec<SuiteResult> = run_all(&inputs);
    let rows: Vec<Vec<String>> = results
        .iter()
        .map(|r| vec![r.name.clone(), (if r.passed { "pass" } else { "fail" }).into(), fmt_f64(r.metric), fmt_f64(r.tolerance), r.detail.clone()])
        .collect();
    for r in &results {
        eprintln!("  [{}] {:<24} {:.3e} (≤ {:.0e}) {}", if r.passed { "pass" } else { "FAIL" }, r.name, r.metric, r.tolerance, r.detail);
    }
    run.csv("validation.csv", &["suite", "status", "metric", "tolerance", "detail"], &rows)?;
    run.json("validation.json", &results)?;
    Ok(results.iter().all(|r| r.passed))
}
