//! Run configuration.
//!
//! Configuration files are TOML. Every physical quantity carries its unit
//! in the key name (`height_nm = 45`, `saturation_magnetization_gauss =
//! 12500`); a quantity without a recognized suffix is rejected. Parsing
//! collects every problem (unknown keys, missing or ambiguous units,
//! failed invariants) and reports them together.
//!
//! [`RunConfig::to_toml`] writes the canonical form with SI suffixes, so
//! serializing a parsed file and parsing it again is exact.

use crate::constants::{GAMMA_E, MU_B};
use crate::dephasing::{DeltaConvention, OuBath, SequenceKind, DEFAULT_CUTOFF};
use crate::error::{Error, Result};
use crate::geometry::{Rectangle, UnitCellGeometry};
use crate::greens::{CavityModel, SlabRule};
use crate::magnetics::LlgParams;
use crate::spectrum::{MetasurfaceSettings, Orientation, QubitProbe};
use crate::vie::{KrylovMethod, Preconditioner, SolverOptions};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};
use toml::{Table, Value};

/// Physical dimension of a configuration quantity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dimension {
    /// Meters.
    Length,
    /// Tesla (μ₀H).
    Field,
    /// Angular frequency in rad/s (cyclic units are converted with 2π).
    Frequency,
    /// Seconds.
    Time,
    /// Radians.
    Angle,
    /// Kelvin.
    Temperature,
    /// Wavenumber in rad/m.
    Momentum,
    /// rad·s⁻¹·T⁻¹.
    Gyromagnetic,
    /// J/T.
    Moment,
    /// s⁻¹.
    Rate,
}

impl Dimension {
    /// Accepted suffixes with their factor to SI; the first is canonical.
    pub fn units(self) -> &'static [(&'static str, f64)] {
        match self {
            Self::Length => &[("m", 1.0), ("mm", 1e-3), ("um", 1e-6), ("nm", 1e-9)],
            Self::Field => &[("tesla", 1.0), ("mt", 1e-3), ("gauss", 1e-4)],
            Self::Frequency => &[
                ("rad_per_s", 1.0),
                ("hz", 2.0 * PI),
                ("khz", 2.0 * PI * 1e3),
                ("mhz", 2.0 * PI * 1e6),
                ("ghz", 2.0 * PI * 1e9),
            ],
            Self::Time => &[("s", 1.0), ("ms", 1e-3), ("us", 1e-6), ("ns", 1e-9)],
            Self::Angle => &[("rad", 1.0), ("deg", PI / 180.0)],
            Self::Temperature => &[("kelvin", 1.0)],
            Self::Momentum => &[("per_m", 1.0), ("per_um", 1e6), ("per_nm", 1e9)],
            Self::Gyromagnetic => &[("rad_per_s_per_tesla", 1.0), ("ghz_per_tesla", 2.0 * PI * 1e9)],
            Self::Moment => &[("joule_per_tesla", 1.0), ("bohr_magneton", MU_B)],
            Self::Rate => &[("per_s", 1.0)],
        }
    }

    fn canonical(self) -> &'static str {
        self.units()[0].0
    }
}

/// Keys read from one table, with the diagnostics they produced.
struct Section<'a> {
    name: String,
    table: Table,
    used: BTreeSet<String>,
    errors: &'a mut Vec<String>,
}

fn as_number(v: &Value) -> Option<f64> {
    match v {
        Value::Float(f) => Some(*f),
        Value::Integer(i) => Some(*i as f64),
        _ => None,
    }
}

impl<'a> Section<'a> {
    fn new(name: &str, table: Option<&Value>, errors: &'a mut Vec<String>) -> Self {
        let table = match table {
            Some(Value::Table(t)) => t.clone(),
            Some(_) => {
                errors.push(format!("`{name}` must be a table"));
                Table::new()
            }
            None => Table::new(),
        };
        Self { name: name.to_string(), table, used: BTreeSet::new(), errors }
    }

    fn path(&self, key: &str) -> String {
        format!("{}.{key}", self.name)
    }

    /// The single present key `base_<suffix>` with its SI factor and suffix.
    fn find(&mut self, base: &str, units: &[(&'static str, f64)]) -> Option<(String, f64, &'static str)> {
        let hits: Vec<(String, f64, &'static str)> = units
            .iter()
            .map(|(s, f)| (format!("{base}_{s}"), *f, *s))
            .filter(|(k, _, _)| self.table.contains_key(k))
            .collect();
        for (k, _, _) in &hits {
            self.used.insert(k.clone());
        }
        let suffixes = units.iter().map(|(s, _)| format!("_{s}")).collect::<Vec<_>>().join(", ");
        if self.table.contains_key(base) {
            self.used.insert(base.to_string());
            self.errors.push(format!("`{}` has no unit; use one of the suffixes {suffixes}", self.path(base)));
        }
        match hits.len() {
            0 => None,
            1 => hits.into_iter().next(),
            _ => {
                let keys = hits.iter().map(|h| h.0.clone()).collect::<Vec<_>>().join(", ");
                self.errors.push(format!("`{}` is given more than once ({keys})", self.path(base)));
                None
            }
        }
    }

    fn quantity_with(&mut self, base: &str, units: &[(&'static str, f64)], default: Option<f64>) -> f64 {
        match self.find(base, units) {
            Some((key, factor, _)) => match self.table.get(&key).and_then(as_number) {
                Some(v) => v * factor,
                None => {
                    self.errors.push(format!("`{}` must be a number", self.path(&key)));
                    f64::NAN
                }
            },
            None => default.unwrap_or_else(|| {
                if !self.table.contains_key(base) {
                    let s = units.iter().map(|(s, _)| format!("{base}_{s}")).collect::<Vec<_>>().join(" | ");
                    self.errors.push(format!("`{}` is required ({s})", self.name));
                }
                f64::NAN
            }),
        }
    }

    fn quantity(&mut self, base: &str, dim: Dimension, default: Option<f64>) -> f64 {
        self.quantity_with(base, dim.units(), default)
    }

    fn quantity_list(&mut self, base: &str, dim: Dimension) -> Option<Vec<f64>> {
        let (key, factor, _) = self.find(base, dim.units())?;
        match self.table.get(&key) {
            Some(Value::Array(a)) => {
                let v: Option<Vec<f64>> = a.iter().map(|x| as_number(x).map(|n| n * factor)).collect();
                if v.is_none() {
                    self.errors.push(format!("`{}` must be an array of numbers", self.path(&key)));
                }
                v
            }
            _ => {
                self.errors.push(format!("`{}` must be an array", self.path(&key)));
                None
            }
        }
    }

    fn raw(&mut self, key: &str) -> Option<Value> {
        let v = self.table.get(key).cloned();
        if v.is_some() {
            self.used.insert(key.to_string());
        }
        v
    }

    fn number(&mut self, key: &str, default: f64) -> f64 {
        match self.raw(key) {
            None => default,
            Some(v) => as_number(&v).unwrap_or_else(|| {
                self.errors.push(format!("`{}` must be a number", self.path(key)));
                f64::NAN
            }),
        }
    }

    fn integer(&mut self, key: &str, default: u64) -> u64 {
        match self.raw(key) {
            None => default,
            Some(Value::Integer(i)) if i >= 0 => i as u64,
            Some(_) => {
                self.errors.push(format!("`{}` must be a non-negative integer", self.path(key)));
                default
            }
        }
    }

    fn string(&mut self, key: &str, default: &str) -> String {
        match self.raw(key) {
            None => default.to_string(),
            Some(Value::String(s)) => s,
            Some(_) => {
                self.errors.push(format!("`{}` must be a string", self.path(key)));
                default.to_string()
            }
        }
    }

    fn choice<T: Copy>(&mut self, key: &str, default: T, options: &[(&str, T)]) -> T {
        let Some(v) = self.raw(key) else { return default };
        let names = options.iter().map(|o| format!("\"{}\"", o.0)).collect::<Vec<_>>().join(", ");
        match v {
            Value::String(s) => options.iter().find(|o| o.0 == s).map(|o| o.1).unwrap_or_else(|| {
                self.errors.push(format!("`{}` = \"{s}\" is not one of {names}", self.path(key)));
                default
            }),
            _ => {
                self.errors.push(format!("`{}` must be one of {names}", self.path(key)));
                default
            }
        }
    }

    fn boolean(&mut self, key: &str, default: bool) -> bool {
        match self.raw(key) {
            None => default,
            Some(Value::Boolean(b)) => b,
            Some(_) => {
                self.errors.push(format!("`{}` must be true or false", self.path(key)));
                default
            }
        }
    }

    fn strings(&mut self, key: &str, default: &[&str]) -> Vec<String> {
        match self.raw(key) {
            None => default.iter().map(|s| s.to_string()).collect(),
            Some(Value::Array(a)) if a.iter().all(|x| x.is_str()) => {
                a.iter().map(|x| x.as_str().unwrap_or_default().to_string()).collect()
            }
            Some(_) => {
                self.errors.push(format!("`{}` must be an array of strings", self.path(key)));
                Vec::new()
            }
        }
    }

    fn finish(self) {
        for (k, v) in &self.table {
            if self.used.contains(k) {
                continue;
            }
            if as_number(v).is_some() {
                self.errors.push(format!("unknown key `{}.{k}` (bare numbers need a recognized unit suffix)", self.name));
            } else {
                self.errors.push(format!("unknown key `{}.{k}`", self.name));
            }
        }
    }
}

/// A spectrum to compute in the `spectrum` command.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SpectrumTarget {
    /// Volume-integral metasurface spectrum of the configured geometry.
    Metasurface,
    /// Uniform film of the same thickness (reflection path).
    Film,
    /// Single-mode cavity.
    Cavity,
}

impl SpectrumTarget {
    /// Config/file name.
    pub fn name(self) -> &'static str {
        match self {
            Self::Metasurface => "metasurface",
            Self::Film => "film",
            Self::Cavity => "cavity",
        }
    }
}

/// Output formats.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OutputFormat {
    /// Comma-separated curves and grids.
    Csv,
    /// Metadata, fits and reports.
    Json,
    /// Portable graymap heatmaps.
    Pgm,
}

/// Frequency/height sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    /// Angular frequencies in rad/s, increasing.
    pub omegas: Vec<f64>,
    /// Probe heights in meters.
    pub heights: Vec<f64>,
    /// Spectra to compute.
    pub targets: Vec<SpectrumTarget>,
}

/// Momentum filter map request.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterMapConfig {
    /// Angular frequency in rad/s.
    pub omega: f64,
    /// Half-width of the q window in rad/m.
    pub q_max: f64,
    /// Cells per side (even).
    pub side: usize,
}

/// Dephasing model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DephasingConfig {
    /// How Δ values quoted in MHz convert to s⁻¹.
    pub delta_convention: DeltaConvention,
    /// Intrinsic (far-from-surface) spin bath.
    pub intrinsic: OuBath,
    /// Spin bath near the surface (modified by the film).
    pub near_surface: OuBath,
    /// Ultraviolet cutoff ω_c in rad/s.
    pub cutoff: f64,
    /// Sequence family.
    pub sequence: SequenceKind,
    /// Pulse count.
    pub pulses: usize,
    /// Longest evolution time considered, in seconds.
    pub t_max: f64,
    /// Number of log-spaced times in the Φ(t) table.
    pub time_points: usize,
    /// Add the computed metasurface J_em to the near-surface bath.
    pub include_em: bool,
}

/// Spectrum reconstruction request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconstructConfig {
    /// Coherence-trace CSV (relative paths resolve against the config file).
    pub trace: Option<PathBuf>,
}

/// Output settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputConfig {
    /// Output directory.
    pub directory: PathBuf,
    /// Formats to write.
    pub formats: Vec<OutputFormat>,
}

/// Complete, validated run configuration in SI units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    /// Film material.
    pub material: LlgParams,
    /// Unit cell.
    pub geometry: UnitCellGeometry,
    /// Probe (its height is the first sweep height).
    pub probe: QubitProbe,
    /// Sweep.
    pub sweep: SweepConfig,
    /// Metasurface solver and quadrature (workers = 0: available parallelism).
    pub solver: MetasurfaceSettings,
    /// Cavity reference.
    pub cavity: CavityModel,
    /// Momentum map.
    pub filter_map: FilterMapConfig,
    /// Dephasing model.
    pub dephasing: DephasingConfig,
    /// Reconstruction input.
    pub reconstruct: ReconstructConfig,
    /// Outputs.
    pub output: OutputConfig,
    /// Seed of stochastic oracles.
    pub seed: u64,
}

const SECTIONS: [&str; 12] = [
    "material",
    "geometry",
    "probe",
    "sweep",
    "solver",
    "quadrature",
    "cavity",
    "filter_map",
    "dephasing",
    "reconstruct",
    "output",
    "run",
];

fn parse_material(s: &mut Section) -> LlgParams {
    let d = LlgParams::cofeb();
    LlgParams {
        saturation_magnetization: s.quantity("saturation_magnetization", Dimension::Field, Some(d.saturation_magnetization)),
        effective_magnetization: s.quantity("effective_magnetization", Dimension::Field, Some(d.effective_magnetization)),
        gilbert_damping: s.number("gilbert_damping", d.gilbert_damping),
        inplane_anisotropy_field: s.quantity("inplane_anisotropy_field", Dimension::Field, Some(d.inplane_anisotropy_field)),
        easy_axis_angle: s.quantity("easy_axis_angle", Dimension::Angle, Some(d.easy_axis_angle)),
        gyromagnetic_ratio: s.quantity("gyromagnetic_ratio", Dimension::Gyromagnetic, Some(GAMMA_E)),
    }
}

fn parse_geometry(s: &mut Section) -> UnitCellGeometry {
    #[derive(Clone, Copy)]
    enum Preset {
        Ms1,
        Ms2,
        Film,
        Custom,
    }
    let preset = s.choice(
        "preset",
        Preset::Ms1,
        &[("metasurface-1", Preset::Ms1), ("metasurface-2", Preset::Ms2), ("uniform-film", Preset::Film), ("custom", Preset::Custom)],
    );
    let mut g = match preset {
        Preset::Ms1 => UnitCellGeometry::metasurface_1(),
        Preset::Ms2 => UnitCellGeometry::metasurface_2(s.quantity("rotation", Dimension::Angle, Some(PI / 6.0))),
        Preset::Film => {
            let period = s.quantity("period", Dimension::Length, Some(250e-9));
            UnitCellGeometry::uniform_film(period, 5e-9)
        }
        Preset::Custom => {
            let px = s.quantity("period_x", Dimension::Length, None);
            let py = s.quantity("period_y", Dimension::Length, None);
            let mut shapes = Vec::new();
            match s.raw("shapes") {
                Some(Value::Array(items)) => {
                    for (i, item) in items.iter().enumerate() {
                        let name = format!("geometry.shapes[{i}]");
                        let mut sh = Section::new(&name, Some(item), s.errors);
                        let r = Rectangle {
                            center: [
                                sh.quantity("center_x", Dimension::Length, None),
                                sh.quantity("center_y", Dimension::Length, None),
                            ],
                            width: sh.quantity("width", Dimension::Length, None),
                            height: sh.quantity("height", Dimension::Length, None),
                            rotation: sh.quantity("rotation", Dimension::Angle, Some(0.0)),
                        };
                        sh.finish();
                        shapes.push(r);
                    }
                }
                _ => s.errors.push("`geometry.shapes` must be an array of tables for preset \"custom\"".into()),
            }
            UnitCellGeometry { name: "custom".into(), periods: [px, py], thickness: 5e-9, shapes }
        }
    };
    g.thickness = s.quantity("thickness", Dimension::Length, Some(g.thickness));
    g.name = s.string("name", &g.name);
    g
}

fn parse_probe(s: &mut Section, height: f64) -> QubitProbe {
    let default = QubitProbe::nv_ensemble(height);
    let moment = s.quantity("moment", Dimension::Moment, Some(default.moment));
    let temperature = s.quantity("temperature", Dimension::Temperature, Some(default.temperature));
    let kind = s.choice("orientation", true, &[("nv-ensemble", true), ("axis", false)]);
    let orientation = if kind {
        Orientation::NvEnsemble { azimuth: s.quantity("azimuth", Dimension::Angle, Some(0.0)) }
    } else {
        let direction = match s.raw("axis") {
            Some(Value::Array(a)) if a.len() == 3 && a.iter().all(|x| as_number(x).is_some()) => {
                [as_number(&a[0]).unwrap_or(0.0), as_number(&a[1]).unwrap_or(0.0), as_number(&a[2]).unwrap_or(0.0)]
            }
            _ => {
                s.errors.push("`probe.axis` must be a 3-element numeric array for orientation \"axis\"".into());
                [0.0, 0.0, 1.0]
            }
        };
        Orientation::Axis { direction }
    };
    QubitProbe { moment, height, temperature, orientation }
}

fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n <= 1 {
        return vec![lo];
    }
    (0..n).map(|k| (lo.ln() + (hi / lo).ln() * k as f64 / (n - 1) as f64).exp()).collect()
}

impl RunConfig {
    /// Parses TOML text; `base` resolves relative paths.
    pub fn from_toml(text: &str, base: Option<&Path>) -> Result<Self> {
        let root: Table = text.parse().map_err(|e: toml::de::Error| Error::Config(vec![format!("TOML syntax: {e}")]))?;
        let mut errors = Vec::new();
        for k in root.keys() {
            if !SECTIONS.contains(&k.as_str()) {
                errors.push(format!("unknown section `{k}`"));
            }
        }

        let mut s = Section::new("material", root.get("material"), &mut errors);
        let material = parse_material(&mut s);
        s.finish();

        let mut s = Section::new("geometry", root.get("geometry"), &mut errors);
        let geometry = parse_geometry(&mut s);
        s.finish();

        let mut s = Section::new("sweep", root.get("sweep"), &mut errors);
        let omegas = match s.quantity_list("frequencies", Dimension::Frequency) {
            Some(v) => v,
            None => {
                let lo = s.quantity("frequency_min", Dimension::Frequency, Some(2.0 * PI * 0.1e6));
                let hi = s.quantity("frequency_max", Dimension::Frequency, Some(2.0 * PI * 10e6));
                let n = s.integer("frequency_points", 5) as usize;
                log_grid(lo, hi, n)
            }
        };
        let heights = s.quantity_list("heights", Dimension::Length).unwrap_or_else(|| vec![45e-9]);
        let target_names = s.strings("targets", &["metasurface", "film", "cavity"]);
        let mut targets = Vec::new();
        for t in &target_names {
            match [SpectrumTarget::Metasurface, SpectrumTarget::Film, SpectrumTarget::Cavity].into_iter().find(|x| x.name() == t) {
                Some(x) => targets.push(x),
                None => s.errors.push(format!("`sweep.targets` entry \"{t}\" is not one of metasurface, film, cavity")),
            }
        }
        s.finish();
        if omegas.is_empty() || omegas.windows(2).any(|w| !(w[1] > w[0])) || !omegas.iter().all(|w| *w > 0.0) {
            errors.push("sweep frequencies must be positive and strictly increasing".into());
        }
        if heights.is_empty() || heights.iter().any(|h| !(*h > 0.0)) {
            errors.push("sweep heights must be a non-empty list of positive lengths".into());
        }
        let height = heights.first().copied().unwrap_or(f64::NAN);

        let mut s = Section::new("probe", root.get("probe"), &mut errors);
        let probe = parse_probe(&mut s, height);
        s.finish();

        let mut s = Section::new("solver", root.get("solver"), &mut errors);
        let d = MetasurfaceSettings::default();
        let sd = SolverOptions::default();
        let solver_opts = SolverOptions {
            method: s.choice("method", sd.method, &[("gmres", KrylovMethod::Gmres), ("bicgstab", KrylovMethod::Bicgstab)]),
            restart: s.integer("restart", sd.restart as u64) as usize,
            tolerance: s.number("tolerance", sd.tolerance),
            max_iterations: s.integer("max_iterations", sd.max_iterations as u64) as usize,
            preconditioner: s.choice(
                "preconditioner",
                sd.preconditioner,
                &[("masked", Preconditioner::Masked), ("block-diagonal", Preconditioner::BlockDiagonal), ("none", Preconditioner::None)],
            ),
        };
        let order = s.integer("truncation", 20) as usize;
        let slabs = s.integer("slabs", 1) as usize;
        let slab_rule = s.choice("slab_rule", d.slab_rule, &[("cell-average", SlabRule::CellAverage), ("midpoint", SlabRule::Midpoint)]);
        let workers = s.integer("workers", 0) as usize;
        s.finish();

        let mut s = Section::new("quadrature", root.get("quadrature"), &mut errors);
        let solver = MetasurfaceSettings {
            order,
            slabs,
            slab_rule,
            q_min: s.quantity("q_min", Dimension::Momentum, Some(d.q_min)),
            q_max_times_height: s.number("q_max_times_height", d.q_max_times_height),
            panels: s.integer("radial_panels", d.panels as u64) as usize,
            angular: s.integer("angular_nodes", d.angular as u64) as usize,
            solver: solver_opts,
            workers,
        };
        s.finish();

        let mut s = Section::new("cavity", root.get("cavity"), &mut errors);
        let cd = CavityModel::paper();
        let cavity = CavityModel {
            omega_cav: s.quantity("frequency", Dimension::Frequency, Some(cd.omega_cav)),
            purcell_factor: s.number("purcell_factor", cd.purcell_factor),
            quality_factor: s.number("quality_factor", cd.quality_factor),
        };
        s.finish();

        let mut s = Section::new("filter_map", root.get("filter_map"), &mut errors);
        let filter_map = FilterMapConfig {
            omega: s.quantity("frequency", Dimension::Frequency, Some(2.0 * PI * 1e6)),
            q_max: s.quantity("q_max", Dimension::Momentum, Some(6e7)),
            side: s.integer("side", 32) as usize,
        };
        s.finish();

        let mut s = Section::new("dephasing", root.get("dephasing"), &mut errors);
        let convention = s.choice(
            "delta_convention",
            DeltaConvention::Plain,
            &[("plain", DeltaConvention::Plain), ("angular", DeltaConvention::Angular)],
        );
        let coupling = [("per_s", 1.0), ("mhz", convention.from_mhz(1.0))];
        let intrinsic = (
            s.quantity_with("intrinsic_delta", &coupling, Some(convention.from_mhz(4.5))),
            s.quantity("intrinsic_tau_c", Dimension::Time, Some(19e-9)),
        );
        let near = (
            s.quantity_with("near_surface_delta", &coupling, Some(convention.from_mhz(5.6))),
            s.quantity("near_surface_tau_c", Dimension::Time, Some(41e-9)),
        );
        let sequence = s.choice("sequence", SequenceKind::Hahn, &[("hahn", SequenceKind::Hahn), ("cpmg", SequenceKind::Cpmg)]);
        let pulses = s.integer("pulses", 1) as usize;
        let cutoff = s.quantity("cutoff", Dimension::Frequency, Some(DEFAULT_CUTOFF));
        let t_max = s.quantity("t_max", Dimension::Time, Some(1e-3));
        let time_points = s.integer("time_points", 64) as usize;
        let include_em = s.boolean("include_em", true);
        s.finish();
        let bath = |(d, t): (f64, f64), what: &str, errors: &mut Vec<String>| {
            OuBath::new(d, t).unwrap_or_else(|_| {
                errors.push(format!("dephasing {what} bath needs Δ > 0 and τ_c > 0"));
                OuBath { delta: d, tau_c: t }
            })
        };
        let dephasing = DephasingConfig {
            delta_convention: convention,
            intrinsic: bath(intrinsic, "intrinsic", &mut errors),
            near_surface: bath(near, "near-surface", &mut errors),
            cutoff,
            sequence,
            pulses,
            t_max,
            time_points,
            include_em,
        };

        let mut s = Section::new("reconstruct", root.get("reconstruct"), &mut errors);
        let trace = s.raw("trace").map(|v| match v {
            Value::String(p) => {
                let p = PathBuf::from(p);
                match base {
                    Some(b) if p.is_relative() => b.join(p),
                    _ => p,
                }
            }
            _ => PathBuf::new(),
        });
        s.finish();
        let reconstruct = ReconstructConfig { trace };

        let mut s = Section::new("output", root.get("output"), &mut errors);
        let directory = PathBuf::from(s.string("directory", "out"));
        let fmt_names = s.strings("formats", &["csv", "json", "pgm"]);
        let mut formats = Vec::new();
        for f in &fmt_names {
            match f.as_str() {
                "csv" => formats.push(OutputFormat::Csv),
                "json" => formats.push(OutputFormat::Json),
                "pgm" => formats.push(OutputFormat::Pgm),
                other => s.errors.push(format!("`output.formats` entry \"{other}\" is not one of csv, json, pgm")),
            }
        }
        s.finish();

        let mut s = Section::new("run", root.get("run"), &mut errors);
        let seed = s.integer("seed", 1);
        s.finish();

        let config = RunConfig {
            material,
            geometry,
            probe,
            sweep: SweepConfig { omegas, heights, targets },
            solver,
            cavity,
            filter_map,
            dephasing,
            reconstruct,
            output: OutputConfig { directory, formats },
            seed,
        };
        errors.extend(config.violations());
        if errors.is_empty() {
            Ok(config)
        } else {
            Err(Error::Config(errors))
        }
    }

    /// Reads and parses a file.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(vec![format!("cannot read {}: {e}", path.display())]))?;
        Self::from_toml(&text, path.parent())
    }

    /// Module-level invariant violations, prefixed by section.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        let mut push = |sec: &str, list: Vec<String>| v.extend(list.into_iter().map(|m| format!("{sec}: {m}")));
        push("material", self.material.violations());
        push("geometry", self.geometry.violations());
        push("probe", self.probe.violations());
        let mut solver = self.solver;
        solver.workers = solver.workers.max(1);
        push("solver", solver.violations());
        if let Err(e) = crate::quadrature::PolarGrid::new(solver.grid(self.probe.height.max(1e-12))) {
            push("quadrature", vec![e.to_string()]);
        }
        push("cavity", self.cavity.violations());
        let mut f = Vec::new();
        if self.filter_map.side < 2 || self.filter_map.side % 2 != 0 {
            f.push(format!("side must be even and ≥ 2, got {}", self.filter_map.side));
        }
        if !(self.filter_map.q_max > 0.0) || !(self.filter_map.omega > 0.0) {
            f.push("q_max and frequency must be > 0".into());
        }
        push("filter_map", f);
        let mut d = Vec::new();
        if self.dephasing.pulses == 0 || (self.dephasing.sequence == SequenceKind::Hahn && self.dephasing.pulses != 1) {
            d.push(format!("{:?} sequence cannot have {} pulses", self.dephasing.sequence, self.dephasing.pulses));
        }
        if !(self.dephasing.cutoff > 0.0 && self.dephasing.t_max > 0.0) {
            d.push("cutoff and t_max must be > 0".into());
        }
        if self.dephasing.time_points < 2 {
            d.push("time_points must be ≥ 2".into());
        }
        push("dephasing", d);
        if self.output.formats.is_empty() {
            push("output", vec!["at least one output format is required".into()]);
        }
        v
    }

    /// Canonical TOML (SI suffixes, explicit geometry).
    pub fn to_toml(&self) -> String {
        fn q(t: &mut Table, base: &str, dim: Dimension, v: f64) {
            t.insert(format!("{base}_{}", dim.canonical()), Value::Float(v));
        }
        fn int(t: &mut Table, k: &str, v: usize) {
            t.insert(k.into(), Value::Integer(v as i64));
        }
        fn st(t: &mut Table, k: &str, v: &str) {
            t.insert(k.into(), Value::String(v.into()));
        }
        let mut root = Table::new();

        let m = &self.material;
        let mut t = Table::new();
        q(&mut t, "saturation_magnetization", Dimension::Field, m.saturation_magnetization);
        q(&mut t, "effective_magnetization", Dimension::Field, m.effective_magnetization);
        t.insert("gilbert_damping".into(), Value::Float(m.gilbert_damping));
        q(&mut t, "inplane_anisotropy_field", Dimension::Field, m.inplane_anisotropy_field);
        q(&mut t, "easy_axis_angle", Dimension::Angle, m.easy_axis_angle);
        q(&mut t, "gyromagnetic_ratio", Dimension::Gyromagnetic, m.gyromagnetic_ratio);
        root.insert("material".into(), Value::Table(t));

        let g = &self.geometry;
        let mut t = Table::new();
        st(&mut t, "preset", "custom");
        st(&mut t, "name", &g.name);
        q(&mut t, "period_x", Dimension::Length, g.periods[0]);
        q(&mut t, "period_y", Dimension::Length, g.periods[1]);
        q(&mut t, "thickness", Dimension::Length, g.thickness);
        let shapes = g
            .shapes
            .iter()
            .map(|r| {
                let mut s = Table::new();
                q(&mut s, "center_x", Dimension::Length, r.center[0]);
                q(&mut s, "center_y", Dimension::Length, r.center[1]);
                q(&mut s, "width", Dimension::Length, r.width);
                q(&mut s, "height", Dimension::Length, r.height);
                q(&mut s, "rotation", Dimension::Angle, r.rotation);
                Value::Table(s)
            })
            .collect();
        t.insert("shapes".into(), Value::Array(shapes));
        root.insert("geometry".into(), Value::Table(t));

        let p = &self.probe;
        let mut t = Table::new();
        q(&mut t, "moment", Dimension::Moment, p.moment);
        q(&mut t, "temperature", Dimension::Temperature, p.temperature);
        match p.orientation {
            Orientation::NvEnsemble { azimuth } => {
                st(&mut t, "orientation", "nv-ensemble");
                q(&mut t, "azimuth", Dimension::Angle, azimuth);
            }
            Orientation::Axis { direction } => {
                st(&mut t, "orientation", "axis");
                t.insert("axis".into(), Value::Array(direction.iter().map(|x| Value::Float(*x)).collect()));
            }
        }
        root.insert("probe".into(), Value::Table(t));

        let list = |v: &[f64]| Value::Array(v.iter().map(|x| Value::Float(*x)).collect());
        let mut t = Table::new();
        t.insert(format!("frequencies_{}", Dimension::Frequency.canonical()), list(&self.sweep.omegas));
        t.insert(format!("heights_{}", Dimension::Length.canonical()), list(&self.sweep.heights));
        t.insert(
            "targets".into(),
            Value::Array(self.sweep.targets.iter().map(|x| Value::String(x.name().into())).collect()),
        );
        root.insert("sweep".into(), Value::Table(t));

        let s = &self.solver;
        let mut t = Table::new();
        int(&mut t, "truncation", s.order);
        int(&mut t, "slabs", s.slabs);
        st(&mut t, "slab_rule", if s.slab_rule == SlabRule::CellAverage { "cell-average" } else { "midpoint" });
        st(&mut t, "method", if s.solver.method == KrylovMethod::Gmres { "gmres" } else { "bicgstab" });
        int(&mut t, "restart", s.solver.restart);
        t.insert("tolerance".into(), Value::Float(s.solver.tolerance));
        int(&mut t, "max_iterations", s.solver.max_iterations);
        st(
            &mut t,
            "preconditioner",
            match s.solver.preconditioner {
                Preconditioner::Masked => "masked",
                Preconditioner::BlockDiagonal => "block-diagonal",
                Preconditioner::None => "none",
            },
        );
        int(&mut t, "workers", s.workers);
        root.insert("solver".into(), Value::Table(t));

        let mut t = Table::new();
        q(&mut t, "q_min", Dimension::Momentum, s.q_min);
        t.insert("q_max_times_height".into(), Value::Float(s.q_max_times_height));
        int(&mut t, "radial_panels", s.panels);
        int(&mut t, "angular_nodes", s.angular);
        root.insert("quadrature".into(), Value::Table(t));

        let mut t = Table::new();
        q(&mut t, "frequency", Dimension::Frequency, self.cavity.omega_cav);
        t.insert("purcell_factor".into(), Value::Float(self.cavity.purcell_factor));
        t.insert("quality_factor".into(), Value::Float(self.cavity.quality_factor));
        root.insert("cavity".into(), Value::Table(t));

        let mut t = Table::new();
        q(&mut t, "frequency", Dimension::Frequency, self.filter_map.omega);
        q(&mut t, "q_max", Dimension::Momentum, self.filter_map.q_max);
        int(&mut t, "side", self.filter_map.side);
        root.insert("filter_map".into(), Value::Table(t));

        let d = &self.dephasing;
        let mut t = Table::new();
        st(&mut t, "delta_convention", if d.delta_convention == DeltaConvention::Plain { "plain" } else { "angular" });
        q(&mut t, "intrinsic_delta", Dimension::Rate, d.intrinsic.delta);
        q(&mut t, "intrinsic_tau_c", Dimension::Time, d.intrinsic.tau_c);
        q(&mut t, "near_surface_delta", Dimension::Rate, d.near_surface.delta);
        q(&mut t, "near_surface_tau_c", Dimension::Time, d.near_surface.tau_c);
        st(&mut t, "sequence", if d.sequence == SequenceKind::Hahn { "hahn" } else { "cpmg" });
        int(&mut t, "pulses", d.pulses);
        q(&mut t, "cutoff", Dimension::Frequency, d.cutoff);
        q(&mut t, "t_max", Dimension::Time, d.t_max);
        int(&mut t, "time_points", d.time_points);
        t.insert("include_em".into(), Value::Boolean(d.include_em));
        root.insert("dephasing".into(), Value::Table(t));

        let mut t = Table::new();
        if let Some(p) = &self.reconstruct.trace {
            st(&mut t, "trace", &p.to_string_lossy());
        }
        root.insert("reconstruct".into(), Value::Table(t));

        let mut t = Table::new();
        st(&mut t, "directory", &self.output.directory.to_string_lossy());
        t.insert(
            "formats".into(),
            Value::Array(
                self.output
                    .formats
                    .iter()
                    .map(|f| {
                        Value::String(
                            match f {
                                OutputFormat::Csv => "csv",
                                OutputFormat::Json => "json",
                                OutputFormat::Pgm => "pgm",
                            }
                            .into(),
                        )
                    })
                    .collect(),
            ),
        );
        root.insert("output".into(), Value::Table(t));

        let mut t = Table::new();
        t.insert("seed".into(), Value::Integer(self.seed as i64));
        root.insert("run".into(), Value::Table(t));

        toml::to_string(&root).expect("TOML serialization of a table")
    }

    /// Worker count with 0 resolved to the available parallelism.
    pub fn resolved_workers(&self) -> usize {
        if self.solver.workers == 0 {
            std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
        } else {
            self.solver.workers
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c = RunConfig::from_toml("", None).unwrap();
        assert_eq!(c.material, LlgParams::cofeb());
        assert_eq!(c.probe.height, 45e-9);
        assert_eq!(c.solver.order, 20);
    }

    #[test]
    fn units_convert_to_si() {
        let c = RunConfig::from_toml(
            "[material]\nsaturation_magnetization_gauss = 10000\n[sweep]\nheights_nm = [30]\nfrequencies_mhz = [1, 2]\n",
            None,
        )
        .unwrap();
        assert!((c.material.saturation_magnetization - 1.0).abs() < 1e-15);
        assert!((c.probe.height / 30e-9 - 1.0).abs() < 1e-15);
        assert!((c.sweep.omegas[1] - 2.0 * PI * 2e6).abs() < 1e-6);
    }

    #[test]
    fn all_violations_are_reported_together() {
        let err = RunConfig::from_toml(
            "[probe]\ntemperature = 300\n[material]\ngilbert_damping = -1\n[sweep]\nheights_nm = [45]\nheights_m = [1]\n[bogus]\n",
            None,
        )
        .unwrap_err();
        let Error::Config(list) = err else { panic!("expected a config error") };
        let joined = list.join("\n");
        assert!(joined.contains("probe.temperature` has no unit"), "{joined}");
        assert!(joined.contains("more than once"), "{joined}");
        assert!(joined.contains("unknown section `bogus`"), "{joined}");
        assert!(joined.contains("Gilbert damping"), "{joined}");
    }

    #[test]
    fn canonical_form_is_a_fixed_point() {
        let c = RunConfig::from_toml("[geometry]\npreset = \"metasurface-2\"\n[sweep]\nfrequency_points = 3\n", None).unwrap();
        let a = c.to_toml();
        let c2 = RunConfig::from_toml(&a, None).unwrap();
        assert_eq!(c2, c);
        assert_eq!(c2.to_toml(), a);
    }
}
