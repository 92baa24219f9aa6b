//! Dephasing noise spectra J(ω).
//!
//! The metasurface spectrum integrates the contracted kernel form
//! Q(q, ω) = 𝕃₀ℙ𝒯𝕏̃𝒯ᴴℙᴴ𝕃₀ᴴ over in-plane momentum,
//!
//! J_em(d, ω) = (μ₀/ħπ²)·coth(ħω/2k_BT)·Σ_ab P_ab·Re∫d²q Q_ab(q, ω),
//!
//! where P = ⟨m mᵀ⟩ is the probe's moment projector (a single axis or the
//! average over the four NV axes). Film and cavity references use the
//! Green-function form J = (2μ₀ω²/ħc²)·coth·Σ_ab P_ab·𝓘m[G + Gᵀ]_ab.
//!
//! Momentum sweeps are a map over grid nodes followed by a reduction in
//! node order, so results do not depend on the number of workers.

use crate::constants::{coth_thermal, nv_moment, C_LIGHT, HBAR, MU_0, NV_POLAR_ANGLE};
use crate::error::{Error, Result};
use crate::geometry::UnitCellGeometry;
use crate::greens::{cavity_im_green, fresnel_thin_film_green, CavityModel, SlabRule};
use crate::io::{hash_json, CachedForm, KernelCache};
use crate::magnetics::{isotropic_inplane, lab_susceptibility, llg_susceptibility, LlgParams};
use crate::quadrature::{PolarGrid, PolarGridSpec};
use crate::vie::{BlockSystem, ConvolutionEngine, CouplingKernel, EvaluationStack, SolverOptions, Workspace};
use crate::{Mat3, C64};
use nalgebra::{DMatrix, Matrix3};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;

/// Relative slack below zero tolerated before a value counts as negative.
const NEGATIVE_SLACK: f64 = 1e-12;

/// Moment orientation of the probe.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Orientation {
    /// A single moment direction (normalized on use).
    Axis {
        /// Direction vector.
        direction: [f64; 3],
    },
    /// Equal-weight ensemble over the four NV axes at polar angle 54.7° and
    /// azimuths α₀ + kπ/2.
    NvEnsemble {
        /// Azimuth α₀ of the first axis in radians.
        azimuth: f64,
    },
}

/// The qubit used to sample the magnetic noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QubitProbe {
    /// Moment magnitude |m| in J/T.
    pub moment: f64,
    /// Height d above the film top in meters.
    pub height: f64,
    /// Temperature in kelvin.
    pub temperature: f64,
    /// Moment orientation(s).
    pub orientation: Orientation,
}

/// Unit vector of an NV axis with the given azimuth.
pub fn nv_axis(azimuth: f64) -> [f64; 3] {
    let (s, c) = NV_POLAR_ANGLE.sin_cos();
    [s * azimuth.cos(), s * azimuth.sin(), c]
}

impl QubitProbe {
    /// NV ensemble (|m| = g·μ_B, α₀ = 0) at 300 K and the given height.
    pub fn nv_ensemble(height: f64) -> Self {
        Self { moment: nv_moment(), height, temperature: 300.0, orientation: Orientation::NvEnsemble { azimuth: 0.0 } }
    }

    /// The same probe with a single moment direction.
    pub fn with_axis(self, direction: [f64; 3]) -> Self {
        Self { orientation: Orientation::Axis { direction }, ..self }
    }

    /// Unit moment directions averaged over.
    pub fn axes(&self) -> Vec<[f64; 3]> {
        match self.orientation {
            Orientation::Axis { direction } => {
                let n = (direction[0].powi(2) + direction[1].powi(2) + direction[2].powi(2)).sqrt();
                vec![[direction[0] / n, direction[1] / n, direction[2] / n]]
            }
            Orientation::NvEnsemble { azimuth } => (0..4).map(|k| nv_axis(azimuth + k as f64 * PI / 2.0)).collect(),
        }
    }

    /// Moment projector P = |m|²·⟨n nᵀ⟩ over the orientation set.
    pub fn projector(&self) -> Matrix3<f64> {
        let axes = self.axes();
        let mut p = Matrix3::zeros();
        for n in &axes {
            for a in 0..3 {
                for b in 0..3 {
                    p[(a, b)] += n[a] * n[b];
                }
            }
        }
        p * (self.moment * self.moment / axes.len() as f64)
    }

    /// Invariant violations.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !(self.moment > 0.0 && self.moment.is_finite()) {
            v.push(format!("probe moment must be > 0, got {}", self.moment));
        }
        if !(self.height > 0.0) {
            v.push(format!("probe height must be > 0, got {}", self.height));
        }
        if !(self.temperature > 0.0) {
            v.push(format!("temperature must be > 0, got {}", self.temperature));
        }
        match self.orientation {
            Orientation::Axis { direction } => {
                let n2 = direction.iter().map(|x| x * x).sum::<f64>();
                if !(n2 > 0.0 && n2.is_finite()) {
                    v.push("probe axis must be a nonzero finite vector".into());
                }
            }
            Orientation::NvEnsemble { azimuth } => {
                if !azimuth.is_finite() {
                    v.push("NV azimuth must be finite".into());
                }
            }
        }
        v
    }

    /// Validates the invariants.
    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidInput(v.join("; ")))
        }
    }

    /// Σ_ab P_ab·M_ab for a real matrix.
    pub fn contract(&self, m: &Matrix3<f64>) -> f64 {
        self.projector().component_mul(m).sum()
    }
}

/// Where a spectrum came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    /// Volume-integral computation above a patterned film.
    ComputedMetasurface,
    /// Reflection (Fresnel) computation above a uniform film.
    ComputedFilm,
    /// Single-mode cavity model.
    ComputedCavity,
    /// Ornstein–Uhlenbeck spin-bath model.
    ModelOu,
    /// Reconstructed from coherence data.
    Measured,
}

/// Descriptive metadata carried with a spectrum.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SpectrumMetadata {
    /// Content hash of the geometry, when one was used.
    pub geometry_hash: Option<String>,
    /// Probe used.
    pub probe: Option<QubitProbe>,
    /// Reciprocal-lattice truncation order.
    pub truncation: Option<usize>,
    /// Number of z slabs.
    pub slabs: Option<usize>,
    /// Free-form label.
    pub label: Option<String>,
}

/// Sampled J(ω) in s⁻¹ on a strictly increasing grid of angular frequencies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpectrum {
    /// Angular frequencies in rad/s.
    pub omega: Vec<f64>,
    /// J values in s⁻¹.
    pub values: Vec<f64>,
    /// Absolute error estimates in s⁻¹ (zero where exact).
    pub errors: Vec<f64>,
    /// Origin of the values.
    pub provenance: Provenance,
    /// Metadata.
    pub metadata: SpectrumMetadata,
}

impl NoiseSpectrum {
    /// Validated constructor: non-empty, strictly increasing positive grid,
    /// finite non-negative values.
    pub fn new(
        omega: Vec<f64>,
        values: Vec<f64>,
        errors: Vec<f64>,
        provenance: Provenance,
        metadata: SpectrumMetadata,
    ) -> Result<Self> {
        if omega.is_empty() || omega.len() != values.len() || omega.len() != errors.len() {
            return Err(Error::InvalidInput(format!(
                "spectrum needs equal, non-zero lengths (ω {}, J {}, err {})",
                omega.len(),
                values.len(),
                errors.len()
            )));
        }
        if !(omega[0] > 0.0) || omega.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidInput("spectrum frequency grid must be positive and strictly increasing".into()));
        }
        if let Some(k) = values.iter().position(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::NegativeSpectrum {
                value: values[k],
                scale: values.iter().fold(0.0f64, |m, v| m.max(v.abs())),
                context: format!("ω = {:.6e} rad/s", omega[k]),
            });
        }
        Ok(Self { omega, values, errors, provenance, metadata })
    }

    /// Number of samples.
    pub fn len(&self) -> usize {
        self.omega.len()
    }

    /// True when there are no samples (never for a validated spectrum).
    pub fn is_empty(&self) -> bool {
        self.omega.is_empty()
    }

    /// J at ω: log–log interpolation between samples (linear where a
    /// neighbouring value is zero), held constant outside the grid.
    pub fn value_at(&self, omega: f64) -> f64 {
        let n = self.omega.len();
        if omega <= self.omega[0] {
            return self.values[0];
        }
        if omega >= self.omega[n - 1] {
            return self.values[n - 1];
        }
        let k = self.omega.partition_point(|&w| w <= omega) - 1;
        let (w0, w1, j0, j1) = (self.omega[k], self.omega[k + 1], self.values[k], self.values[k + 1]);
        if j0 > 0.0 && j1 > 0.0 {
            let t = (omega / w0).ln() / (w1 / w0).ln();
            (j0.ln() + t * (j1 / j0).ln()).exp()
        } else {
            j0 + (omega - w0) / (w1 - w0) * (j1 - j0)
        }
    }

    /// Logarithmic slopes d ln J / d ln ω between consecutive samples.
    pub fn log_slopes(&self) -> Vec<f64> {
        self.omega
            .windows(2)
            .zip(self.values.windows(2))
            .map(|(w, j)| (j[1] / j[0]).ln() / (w[1] / w[0]).ln())
            .collect()
    }
}

/// μ₀/(ħπ²)·coth(ħω/2k_BT): the prefactor of the momentum-space form.
pub fn jem_prefactor(omega: f64, temperature: f64) -> f64 {
    MU_0 / (HBAR * PI * PI) * coth_thermal(omega, temperature)
}

/// 2μ₀ω²/(ħc²)·coth(ħω/2k_BT): the prefactor of the Green-function form.
pub fn green_prefactor(omega: f64, temperature: f64) -> f64 {
    2.0 * MU_0 * omega * omega / (HBAR * C_LIGHT * C_LIGHT) * coth_thermal(omega, temperature)
}

/// Σ_ab P_ab·Re Q_ab, rejecting values below −10⁻¹²·|P|·|Q|.
fn contract_form(form: &Mat3, probe: &QubitProbe, context: impl FnOnce() -> String) -> Result<f64> {
    let re = form.map(|c| c.re);
    let p = probe.projector();
    let value = p.component_mul(&re).sum();
    let scale = p.norm() * form.norm();
    if value < -NEGATIVE_SLACK * scale || !value.is_finite() {
        return Err(Error::NegativeSpectrum { value, scale, context: context() });
    }
    Ok(value.max(0.0))
}

/// J_em integrand at one (q, ω) from a contracted kernel form Q(q, ω), in
/// s⁻¹·m² (integrate over d²q to obtain J_em).
pub fn jem_integrand(form: &Mat3, omega: f64, probe: &QubitProbe) -> Result<f64> {
    let v = contract_form(form, probe, || format!("integrand at ω = {omega:.6e} rad/s"))?;
    Ok(jem_prefactor(omega, probe.temperature) * v)
}

/// Dense Q = W·𝕏̃·Wᴴ from a solved first block-row of 𝒯, with
/// W = P₀·𝒯_{0,·} and 𝕏̃ = (𝓘mχ ⊗ C)/Δz assembled directly from the geometry.
/// Intended for small systems (oracle use).
pub fn kernel_form(sys: &BlockSystem, kernel: &CouplingKernel, geometry: &UnitCellGeometry) -> Result<Mat3> {
    let n = sys.dimension();
    if kernel.first_block_row.ncols() != n || kernel.columns.len() != n {
        return Err(Error::InvalidInput("kernel_form needs a complete first block-row (adjoint solve)".into()));
    }
    let nb = 3 * sys.stack().slabs;
    let nc = sys.channels();
    let w = sys.propagation_block(0) * &kernel.first_block_row;
    let im = crate::magnetics::anti_hermitian_part(sys.chi());
    let dz = sys.stack().dz();
    let mut xt = DMatrix::<C64>::zeros(n, n);
    for i in 0..nc {
        for j in 0..nc {
            let c = sys.engine().coefficient_direct(geometry, i, j);
            if c == C64::new(0.0, 0.0) {
                continue;
            }
            for a in 0..sys.stack().slabs {
                for x in 0..3 {
                    for y in 0..3 {
                        xt[(i * nb + 3 * a + x, j * nb + 3 * a + y)] = im[(x, y)] * c / dz;
                    }
                }
            }
        }
    }
    let q = &w * xt * w.adjoint();
    Ok(Mat3::from_fn(|a, b| q[(a, b)]))
}

/// Settings of a metasurface spectrum computation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetasurfaceSettings {
    /// Reciprocal-lattice truncation order.
    pub order: usize,
    /// Number of z slabs.
    pub slabs: usize,
    /// Slab integration rule.
    pub slab_rule: SlabRule,
    /// Lower radial bound of the q-grid in rad/m.
    pub q_min: f64,
    /// Upper radial bound as a multiple of 1/d.
    pub q_max_times_height: f64,
    /// Radial Gauss–Kronrod panels.
    pub panels: usize,
    /// Azimuthal nodes.
    pub angular: usize,
    /// Iterative solver settings.
    pub solver: SolverOptions,
    /// Worker threads (≥ 1); results do not depend on it.
    pub workers: usize,
}

impl Default for MetasurfaceSettings {
    fn default() -> Self {
        Self {
            order: 40,
            slabs: 1,
            slab_rule: SlabRule::CellAverage,
            q_min: 1e3,
            q_max_times_height: 20.0,
            panels: 2,
            angular: 128,
            solver: SolverOptions::default(),
            workers: std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
        }
    }
}

impl MetasurfaceSettings {
    /// Polar grid layout for a probe height.
    pub fn grid(&self, height: f64) -> PolarGridSpec {
        PolarGridSpec { q_min: self.q_min, q_max: self.q_max_times_height / height, panels: self.panels, angular: self.angular }
    }

    /// Invariant violations.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.slabs == 0 {
            v.push("slab count must be ≥ 1".into());
        }
        if self.workers == 0 {
            v.push("worker count must be ≥ 1".into());
        }
        if !(self.q_max_times_height > 0.0) {
            v.push("q_max·d must be > 0".into());
        }
        if !(self.solver.tolerance > 0.0 && self.solver.tolerance < 1.0) {
            v.push(format!("solver tolerance must lie in (0, 1), got {}", self.solver.tolerance));
        }
        if self.solver.restart == 0 || self.solver.max_iterations == 0 {
            v.push("solver restart and iteration cap must be ≥ 1".into());
        }
        v
    }
}

/// Aggregate solver statistics of a sweep.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepStats {
    /// Momentum nodes evaluated.
    pub nodes: usize,
    /// Nodes served from the kernel cache.
    pub cache_hits: usize,
    /// Total operator applications over all solves (including cached ones).
    pub iterations: u64,
    /// Worst relative residual over all solves.
    pub max_residual: f64,
}

/// Evaluates `task(i, state)` for i in 0..n on `workers` threads, each with
/// its own state, and returns the results in index order. The first error
/// in index order is returned; remaining work is abandoned once any task fails.
pub(crate) fn parallel_map<S, T, I, F>(n: usize, workers: usize, init: I, task: F) -> Result<Vec<T>>
where
    T: Send,
    I: Fn() -> S + Sync,
    F: Fn(usize, &mut S) -> Result<T> + Sync,
{
    let next = AtomicUsize::new(0);
    let failed = AtomicBool::new(false);
    let slots: Mutex<Vec<Option<Result<T>>>> = Mutex::new((0..n).map(|_| None).collect());
    let run = || {
        let mut state = init();
        loop {
            if failed.load(Ordering::Relaxed) {
                break;
            }
            let i = next.fetch_add(1, Ordering::Relaxed);
            if i >= n {
                break;
            }
            let r = task(i, &mut state);
            if r.is_err() {
                failed.store(true, Ordering::Relaxed);
            }
            slots.lock().expect("result slots")[i] = Some(r);
        }
    };
    let workers = workers.clamp(1, n.max(1));
    if workers == 1 {
        run();
    } else {
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(run);
            }
        });
    }
    let slots = slots.into_inner().expect("result slots");
    let mut out = Vec::with_capacity(n);
    for slot in slots {
        match slot {
            Some(Ok(v)) => out.push(v),
            Some(Err(e)) => return Err(e),
            None => {}
        }
    }
    if out.len() != n {
        return Err(Error::NumericalBreakdown("sweep aborted after a failed task".into()));
    }
    Ok(out)
}

#[derive(Serialize)]
struct NodeKey<'a> {
    geometry: &'a str,
    material: &'a LlgParams,
    isotropic: bool,
    omegas: Vec<u64>,
    q: [u64; 2],
    order: usize,
    slabs: usize,
    slab_rule: SlabRule,
    thickness: u64,
    height: u64,
    solver: &'a SolverOptions,
}

/// Inputs shared by all nodes of a momentum sweep.
struct Sweep<'a> {
    engine: ConvolutionEngine,
    stack: EvaluationStack,
    omegas: &'a [f64],
    chis: Vec<Mat3>,
    llg: &'a LlgParams,
    isotropic: bool,
    settings: &'a MetasurfaceSettings,
    cache: Option<&'a KernelCache>,
}

impl<'a> Sweep<'a> {
    fn new(
        geometry: &UnitCellGeometry,
        llg: &'a LlgParams,
        isotropic: bool,
        height: f64,
        omegas: &'a [f64],
        settings: &'a MetasurfaceSettings,
        cache: Option<&'a KernelCache>,
    ) -> Result<Self> {
        let mut v = geometry.violations();
        v.extend(llg.violations());
        v.extend(settings.violations());
        if omegas.is_empty() || !(omegas[0] > 0.0) || omegas.windows(2).any(|w| !(w[1] > w[0])) {
            v.push("frequency grid must be non-empty, positive and strictly increasing".into());
        }
        if !v.is_empty() {
            return Err(Error::InvalidInput(v.join("; ")));
        }
        let engine = ConvolutionEngine::new(geometry, settings.order)?;
        let stack = EvaluationStack::with_rule(settings.slabs, geometry.thickness, height, settings.slab_rule)?;
        let chis = omegas
            .iter()
            .map(|&w| {
                if isotropic {
                    Ok(isotropic_inplane(&llg_susceptibility(llg, w)?)?.value)
                } else {
                    Ok(lab_susceptibility(llg, w)?.value)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { engine, stack, omegas, chis, llg, isotropic, settings, cache })
    }

    fn key(&self, q: [f64; 2]) -> String {
        hash_json(&NodeKey {
            geometry: self.engine.geometry_hash(),
            material: self.llg,
            isotropic: self.isotropic,
            omegas: self.omegas.iter().map(|w| w.to_bits()).collect(),
            q: [q[0].to_bits(), q[1].to_bits()],
            order: self.settings.order,
            slabs: self.settings.slabs,
            slab_rule: self.settings.slab_rule,
            thickness: self.stack.thickness.to_bits(),
            height: self.stack.height.to_bits(),
            solver: &self.settings.solver,
        })
    }

    /// Forms Q(q, ω) for every ω of the sweep, chaining warm starts through
    /// the frequency list (a fixed order, so cached and fresh results agree).
    fn node(&self, q: [f64; 2], ws: &mut Workspace) -> Result<(Vec<CachedForm>, bool)> {
        let key = self.cache.map(|_| self.key(q));
        if let (Some(cache), Some(key)) = (self.cache, key.as_deref()) {
            if let Some(records) = cache.load(key) {
                if records.len() == self.omegas.len()
                    && records.iter().zip(self.omegas).all(|(r, w)| r.omega.to_bits() == w.to_bits())
                {
                    return Ok((records, true));
                }
            }
        }
        let mut seed: Option<Vec<C64>> = None;
        let mut out = Vec::with_capacity(self.omegas.len());
        for (&omega, chi) in self.omegas.iter().zip(&self.chis) {
            let sys = BlockSystem::new(&self.engine, chi, &self.stack, q, omega)?;
            let rows = sys.propagated_rows_seeded(&self.settings.solver, seed.as_deref(), ws)?;
            let form = sys.dissipative_form(&rows.columns, &rows.columns, ws);
            out.push(CachedForm {
                omega,
                form,
                iterations: rows.report.iterations as u64,
                residual: rows.report.residual,
            });
            if !rows.seed.is_empty() {
                seed = Some(rows.seed);
            }
        }
        if let (Some(cache), Some(key)) = (self.cache, key.as_deref()) {
            cache.store(key, &out)?;
        }
        Ok((out, false))
    }

    fn run(&self, points: &[[f64; 2]]) -> Result<(Vec<Vec<CachedForm>>, SweepStats)> {
        let results = parallel_map(points.len(), self.settings.workers, || self.engine.workspace(), |i, ws| {
            self.node(points[i], ws)
        })?;
        let mut stats = SweepStats { nodes: points.len(), ..SweepStats::default() };
        let mut forms = Vec::with_capacity(points.len());
        for (records, hit) in results {
            stats.cache_hits += hit as usize;
            for r in &records {
                stats.iterations += r.iterations;
                stats.max_residual = stats.max_residual.max(r.residual);
            }
            forms.push(records);
        }
        Ok((forms, stats))
    }
}

/// Unit-cell averaged J_em(d, ω) above a periodic metasurface, averaged over
/// the probe's orientation set, for each ω of `omegas` (rad/s, increasing).
pub fn jem_averaged(
    geometry: &UnitCellGeometry,
    llg: &LlgParams,
    probe: &QubitProbe,
    omegas: &[f64],
    settings: &MetasurfaceSettings,
    cache: Option<&KernelCache>,
) -> Result<(NoiseSpectrum, SweepStats)> {
    probe.validate()?;
    let sweep = Sweep::new(geometry, llg, false, probe.height, omegas, settings, cache)?;
    let grid = PolarGrid::new(settings.grid(probe.height))?;
    let points: Vec<[f64; 2]> = grid.points().iter().map(|p| p.q).collect();
    let (forms, stats) = sweep.run(&points)?;
    let mut values = Vec::with_capacity(omegas.len());
    let mut errors = Vec::with_capacity(omegas.len());
    for (k, &omega) in omegas.iter().enumerate() {
        let node_values = forms
            .iter()
            .zip(&points)
            .map(|(f, q)| {
                contract_form(&f[k].form, probe, || {
                    format!("q = ({:.4e}, {:.4e}) rad/m, ω = {omega:.6e} rad/s", q[0], q[1])
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let est = grid.combine_scalar(&node_values);
        let pre = jem_prefactor(omega, probe.temperature);
        values.push(pre * est.value);
        errors.push(pre * est.error);
    }
    let metadata = SpectrumMetadata {
        geometry_hash: Some(geometry.content_hash()),
        probe: Some(*probe),
        truncation: Some(settings.order),
        slabs: Some(settings.slabs),
        label: Some(geometry.name.clone()),
    };
    Ok((NoiseSpectrum::new(omegas.to_vec(), values, errors, Provenance::ComputedMetasurface, metadata)?, stats))
}

/// Local J_em at in-plane position ρ (meters, within the unit cell) and
/// height d, keeping every lattice-phase channel e^{−iG·ρ} of the output row.
/// Returns the value and its quadrature error estimate.
pub fn jem_local(
    geometry: &UnitCellGeometry,
    llg: &LlgParams,
    probe: &QubitProbe,
    rho: [f64; 2],
    omega: f64,
    settings: &MetasurfaceSettings,
) -> Result<(f64, f64)> {
    probe.validate()?;
    let omegas = [omega];
    let sweep = Sweep::new(geometry, llg, false, probe.height, &omegas, settings, None)?;
    let grid = PolarGrid::new(settings.grid(probe.height))?;
    let points: Vec<[f64; 2]> = grid.points().iter().map(|p| p.q).collect();
    let chi = sweep.chis[0];
    let values = parallel_map(points.len(), settings.workers, || sweep.engine.workspace(), |i, ws| {
        let sys = BlockSystem::new(&sweep.engine, &chi, &sweep.stack, points[i], omega)?;
        let left = sys.propagated_rows(&settings.solver, ws)?;
        let nb = 3 * sweep.stack.slabs;
        let mut right = Vec::with_capacity(3);
        for c in 0..3 {
            let mut b = vec![C64::new(0.0, 0.0); sys.dimension()];
            for (j, p) in sweep.engine.basis().points.iter().enumerate() {
                let phase = C64::new(0.0, p.g[0] * rho[0] + p.g[1] * rho[1]).exp();
                let blk = sys.propagation_block(j);
                for x in 0..nb {
                    b[j * nb + x] = phase * blk[(c, x)].conj();
                }
            }
            let (y, _) = sys.solve_adjoint(&b, &settings.solver, ws)?;
            right.push(y);
        }
        let form = sys.dissipative_form(&left.columns, &right, ws);
        contract_form(&form, probe, || format!("local integrand at q = ({:.4e}, {:.4e})", points[i][0], points[i][1]))
    })?;
    let est = grid.combine_scalar(&values);
    let pre = jem_prefactor(omega, probe.temperature);
    Ok((pre * est.value, pre * est.error))
}

/// q-resolved contribution density to J_em on a uniform Cartesian grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentumFilterMap {
    /// Half-width of the grid in rad/m (grid spans [−q_max, q_max]²).
    pub q_max: f64,
    /// Nodes per side (even, so q = 0 is not a node).
    pub side: usize,
    /// Densities in s⁻¹·m², row-major with q_y along rows: value at
    /// (q_x[i], q_y[j]) is `values[j * side + i]`.
    pub values: Vec<f64>,
    /// Angular frequency in rad/s.
    pub omega: f64,
    /// Probe height in meters.
    pub height: f64,
    /// Geometry content hash.
    pub geometry_hash: String,
}

impl MomentumFilterMap {
    /// Node coordinate along either axis.
    pub fn coordinate(&self, i: usize) -> f64 {
        (i as f64 + 0.5 - self.side as f64 / 2.0) * self.cell_width()
    }

    /// Grid spacing in rad/m.
    pub fn cell_width(&self) -> f64 {
        2.0 * self.q_max / self.side as f64
    }

    /// Σ cells·area: the map's estimate of J_em (restricted to the window).
    pub fn total(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.cell_width().powi(2)
    }

    /// The map rotated by `quarter_turns`·90° about q = 0.
    pub fn rotated(&self, quarter_turns: usize) -> Vec<f64> {
        let n = self.side;
        let mut cur = self.values.clone();
        for _ in 0..quarter_turns % 4 {
            let mut next = vec![0.0; n * n];
            // Value at q' = R·q equals the original value at q: (i, j) → (n−1−j, i).
            for j in 0..n {
                for i in 0..n {
                    next[i * n + (n - 1 - j)] = cur[j * n + i];
                }
            }
            cur = next;
        }
        cur
    }

    /// max|M − R·M| / max|M| for a rotation by `quarter_turns`·90°.
    pub fn rotation_residual(&self, quarter_turns: usize) -> f64 {
        let rot = self.rotated(quarter_turns);
        let scale = self.values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if scale == 0.0 {
            return 0.0;
        }
        self.values.iter().zip(&rot).fold(0.0f64, |m, (a, b)| m.max((a - b).abs())) / scale
    }

    /// |q| of the largest cell.
    pub fn peak_momentum(&self) -> f64 {
        let k = self.values.iter().enumerate().fold(0, |b, (i, v)| if *v > self.values[b] { i } else { b });
        let (i, j) = (k % self.side, k / self.side);
        self.coordinate(i).hypot(self.coordinate(j))
    }
}

/// Momentum filter map of a metasurface with the in-plane isotropic
/// susceptibility diag(χ_yy, χ_yy, χ_zz), which isolates the geometry's
/// contribution to the momentum dependence.
pub fn momentum_filter_map(
    geometry: &UnitCellGeometry,
    llg: &LlgParams,
    probe: &QubitProbe,
    omega: f64,
    q_max: f64,
    side: usize,
    settings: &MetasurfaceSettings,
    cache: Option<&KernelCache>,
) -> Result<MomentumFilterMap> {
    probe.validate()?;
    if side < 2 || side % 2 != 0 || !(q_max > 0.0) {
        return Err(Error::InvalidInput(format!("filter map needs an even side ≥ 2 and q_max > 0, got {side}, {q_max}")));
    }
    let omegas = [omega];
    let sweep = Sweep::new(geometry, llg, true, probe.height, &omegas, settings, cache)?;
    let h = 2.0 * q_max / side as f64;
    let coord = |i: usize| (i as f64 + 0.5 - side as f64 / 2.0) * h;
    let points: Vec<[f64; 2]> = (0..side * side).map(|k| [coord(k % side), coord(k / side)]).collect();
    let (forms, _) = sweep.run(&points)?;
    let pre = jem_prefactor(omega, probe.temperature);
    let values = forms
        .iter()
        .zip(&points)
        .map(|(f, q)| {
            Ok(pre * contract_form(&f[0].form, probe, || format!("map node q = ({:.4e}, {:.4e})", q[0], q[1]))?)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MomentumFilterMap { q_max, side, values, omega, height: probe.height, geometry_hash: geometry.content_hash() })
}

/// J from a reflected/total Green function G: (2μ₀ω²/ħc²)·coth·Σ P_ab 𝓘m[G + Gᵀ]_ab.
pub fn jem_from_green(green: &Mat3, omega: f64, probe: &QubitProbe) -> Result<f64> {
    let v = green_contraction(green, probe);
    let scale = probe.projector().norm() * (green + green.transpose()).map(|c| c.im).norm();
    if v < -NEGATIVE_SLACK * scale || !v.is_finite() {
        return Err(Error::NegativeSpectrum { value: v, scale, context: format!("Green function at ω = {omega:.6e}") });
    }
    Ok(green_prefactor(omega, probe.temperature) * v.max(0.0))
}

/// P : Im(G + Gᵀ) without prefactor or sign check.
fn green_contraction(green: &Mat3, probe: &QubitProbe) -> f64 {
    let sym = (green + green.transpose()).map(|c| c.im);
    probe.projector().component_mul(&sym).sum()
}

/// J_em above a uniform film of thickness `thickness` via the reflection
/// path, on a polar grid of the given layout.
pub fn jem_film(
    llg: &LlgParams,
    thickness: f64,
    probe: &QubitProbe,
    omegas: &[f64],
    grid: &PolarGridSpec,
) -> Result<NoiseSpectrum> {
    probe.validate()?;
    llg.validate()?;
    let grid = PolarGrid::new(*grid)?;
    let mut values = Vec::with_capacity(omegas.len());
    let mut errors = Vec::with_capacity(omegas.len());
    for &omega in omegas {
        let chi = lab_susceptibility(llg, omega)?.value;
        let sums = fresnel_thin_film_green(&chi, thickness, probe.height, omega, &grid)?;
        let raw = sums.estimate_by(|g| Ok::<_, Error>(green_contraction(g, probe)))?;
        values.push(jem_from_green(&sums.full, omega, probe)?);
        errors.push(green_prefactor(omega, probe.temperature) * raw.error);
    }
    let metadata = SpectrumMetadata { probe: Some(*probe), label: Some("uniform film".into()), ..Default::default() };
    NoiseSpectrum::new(omegas.to_vec(), values, errors, Provenance::ComputedFilm, metadata)
}

/// J at the centre of a single-mode cavity (𝓘m G = s(ω)·I₃).
pub fn jem_cavity(model: &CavityModel, probe: &QubitProbe, omegas: &[f64]) -> Result<NoiseSpectrum> {
    probe.validate()?;
    let v = model.violations();
    if !v.is_empty() {
        return Err(Error::InvalidInput(v.join("; ")));
    }
    let values = omegas
        .iter()
        .map(|&w| {
            let g = Mat3::identity() * C64::new(0.0, cavity_im_green(model, w));
            jem_from_green(&g, w, probe)
        })
        .collect::<Result<Vec<_>>>()?;
    let metadata = SpectrumMetadata { probe: Some(*probe), label: Some("cavity".into()), ..Default::default() };
    NoiseSpectrum::new(omegas.to_vec(), values, vec![0.0; omegas.len()], Provenance::ComputedCavity, metadata)
}

/// Spontaneous emission rate (μ₀ω₀²/2ħc²)·(coth(ħω₀/2k_BT) + 1)·m·𝓘m[G + Gᵀ]·m†
/// for a transition moment `moment` (J/T) given 𝓘m G at ω₀.
pub fn spontaneous_emission_rate(im_green: &Matrix3<f64>, moment: &[C64; 3], omega0: f64, temperature: f64) -> Result<f64> {
    if !(omega0 > 0.0 && temperature >= 0.0) {
        return Err(Error::InvalidInput(format!("Γ needs ω₀ > 0 and T ≥ 0, got {omega0}, {temperature}")));
    }
    let sym = im_green + im_green.transpose();
    let mut quad = C64::new(0.0, 0.0);
    for a in 0..3 {
        for b in 0..3 {
            quad += moment[a] * sym[(a, b)] * moment[b].conj();
        }
    }
    let thermal = if temperature == 0.0 { 1.0 } else { coth_thermal(omega0, temperature) };
    Ok(MU_0 * omega0 * omega0 / (2.0 * HBAR * C_LIGHT * C_LIGHT) * (thermal + 1.0) * quad.re)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ensemble_projector_is_diagonal_with_unit_trace() {
        let p = QubitProbe::nv_ensemble(45e-9).projector() / nv_moment().powi(2);
        let s2 = NV_POLAR_ANGLE.sin().powi(2);
        assert!((p[(0, 0)] - s2 / 2.0).abs() < 1e-15 && (p[(1, 1)] - s2 / 2.0).abs() < 1e-15);
        assert!((p.trace() - 1.0).abs() < 1e-15);
        assert!(p[(0, 1)].abs() < 1e-15 && p[(0, 2)].abs() < 1e-15);
    }

    #[test]
    fn interpolation_is_exact_for_power_laws() {
        let w: Vec<f64> = (0..5).map(|k| 10f64.powi(k)).collect();
        let j: Vec<f64> = w.iter().map(|x| 3.0 * x * x).collect();
        let s = NoiseSpectrum::new(w, j, vec![0.0; 5], Provenance::ModelOu, Default::default()).unwrap();
        assert!((s.value_at(300.0) / (3.0 * 9e4) - 1.0).abs() < 1e-12);
        assert_eq!(s.value_at(0.5), 3.0);
        assert!(s.log_slopes().iter().all(|v| (v - 2.0).abs() < 1e-12));
    }

    #[test]
    fn spectrum_rejects_bad_grids_and_negatives() {
        let bad = NoiseSpectrum::new(vec![2.0, 1.0], vec![1.0, 1.0], vec![0.0; 2], Provenance::Measured, Default::default());
        assert!(bad.is_err());
        let neg = NoiseSpectrum::new(vec![1.0, 2.0], vec![1.0, -1.0], vec![0.0; 2], Provenance::Measured, Default::default());
        assert!(matches!(neg, Err(Error::NegativeSpectrum { .. })));
    }

    #[test]
    fn parallel_map_preserves_order() {
        let out = parallel_map(100, 4, || 0usize, |i, calls| {
            *calls += 1;
            Ok(i * i)
        })
        .unwrap();
        assert_eq!(out, (0..100).map(|i| i * i).collect::<Vec<_>>());
        let err = parallel_map(10, 3, || (), |i, _| if i == 4 { Err(Error::InvalidInput("x".into())) } else { Ok(i) });
        assert!(err.is_err());
    }
}
