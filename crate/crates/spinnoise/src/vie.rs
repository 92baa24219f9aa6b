//! Reciprocal-space volume integral equation for a periodically patterned
//! magnetic film.
//!
//! The magnetization of the film at in-plane momentum q is expanded over
//! channels q − G_i (G_i reciprocal lattice vectors) and N_z slabs. With
//! state vector M = (M_{i,k}) the Langevin problem reads 𝔸·M = M_L with
//!
//! 𝔸 = 𝕀 + 𝕏ℕ − 𝕏𝔾 = 𝕀 − 𝕏𝕂,  𝕂 = 𝔾 − ℕ,
//!
//! where 𝕏_{(i,k),(j,l)} = δ_kl·χ_{G_j−G_i} is a scalar Toeplitz matrix C
//! over channels tensored with the material tensor χ, and 𝕂 is
//! block-diagonal over channels.
//!
//! Products with 𝕏 are evaluated as two-dimensional FFT correlations over
//! the (m, n) channel grid. Because χ of an in-plane magnetized film has
//! rank two, χ = U·Σ·Vᴴ is factorized and only rank-many scalar
//! correlations are needed per slab. Iterative solves run on the equivalent
//! reduced unknowns that live in the range of χ, while residuals are always
//! reported for the full system.

use crate::error::{Error, Result};
use crate::geometry::{reciprocal_lattice, shape_factor_at, ReciprocalBasis, UnitCellGeometry};
use crate::greens::{slab_coupling, slab_to_point, SlabRule};
use crate::krylov::{bicgstab, gmres, norm, GmresOptions, SolveStats};
use crate::{Mat3, C64};
use nalgebra::{DMatrix, Matrix3};
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use std::sync::Arc;

const ZERO: C64 = C64 { re: 0.0, im: 0.0 };

/// Thin-film demagnetization tensor diag(0, 0, 1).
pub fn assemble_demag() -> Matrix3<f64> {
    Matrix3::from_diagonal(&nalgebra::Vector3::new(0.0, 0.0, 1.0))
}

/// Slab discretization of the film and the qubit height.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvaluationStack {
    /// Number of slabs N_z.
    pub slabs: usize,
    /// Film thickness in meters; the film occupies 0 ≤ z ≤ thickness.
    pub thickness: f64,
    /// Qubit distance d above the film top in meters.
    pub height: f64,
    /// z-integration rule for slab couplings and propagation.
    pub rule: SlabRule,
}

impl EvaluationStack {
    /// Validated constructor using exact slab averages.
    pub fn new(slabs: usize, thickness: f64, height: f64) -> Result<Self> {
        Self::with_rule(slabs, thickness, height, SlabRule::CellAverage)
    }

    /// Validated constructor with an explicit slab rule.
    pub fn with_rule(slabs: usize, thickness: f64, height: f64, rule: SlabRule) -> Result<Self> {
        let s = Self { slabs, thickness, height, rule };
        let v = s.violations();
        if v.is_empty() {
            Ok(s)
        } else {
            Err(Error::InvalidInput(v.join("; ")))
        }
    }

    /// Invariant violations.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.slabs == 0 {
            v.push("slab count must be ≥ 1".into());
        }
        if !(self.thickness > 0.0) {
            v.push(format!("film thickness must be > 0, got {}", self.thickness));
        }
        if !(self.height > 0.0) {
            v.push(format!("qubit height above the film must be > 0, got {}", self.height));
        }
        v
    }

    /// Slab thickness Δz.
    pub fn dz(&self) -> f64 {
        self.thickness / self.slabs as f64
    }

    /// Slab midpoints z_k = (k − ½)Δz.
    pub fn midpoints(&self) -> Vec<f64> {
        (0..self.slabs).map(|k| (k as f64 + 0.5) * self.dz()).collect()
    }

    /// Qubit height z_qb = thickness + d.
    pub fn z_qubit(&self) -> f64 {
        self.thickness + self.height
    }
}

/// Preconditioner choice for the iterative solves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preconditioner {
    /// No preconditioning.
    None,
    /// Exact inverse of each channel's diagonal block I − f₀χ𝕂_ii.
    BlockDiagonal,
    /// Mask-aware correction I + C·(D − I) with D_i = (I − χ𝕂_ii)⁻¹: the
    /// per-channel response of solid material, restricted to the pattern by
    /// one correlation with the shape factors.
    Masked,
}

/// Krylov iteration used for the reduced systems.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KrylovMethod {
    /// Restarted GMRES.
    Gmres,
    /// BiCGStab (short recurrences, no restart).
    Bicgstab,
}

/// Iterative solver settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    /// Krylov method.
    pub method: KrylovMethod,
    /// GMRES restart length.
    pub restart: usize,
    /// Relative residual tolerance.
    pub tolerance: f64,
    /// Maximum number of operator applications per solve.
    pub max_iterations: usize,
    /// Preconditioner.
    pub preconditioner: Preconditioner,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            method: KrylovMethod::Gmres,
            restart: 60,
            tolerance: 1e-8,
            max_iterations: 2000,
            preconditioner: Preconditioner::Masked,
        }
    }
}

impl SolverOptions {
    fn gmres(&self) -> GmresOptions {
        GmresOptions { restart: self.restart, tolerance: self.tolerance, max_iterations: self.max_iterations }
    }
}

/// Geometry-dependent, frequency- and momentum-independent data: the channel
/// list and the Fourier-space correlation kernel of the shape factors.
pub struct ConvolutionEngine {
    basis: ReciprocalBasis,
    filling: f64,
    fft_len: usize,
    positions: Vec<usize>,
    kernel_hat: Vec<C64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
    scratch_len: usize,
    geometry_hash: String,
}

impl std::fmt::Debug for ConvolutionEngine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ConvolutionEngine")
            .field("channels", &self.basis.len())
            .field("fft_len", &self.fft_len)
            .finish()
    }
}

/// Reusable buffers for correlations.
pub struct Workspace {
    grid: Vec<C64>,
    transposed: Vec<C64>,
    scratch: Vec<C64>,
}

impl ConvolutionEngine {
    /// Builds the engine for all channels |m|, |n| ≤ `max_order`.
    pub fn new(geometry: &UnitCellGeometry, max_order: usize) -> Result<Self> {
        geometry.validate()?;
        let basis = reciprocal_lattice(geometry, max_order);
        let o = max_order as i64;
        let l = 4 * max_order + 1;
        let wrap = |k: i64| k.rem_euclid(l as i64) as usize;
        let positions = basis.points.iter().map(|p| wrap(p.n as i64) * l + wrap(p.m as i64)).collect();
        let mut planner = FftPlanner::new();
        let forward = planner.plan_fft_forward(l);
        let inverse = planner.plan_fft_inverse(l);
        let scratch_len = forward.get_inplace_scratch_len().max(inverse.get_inplace_scratch_len());
        let mut engine = Self {
            basis,
            filling: geometry.filling_factor(),
            fft_len: l,
            positions,
            kernel_hat: vec![ZERO; l * l],
            forward,
            inverse,
            scratch_len,
            geometry_hash: geometry.content_hash(),
        };
        // Correlation kernel g(e) = f(−e) on all differences |e_m|, |e_n| ≤ 2·order.
        let mut grid = vec![ZERO; l * l];
        let (b1, b2) = (engine.basis.b1, engine.basis.b2);
        for em in -2 * o..=2 * o {
            for en in -2 * o..=2 * o {
                let g = [
                    -(em as f64 * b1[0] + en as f64 * b2[0]),
                    -(em as f64 * b1[1] + en as f64 * b2[1]),
                ];
                grid[wrap(en) * l + wrap(em)] = shape_factor_at(geometry, g);
            }
        }
        let mut ws = engine.workspace();
        ws.grid.copy_from_slice(&grid);
        engine.forward_2d_rows(&mut ws, false);
        let norm = 1.0 / (l * l) as f64;
        engine.kernel_hat = ws.transposed.iter().map(|v| v * norm).collect();
        Ok(engine)
    }

    /// Channel list.
    pub fn basis(&self) -> &ReciprocalBasis {
        &self.basis
    }

    /// Number of channels N_G + 1.
    pub fn channels(&self) -> usize {
        self.basis.len()
    }

    /// Filling factor f₀ of the geometry.
    pub fn filling(&self) -> f64 {
        self.filling
    }

    /// Content hash of the geometry the engine was built from.
    pub fn geometry_hash(&self) -> &str {
        &self.geometry_hash
    }

    /// Fresh correlation buffers.
    pub fn workspace(&self) -> Workspace {
        let n = self.fft_len * self.fft_len;
        Workspace { grid: vec![ZERO; n], transposed: vec![ZERO; n], scratch: vec![ZERO; self.scratch_len] }
    }

    /// Rows of the padded grid that can hold channel data: n mod L for |n| ≤ order.
    fn occupied_rows(&self) -> [std::ops::Range<usize>; 2] {
        let (l, o) = (self.fft_len, self.basis.order);
        [0..(o + 1) * l, (l - o) * l..l * l]
    }

    fn forward_2d(&self, ws: &mut Workspace) {
        self.forward_2d_rows(ws, true);
    }

    fn forward_2d_rows(&self, ws: &mut Workspace, sparse_rows: bool) {
        let l = self.fft_len;
        if sparse_rows {
            for r in self.occupied_rows() {
                self.forward.process_with_scratch(&mut ws.grid[r], &mut ws.scratch);
            }
        } else {
            self.forward.process_with_scratch(&mut ws.grid, &mut ws.scratch);
        }
        transpose(&ws.grid, &mut ws.transposed, l);
        self.forward.process_with_scratch(&mut ws.transposed, &mut ws.scratch);
    }

    /// Inverse transform; only rows that hold channels are completed.
    fn inverse_2d(&self, ws: &mut Workspace) {
        let l = self.fft_len;
        self.inverse.process_with_scratch(&mut ws.transposed, &mut ws.scratch);
        transpose(&ws.transposed, &mut ws.grid, l);
        for r in self.occupied_rows() {
            self.inverse.process_with_scratch(&mut ws.grid[r], &mut ws.scratch);
        }
    }

    /// y_i = Σ_j C_ij·u_j with C_ij = f_{G_j − G_i}, for one scalar field
    /// stored with `stride` between channels starting at `offset`.
    pub fn correlate_strided(&self, input: &[C64], output: &mut [C64], stride: usize, offset: usize, ws: &mut Workspace) {
        ws.grid.iter_mut().for_each(|v| *v = ZERO);
        for (i, &p) in self.positions.iter().enumerate() {
            ws.grid[p] = input[i * stride + offset];
        }
        self.forward_2d(ws);
        for (t, k) in ws.transposed.iter_mut().zip(&self.kernel_hat) {
            *t *= k;
        }
        self.inverse_2d(ws);
        for (i, &p) in self.positions.iter().enumerate() {
            output[i * stride + offset] = ws.grid[p];
        }
    }

    /// Applies C to every scalar field of a channel-major vector with
    /// `width` components per channel.
    pub fn correlate_fields(&self, input: &[C64], output: &mut [C64], width: usize, ws: &mut Workspace) {
        for f in 0..width {
            self.correlate_strided(input, output, width, f, ws);
        }
    }

    /// Coefficient C_ij = f_{G_j − G_i} evaluated directly from the geometry
    /// (no FFT); used by the dense oracle.
    pub fn coefficient_direct(&self, geometry: &UnitCellGeometry, i: usize, j: usize) -> C64 {
        let (gi, gj) = (self.basis.points[i].g, self.basis.points[j].g);
        shape_factor_at(geometry, [gj[0] - gi[0], gj[1] - gi[1]])
    }
}

fn transpose(src: &[C64], dst: &mut [C64], l: usize) {
    const B: usize = 16;
    for ib in (0..l).step_by(B) {
        for jb in (0..l).step_by(B) {
            for i in ib..(ib + B).min(l) {
                for j in jb..(jb + B).min(l) {
                    dst[j * l + i] = src[i * l + j];
                }
            }
        }
    }
}

/// Dense row-major complex matrix helpers for the small per-channel blocks.
fn matvec(a: &[C64], rows: usize, cols: usize, x: &[C64], y: &mut [C64]) {
    for r in 0..rows {
        let mut s = ZERO;
        for c in 0..cols {
            s += a[r * cols + c] * x[c];
        }
        y[r] = s;
    }
}

fn matvec_adjoint(a: &[C64], rows: usize, cols: usize, x: &[C64], y: &mut [C64]) {
    for c in 0..cols {
        let mut s = ZERO;
        for r in 0..rows {
            s += a[r * cols + c].conj() * x[r];
        }
        y[c] = s;
    }
}

fn to_dense(a: &[C64], rows: usize, cols: usize) -> DMatrix<C64> {
    DMatrix::from_fn(rows, cols, |r, c| a[r * cols + c])
}

fn from_dense(m: &DMatrix<C64>) -> Vec<C64> {
    let mut out = Vec::with_capacity(m.nrows() * m.ncols());
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            out.push(m[(r, c)]);
        }
    }
    out
}

/// Low-rank factorization χ = Σ_k σ_k·u_k·v_kᴴ keeping σ_k > 10⁻¹³·σ_max.
#[derive(Debug, Clone)]
struct LowRank {
    u: Vec<[C64; 3]>,
    v: Vec<[C64; 3]>,
    sigma: Vec<f64>,
}

impl LowRank {
    fn new(chi: &Mat3) -> Self {
        let svd = chi.svd(true, true);
        let (u, vt) = (svd.u.expect("requested U"), svd.v_t.expect("requested Vᴴ"));
        let smax = svd.singular_values.max();
        let mut lr = LowRank { u: Vec::new(), v: Vec::new(), sigma: Vec::new() };
        if !(smax > 0.0) {
            return lr;
        }
        for k in 0..3 {
            let s = svd.singular_values[k];
            if s > 1e-13 * smax {
                lr.u.push([u[(0, k)], u[(1, k)], u[(2, k)]]);
                lr.v.push([vt[(k, 0)].conj(), vt[(k, 1)].conj(), vt[(k, 2)].conj()]);
                lr.sigma.push(s);
            }
        }
        lr
    }

    fn rank(&self) -> usize {
        self.sigma.len()
    }
}

/// Result of a single linear solve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    /// Operator applications.
    pub iterations: usize,
    /// Final relative residual of the full system.
    pub residual: f64,
}

impl From<SolveStats> for SolveReport {
    fn from(s: SolveStats) -> Self {
        Self { iterations: s.iterations, residual: s.residual }
    }
}

/// The block system 𝔸(q, ω) for one in-plane momentum and frequency.
pub struct BlockSystem<'e> {
    engine: &'e ConvolutionEngine,
    stack: EvaluationStack,
    q: [f64; 2],
    omega: f64,
    chi: Mat3,
    lr: LowRank,
    /// Block size per channel, 3·N_z.
    nb: usize,
    /// Reduced block size per channel, rank·N_z.
    rb: usize,
    /// 𝕂_i = Δz·G₀(q − G_i) − ℕ per channel, nb×nb row-major.
    k: Vec<C64>,
    /// Σ·Vᴴ𝕂_i per channel, rb×nb.
    svk: Vec<C64>,
    /// Λ_i = Vᴴ𝕂_iU per channel, rb×rb.
    lam: Vec<C64>,
    /// Σ per reduced component.
    sig: Vec<f64>,
}

impl std::fmt::Debug for BlockSystem<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BlockSystem").field("q", &self.q).field("omega", &self.omega).field("dim", &self.dimension()).finish()
    }
}

impl<'e> BlockSystem<'e> {
    /// Assembles the per-channel blocks for (q, ω) with laboratory-frame χ.
    pub fn new(engine: &'e ConvolutionEngine, chi_lab: &Mat3, stack: &EvaluationStack, q: [f64; 2], omega: f64) -> Result<Self> {
        let v = stack.violations();
        if !v.is_empty() {
            return Err(Error::InvalidInput(v.join("; ")));
        }
        if !(omega > 0.0) {
            return Err(Error::InvalidInput(format!("frequency must be > 0, got {omega}")));
        }
        if chi_lab.iter().any(|c| !c.re.is_finite() || !c.im.is_finite()) {
            return Err(Error::InvalidInput("susceptibility has non-finite entries".into()));
        }
        let nz = stack.slabs;
        let nb = 3 * nz;
        let lr = LowRank::new(chi_lab);
        let r = lr.rank();
        let rb = r * nz;
        let nc = engine.channels();
        let dz = stack.dz();
        let zs = stack.midpoints();
        let demag = assemble_demag();
        let mut k = vec![ZERO; nc * nb * nb];
        let mut svk = vec![ZERO; nc * rb * nb];
        let mut lam = vec![ZERO; nc * rb * rb];
        let mut sig = Vec::with_capacity(rb);
        for _ in 0..nz {
            sig.extend_from_slice(&lr.sigma);
        }
        for (i, p) in engine.basis.points.iter().enumerate() {
            let qi = [q[0] - p.g[0], q[1] - p.g[1]];
            let ki = &mut k[i * nb * nb..(i + 1) * nb * nb];
            for a in 0..nz {
                for b in 0..nz {
                    let g = slab_coupling(qi, zs[a], zs[b], dz, omega, stack.rule);
                    for x in 0..3 {
                        for y in 0..3 {
                            let mut val = g[(x, y)];
                            if a == b {
                                val -= demag[(x, y)];
                            }
                            ki[(3 * a + x) * nb + 3 * b + y] = val;
                        }
                    }
                }
            }
            // Σ·Vᴴ𝕂_i: slab-block-diagonal Vᴴ (r×3 per slab).
            let s = &mut svk[i * rb * nb..(i + 1) * rb * nb];
            for a in 0..nz {
                for (kk, vk) in lr.v.iter().enumerate() {
                    let row = a * r + kk;
                    for col in 0..nb {
                        let mut acc = ZERO;
                        for x in 0..3 {
                            acc += vk[x].conj() * ki[(3 * a + x) * nb + col];
                        }
                        s[row * nb + col] = acc * lr.sigma[kk];
                    }
                }
            }
            // Λ_i = Vᴴ𝕂_iU (without Σ).
            let l = &mut lam[i * rb * rb..(i + 1) * rb * rb];
            for row in 0..rb {
                let sr = lr.sigma[row % r];
                for b in 0..nz {
                    for (kk, uk) in lr.u.iter().enumerate() {
                        let mut acc = ZERO;
                        for y in 0..3 {
                            acc += s[row * nb + 3 * b + y] * uk[y];
                        }
                        l[row * rb + b * r + kk] = acc / sr;
                    }
                }
            }
        }
        Ok(Self { engine, stack: *stack, q, omega, chi: *chi_lab, lr, nb, rb, k, svk, lam, sig })
    }

    /// Dimension 3·N_z·(N_G + 1).
    pub fn dimension(&self) -> usize {
        self.nb * self.engine.channels()
    }

    /// Number of channels.
    pub fn channels(&self) -> usize {
        self.engine.channels()
    }

    /// In-plane momentum.
    pub fn q(&self) -> [f64; 2] {
        self.q
    }

    /// Angular frequency.
    pub fn omega(&self) -> f64 {
        self.omega
    }

    /// Laboratory susceptibility.
    pub fn chi(&self) -> &Mat3 {
        &self.chi
    }

    /// Slab stack.
    pub fn stack(&self) -> &EvaluationStack {
        &self.stack
    }

    /// Convolution engine.
    pub fn engine(&self) -> &ConvolutionEngine {
        self.engine
    }

    /// Per-channel block 𝕂_i (3N_z × 3N_z, row-major).
    pub fn k_block(&self, i: usize) -> &[C64] {
        &self.k[i * self.nb * self.nb..(i + 1) * self.nb * self.nb]
    }

    fn check_len(&self, v: &[C64]) -> Result<()> {
        if v.len() != self.dimension() {
            return Err(Error::DimensionMismatch { expected: self.dimension(), got: v.len() });
        }
        Ok(())
    }

    /// 𝔸·v = v + 𝕏ℕv − 𝕏𝔾v, without materializing 𝔸.
    pub fn apply(&self, v: &[C64], ws: &mut Workspace) -> Result<Vec<C64>> {
        self.check_len(v)?;
        let (nb, rb, nc) = (self.nb, self.rb, self.channels());
        let mut out = v.to_vec();
        if rb == 0 {
            return Ok(out);
        }
        let mut s = vec![ZERO; nc * rb];
        for i in 0..nc {
            matvec(&self.svk[i * rb * nb..(i + 1) * rb * nb], rb, nb, &v[i * nb..(i + 1) * nb], &mut s[i * rb..(i + 1) * rb]);
        }
        let mut cs = vec![ZERO; nc * rb];
        self.engine.correlate_fields(&s, &mut cs, rb, ws);
        self.expand_u(&cs, &mut out, -1.0);
        Ok(out)
    }

    /// 𝔸ᴴ·v = v − 𝕂ᴴ𝕏ᴴv, without materializing 𝔸.
    pub fn apply_adjoint(&self, v: &[C64], ws: &mut Workspace) -> Result<Vec<C64>> {
        self.check_len(v)?;
        let (nb, rb, nc) = (self.nb, self.rb, self.channels());
        let mut out = v.to_vec();
        if rb == 0 {
            return Ok(out);
        }
        let mut s = vec![ZERO; nc * rb];
        self.project_u(v, &mut s);
        let mut cs = vec![ZERO; nc * rb];
        self.engine.correlate_fields(&s, &mut cs, rb, ws);
        let mut t = vec![ZERO; nb];
        for i in 0..nc {
            matvec_adjoint(&self.svk[i * rb * nb..(i + 1) * rb * nb], rb, nb, &cs[i * rb..(i + 1) * rb], &mut t);
            for (o, ti) in out[i * nb..(i + 1) * nb].iter_mut().zip(&t) {
                *o -= ti;
            }
        }
        Ok(out)
    }

    /// out += factor·U·w (channel-wise, slab-block-diagonal U).
    fn expand_u(&self, w: &[C64], out: &mut [C64], factor: f64) {
        let (nb, rb, r) = (self.nb, self.rb, self.lr.rank());
        for i in 0..self.channels() {
            for a in 0..self.stack.slabs {
                for (kk, uk) in self.lr.u.iter().enumerate() {
                    let c = w[i * rb + a * r + kk] * factor;
                    for x in 0..3 {
                        out[i * nb + 3 * a + x] += uk[x] * c;
                    }
                }
            }
        }
    }

    /// w = Uᴴ·v channel-wise.
    fn project_u(&self, v: &[C64], w: &mut [C64]) {
        let (nb, rb, r) = (self.nb, self.rb, self.lr.rank());
        for i in 0..self.channels() {
            for a in 0..self.stack.slabs {
                for (kk, uk) in self.lr.u.iter().enumerate() {
                    let mut acc = ZERO;
                    for x in 0..3 {
                        acc += uk[x].conj() * v[i * nb + 3 * a + x];
                    }
                    w[i * rb + a * r + kk] = acc;
                }
            }
        }
    }

    /// m = V·s: reduced adjoint coordinates mapped to the row space of χ.
    /// Unlike s, m does not depend on the phase convention of the SVD, so it
    /// can seed a solve at a neighbouring frequency.
    fn lift_v(&self, s: &[C64]) -> Vec<C64> {
        let (nb, rb, r) = (self.nb, self.rb, self.lr.rank());
        let mut m = vec![ZERO; self.channels() * nb];
        for i in 0..self.channels() {
            for a in 0..self.stack.slabs {
                for (kk, vk) in self.lr.v.iter().enumerate() {
                    let sv = s[i * rb + a * r + kk];
                    for x in 0..3 {
                        m[i * nb + 3 * a + x] += vk[x] * sv;
                    }
                }
            }
        }
        m
    }

    /// s = Vᴴ·m (inverse of [`Self::lift_v`] on the row space of χ).
    fn project_v(&self, m: &[C64]) -> Vec<C64> {
        let (nb, rb, r) = (self.nb, self.rb, self.lr.rank());
        let mut s = vec![ZERO; self.channels() * rb];
        for i in 0..self.channels() {
            for a in 0..self.stack.slabs {
                for (kk, vk) in self.lr.v.iter().enumerate() {
                    let mut acc = ZERO;
                    for x in 0..3 {
                        acc += vk[x].conj() * m[i * nb + 3 * a + x];
                    }
                    s[i * rb + a * r + kk] = acc;
                }
            }
        }
        s
    }

    /// Explicitly materialized 𝔸 built from its block definitions, with
    /// shape-factor coefficients evaluated directly from `geometry`.
    pub fn materialize(&self, geometry: &UnitCellGeometry) -> DMatrix<C64> {
        let (nb, nc, nz) = (self.nb, self.channels(), self.stack.slabs);
        let n = self.dimension();
        let mut a = DMatrix::<C64>::identity(n, n);
        for i in 0..nc {
            for j in 0..nc {
                let c = self.engine.coefficient_direct(geometry, i, j);
                if c == ZERO {
                    continue;
                }
                let chi = self.chi * c;
                let kj = self.k_block(j);
                for kslab in 0..nz {
                    for l in 0..nz {
                        for x in 0..3 {
                            for y in 0..3 {
                                let mut acc = ZERO;
                                for w in 0..3 {
                                    acc += chi[(x, w)] * kj[(3 * kslab + w) * nb + 3 * l + y];
                                }
                                a[(i * nb + 3 * kslab + x, j * nb + 3 * l + y)] -= acc;
                            }
                        }
                    }
                }
            }
        }
        a
    }

    /// Per-channel preconditioner blocks E_i (rb×rb) for the reduced
    /// operator I − Σ·C·Λ (or with Λᴴ when `adjoint`).
    fn preconditioner_blocks(&self, kind: Preconditioner, adjoint: bool) -> Option<Vec<C64>> {
        let (rb, nc) = (self.rb, self.channels());
        let scale = match kind {
            Preconditioner::None => return None,
            Preconditioner::BlockDiagonal => self.engine.filling(),
            Preconditioner::Masked => 1.0,
        };
        let mut out = vec![ZERO; nc * rb * rb];
        for i in 0..nc {
            let l = to_dense(&self.lam[i * rb * rb..(i + 1) * rb * rb], rb, rb);
            let l = if adjoint { l.adjoint() } else { l };
            let mut m = DMatrix::<C64>::identity(rb, rb);
            for row in 0..rb {
                for col in 0..rb {
                    m[(row, col)] -= l[(row, col)] * (self.sig[row] * scale);
                }
            }
            let inv = m.try_inverse().unwrap_or_else(|| DMatrix::identity(rb, rb));
            let blk = match kind {
                // Block-diagonal: the inverse itself.
                Preconditioner::BlockDiagonal => inv,
                // Masked: D − I, re-inserted through C.
                _ => inv - DMatrix::identity(rb, rb),
            };
            out[i * rb * rb..(i + 1) * rb * rb].copy_from_slice(&from_dense(&blk));
        }
        Some(out)
    }

    /// Runs GMRES on the reduced operator I − Σ·C·Λ (Λᴴ if `adjoint`).
    fn reduced_solve(
        &self,
        rhs: &[C64],
        guess: &mut [C64],
        adjoint: bool,
        scale: f64,
        measure: Option<&dyn Fn(&[C64]) -> f64>,
        opts: &SolverOptions,
        ws: &mut Workspace,
    ) -> Result<SolveStats> {
        let (rb, nc) = (self.rb, self.channels());
        let lam = &self.lam;
        let sig = &self.sig;
        let engine = self.engine;
        let pre = self.preconditioner_blocks(opts.preconditioner, adjoint);
        let kind = opts.preconditioner;
        let ws = std::cell::RefCell::new(ws);
        let mut tmp = vec![ZERO; nc * rb];
        let mut tmp2 = vec![ZERO; nc * rb];
        let apply = |x: &[C64], y: &mut [C64]| {
            let mut t = vec![ZERO; rb];
            for i in 0..nc {
                let blk = &lam[i * rb * rb..(i + 1) * rb * rb];
                if adjoint {
                    matvec_adjoint(blk, rb, rb, &x[i * rb..(i + 1) * rb], &mut t);
                } else {
                    matvec(blk, rb, rb, &x[i * rb..(i + 1) * rb], &mut t);
                }
                y[i * rb..(i + 1) * rb].copy_from_slice(&t);
            }
            let src = y.to_vec();
            engine.correlate_fields(&src, y, rb, &mut ws.borrow_mut());
            for (idx, (yi, xi)) in y.iter_mut().zip(x).enumerate() {
                *yi = xi - *yi * sig[idx % rb];
            }
        };
        let precondition = |x: &[C64], y: &mut [C64]| match (&pre, kind) {
            (None, _) => y.copy_from_slice(x),
            (Some(p), Preconditioner::BlockDiagonal) => {
                for i in 0..nc {
                    matvec(&p[i * rb * rb..(i + 1) * rb * rb], rb, rb, &x[i * rb..(i + 1) * rb], &mut y[i * rb..(i + 1) * rb]);
                }
            }
            (Some(p), _) => {
                for i in 0..nc {
                    matvec(&p[i * rb * rb..(i + 1) * rb * rb], rb, rb, &x[i * rb..(i + 1) * rb], &mut tmp[i * rb..(i + 1) * rb]);
                }
                engine.correlate_fields(&tmp, &mut tmp2, rb, &mut ws.borrow_mut());
                for ((yi, xi), ci) in y.iter_mut().zip(x).zip(&tmp2) {
                    *yi = xi + ci;
                }
            }
        };
        match opts.method {
            KrylovMethod::Gmres => gmres(apply, precondition, rhs, guess, Some(scale), measure, &opts.gmres()),
            KrylovMethod::Bicgstab => bicgstab(apply, precondition, rhs, guess, Some(scale), measure, &opts.gmres()),
        }
    }

    /// Solves 𝔸·x = b. Returns x and the solve report.
    pub fn solve(&self, b: &[C64], opts: &SolverOptions, ws: &mut Workspace) -> Result<(Vec<C64>, SolveReport)> {
        self.check_len(b)?;
        let (nb, rb, nc) = (self.nb, self.rb, self.channels());
        let bn = norm(b);
        if rb == 0 || bn == 0.0 {
            return Ok((b.to_vec(), SolveReport { iterations: 0, residual: 0.0 }));
        }
        // x = b + U·w with (I − ΣCΛ)·w = ΣC·Vᴴ𝕂b; the reduced residual is the
        // full residual expressed in the orthonormal U basis.
        let mut s = vec![ZERO; nc * rb];
        for i in 0..nc {
            matvec(&self.svk[i * rb * nb..(i + 1) * rb * nb], rb, nb, &b[i * nb..(i + 1) * nb], &mut s[i * rb..(i + 1) * rb]);
        }
        let mut rhs = vec![ZERO; nc * rb];
        self.engine.correlate_fields(&s, &mut rhs, rb, ws);
        let mut w = vec![ZERO; nc * rb];
        let stats = self.reduced_solve(&rhs, &mut w, false, bn, None, opts, ws)?;
        let mut x = b.to_vec();
        self.expand_u(&w, &mut x, 1.0);
        Ok((x, stats.into()))
    }

    /// Solves 𝔸ᴴ·y = c with an optional reduced-space initial guess and a
    /// reference norm for the relative tolerance (‖c‖ if `None`).
    /// Returns (y, reduced solution, report).
    pub fn solve_adjoint_with(
        &self,
        c: &[C64],
        reduced_guess: Option<&[C64]>,
        scale: Option<f64>,
        opts: &SolverOptions,
        ws: &mut Workspace,
    ) -> Result<(Vec<C64>, Vec<C64>, SolveReport)> {
        self.check_len(c)?;
        let (nb, rb, nc) = (self.nb, self.rb, self.channels());
        let scale = scale.unwrap_or_else(|| norm(c));
        if rb == 0 || scale == 0.0 {
            return Ok((c.to_vec(), vec![ZERO; nc * rb], SolveReport { iterations: 0, residual: 0.0 }));
        }
        // y = c + 𝕂ᴴVΣ·s' with s = Σ·s'... written as y = c + (ΣVᴴ𝕂)ᴴ·s,
        // (I − ΣCΛᴴ)·s = ΣC·Uᴴc. The full residual equals (ΣVᴴ𝕂)ᴴ·r_s / σ.
        let mut u = vec![ZERO; nc * rb];
        self.project_u(c, &mut u);
        let mut rhs = vec![ZERO; nc * rb];
        self.engine.correlate_fields(&u, &mut rhs, rb, ws);
        for (idx, v) in rhs.iter_mut().enumerate() {
            *v *= self.sig[idx % rb];
        }
        let svk = &self.svk;
        let sig = &self.sig;
        let lift = |s: &[C64], out: &mut [C64]| {
            let mut t = vec![ZERO; nb];
            let mut ss = vec![ZERO; rb];
            for i in 0..nc {
                for f in 0..rb {
                    ss[f] = s[i * rb + f] / sig[f];
                }
                matvec_adjoint(&svk[i * rb * nb..(i + 1) * rb * nb], rb, nb, &ss, &mut t);
                for (o, ti) in out[i * nb..(i + 1) * nb].iter_mut().zip(&t) {
                    *o += ti;
                }
            }
        };
        let measure = |r: &[C64]| {
            let mut out = vec![ZERO; nc * nb];
            lift(r, &mut out);
            norm(&out)
        };
        let mut s = match reduced_guess {
            Some(g) if g.len() == nc * rb => g.to_vec(),
            Some(g) => return Err(Error::DimensionMismatch { expected: nc * rb, got: g.len() }),
            None => vec![ZERO; nc * rb],
        };
        let stats = self.reduced_solve(&rhs, &mut s, true, scale, Some(&measure), opts, ws)?;
        let mut y = c.to_vec();
        lift(&s, &mut y);
        Ok((y, s, stats.into()))
    }

    /// Solves 𝔸ᴴ·y = c.
    pub fn solve_adjoint(&self, c: &[C64], opts: &SolverOptions, ws: &mut Workspace) -> Result<(Vec<C64>, SolveReport)> {
        let (y, _, rep) = self.solve_adjoint_with(c, None, None, opts, ws)?;
        Ok((y, rep))
    }

    /// Propagation block P_i = [∫_slab k G₀(q − G_i, z_qb, z′)dz′]_k (3 × 3N_z) for channel i.
    pub fn propagation_block(&self, i: usize) -> DMatrix<C64> {
        let g = self.engine.basis.points[i].g;
        let qi = [self.q[0] - g[0], self.q[1] - g[1]];
        let zq = self.stack.z_qubit();
        let dz = self.stack.dz();
        let mut p = DMatrix::<C64>::zeros(3, self.nb);
        for (a, z) in self.stack.midpoints().into_iter().enumerate() {
            let blk = slab_to_point(qi, zq, z, dz, self.omega, self.stack.rule);
            for x in 0..3 {
                for y in 0..3 {
                    p[(x, 3 * a + y)] = blk[(x, y)];
                }
            }
        }
        p
    }

    /// Y = 𝔸⁻ᴴ·(𝕃₀ℙ)ᴴ: the three adjoint solutions whose Hermitian
    /// conjugates are the rows of the propagated kernel 𝕃₀ℙ𝒯.
    ///
    /// The right-hand sides share the dominant evanescent polarization:
    /// column c equals k₀²β⊗e_c − ū_c·β⊗ū. One solve for β⊗ū seeds all
    /// three columns, which are then checked against a common tolerance
    /// ‖r_c‖ ≤ tol·max_c‖b_c‖ and refined only if needed.
    pub fn propagated_rows(&self, opts: &SolverOptions, ws: &mut Workspace) -> Result<PropagatedRows> {
        self.propagated_rows_seeded(opts, None, ws)
    }

    /// [`Self::propagated_rows`] with the shared solve started from `seed`,
    /// the [`PropagatedRows::seed`] of a system at a nearby frequency.
    pub fn propagated_rows_seeded(
        &self,
        opts: &SolverOptions,
        seed: Option<&[C64]>,
        ws: &mut Workspace,
    ) -> Result<PropagatedRows> {
        let (nb, nc) = (self.nb, self.channels());
        let n = nb * nc;
        let p0 = self.propagation_block(0);
        let mut cols: Vec<Vec<C64>> = (0..3)
            .map(|c| {
                let mut b = vec![ZERO; n];
                for j in 0..nb {
                    b[j] = p0[(c, j)].conj();
                }
                b
            })
            .collect();
        let scale = cols.iter().map(|b| norm(b)).fold(0.0, f64::max);
        let mut report = SolveReport { iterations: 0, residual: 0.0 };
        if scale == 0.0 || self.rb == 0 {
            return Ok(PropagatedRows { columns: cols, report, seed: Vec::new() });
        }
        // Shared direction: the propagation block is k₀²·β − β·ū ūᵀ per slab,
        // so column c minus its k₀² part is −ū_c times a common vector.
        let k0 = crate::greens::k0(self.omega);
        let qn = self.q[0].hypot(self.q[1]);
        let kz = crate::greens::kz(qn, k0);
        let ubar = [C64::new(self.q[0], 0.0), C64::new(self.q[1], 0.0), kz.conj()];
        let mut common = vec![ZERO; n];
        let zq = self.stack.z_qubit();
        let dz = self.stack.dz();
        for (a, z) in self.stack.midpoints().into_iter().enumerate() {
            // β_a = conj(Δz·(i/2k_z)·e^{ik_z(z_qb − z_a)}·slab factor).
            let mut gamma = C64::new(0.0, 0.5) / kz * (C64::new(0.0, 1.0) * kz * (zq - z)).exp() * dz;
            if self.stack.rule == SlabRule::CellAverage {
                gamma *= crate::greens::slab_to_point_factor(self.q, dz, self.omega);
            }
            for x in 0..3 {
                common[3 * a + x] = gamma.conj() * ubar[x];
            }
        }
        let guess = match seed {
            Some(m) if m.len() == n => Some(self.project_v(m)),
            _ => None,
        };
        let (_, s_common, rep) = self.solve_adjoint_with(&common, guess.as_deref(), Some(norm(&common)), opts, ws)?;
        report.iterations += rep.iterations;
        let mut worst: f64 = 0.0;
        for (c, col) in cols.iter_mut().enumerate() {
            let guess: Vec<C64> = s_common.iter().map(|v| -ubar[c] * v).collect();
            let (y, _, rep) = self.solve_adjoint_with(col, Some(&guess), Some(scale), opts, ws)?;
            report.iterations += rep.iterations;
            worst = worst.max(rep.residual);
            *col = y;
        }
        report.residual = worst;
        Ok(PropagatedRows { columns: cols, report, seed: self.lift_v(&s_common) })
    }

    /// Q = Y_Lᴴ·𝕏̃·Y_R with 𝕏̃ = (𝕏 − 𝕏ᴴ)/(2iΔz) = (𝓘mχ ⊗ C)/Δz.
    pub fn dissipative_form(&self, left: &[Vec<C64>], right: &[Vec<C64>], ws: &mut Workspace) -> Mat3 {
        let (nb, nc, nz) = (self.nb, self.channels(), self.stack.slabs);
        let im = crate::magnetics::anti_hermitian_part(&self.chi);
        let eig = im.symmetric_eigen();
        let lmax = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let mut q = Mat3::zeros();
        if lmax == 0.0 {
            return q;
        }
        let dz = self.stack.dz();
        let mut a_l = vec![ZERO; nc];
        let mut a_r = vec![ZERO; nc];
        let mut ca = vec![ZERO; nc];
        for e in 0..3 {
            let lam = eig.eigenvalues[e];
            if lam.abs() <= 1e-14 * lmax {
                continue;
            }
            let ev: [C64; 3] = [eig.eigenvectors[(0, e)], eig.eigenvectors[(1, e)], eig.eigenvectors[(2, e)]];
            for slab in 0..nz {
                let project = |y: &[C64], out: &mut [C64]| {
                    for i in 0..nc {
                        let mut acc = ZERO;
                        for x in 0..3 {
                            acc += ev[x].conj() * y[i * nb + 3 * slab + x];
                        }
                        out[i] = acc;
                    }
                };
                let mut conv_r: Vec<Vec<C64>> = Vec::with_capacity(right.len());
                for yr in right {
                    project(yr, &mut a_r);
                    self.engine.correlate_strided(&a_r, &mut ca, 1, 0, ws);
                    conv_r.push(ca.clone());
                }
                for (c, yl) in left.iter().enumerate() {
                    project(yl, &mut a_l);
                    for (d, cr) in conv_r.iter().enumerate() {
                        let s = crate::krylov::dotc(&a_l, cr);
                        q[(c, d)] += s * (lam / dz);
                    }
                }
            }
        }
        q
    }
}

/// The three adjoint solutions Y with solver metadata.
#[derive(Debug, Clone)]
pub struct PropagatedRows {
    /// Columns y_c = 𝔸⁻ᴴ(𝕃₀ℙ)ᴴe_c.
    pub columns: Vec<Vec<C64>>,
    /// Total iterations and worst relative residual.
    pub report: SolveReport,
    /// Shared solution in frequency-independent coordinates, for seeding.
    pub seed: Vec<C64>,
}

/// Solved blocks of 𝒯 = 𝔸⁻¹ retained for downstream use.
#[derive(Debug, Clone)]
pub struct CouplingKernel {
    /// In-plane momentum.
    pub q: [f64; 2],
    /// Angular frequency.
    pub omega: f64,
    /// Rows of 𝒯 belonging to channel 0 (3N_z rows), restricted to the
    /// solved columns for the forward path or complete for the adjoint path.
    pub first_block_row: DMatrix<C64>,
    /// Column indices of `first_block_row` in the full system.
    pub columns: Vec<usize>,
    /// Total operator applications.
    pub iterations: usize,
    /// Worst relative residual over all solves.
    pub max_residual: f64,
}

/// 𝔸·v (matrix-free).
pub fn apply_system(sys: &BlockSystem, v: &[C64]) -> Result<Vec<C64>> {
    sys.apply(v, &mut sys.engine.workspace())
}

/// Forward column solves 𝔸·x = e_col for each requested column, retaining
/// the channel-0 rows of each solution.
pub fn solve_kernel(sys: &BlockSystem, columns: &[usize], opts: &SolverOptions) -> Result<CouplingKernel> {
    let n = sys.dimension();
    let mut ws = sys.engine.workspace();
    let mut rows = DMatrix::<C64>::zeros(sys.nb, columns.len());
    let (mut iterations, mut worst) = (0, 0.0f64);
    for (k, &col) in columns.iter().enumerate() {
        if col >= n {
            return Err(Error::DimensionMismatch { expected: n, got: col });
        }
        let mut e = vec![ZERO; n];
        e[col] = C64::new(1.0, 0.0);
        let (x, rep) = sys.solve(&e, opts, &mut ws)?;
        iterations += rep.iterations;
        worst = worst.max(rep.residual);
        for r in 0..sys.nb {
            rows[(r, k)] = x[r];
        }
    }
    Ok(CouplingKernel { q: sys.q, omega: sys.omega, first_block_row: rows, columns: columns.to_vec(), iterations, max_residual: worst })
}

/// Complete channel-0 block-row of 𝒯 by 3N_z adjoint solves 𝔸ᴴ·y_r = e_r
/// (row r of 𝒯 is y_rᴴ).
pub fn solve_kernel_adjoint(sys: &BlockSystem, opts: &SolverOptions) -> Result<CouplingKernel> {
    let n = sys.dimension();
    let mut ws = sys.engine.workspace();
    let mut rows = DMatrix::<C64>::zeros(sys.nb, n);
    let (mut iterations, mut worst) = (0, 0.0f64);
    for r in 0..sys.nb {
        let mut e = vec![ZERO; n];
        e[r] = C64::new(1.0, 0.0);
        let (y, rep) = sys.solve_adjoint(&e, opts, &mut ws)?;
        iterations += rep.iterations;
        worst = worst.max(rep.residual);
        for (c, v) in y.iter().enumerate() {
            rows[(r, c)] = v.conj();
        }
    }
    Ok(CouplingKernel { q: sys.q, omega: sys.omega, first_block_row: rows, columns: (0..n).collect(), iterations, max_residual: worst })
}

/// Default cap on the dense oracle dimension.
pub const DENSE_CAP: usize = 3000;

/// Full 𝔸⁻¹ by LU factorization of the materialized system (test oracle).
pub fn dense_reference_solve(sys: &BlockSystem, geometry: &UnitCellGeometry, cap: usize) -> Result<DMatrix<C64>> {
    let n = sys.dimension();
    if n > cap {
        return Err(Error::DenseCapExceeded { dim: n, cap });
    }
    dense_inverse(sys.materialize(geometry))
}

/// Inverse of a square complex matrix by LU factorization.
pub fn dense_inverse(a: DMatrix<C64>) -> Result<DMatrix<C64>> {
    a.lu().try_inverse().ok_or_else(|| Error::NumericalBreakdown("singular matrix in dense reference solve".into()))
}
