//! Metasurface unit cells, reciprocal lattices and analytic shape factors.
//!
//! The unit cell is the rectangle [−a₁/2, a₁/2) × [−a₂/2, a₂/2). Fourier
//! coefficients follow f_G = (1/A)∫ 1_S(ρ) e^{−iG·ρ} d²ρ, so that the
//! occupancy is Σ_G f_G e^{iG·ρ}.

use crate::error::{Error, Result};
use crate::{Mat3, C64};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// A rotated rectangle inside the unit cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rectangle {
    /// Centre (x, y) in metres.
    pub center: [f64; 2],
    /// Side length along the shape's own x-axis in metres.
    pub width: f64,
    /// Side length along the shape's own y-axis in metres.
    pub height: f64,
    /// Counter-clockwise rotation about the centre in radians.
    pub rotation: f64,
}

impl Rectangle {
    fn corners(&self) -> [[f64; 2]; 4] {
        let (s, c) = self.rotation.sin_cos();
        let (hw, hh) = (self.width / 2.0, self.height / 2.0);
        let mut out = [[0.0; 2]; 4];
        for (k, (sx, sy)) in [(-1.0, -1.0), (1.0, -1.0), (1.0, 1.0), (-1.0, 1.0)].iter().enumerate() {
            let (lx, ly) = (sx * hw, sy * hh);
            out[k] = [self.center[0] + c * lx - s * ly, self.center[1] + s * lx + c * ly];
        }
        out
    }

    /// Whether a point lies inside (boundary counts as inside).
    pub fn contains(&self, p: [f64; 2]) -> bool {
        let (s, c) = self.rotation.sin_cos();
        let (dx, dy) = (p[0] - self.center[0], p[1] - self.center[1]);
        let lx = c * dx + s * dy;
        let ly = -s * dx + c * dy;
        lx.abs() <= self.width / 2.0 && ly.abs() <= self.height / 2.0
    }

    fn area(&self) -> f64 {
        self.width * self.height
    }
}

/// Separating-axis test for two convex quadrilaterals with positive-area
/// intersection (touching edges do not count as overlap).
fn rectangles_overlap(a: &Rectangle, b: &Rectangle, shift: [f64; 2]) -> bool {
    let ca = a.corners();
    let mut cb = b.corners();
    for p in cb.iter_mut() {
        p[0] += shift[0];
        p[1] += shift[1];
    }
    let axes = [a.rotation, a.rotation + PI / 2.0, b.rotation, b.rotation + PI / 2.0];
    let tol = 1e-12 * (a.width + a.height + b.width + b.height);
    for th in axes {
        let (s, c) = th.sin_cos();
        let proj = |pts: &[[f64; 2]; 4]| {
            let v: Vec<f64> = pts.iter().map(|p| c * p[0] + s * p[1]).collect();
            (v.iter().cloned().fold(f64::INFINITY, f64::min), v.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
        };
        let (amin, amax) = proj(&ca);
        let (bmin, bmax) = proj(&cb);
        if amax <= bmin + tol || bmax <= amin + tol {
            return false;
        }
    }
    true
}

/// Periodic metasurface unit cell on a rectangular lattice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitCellGeometry {
    /// Human-readable label.
    pub name: String,
    /// Lattice periods (a₁ along x, a₂ along y) in metres.
    pub periods: [f64; 2],
    /// Film thickness in metres.
    pub thickness: f64,
    /// Magnetic shapes inside the cell.
    pub shapes: Vec<Rectangle>,
}

impl UnitCellGeometry {
    /// 150 nm × 150 nm squares on a 250 nm square lattice, 5 nm thick.
    pub fn metasurface_1() -> Self {
        Self {
            name: "metasurface-1".into(),
            periods: [250e-9, 250e-9],
            thickness: 5e-9,
            shapes: vec![Rectangle { center: [0.0, 0.0], width: 150e-9, height: 150e-9, rotation: 0.0 }],
        }
    }

    /// Four 123 nm × 176 nm rectangles on a 500 nm square lattice, 5 nm
    /// thick. Rectangles on one diagonal are rotated by +`angle`, those on
    /// the other diagonal by −`angle`; the cell is C₂ but not C₄ symmetric
    /// unless `angle` is a multiple of π/4.
    pub fn metasurface_2(angle: f64) -> Self {
        let a = 500e-9;
        let q = a / 4.0;
        let rect = |cx: f64, cy: f64, rot: f64| Rectangle { center: [cx, cy], width: 123e-9, height: 176e-9, rotation: rot };
        Self {
            name: "metasurface-2".into(),
            periods: [a, a],
            thickness: 5e-9,
            shapes: vec![rect(q, q, angle), rect(-q, -q, angle), rect(-q, q, -angle), rect(q, -q, -angle)],
        }
    }

    /// A uniform film: one rectangle filling the whole cell.
    pub fn uniform_film(period: f64, thickness: f64) -> Self {
        Self {
            name: "uniform-film".into(),
            periods: [period, period],
            thickness,
            shapes: vec![Rectangle { center: [0.0, 0.0], width: period, height: period, rotation: 0.0 }],
        }
    }

    /// Unit-cell area in m².
    pub fn cell_area(&self) -> f64 {
        self.periods[0] * self.periods[1]
    }

    /// Filling factor Σ area / cell area.
    pub fn filling_factor(&self) -> f64 {
        self.shapes.iter().map(Rectangle::area).sum::<f64>() / self.cell_area()
    }

    /// Lists every invariant violation.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !(self.periods[0] > 0.0 && self.periods[1] > 0.0) {
            v.push(format!("{}: periods must be positive", self.name));
        }
        if !(self.thickness > 0.0) {
            v.push(format!("{}: thickness must be positive", self.name));
        }
        if self.shapes.is_empty() {
            v.push(format!("{}: at least one shape is required", self.name));
        }
        for (i, s) in self.shapes.iter().enumerate() {
            if !(s.width > 0.0 && s.height > 0.0) {
                v.push(format!("{}: shape {i} must have positive width and height", self.name));
            }
            if s.width > self.periods[0] * (1.0 + 1e-12) && s.height > self.periods[1] * (1.0 + 1e-12) {
                v.push(format!("{}: shape {i} is larger than the unit cell", self.name));
            }
        }
        let ff = self.filling_factor();
        if !(ff > 0.0 && ff <= 1.0 + 1e-12) {
            v.push(format!("{}: filling factor {ff} outside (0, 1]", self.name));
        }
        // Overlap, including periodic images.
        for i in 0..self.shapes.len() {
            for j in i..self.shapes.len() {
                for mx in -1..=1 {
                    for my in -1..=1 {
                        if i == j && mx == 0 && my == 0 {
                            continue;
                        }
                        let shift = [mx as f64 * self.periods[0], my as f64 * self.periods[1]];
                        if rectangles_overlap(&self.shapes[i], &self.shapes[j], shift) {
                            v.push(format!(
                                "{}: shapes {i} and {j} overlap (image shift {mx},{my})",
                                self.name
                            ));
                        }
                    }
                }
            }
        }
        v
    }

    /// Errors listing all violated invariants.
    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidInput(v.join("; ")))
        }
    }

    /// Whether ρ (any point, wrapped into the cell) is magnetic.
    pub fn occupied(&self, p: [f64; 2]) -> bool {
        let wrap = |x: f64, a: f64| x - a * (x / a + 0.5).floor();
        let base = [wrap(p[0], self.periods[0]), wrap(p[1], self.periods[1])];
        self.shapes.iter().any(|s| {
            (-1..=1).any(|mx| {
                (-1..=1).any(|my| {
                    s.contains([base[0] + mx as f64 * self.periods[0], base[1] + my as f64 * self.periods[1]])
                })
            })
        })
    }

    /// Occupancy sampled at pixel centres of an nx × ny raster, row-major in
    /// y (index = iy·nx + ix), pixel centres at −a/2 + (i + ½)·a/n.
    pub fn occupancy_mask(&self, nx: usize, ny: usize) -> Vec<f64> {
        let mut out = vec![0.0; nx * ny];
        for iy in 0..ny {
            let y = -self.periods[1] / 2.0 + (iy as f64 + 0.5) * self.periods[1] / ny as f64;
            for ix in 0..nx {
                let x = -self.periods[0] / 2.0 + (ix as f64 + 0.5) * self.periods[0] / nx as f64;
                out[iy * nx + ix] = if self.occupied([x, y]) { 1.0 } else { 0.0 };
            }
        }
        out
    }

    /// Stable content hash used for cache keys and metadata.
    pub fn content_hash(&self) -> String {
        crate::io::hash_json(self)
    }
}

/// One reciprocal lattice vector G = m·b₁ + n·b₂.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatticePoint {
    /// Integer index along b₁.
    pub m: i32,
    /// Integer index along b₂.
    pub n: i32,
    /// Cartesian components in rad/m.
    pub g: [f64; 2],
}

/// Truncated reciprocal lattice, G₀ = 0 first.
#[derive(Debug, Clone, PartialEq)]
pub struct ReciprocalBasis {
    /// b₁ in rad/m.
    pub b1: [f64; 2],
    /// b₂ in rad/m.
    pub b2: [f64; 2],
    /// Truncation order: |m|, |n| ≤ order.
    pub order: usize,
    /// Lattice points sorted by |G| then by (m, n).
    pub points: Vec<LatticePoint>,
}

impl ReciprocalBasis {
    /// Number of channels N_G + 1.
    pub fn len(&self) -> usize {
        self.points.len()
    }

    /// Always false; a basis holds at least G₀.
    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Side of the square index grid, 2·order + 1.
    pub fn grid_side(&self) -> usize {
        2 * self.order + 1
    }

    /// Position of (m, n) in the sorted list, if present.
    pub fn index_of(&self, m: i32, n: i32) -> Option<usize> {
        self.points.iter().position(|p| p.m == m && p.n == n)
    }
}

/// All G = m·b₁ + n·b₂ with |m|, |n| ≤ `max_order`.
pub fn reciprocal_lattice(geometry: &UnitCellGeometry, max_order: usize) -> ReciprocalBasis {
    let b1 = [2.0 * PI / geometry.periods[0], 0.0];
    let b2 = [0.0, 2.0 * PI / geometry.periods[1]];
    let o = max_order as i32;
    let mut points = Vec::with_capacity((2 * max_order + 1).pow(2));
    for m in -o..=o {
        for n in -o..=o {
            let g = [m as f64 * b1[0] + n as f64 * b2[0], m as f64 * b1[1] + n as f64 * b2[1]];
            points.push(LatticePoint { m, n, g });
        }
    }
    points.sort_by(|a, b| {
        let na = a.g[0] * a.g[0] + a.g[1] * a.g[1];
        let nb = b.g[0] * b.g[0] + b.g[1] * b.g[1];
        na.total_cmp(&nb).then((a.m, a.n).cmp(&(b.m, b.n)))
    });
    ReciprocalBasis { b1, b2, order: max_order, points }
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-8 {
        1.0 - x * x / 6.0
    } else {
        x.sin() / x
    }
}

/// Analytic Fourier coefficient of the occupancy at an arbitrary G.
pub fn shape_factor_at(geometry: &UnitCellGeometry, g: [f64; 2]) -> C64 {
    let area = geometry.cell_area();
    geometry
        .shapes
        .iter()
        .map(|s| {
            let (sn, cs) = s.rotation.sin_cos();
            // Components of G in the shape's own frame.
            let gx = cs * g[0] + sn * g[1];
            let gy = -sn * g[0] + cs * g[1];
            let mag = s.width * s.height / area * sinc(gx * s.width / 2.0) * sinc(gy * s.height / 2.0);
            let phase = -(g[0] * s.center[0] + g[1] * s.center[1]);
            C64::from_polar(mag, phase)
        })
        .sum()
}

/// Shape factors f_G aligned with a reciprocal basis.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeFactorTable {
    /// f_G for each basis point, same order as the basis.
    pub values: Vec<C64>,
}

/// Tabulates f_G for every basis point; rejects invalid geometries.
pub fn shape_factors(geometry: &UnitCellGeometry, basis: &ReciprocalBasis) -> Result<ShapeFactorTable> {
    geometry.validate()?;
    Ok(ShapeFactorTable { values: basis.points.iter().map(|p| shape_factor_at(geometry, p.g)).collect() })
}

/// χ_G = f_G·χ_lab for every table entry.
pub fn patterned_susceptibility(chi_lab: &Mat3, table: &ShapeFactorTable) -> Vec<Mat3> {
    table.values.iter().map(|f| chi_lab * *f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_zero_has_single_point() {
        let b = reciprocal_lattice(&UnitCellGeometry::metasurface_1(), 0);
        assert_eq!(b.len(), 1);
        assert_eq!(b.points[0].g, [0.0, 0.0]);
    }

    #[test]
    fn uniform_film_has_only_dc_component() {
        let g = UnitCellGeometry::uniform_film(250e-9, 5e-9);
        let b = reciprocal_lattice(&g, 3);
        let t = shape_factors(&g, &b).unwrap();
        assert!((t.values[0] - C64::new(1.0, 0.0)).norm() < 1e-15);
        assert!(t.values[1..].iter().all(|f| f.norm() < 1e-15));
    }

    #[test]
    fn overlapping_shapes_rejected() {
        let mut g = UnitCellGeometry::metasurface_1();
        g.shapes.push(Rectangle { center: [10e-9, 0.0], width: 50e-9, height: 50e-9, rotation: 0.3 });
        assert!(g.validate().is_err());
    }

    #[test]
    fn periodic_image_overlap_rejected() {
        let mut g = UnitCellGeometry::metasurface_1();
        g.shapes[0].width = 200e-9;
        g.shapes[0].center = [100e-9, 0.0];
        g.shapes.push(Rectangle { center: [-110e-9, 0.0], width: 30e-9, height: 30e-9, rotation: 0.0 });
        assert!(g.validate().is_err());
    }

    #[test]
    fn paper_cells_are_valid() {
        UnitCellGeometry::metasurface_1().validate().unwrap();
        UnitCellGeometry::metasurface_2(std::f64::consts::PI / 6.0).validate().unwrap();
    }
}
