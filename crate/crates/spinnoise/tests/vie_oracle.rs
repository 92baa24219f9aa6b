//! Iterative and matrix-free VIE operations against dense materialization.

use spinnoise::geometry::UnitCellGeometry;
use spinnoise::magnetics::{lab_susceptibility, LlgParams};
use spinnoise::vie::*;
use spinnoise::C64;
use std::f64::consts::PI;

fn random_vector(n: usize, seed: u64) -> Vec<C64> {
    let mut s = seed;
    let mut next = || {
        s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((s >> 11) as f64 / (1u64 << 53) as f64) - 0.5
    };
    (0..n).map(|_| C64::new(next(), next())).collect()
}

fn rel(a: &[C64], b: &[C64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).norm_sqr()).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y.norm_sqr()).sum::<f64>().sqrt();
    num / den
}

#[test]
fn matrix_free_matches_materialized_and_solves_match_dense() {
    let geom = UnitCellGeometry::metasurface_1();
    let omega = 2.0 * PI * 1e6;
    let chi = lab_susceptibility(&LlgParams::cofeb(), omega).unwrap().value;
    for (order, slabs) in [(2usize, 2usize), (3, 1), (4, 1)] {
        let engine = ConvolutionEngine::new(&geom, order).unwrap();
        let stack = EvaluationStack::new(slabs, geom.thickness, 45e-9).unwrap();
        for q in [[1e7, 0.0], [3e7, -2e7]] {
            let sys = BlockSystem::new(&engine, &chi, &stack, q, omega).unwrap();
            let a = sys.materialize(&geom);
            let n = sys.dimension();
            let v = random_vector(n, 7);
            let dense: Vec<C64> = (&a * nalgebra::DVector::from_vec(v.clone())).iter().cloned().collect();
            let mf = apply_system(&sys, &v).unwrap();
            assert!(rel(&mf, &dense) < 1e-12, "matvec {}", rel(&mf, &dense));
            let dense_h: Vec<C64> = (a.adjoint() * nalgebra::DVector::from_vec(v.clone())).iter().cloned().collect();
            let mut ws = engine.workspace();
            let mfh = sys.apply_adjoint(&v, &mut ws).unwrap();
            assert!(rel(&mfh, &dense_h) < 1e-12, "adjoint matvec {}", rel(&mfh, &dense_h));
            let inv = dense_reference_solve(&sys, &geom, DENSE_CAP).unwrap();
            for pre in [Preconditioner::None, Preconditioner::BlockDiagonal, Preconditioner::Masked] {
                let opts = SolverOptions { preconditioner: pre, ..SolverOptions::default() };
                let (x, rep) = sys.solve(&v, &opts, &mut ws).unwrap();
                let xd: Vec<C64> = (&inv * nalgebra::DVector::from_vec(v.clone())).iter().cloned().collect();
                assert!(rel(&x, &xd) < 1e-8, "{pre:?} forward {} {rep:?}", rel(&x, &xd));
                let (y, rep) = sys.solve_adjoint(&v, &opts, &mut ws).unwrap();
                let yd: Vec<C64> = (inv.adjoint() * nalgebra::DVector::from_vec(v.clone())).iter().cloned().collect();
                assert!(rel(&y, &yd) < 1e-8, "{pre:?} adjoint {} {rep:?}", rel(&y, &yd));
            }
        }
    }
}
