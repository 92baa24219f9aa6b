//! Times the propagated-row solves at a given truncation order.
//!
//! Usage: cargo run --release --example solver_timing -- ORDER RESTART [PRECONDITIONER]

use spinnoise::geometry::UnitCellGeometry;
use spinnoise::magnetics::{lab_susceptibility, LlgParams};
use spinnoise::vie::*;
use std::f64::consts::PI;
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let order: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(20);
    let restart: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(60);
    let pre = match args.get(3).map(String::as_str) {
        Some("none") => Preconditioner::None,
        Some("block") => Preconditioner::BlockDiagonal,
        _ => Preconditioner::Masked,
    };
    let max_iterations = std::env::var("MAXIT").ok().and_then(|s| s.parse().ok()).unwrap_or(2000);
    let method = if std::env::var("BICG").is_ok() { KrylovMethod::Bicgstab } else { KrylovMethod::Gmres };
    let opts = SolverOptions { method, restart, preconditioner: pre, max_iterations, ..SolverOptions::default() };
    let omega = 2.0 * PI * 1e6;
    let chi = lab_susceptibility(&LlgParams::cofeb(), omega).unwrap().value;
    for geom in [UnitCellGeometry::metasurface_1(), UnitCellGeometry::metasurface_2(PI / 6.0)] {
        let t0 = Instant::now();
        let engine = ConvolutionEngine::new(&geom, order).unwrap();
        println!("{}: engine {:.3}s, {} channels", geom.name, t0.elapsed().as_secs_f64(), engine.channels());
        let stack = EvaluationStack::new(1, geom.thickness, 45e-9).unwrap();
        let mut ws = engine.workspace();
        let qs: Vec<[f64; 2]> = match std::env::var("QX") {
            Ok(v) => v.split(',').map(|x| [x.parse().unwrap(), 0.0]).collect(),
            Err(_) => vec![[1e5, 2e4], [1e6, 3e5], [1e7, 3e6], [3e7, 1e7], [1e8, 0.0], [3e8, 1e8]],
        };
        for q in qs {
            let t = Instant::now();
            let sys = BlockSystem::new(&engine, &chi, &stack, q, omega).unwrap();
            let rows = match sys.propagated_rows(&opts, &mut ws) {
                Ok(r) => r,
                Err(e) => {
                    println!("  q=({:.0e},{:.0e}) {e}", q[0], q[1]);
                    continue;
                }
            };
            let qf = sys.dissipative_form(&rows.columns, &rows.columns, &mut ws);
            println!(
                "  q=({:.0e},{:.0e}) its={} res={:.2e} Qzz={:.3e} {:.3}s",
                q[0], q[1], rows.report.iterations, rows.report.residual, qf[(2, 2)].re, t.elapsed().as_secs_f64()
            );
        }
    }
}
