//! Restarted GMRES with right preconditioning.
//!
//! The Arnoldi basis is orthogonalized with modified Gram–Schmidt and the
//! small least-squares problem is updated with complex Givens rotations. All reductions run in a fixed order, so results are
//! bit-reproducible for a given input.

use crate::error::{Error, Result};
use crate::C64;

/// Iteration controls.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GmresOptions {
    /// Krylov dimension between restarts.
    pub restart: usize,
    /// Relative residual target.
    pub tolerance: f64,
    /// Cap on preconditioned operator applications.
    pub max_iterations: usize,
}

impl Default for GmresOptions {
    fn default() -> Self {
        Self { restart: 60, tolerance: 1e-8, max_iterations: 2000 }
    }
}

/// Outcome of one solve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveStats {
    /// Arnoldi steps taken (each is one operator and one preconditioner application).
    pub iterations: usize,
    /// Final residual norm divided by the reference scale.
    pub residual: f64,
}

/// Σ conj(a)·b, accumulated in four interleaved lanes (fixed order).
pub fn dotc(a: &[C64], b: &[C64]) -> C64 {
    assert_eq!(a.len(), b.len());
    let mut re = [0.0f64; 4];
    let mut im = [0.0f64; 4];
    let (ac, bc) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ar, br) = (ac.remainder(), bc.remainder());
    for (x4, y4) in ac.zip(bc) {
        for l in 0..4 {
            let (x, y) = (x4[l], y4[l]);
            re[l] += x.re * y.re + x.im * y.im;
            im[l] += x.re * y.im - x.im * y.re;
        }
    }
    for (x, y) in ar.iter().zip(br) {
        re[0] += x.re * y.re + x.im * y.im;
        im[0] += x.re * y.im - x.im * y.re;
    }
    C64::new((re[0] + re[1]) + (re[2] + re[3]), (im[0] + im[1]) + (im[2] + im[3]))
}

/// Euclidean norm.
pub fn norm(a: &[C64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = a.chunks_exact(4);
    let rest = chunks.remainder();
    for x4 in chunks {
        for l in 0..4 {
            acc[l] += x4[l].re * x4[l].re + x4[l].im * x4[l].im;
        }
    }
    for x in rest {
        acc[0] += x.re * x.re + x.im * x.im;
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])).sqrt()
}

/// y ← y − c·x.
fn axpy_neg(c: C64, x: &[C64], y: &mut [C64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        yi.re -= c.re * xi.re - c.im * xi.im;
        yi.im -= c.re * xi.im + c.im * xi.re;
    }
}

/// Solves A·x = b with right preconditioner M (iterating on A·M).
///
/// * `x` holds the initial guess on entry and the solution on exit.
/// * `scale` is the reference norm for the relative residual (‖b‖ if `None`).
/// * `measure` maps a residual vector of this system to the norm that the
///   tolerance is judged on; `None` uses the Euclidean norm. It lets callers
///   solving a reduced system enforce the tolerance on the residual of the
///   original system.
pub fn gmres<A, M>(
    mut apply: A,
    mut precondition: M,
    b: &[C64],
    x: &mut [C64],
    scale: Option<f64>,
    measure: Option<&dyn Fn(&[C64]) -> f64>,
    opts: &GmresOptions,
) -> Result<SolveStats>
where
    A: FnMut(&[C64], &mut [C64]),
    M: FnMut(&[C64], &mut [C64]),
{
    let n = b.len();
    if x.len() != n {
        return Err(Error::DimensionMismatch { expected: n, got: x.len() });
    }
    let reference = scale.unwrap_or_else(|| norm(b));
    let measure_of = |r: &[C64]| match measure {
        Some(f) => f(r),
        None => norm(r),
    };
    if reference == 0.0 {
        x.iter_mut().for_each(|v| *v = C64::new(0.0, 0.0));
        return Ok(SolveStats { iterations: 0, residual: 0.0 });
    }
    let target = opts.tolerance * reference;
    let m = opts.restart.max(1);
    let mut basis = vec![C64::new(0.0, 0.0); (m + 1) * n];
    let mut hess = vec![C64::new(0.0, 0.0); (m + 1) * m];
    let mut cs = vec![0.0; m];
    let mut sn = vec![C64::new(0.0, 0.0); m];
    let mut g = vec![C64::new(0.0, 0.0); m + 1];
    let mut r = vec![C64::new(0.0, 0.0); n];
    let mut z = vec![C64::new(0.0, 0.0); n];
    let mut w = vec![C64::new(0.0, 0.0); n];
    let mut h = vec![C64::new(0.0, 0.0); m + 1];
    let mut iterations = 0;
    loop {
        apply(x, &mut r);
        for (ri, bi) in r.iter_mut().zip(b) {
            *ri = bi - *ri;
        }
        let beta = norm(&r);
        let true_norm = measure_of(&r);
        if !true_norm.is_finite() || !beta.is_finite() {
            return Err(Error::NumericalBreakdown("non-finite residual".into()));
        }
        if true_norm <= target {
            return Ok(SolveStats { iterations, residual: true_norm / reference });
        }
        if iterations >= opts.max_iterations {
            return Err(Error::MaxIterationsExceeded { iterations, residual: true_norm / reference });
        }
        // Ratio between the judged norm and the Euclidean norm, used to stop
        // the inner cycle; every exit is re-verified on the true residual.
        let ratio = if beta > 0.0 { true_norm / beta } else { 1.0 };
        for (v, ri) in basis[..n].iter_mut().zip(&r) {
            *v = ri / beta;
        }
        g.iter_mut().for_each(|v| *v = C64::new(0.0, 0.0));
        g[0] = C64::new(beta, 0.0);
        let mut k = 0;
        while k < m {
            precondition(&basis[k * n..(k + 1) * n], &mut z);
            apply(&z, &mut w);
            iterations += 1;
            // Modified Gram–Schmidt (backward stable for GMRES).
            for (j, hj) in h.iter_mut().enumerate().take(k + 1) {
                let v = &basis[j * n..(j + 1) * n];
                *hj = dotc(v, &w);
                axpy_neg(*hj, v, &mut w);
            }
            let hn = norm(&w);
            if !hn.is_finite() {
                return Err(Error::NumericalBreakdown("non-finite Arnoldi vector".into()));
            }
            h[k + 1] = C64::new(hn, 0.0);
            if hn > 0.0 {
                let (lo, hi) = basis.split_at_mut((k + 1) * n);
                let _ = lo;
                for (v, wi) in hi[..n].iter_mut().zip(&w) {
                    *v = wi / hn;
                }
            }
            for j in 0..k {
                let t = cs[j] * h[j] + sn[j] * h[j + 1];
                h[j + 1] = -sn[j].conj() * h[j] + cs[j] * h[j + 1];
                h[j] = t;
            }
            let (a, bb) = (h[k], h[k + 1]);
            let t = a.norm().hypot(bb.norm());
            if t == 0.0 {
                cs[k] = 1.0;
                sn[k] = C64::new(0.0, 0.0);
            } else if a.norm() == 0.0 {
                cs[k] = 0.0;
                sn[k] = bb.conj() / t;
            } else {
                cs[k] = a.norm() / t;
                sn[k] = (a / a.norm()) * bb.conj() / t;
            }
            h[k] = cs[k] * a + sn[k] * bb;
            h[k + 1] = C64::new(0.0, 0.0);
            g[k + 1] = -sn[k].conj() * g[k];
            g[k] *= cs[k];
            for j in 0..=k {
                hess[j * m + k] = h[j];
            }
            k += 1;
            let estimate = g[k].norm() * ratio;
            if estimate <= 0.5 * target || hn == 0.0 || iterations >= opts.max_iterations {
                break;
            }
        }
        // Back substitution for the Krylov coefficients.
        let mut y = vec![C64::new(0.0, 0.0); k];
        for i in (0..k).rev() {
            let mut s = g[i];
            for j in (i + 1)..k {
                s -= hess[i * m + j] * y[j];
            }
            if hess[i * m + i].norm() == 0.0 {
                return Err(Error::NumericalBreakdown("singular Hessenberg matrix".into()));
            }
            y[i] = s / hess[i * m + i];
        }
        w.iter_mut().for_each(|v| *v = C64::new(0.0, 0.0));
        for (j, yj) in y.iter().enumerate() {
            for (wi, vi) in w.iter_mut().zip(&basis[j * n..(j + 1) * n]) {
                *wi += yj * vi;
            }
        }
        precondition(&w, &mut z);
        for (xi, zi) in x.iter_mut().zip(&z) {
            *xi += zi;
        }
    }
}

/// Solves A·x = b with right-preconditioned BiCGStab.
///
/// Arguments match [`gmres`]; `opts.restart` is ignored. Each iteration
/// costs two operator and two preconditioner applications and a fixed number
/// of vector operations, so there is no restart stagnation and no growing
/// orthogonalization cost. `iterations` counts operator applications. When
/// the recurrence residual meets the target, the true residual is recomputed
/// and the iteration restarts from it if the two disagree.
pub fn bicgstab<A, M>(
    mut apply: A,
    mut precondition: M,
    b: &[C64],
    x: &mut [C64],
    scale: Option<f64>,
    measure: Option<&dyn Fn(&[C64]) -> f64>,
    opts: &GmresOptions,
) -> Result<SolveStats>
where
    A: FnMut(&[C64], &mut [C64]),
    M: FnMut(&[C64], &mut [C64]),
{
    let n = b.len();
    if x.len() != n {
        return Err(Error::DimensionMismatch { expected: n, got: x.len() });
    }
    let reference = scale.unwrap_or_else(|| norm(b));
    let measure_of = |r: &[C64]| match measure {
        Some(f) => f(r),
        None => norm(r),
    };
    if reference == 0.0 {
        x.iter_mut().for_each(|v| *v = C64::new(0.0, 0.0));
        return Ok(SolveStats { iterations: 0, residual: 0.0 });
    }
    let target = opts.tolerance * reference;
    let zero = C64::new(0.0, 0.0);
    let mut r = vec![zero; n];
    let mut shadow = vec![zero; n];
    let mut p = vec![zero; n];
    let mut v = vec![zero; n];
    let mut y = vec![zero; n];
    let mut z = vec![zero; n];
    let mut t = vec![zero; n];
    let mut iterations = 0;
    loop {
        // (Re)start from the true residual.
        apply(x, &mut r);
        for (ri, bi) in r.iter_mut().zip(b) {
            *ri = bi - *ri;
        }
        let true_norm = measure_of(&r);
        if !true_norm.is_finite() {
            return Err(Error::NumericalBreakdown("non-finite residual".into()));
        }
        if true_norm <= target {
            return Ok(SolveStats { iterations, residual: true_norm / reference });
        }
        if iterations >= opts.max_iterations {
            return Err(Error::MaxIterationsExceeded { iterations, residual: true_norm / reference });
        }
        shadow.copy_from_slice(&r);
        p.iter_mut().for_each(|e| *e = zero);
        v.iter_mut().for_each(|e| *e = zero);
        let (mut rho, mut alpha, mut omega) = (C64::new(1.0, 0.0), C64::new(1.0, 0.0), C64::new(1.0, 0.0));
        while iterations < opts.max_iterations {
            let rho_next = dotc(&shadow, &r);
            if rho_next.norm() == 0.0 || omega.norm() == 0.0 {
                break;
            }
            let beta = (rho_next / rho) * (alpha / omega);
            rho = rho_next;
            for ((pi, ri), vi) in p.iter_mut().zip(&r).zip(&v) {
                *pi = ri + beta * (*pi - omega * vi);
            }
            precondition(&p, &mut y);
            apply(&y, &mut v);
            iterations += 1;
            let sv = dotc(&shadow, &v);
            if sv.norm() == 0.0 {
                break;
            }
            alpha = rho / sv;
            axpy_neg(alpha, &v, &mut r);
            for (xi, yi) in x.iter_mut().zip(&y) {
                *xi += alpha * yi;
            }
            if measure_of(&r) <= 0.5 * target {
                break;
            }
            precondition(&r, &mut z);
            apply(&z, &mut t);
            iterations += 1;
            let tt = norm(&t).powi(2);
            if tt == 0.0 {
                break;
            }
            omega = dotc(&t, &r) / tt;
            for (xi, zi) in x.iter_mut().zip(&z) {
                *xi += omega * zi;
            }
            axpy_neg(omega, &t, &mut r);
            let current = measure_of(&r);
            if !current.is_finite() {
                return Err(Error::NumericalBreakdown("non-finite BiCGStab residual".into()));
            }
            if current <= 0.5 * target {
                break;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solves_small_nonsymmetric_system() {
        let n = 30;
        let a: Vec<C64> = (0..n * n)
            .map(|k| {
                let (i, j) = (k / n, k % n);
                let d = if i == j { 3.0 } else { 0.0 };
                C64::new(d + ((i * 7 + j * 3) % 5) as f64 * 0.05, ((i + 2 * j) % 3) as f64 * 0.04)
            })
            .collect();
        let b: Vec<C64> = (0..n).map(|i| C64::new(1.0, i as f64 * 0.1)).collect();
        let mut x = vec![C64::new(0.0, 0.0); n];
        let apply = |v: &[C64], out: &mut [C64]| {
            for i in 0..n {
                out[i] = (0..n).map(|j| a[i * n + j] * v[j]).sum();
            }
        };
        let stats = gmres(
            apply,
            |v: &[C64], o: &mut [C64]| o.copy_from_slice(v),
            &b,
            &mut x,
            None,
            None,
            &GmresOptions { restart: 5, tolerance: 1e-12, max_iterations: 500 },
        )
        .unwrap();
        let mut r = vec![C64::new(0.0, 0.0); n];
        apply(&x, &mut r);
        let res: f64 = r.iter().zip(&b).map(|(p, q)| (p - q).norm_sqr()).sum::<f64>().sqrt();
        assert!(res / norm(&b) < 1e-12, "residual {res}, stats {stats:?}");
    }
}
