//! Allen-Cahn reference: Chebyshev collocation in x with homogeneous
//! Dirichlet ends, second-order IMEX backward differentiation in time
//! (diffusion implicit, reaction explicit).

use std::f64::consts::PI;

use super::{invert, uniform_axis, ReferenceGrid};
use crate::error::{Error, Result};
use crate::pde::{allen_cahn_initial, ALLEN_CAHN_D};
use crate::tensor::gemm;

pub const DEFAULT_MODES: usize = 1024;
/// Time steps between consecutive output rows.
pub const DEFAULT_SUBSTEPS: usize = 40;
/// Implicit-Euler sub-steps used to start the two-step scheme.
const STARTUP_SPLIT: usize = 16;

fn reaction(u: f64) -> f64 {
    5.0 * (u - u * u * u)
}

/// Chebyshev-Gauss-Lobatto nodes `cos(j pi / n)` (descending) and the
/// first-derivative matrix.
fn cheb(n: usize) -> (Vec<f64>, Vec<f64>) {
    let m = n + 1;
    let x: Vec<f64> = (0..m).map(|j| (j as f64 * PI / n as f64).cos()).collect();
    let c = |j: usize| {
        let s = if j % 2 == 0 { 1.0 } else { -1.0 };
        if j == 0 || j == n { 2.0 * s } else { s }
    };
    let mut d = vec![0.0; m * m];
    for i in 0..m {
        let mut row_sum = 0.0;
        for j in 0..m {
            if i != j {
                let v = c(i) / c(j) / (x[i] - x[j]);
                d[i * m + j] = v;
                row_sum += v;
            }
        }
        // negative-sum trick keeps D * 1 = 0 to roundoff
        d[i * m + i] = -row_sum;
    }
    (x, d)
}

fn matvec(a: &[f64], x: &[f64], out: &mut [f64]) {
    let n = x.len();
    for (o, row) in out.iter_mut().zip(a.chunks_exact(n)) {
        let mut acc = [0.0; 8];
        let mut rc = row.chunks_exact(8);
        let mut xc = x.chunks_exact(8);
        for (r, v) in (&mut rc).zip(&mut xc) {
            for k in 0..8 {
                acc[k] += r[k] * v[k];
            }
        }
        let tail: f64 = rc.remainder().iter().zip(xc.remainder()).map(|(a, b)| a * b).sum();
        *o = acc.iter().sum::<f64>() + tail;
    }
}

/// Time integrator on `modes + 1` Chebyshev nodes; output rows every
/// `substeps` steps at `t = j / (rows - 1)`.
#[derive(Debug, Clone, Copy)]
pub struct AllenCahnSolver {
    pub modes: usize,
    pub substeps: usize,
    /// Output points per dimension (x and t).
    pub points: usize,
}

impl AllenCahnSolver {
    pub fn solve(&self) -> Result<ReferenceGrid> {
        let (n, ns, np) = (self.modes, self.substeps, self.points);
        if n < 4 || ns == 0 || np < 2 {
            return Err(Error::Oracle("Allen-Cahn solver needs modes >= 4, substeps >= 1, points >= 2".into()));
        }
        let m = n + 1;
        let (xc, d) = cheb(n);
        let mut d2 = vec![0.0; m * m];
        gemm(m, m, m, &d, false, &d, false, 0.0, &mut d2);
        let ni = n - 1;
        let interior = |a: &[f64]| -> Vec<f64> {
            let mut out = Vec::with_capacity(ni * ni);
            for i in 1..n {
                out.extend_from_slice(&a[i * m + 1..i * m + n]);
            }
            out
        };
        let l = interior(&d2);
        let dt = 1.0 / ((np - 1) * ns) as f64;
        // (3 I - 2 dt D L)^-1 and (I - h D L)^-1 for the start-up steps
        let system = |diag: f64, coef: f64| -> Result<Vec<f64>> {
            let mut a: Vec<f64> = l.iter().map(|v| -coef * ALLEN_CAHN_D * v).collect();
            for i in 0..ni {
                a[i * ni + i] += diag;
            }
            invert(a, ni)
        };
        let bdf2 = system(3.0, 2.0 * dt)?;
        let h = dt / STARTUP_SPLIT as f64;
        let euler = system(1.0, h)?;

        let xs = uniform_axis(-1.0, 1.0, np);
        let interp = barycentric_matrix(&xc, &xs);
        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(np);
        rows.push(xs.iter().map(|&x| allen_cahn_initial(x)).collect());

        let mut full = vec![0.0; m];
        let emit = |u: &[f64], full: &mut Vec<f64>| -> Vec<f64> {
            full[1..n].copy_from_slice(u);
            let mut out = vec![0.0; np];
            matvec(&interp, full, &mut out);
            out
        };

        let mut u_prev: Vec<f64> = xc[1..n].iter().map(|&x| allen_cahn_initial(x)).collect();
        let mut rhs = vec![0.0; ni];
        let mut u: Vec<f64> = u_prev.clone();
        for _ in 0..STARTUP_SPLIT {
            for (r, &v) in rhs.iter_mut().zip(&u) {
                *r = v + h * reaction(v);
            }
            matvec(&euler, &rhs, &mut u);
        }
        let total = (np - 1) * ns;
        let mut next = vec![0.0; ni];
        for step in 1..=total {
            if step > 1 {
                for ((r, &a), &b) in rhs.iter_mut().zip(&u).zip(&u_prev) {
                    *r = 4.0 * a - b + 2.0 * dt * (2.0 * reaction(a) - reaction(b));
                }
                matvec(&bdf2, &rhs, &mut next);
                std::mem::swap(&mut u_prev, &mut u);
                std::mem::swap(&mut u, &mut next);
            }
            if step % ns == 0 {
                if !u.iter().all(|v| v.is_finite() && v.abs() < 10.0) {
                    return Err(Error::Oracle(format!("Allen-Cahn stepper diverged by t = {}", step as f64 * dt)));
                }
                rows.push(emit(&u, &mut full));
            }
        }
        // grid values with x slowest
        let mut values = Vec::with_capacity(np * np);
        for i in 0..np {
            for row in &rows {
                values.push(row[i]);
            }
        }
        ReferenceGrid::new(vec![xs, uniform_axis(0.0, 1.0, np)], values)
    }
}

/// Rows map nodal values at `nodes` (Chebyshev points) to values at `xs`.
fn barycentric_matrix(nodes: &[f64], xs: &[f64]) -> Vec<f64> {
    let m = nodes.len();
    let w: Vec<f64> = (0..m)
        .map(|j| {
            let s = if j % 2 == 0 { 1.0 } else { -1.0 };
            if j == 0 || j == m - 1 { 0.5 * s } else { s }
        })
        .collect();
    let mut out = vec![0.0; xs.len() * m];
    for (r, &x) in xs.iter().enumerate() {
        let row = &mut out[r * m..(r + 1) * m];
        if let Some(j) = nodes.iter().position(|&xn| xn == x) {
            row[j] = 1.0;
            continue;
        }
        let mut den = 0.0;
        for j in 0..m {
            let c = w[j] / (x - nodes[j]);
            row[j] = c;
            den += c;
        }
        row.iter_mut().for_each(|v| *v /= den);
    }
    out
}

/// Reference grid on `[-1, 1] x [0, 1]` with `points` per dimension.
pub fn allen_cahn_reference(modes: usize, substeps: usize, points: usize) -> Result<ReferenceGrid> {
    AllenCahnSolver { modes, substeps, points }.solve()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cheb_differentiates_polynomials() {
        let (x, d) = cheb(12);
        let f: Vec<f64> = x.iter().map(|&x| x.powi(5) - x).collect();
        let mut df = vec![0.0; 13];
        matvec(&d, &f, &mut df);
        for (i, &xi) in x.iter().enumerate() {
            assert!((df[i] - (5.0 * xi.powi(4) - 1.0)).abs() < 1e-11);
        }
    }

    #[test]
    fn barycentric_reproduces_polynomials() {
        let (x, _) = cheb(10);
        let xs = [-1.0, -0.31, 0.0, 0.77, 1.0];
        let b = barycentric_matrix(&x, &xs);
        let f: Vec<f64> = x.iter().map(|&x| 2.0 * x.powi(7) - x * x).collect();
        let mut out = vec![0.0; xs.len()];
        matvec(&b, &f, &mut out);
        for (o, &xv) in out.iter().zip(&xs) {
            assert!((o - (2.0 * xv.powi(7) - xv * xv)).abs() < 1e-13);
        }
    }

    #[test]
    fn coarse_run_keeps_shape() {
        let g = allen_cahn_reference(64, 4, 17).unwrap();
        assert_eq!(g.shape(), vec![17, 17]);
        assert_eq!(g.value(&[0, 0]), allen_cahn_initial(-1.0));
        assert_eq!(g.value(&[16, 5]), 0.0);
    }
}
