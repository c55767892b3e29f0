//! Burgers reference: Cole-Hopf with Gauss-Hermite quadrature, plus an
//! independent finite-difference solver used to cross-check it.

use std::f64::consts::PI;

use super::{thomas, ReferenceGrid};
use crate::error::{Error, Result};
use crate::pde::{burgers_initial, BURGERS_NU};

pub const HERMITE_ORDER: usize = 100;

/// Nodes and weights of `n`-point Gauss-Hermite quadrature for
/// `int f(z) exp(-z^2) dz`, by Newton iteration on the orthonormal
/// Hermite recurrence.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    const PIM4: f64 = 0.751_125_544_464_942_5; // pi^(-1/4)
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let nf = n as f64;
    let mut z = 0.0;
    for i in 0..n.div_ceil(2) {
        z = match i {
            0 => (2.0 * nf + 1.0).sqrt() - 1.85575 * (2.0 * nf + 1.0).powf(-0.16667),
            1 => z - 1.14 * nf.powf(0.426) / z,
            2 => 1.86 * z - 0.86 * x[0],
            3 => 1.91 * z - 0.91 * x[1],
            _ => 2.0 * z - x[i - 2],
        };
        let mut pp = 0.0;
        for _ in 0..100 {
            let (mut p1, mut p2) = (PIM4, 0.0);
            for j in 1..=n {
                let p3 = p2;
                p2 = p1;
                let jf = j as f64;
                p1 = z * (2.0 / jf).sqrt() * p2 - ((jf - 1.0) / jf).sqrt() * p3;
            }
            pp = (2.0 * nf).sqrt() * p2;
            let dz = p1 / pp;
            z -= dz;
            if dz.abs() <= 3e-14 * z.abs().max(1.0) {
                break;
            }
        }
        x[i] = z;
        x[n - 1 - i] = -z;
        w[i] = 2.0 / (pp * pp);
        w[n - 1 - i] = w[i];
    }
    (x, w)
}

/// Cole-Hopf evaluator with cached quadrature nodes.
struct ColeHopf {
    z: Vec<f64>,
    w: Vec<f64>,
    lf: Vec<f64>,
}

impl ColeHopf {
    fn new() -> Self {
        let (z, w) = gauss_hermite(HERMITE_ORDER);
        Self { lf: vec![0.0; z.len()], z, w }
    }

    fn eval(&mut self, x: f64, t: f64) -> Result<f64> {
        if !(t >= 0.0) {
            return Err(Error::Oracle(format!("Burgers reference needs t >= 0, got {t}")));
        }
        if t == 0.0 {
            return Ok(burgers_initial(x));
        }
        let s = (4.0 * BURGERS_NU * t).sqrt();
        let inv = 1.0 / (2.0 * PI * BURGERS_NU);
        let mut m = f64::NEG_INFINITY;
        for (lf, &z) in self.lf.iter_mut().zip(&self.z) {
            *lf = -(PI * (x - s * z)).cos() * inv;
            m = m.max(*lf);
        }
        let (mut num, mut den) = (0.0, 0.0);
        for ((&lf, &z), &w) in self.lf.iter().zip(&self.z).zip(&self.w) {
            let f = w * (lf - m).exp();
            num += (PI * (x - s * z)).sin() * f;
            den += f;
        }
        Ok(-num / den)
    }
}

/// `u(x, t)` of the Burgers problem.
pub fn burgers_reference(x: f64, t: f64) -> Result<f64> {
    ColeHopf::new().eval(x, t)
}

/// Reference values on `xs x ts`.
pub fn burgers_reference_grid(xs: &[f64], ts: &[f64]) -> Result<ReferenceGrid> {
    let mut ch = ColeHopf::new();
    let mut values = Vec::with_capacity(xs.len() * ts.len());
    for &x in xs {
        for &t in ts {
            values.push(ch.eval(x, t)?);
        }
    }
    ReferenceGrid::new(vec![xs.to_vec(), ts.to_vec()], values)
}

/// Finite-difference discretization: central differences in space on a
/// uniform grid, Crank-Nicolson diffusion and second-order Adams-Bashforth
/// advection.
#[derive(Debug, Clone, Copy)]
pub struct BurgersFd {
    pub cells: usize,
    pub steps: usize,
}

/// Snapshots of the FD solution at the step indices closest to `times`.
pub fn burgers_fd_solution(fd: BurgersFd, times: &[f64]) -> Result<ReferenceGrid> {
    let (nx, nt) = (fd.cells, fd.steps);
    if nx < 4 || nt == 0 {
        return Err(Error::Oracle("Burgers FD needs >= 4 cells and >= 1 step".into()));
    }
    let dx = 2.0 / nx as f64;
    let dt = 1.0 / nt as f64;
    let xs: Vec<f64> = (0..=nx).map(|j| -1.0 + j as f64 * dx).collect();
    let targets: Vec<usize> = times.iter().map(|&t| (t * nt as f64).round() as usize).collect();
    if targets.iter().any(|&s| s > nt) {
        return Err(Error::Oracle("snapshot time beyond t = 1".into()));
    }
    let mut u: Vec<f64> = xs.iter().map(|&x| burgers_initial(x)).collect();
    u[0] = 0.0;
    u[nx] = 0.0;
    let m = nx - 1;
    let r = BURGERS_NU * dt / (dx * dx);
    let adv = |u: &[f64]| -> Vec<f64> {
        (1..nx).map(|j| (u[j + 1] * u[j + 1] - u[j - 1] * u[j - 1]) / (4.0 * dx)).collect()
    };
    let mut snaps: Vec<Option<Vec<f64>>> = vec![None; times.len()];
    let record = |step: usize, u: &[f64], snaps: &mut Vec<Option<Vec<f64>>>| {
        for (s, &tg) in snaps.iter_mut().zip(&targets) {
            if tg == step {
                *s = Some(u.to_vec());
            }
        }
    };
    record(0, &u, &mut snaps);
    let mut prev = adv(&u);
    let lower = vec![-0.5 * r; m];
    let diag = vec![1.0 + r; m];
    let upper = vec![-0.5 * r; m];
    for step in 1..=nt {
        let cur = adv(&u);
        let rhs: Vec<f64> = (1..nx)
            .map(|j| {
                let lap = u[j + 1] - 2.0 * u[j] + u[j - 1];
                u[j] + 0.5 * r * lap - dt * (1.5 * cur[j - 1] - 0.5 * prev[j - 1])
            })
            .collect();
        let inner = thomas(&lower, &diag, &upper, &rhs)?;
        u[1..nx].copy_from_slice(&inner);
        if !u.iter().all(|v| v.is_finite()) {
            return Err(Error::Oracle(format!("Burgers FD diverged at step {step}")));
        }
        prev = cur;
        record(step, &u, &mut snaps);
    }
    let snaps: Vec<Vec<f64>> = snaps.into_iter().map(|s| s.expect("every target recorded")).collect();
    let mut values = Vec::with_capacity(xs.len() * times.len());
    for j in 0..=nx {
        for s in &snaps {
            values.push(s[j]);
        }
    }
    let ts: Vec<f64> = targets.iter().map(|&s| s as f64 * dt).collect();
    ReferenceGrid::new(vec![xs, ts], values)
}
