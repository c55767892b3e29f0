//! Multi-scale elliptic reference: conservative second-order finite
//! differences with the coefficient sampled at cell faces.

use std::f64::consts::PI;

use super::{thomas, ReferenceGrid};
use crate::error::{Error, Result};
use crate::pde::multiscale_kappa;

pub const DEFAULT_CELLS: usize = 65536;

/// Nodes `x_i = i pi / cells` and the solution there; both ends are 0.
pub fn multiscale_solve(cells: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if cells < 2 {
        return Err(Error::Oracle("multi-scale solver needs at least 2 cells".into()));
    }
    let h = PI / cells as f64;
    let xs: Vec<f64> = (0..=cells).map(|i| if i == cells { PI } else { i as f64 * h }).collect();
    let kf: Vec<f64> = (0..cells).map(|i| multiscale_kappa((i as f64 + 0.5) * h)).collect();
    if kf.iter().any(|&k| !(k >= 0.5)) {
        return Err(Error::Oracle("coefficient dropped below 0.5; tridiagonal system may be singular".into()));
    }
    let m = cells - 1;
    let lower: Vec<f64> = (1..cells).map(|i| -kf[i - 1]).collect();
    let diag: Vec<f64> = (1..cells).map(|i| kf[i - 1] + kf[i]).collect();
    let upper: Vec<f64> = (1..cells).map(|i| -kf[i]).collect();
    let rhs: Vec<f64> = (1..cells).map(|i| h * h * xs[i].sin()).collect();
    let inner = thomas(&lower, &diag, &upper, &rhs)?;
    let mut u = vec![0.0; m + 2];
    u[1..=m].copy_from_slice(&inner);
    Ok((xs, u))
}

/// Max-norm residual of the `h^2`-scaled discrete system at interior nodes.
pub fn multiscale_discrete_residual(xs: &[f64], u: &[f64]) -> f64 {
    let cells = xs.len() - 1;
    let h = PI / cells as f64;
    (1..cells)
        .map(|i| {
            let kl = multiscale_kappa((i as f64 - 0.5) * h);
            let kr = multiscale_kappa((i as f64 + 0.5) * h);
            let au = -kr * (u[i + 1] - u[i]) + kl * (u[i] - u[i - 1]);
            (au - h * h * xs[i].sin()).abs()
        })
        .fold(0.0, f64::max)
}

/// Reference solution on every node of the FD grid.
pub fn multiscale_reference(cells: usize) -> Result<ReferenceGrid> {
    let (xs, u) = multiscale_solve(cells)?;
    ReferenceGrid::new(vec![xs], u)
}
