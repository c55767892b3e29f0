//! Benchmark problems: domains, residual operators and boundary data.
//!
//! Evolution problems carry time as the last input coordinate, so points
//! are `(x, t)`.

use std::f64::consts::PI;

use rand::Rng;

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::network::{forward_with_selected_derivs, DerivBundle, MlpParams};
use crate::tensor::Tensor;

/// Tolerance for points nudged past the box by rounding.
pub const DOMAIN_TOL: f64 = 1e-12;

/// Axis-aligned box `lo[i] <= x_i <= hi[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainBox {
    lo: Vec<f64>,
    hi: Vec<f64>,
}

impl DomainBox {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.len() != hi.len() || lo.is_empty() {
            return Err(Error::invalid("domain bounds must be non-empty and of equal length"));
        }
        if lo.iter().zip(&hi).any(|(l, h)| !(l < h)) {
            return Err(Error::invalid(format!("degenerate domain {lo:?}..{hi:?}")));
        }
        Ok(Self { lo, hi })
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn lo(&self) -> &[f64] {
        &self.lo
    }

    pub fn hi(&self) -> &[f64] {
        &self.hi
    }

    pub fn width(&self, i: usize) -> f64 {
        self.hi[i] - self.lo[i]
    }

    pub fn contains(&self, point: &[f64], tol: f64) -> bool {
        point.len() == self.dim()
            && point
                .iter()
                .zip(self.lo.iter().zip(&self.hi))
                .all(|(&x, (&l, &h))| x >= l - tol && x <= h + tol)
    }

    pub fn clip(&self, point: &mut [f64]) {
        for (x, (&l, &h)) in point.iter_mut().zip(self.lo.iter().zip(&self.hi)) {
            *x = x.clamp(l, h);
        }
    }

    /// Copy of this box with coordinate `i` restricted to `[lo, hi]`.
    pub fn restrict(&self, i: usize, lo: f64, hi: f64) -> Result<Self> {
        let mut out = self.clone();
        out.lo[i] = lo.max(self.lo[i]);
        out.hi[i] = hi.min(self.hi[i]);
        Self::new(out.lo, out.hi)
    }

    pub fn check_points(&self, points: &Tensor) -> Result<()> {
        if points.cols() != self.dim() {
            return Err(Error::ShapeMismatch {
                op: "domain check",
                lhs: vec![self.dim()],
                rhs: points.shape().to_vec(),
            });
        }
        for r in 0..points.rows() {
            let p = points.row(r);
            if !self.contains(p, DOMAIN_TOL) {
                return Err(Error::OutOfDomain { point: p.to_vec() });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricKind {
    /// `||u_pred - u_ref||_2 / ||u_ref||_2` on the evaluation grid.
    RelativeL2,
    /// Mean of the squared residual on the evaluation grid.
    ResidualMse,
}

impl MetricKind {
    pub fn as_str(self) -> &'static str {
        match self {
            MetricKind::RelativeL2 => "relative_l2",
            MetricKind::ResidualMse => "residual_mse",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Benchmark {
    Poisson2d,
    Burgers,
    Multiscale,
    AllenCahn,
}

/// Ridge/canyon centres of the Poisson solution.
pub const POISSON_CENTERS: [f64; 3] = [-0.8, 0.0, 0.8];
/// Viscosity of the Burgers problem.
pub const BURGERS_NU: f64 = 0.01 / PI;
/// Scale parameter of the multi-scale coefficient.
pub const MULTISCALE_EPS: f64 = 0.25;
/// Diffusivity of the Allen-Cahn problem.
pub const ALLEN_CAHN_D: f64 = 1e-4;

/// `exp(-100 s^2)`
pub fn gaussian_ridge(s: f64) -> f64 {
    (-100.0 * s * s).exp()
}

/// Second derivative of [`gaussian_ridge`]: `(40000 s^2 - 200) exp(-100 s^2)`.
pub fn gaussian_ridge_dd(s: f64) -> f64 {
    (40000.0 * s * s - 200.0) * gaussian_ridge(s)
}

pub fn poisson_exact(x: f64, y: f64) -> f64 {
    POISSON_CENTERS
        .iter()
        .map(|&c| gaussian_ridge(x - c) - gaussian_ridge(y - c))
        .sum()
}

/// `f = -Laplacian(u_exact)`.
pub fn poisson_forcing(x: f64, y: f64) -> f64 {
    -POISSON_CENTERS
        .iter()
        .map(|&c| gaussian_ridge_dd(x - c) - gaussian_ridge_dd(y - c))
        .sum::<f64>()
}

pub fn multiscale_kappa(x: f64) -> f64 {
    0.5 * (2.0 * PI * x / MULTISCALE_EPS).sin() + x.sin() + 2.0
}

pub fn multiscale_kappa_prime(x: f64) -> f64 {
    0.5 * (2.0 * PI / MULTISCALE_EPS) * (2.0 * PI * x / MULTISCALE_EPS).cos() + x.cos()
}

pub fn burgers_initial(x: f64) -> f64 {
    -(PI * x).sin()
}

pub fn allen_cahn_initial(x: f64) -> f64 {
    x * x * (PI * x).cos()
}

/// Supervised points on the boundary (and the `t = 0` face for evolution
/// problems) with their target values.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryData {
    pub points: Tensor,
    pub targets: Vec<f64>,
}

impl BoundaryData {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}

/// One benchmark problem.
#[derive(Debug, Clone, PartialEq)]
pub struct PdeProblem {
    name: &'static str,
    benchmark: Benchmark,
    domain: DomainBox,
    metric: MetricKind,
}

pub fn poisson_problem() -> PdeProblem {
    PdeProblem {
        name: "poisson2d",
        benchmark: Benchmark::Poisson2d,
        domain: DomainBox::new(vec![-1.0, -1.0], vec![1.0, 1.0]).unwrap(),
        metric: MetricKind::RelativeL2,
    }
}

pub fn burgers_problem() -> PdeProblem {
    PdeProblem {
        name: "burgers",
        benchmark: Benchmark::Burgers,
        domain: DomainBox::new(vec![-1.0, 0.0], vec![1.0, 1.0]).unwrap(),
        metric: MetricKind::RelativeL2,
    }
}

pub fn multiscale_problem() -> PdeProblem {
    PdeProblem {
        name: "multiscale",
        benchmark: Benchmark::Multiscale,
        domain: DomainBox::new(vec![0.0], vec![PI]).unwrap(),
        metric: MetricKind::ResidualMse,
    }
}

pub fn allen_cahn_problem() -> PdeProblem {
    PdeProblem {
        name: "allen_cahn",
        benchmark: Benchmark::AllenCahn,
        domain: DomainBox::new(vec![-1.0, 0.0], vec![1.0, 1.0]).unwrap(),
        metric: MetricKind::RelativeL2,
    }
}

pub const PROBLEM_NAMES: [&str; 4] = ["poisson2d", "burgers", "multiscale", "allen_cahn"];

impl PdeProblem {
    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "poisson2d" => Ok(poisson_problem()),
            "burgers" => Ok(burgers_problem()),
            "multiscale" => Ok(multiscale_problem()),
            "allen_cahn" => Ok(allen_cahn_problem()),
            other => Err(Error::Config(format!(
                "unknown problem `{other}` (expected one of {PROBLEM_NAMES:?})"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        self.name
    }

    pub fn benchmark(&self) -> Benchmark {
        self.benchmark
    }

    pub fn domain(&self) -> &DomainBox {
        &self.domain
    }

    pub fn dim(&self) -> usize {
        self.domain.dim()
    }

    pub fn metric_kind(&self) -> MetricKind {
        self.metric
    }

    /// Time is the last coordinate.
    pub fn is_evolution(&self) -> bool {
        matches!(self.benchmark, Benchmark::Burgers | Benchmark::AllenCahn)
    }

    /// Which coordinates need second derivatives in the residual.
    pub fn second_derivative_mask(&self) -> Vec<bool> {
        match self.benchmark {
            Benchmark::Poisson2d => vec![true, true],
            Benchmark::Burgers | Benchmark::AllenCahn => vec![true, false],
            Benchmark::Multiscale => vec![true],
        }
    }

    pub fn exact_solution(&self, point: &[f64]) -> Option<f64> {
        match self.benchmark {
            Benchmark::Poisson2d => Some(poisson_exact(point[0], point[1])),
            _ => None,
        }
    }

    /// Signed residual `A(x; u)` assembled from a derivative bundle.
    /// `x` is the `(n, dim)` input node the bundle was built from.
    pub fn residual(&self, tape: &mut Tape, x: NodeId, b: &DerivBundle) -> Result<NodeId> {
        match self.benchmark {
            Benchmark::Poisson2d => {
                // -lap(u) - f = -lap(u) + lap(u_exact)
                let lap = tape.add(b.d2(0)?, b.d2(1)?)?;
                let x0 = tape.column(x, 0)?;
                let x1 = tape.column(x, 1)?;
                let mut exact_lap: Option<NodeId> = None;
                for &c in &POISSON_CENTERS {
                    let gx = ridge_dd(tape, x0, c)?;
                    let gy = ridge_dd(tape, x1, c)?;
                    let d = tape.sub(gx, gy)?;
                    exact_lap = Some(match exact_lap {
                        Some(acc) => tape.add(acc, d)?,
                        None => d,
                    });
                }
                tape.sub(exact_lap.expect("three centres"), lap)
            }
            Benchmark::Burgers => {
                // u_t + u u_x - nu u_xx
                let adv = tape.mul(b.u, b.du[0])?;
                let diff = tape.scale(b.d2(0)?, BURGERS_NU)?;
                let r = tape.add(b.du[1], adv)?;
                tape.sub(r, diff)
            }
            Benchmark::Multiscale => {
                // -kappa' u_x - kappa u_xx - sin(x)
                let xs = tape.column(x, 0)?;
                let w = 2.0 * PI / MULTISCALE_EPS;
                let arg = tape.scale(xs, w)?;
                let s_fast = tape.sin(arg)?;
                let c_fast = tape.cos(arg)?;
                let s = tape.sin(xs)?;
                let c = tape.cos(xs)?;
                let k1 = tape.scale(s_fast, 0.5)?;
                let k2 = tape.add(k1, s)?;
                let kappa = tape.shift(k2, 2.0)?;
                let kp1 = tape.scale(c_fast, 0.5 * w)?;
                let kappa_p = tape.add(kp1, c)?;
                let t1 = tape.mul(kappa_p, b.du[0])?;
                let t2 = tape.mul(kappa, b.d2(0)?)?;
                let flux = tape.add(t1, t2)?;
                let with_f = tape.add(flux, s)?;
                tape.neg(with_f)
            }
            Benchmark::AllenCahn => {
                // u_t - D u_xx - 5 (u - u^3)
                let diff = tape.scale(b.d2(0)?, ALLEN_CAHN_D)?;
                let u3 = tape.powi(b.u, 3)?;
                let react = tape.sub(b.u, u3)?;
                let react = tape.scale(react, 5.0)?;
                let r = tape.sub(b.du[1], diff)?;
                tape.sub(r, react)
            }
        }
    }

    /// Residual node for the `(n, dim)` input `x` under the recorded network.
    pub fn residual_batch(
        &self,
        tape: &mut Tape,
        params: &crate::network::ParamNodes,
        x: NodeId,
    ) -> Result<NodeId> {
        self.domain.check_points(tape.value(x))?;
        let bundle = forward_with_selected_derivs(tape, params, x, &self.second_derivative_mask())?;
        self.residual(tape, x, &bundle)
    }

    /// Signed residual values at `points`, evaluated in chunks without gradients.
    pub fn residual_values(&self, params: &MlpParams, points: &Tensor) -> Result<Vec<f64>> {
        self.domain.check_points(points)?;
        let mut out = Vec::with_capacity(points.rows());
        for chunk in row_chunks(points, EVAL_CHUNK)? {
            let mut tape = Tape::new();
            let nodes = params.to_tape(&mut tape, false)?;
            let x = tape.constant(chunk)?;
            let r = self.residual_batch(&mut tape, &nodes, x)?;
            out.extend_from_slice(tape.value(r).data());
        }
        Ok(out)
    }

    /// `|r|` and its gradient with respect to each input point.
    pub fn abs_residual_and_grad(&self, params: &MlpParams, points: &Tensor) -> Result<(Vec<f64>, Tensor)> {
        self.domain.check_points(points)?;
        let mut values = Vec::with_capacity(points.rows());
        let mut grads = Vec::with_capacity(points.len());
        for chunk in row_chunks(points, EVAL_CHUNK)? {
            let mut tape = Tape::new();
            let nodes = params.to_tape(&mut tape, false)?;
            let x = tape.leaf(chunk, true)?;
            let r = self.residual_batch(&mut tape, &nodes, x)?;
            let a = tape.abs(r)?;
            let total = tape.sum(a)?;
            values.extend_from_slice(tape.value(a).data());
            let mut g = tape.backward(total)?;
            grads.extend(g.take(&tape, x).into_data());
        }
        Ok((values, Tensor::matrix(points.rows(), points.cols(), grads)?))
    }

    /// Target value of a supervised boundary/initial point.
    pub fn boundary_target(&self, point: &[f64]) -> f64 {
        match self.benchmark {
            Benchmark::Poisson2d => poisson_exact(point[0], point[1]),
            Benchmark::Burgers => {
                if point[1] == 0.0 {
                    burgers_initial(point[0])
                } else {
                    0.0
                }
            }
            Benchmark::AllenCahn => {
                if point[1] == 0.0 {
                    allen_cahn_initial(point[0])
                } else {
                    0.0
                }
            }
            Benchmark::Multiscale => 0.0,
        }
    }

    /// `n` supervised points on the boundary faces.
    ///
    /// Poisson: the four edges with equal probability. Burgers/Allen-Cahn:
    /// half on the `t = 0` face, a quarter on each spatial wall with
    /// `t > 0`, so corners belong to the initial face only. Multi-scale:
    /// alternating endpoints.
    pub fn boundary_points<R: Rng>(&self, n: usize, rng: &mut R) -> Result<BoundaryData> {
        if n == 0 {
            return Err(Error::invalid("boundary point count must be positive"));
        }
        let (lo, hi) = (self.domain.lo(), self.domain.hi());
        let mut rows = Vec::with_capacity(n);
        match self.benchmark {
            Benchmark::Poisson2d => {
                for _ in 0..n {
                    let edge = rng.random_range(0..4usize);
                    let free = rng.random_range(0.0..=1.0);
                    let p = match edge {
                        0 => vec![lo[0], lo[1] + free * (hi[1] - lo[1])],
                        1 => vec![hi[0], lo[1] + free * (hi[1] - lo[1])],
                        2 => vec![lo[0] + free * (hi[0] - lo[0]), lo[1]],
                        _ => vec![lo[0] + free * (hi[0] - lo[0]), hi[1]],
                    };
                    rows.push(p);
                }
            }
            Benchmark::Burgers | Benchmark::AllenCahn => {
                let n_initial = n.div_ceil(2);
                for k in 0..n {
                    if k < n_initial {
                        let x = lo[0] + rng.random_range(0.0..=1.0) * (hi[0] - lo[0]);
                        rows.push(vec![x, lo[1]]);
                    } else {
                        let mut t = 0.0;
                        while t == 0.0 {
                            t = rng.random_range(0.0..=1.0) * hi[1];
                        }
                        let wall = if (k - n_initial) % 2 == 0 { lo[0] } else { hi[0] };
                        rows.push(vec![wall, t]);
                    }
                }
            }
            Benchmark::Multiscale => {
                for k in 0..n {
                    rows.push(vec![if k % 2 == 0 { lo[0] } else { hi[0] }]);
                }
            }
        }
        let targets = rows.iter().map(|p| self.boundary_target(p)).collect();
        Ok(BoundaryData {
            points: Tensor::from_rows(&rows)?,
            targets,
        })
    }
}

const EVAL_CHUNK: usize = 4096;

pub(crate) fn row_chunks(points: &Tensor, chunk: usize) -> Result<Vec<Tensor>> {
    let cols = points.cols();
    points
        .data()
        .chunks(chunk * cols)
        .map(|c| Tensor::matrix(c.len() / cols, cols, c.to_vec()))
        .collect()
}

/// `(40000 s^2 - 200) exp(-100 s^2)` with `s = x - c`, on the tape.
fn ridge_dd(tape: &mut Tape, x: NodeId, c: f64) -> Result<NodeId> {
    let s = tape.shift(x, -c)?;
    let s2 = tape.square(s)?;
    let e = tape.scale(s2, -100.0)?;
    let g = tape.exp(e)?;
    let poly = tape.scale(s2, 40000.0)?;
    let poly = tape.shift(poly, -200.0)?;
    tape.mul(poly, g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::layer_sizes;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn poisson_exact_examples() {
        for x in [-0.9, -0.3, 0.0, 0.45, 1.0] {
            assert_eq!(poisson_exact(x, x), 0.0);
        }
        // all other Gaussians contribute about -2.25e-7
        assert!((poisson_exact(0.8, 0.4) - 1.0).abs() < 3e-7);
    }

    #[test]
    fn burgers_data() {
        let p = burgers_problem();
        assert!((p.boundary_target(&[0.5, 0.0]) + 1.0).abs() < 1e-15);
        assert_eq!(p.boundary_target(&[1.0, 0.3]), 0.0);
        assert_eq!(p.boundary_target(&[-1.0, 0.9]), 0.0);
    }

    #[test]
    fn multiscale_kappa_examples() {
        assert_eq!(multiscale_kappa(0.0), 2.0);
        let expected = 0.5 * (4.0 * PI * PI).sin() + 3.0;
        assert!((multiscale_kappa(PI / 2.0) - expected).abs() < 1e-14);
        assert!((multiscale_kappa(PI / 2.0) - 3.489170275629889).abs() < 1e-13);
        assert!((multiscale_kappa_prime(0.0) - (4.0 * PI + 1.0)).abs() < 1e-12);
    }

    #[test]
    fn allen_cahn_initial_examples() {
        assert!((allen_cahn_initial(1.0) + 1.0).abs() < 1e-15);
        assert!(allen_cahn_initial(0.5).abs() < 1e-16);
    }

    #[test]
    fn zero_network_has_zero_residual_for_homogeneous_problems() {
        for p in [burgers_problem(), allen_cahn_problem()] {
            let params = MlpParams::zeros(&layer_sizes(2, 2, 4)).unwrap();
            let pts = Tensor::from_rows(&[vec![0.3, 0.2], vec![-0.7, 0.9]]).unwrap();
            let r = p.residual_values(&params, &pts).unwrap();
            assert!(r.iter().all(|&v| v == 0.0), "{}", p.name());
        }
    }

    #[test]
    fn out_of_domain_is_rejected() {
        let p = poisson_problem();
        let params = MlpParams::init(&layer_sizes(2, 1, 3), 1).unwrap();
        let ok = Tensor::from_rows(&[vec![1.0 + 1e-13, 0.0]]).unwrap();
        assert!(p.residual_values(&params, &ok).is_ok());
        let bad = Tensor::from_rows(&[vec![1.1, 0.0]]).unwrap();
        assert!(matches!(p.residual_values(&params, &bad), Err(Error::OutOfDomain { .. })));
    }

    #[test]
    fn untrained_residual_is_finite_and_repeatable() {
        let p = poisson_problem();
        let params = MlpParams::init(&layer_sizes(2, 3, 8), 4).unwrap();
        let pts = Tensor::from_rows(&[vec![0.1, -0.6]]).unwrap();
        let a = p.residual_values(&params, &pts).unwrap();
        let b = p.residual_values(&params, &pts).unwrap();
        assert!(a[0].is_finite());
        assert_eq!(a[0].to_bits(), b[0].to_bits());
    }

    #[test]
    fn boundary_points_lie_on_faces() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for p in [poisson_problem(), burgers_problem(), multiscale_problem(), allen_cahn_problem()] {
            let b = p.boundary_points(101, &mut rng).unwrap();
            let (lo, hi) = (p.domain().lo(), p.domain().hi());
            for r in 0..b.points.rows() {
                let pt = b.points.row(r);
                assert!(p.domain().contains(pt, 0.0));
                let on_face = match p.benchmark() {
                    Benchmark::Burgers | Benchmark::AllenCahn => {
                        pt[1] == lo[1] || ((pt[0] == lo[0] || pt[0] == hi[0]) && pt[1] > 0.0)
                    }
                    _ => pt.iter().enumerate().any(|(i, &v)| v == lo[i] || v == hi[i]),
                };
                assert!(on_face, "{} {pt:?}", p.name());
                assert_eq!(b.targets[r], p.boundary_target(pt));
            }
        }
    }

    #[test]
    fn names_resolve() {
        for name in PROBLEM_NAMES {
            assert_eq!(PdeProblem::by_name(name).unwrap().name(), name);
        }
        assert!(PdeProblem::by_name("heat").is_err());
    }
}
