//! Collocation-point generators.
//!
//! Every sampler is a pure function of its inputs and a `u64` seed; the
//! residual field is passed in as a closure or an [`AttackObjective`] so
//! the samplers can be tested on toy functions.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::network::MlpParams;
use crate::pde::{DomainBox, PdeProblem};
use crate::tensor::Tensor;

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Decorrelated child seed for `(seed, purpose, index)`.
pub fn derive_seed(seed: u64, purpose: u64, index: u64) -> u64 {
    let mut z = seed
        ^ purpose.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03);
    // splitmix64 finalizer
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Origin {
    Lhs,
    Uniform,
    Rar,
    Sais,
    Adversarial,
    Boundary,
}

impl Origin {
    pub fn as_str(self) -> &'static str {
        match self {
            Origin::Lhs => "lhs",
            Origin::Uniform => "uniform",
            Origin::Rar => "rar",
            Origin::Sais => "sais",
            Origin::Adversarial => "adversarial",
            Origin::Boundary => "boundary",
        }
    }
}

impl fmt::Display for Origin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Origin {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "lhs" => Origin::Lhs,
            "uniform" => Origin::Uniform,
            "rar" => Origin::Rar,
            "sais" => Origin::Sais,
            "adversarial" => Origin::Adversarial,
            "boundary" => Origin::Boundary,
            other => return Err(Error::invalid(format!("unknown sample origin `{other}`"))),
        })
    }
}

/// Points with the iteration that produced them and how.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    points: Tensor,
    tags: Vec<usize>,
    origins: Vec<Origin>,
}

impl SampleSet {
    pub fn new(points: Tensor, tag: usize, origin: Origin) -> Result<Self> {
        if points.shape().len() != 2 {
            return Err(Error::invalid("sample points must be an (n, dim) matrix"));
        }
        let n = points.rows();
        Ok(Self {
            points,
            tags: vec![tag; n],
            origins: vec![origin; n],
        })
    }

    pub fn empty(dim: usize) -> Self {
        Self {
            points: Tensor::zeros(&[0, dim]),
            tags: Vec::new(),
            origins: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points.shape()[1]
    }

    pub fn points(&self) -> &Tensor {
        &self.points
    }

    pub fn tags(&self) -> &[usize] {
        &self.tags
    }

    pub fn origins(&self) -> &[Origin] {
        &self.origins
    }

    pub fn point(&self, i: usize) -> &[f64] {
        self.points.row(i)
    }

    pub fn with_tag(mut self, tag: usize) -> Self {
        self.tags.iter_mut().for_each(|t| *t = tag);
        self
    }

    pub fn append(&mut self, other: &SampleSet) -> Result<()> {
        if other.dim() != self.dim() {
            return Err(Error::ShapeMismatch {
                op: "append samples",
                lhs: self.points.shape().to_vec(),
                rhs: other.points.shape().to_vec(),
            });
        }
        let n = self.len() + other.len();
        let mut data = std::mem::replace(&mut self.points, Tensor::zeros(&[0, 0])).into_data();
        data.extend_from_slice(other.points.data());
        self.points = Tensor::matrix(n, other.dim(), data)?;
        self.tags.extend_from_slice(&other.tags);
        self.origins.extend_from_slice(&other.origins);
        Ok(())
    }

    /// Rows `indices`, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Result<SampleSet> {
        let d = self.dim();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            if i >= self.len() {
                return Err(Error::invalid(format!("sample index {i} out of range")));
            }
            data.extend_from_slice(self.point(i));
        }
        Ok(SampleSet {
            points: Tensor::matrix(indices.len(), d, data)?,
            tags: indices.iter().map(|&i| self.tags[i]).collect(),
            origins: indices.iter().map(|&i| self.origins[i]).collect(),
        })
    }

    /// Union of sets, in order.
    pub fn concat(sets: &[SampleSet]) -> Result<SampleSet> {
        let first = sets.first().ok_or_else(|| Error::invalid("no sample sets to concatenate"))?;
        let mut out = SampleSet::empty(first.dim());
        for s in sets {
            out.append(s)?;
        }
        Ok(out)
    }

    pub fn check_domain(&self, domain: &DomainBox) -> Result<()> {
        domain.check_points(&self.points)
    }

    /// CSV with columns `x0..x{d-1},iteration,origin`. Values use the
    /// shortest representation that parses back to the same `f64`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header: Vec<String> = (0..self.dim()).map(|i| format!("x{i}")).collect();
        header.push("iteration".into());
        header.push("origin".into());
        w.write_record(&header)?;
        for i in 0..self.len() {
            let mut rec: Vec<String> = self.point(i).iter().map(|v| v.to_string()).collect();
            rec.push(self.tags[i].to_string());
            rec.push(self.origins[i].to_string());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<SampleSet> {
        let mut r = csv::Reader::from_reader(reader);
        let dim = r
            .headers()?
            .len()
            .checked_sub(2)
            .filter(|&d| d > 0)
            .ok_or_else(|| Error::invalid("sample CSV needs coordinate, iteration and origin columns"))?;
        let mut data = Vec::new();
        let mut tags = Vec::new();
        let mut origins = Vec::new();
        for (line, rec) in r.records().enumerate() {
            let rec = rec?;
            let bad = |what: &str| Error::invalid(format!("sample CSV row {}: bad {what}", line + 2));
            for j in 0..dim {
                data.push(rec[j].parse::<f64>().map_err(|_| bad("coordinate"))?);
            }
            tags.push(rec[dim].parse::<usize>().map_err(|_| bad("iteration"))?);
            origins.push(rec[dim + 1].parse::<Origin>()?);
        }
        Ok(SampleSet {
            points: Tensor::matrix(tags.len(), dim, data)?,
            tags,
            origins,
        })
    }
}

/// Latin hypercube: each coordinate has exactly one point in each of the
/// `n` equal strata.
pub fn lhs(n: usize, domain: &DomainBox, seed: u64) -> Result<SampleSet> {
    if n == 0 {
        return Err(Error::invalid("LHS needs at least one sample"));
    }
    let d = domain.dim();
    let mut rng = seeded_rng(seed);
    let mut data = vec![0.0; n * d];
    let mut perm: Vec<usize> = (0..n).collect();
    for j in 0..d {
        perm.shuffle(&mut rng);
        let (lo, w) = (domain.lo()[j], domain.width(j));
        for (i, &s) in perm.iter().enumerate() {
            let u: f64 = rng.random();
            // min() guards the last stratum against rounding past hi
            data[i * d + j] = (lo + (s as f64 + u) / n as f64 * w).min(domain.hi()[j]);
        }
    }
    SampleSet::new(Tensor::matrix(n, d, data)?, 0, Origin::Lhs)
}

fn uniform_points<R: Rng>(n: usize, domain: &DomainBox, rng: &mut R) -> Result<Tensor> {
    let d = domain.dim();
    let mut data = Vec::with_capacity(n * d);
    for _ in 0..n {
        for j in 0..d {
            let u: f64 = rng.random();
            data.push(domain.lo()[j] + u * domain.width(j));
        }
    }
    Tensor::matrix(n, d, data)
}

/// i.i.d. uniform points on the box.
pub fn uniform(n: usize, domain: &DomainBox, seed: u64) -> Result<SampleSet> {
    if n == 0 {
        return Err(Error::invalid("uniform sampler needs at least one sample"));
    }
    let pts = uniform_points(n, domain, &mut seeded_rng(seed))?;
    SampleSet::new(pts, 0, Origin::Uniform)
}

/// Indices of the `n` largest `|values|`, largest first; ties go to the
/// lower index.
pub fn top_n_indices(values: &[f64], n: usize) -> Result<Vec<usize>> {
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("residual at candidate {i}")));
    }
    if n > values.len() {
        return Err(Error::invalid(format!(
            "cannot select {n} of {} candidates",
            values.len()
        )));
    }
    let mut idx: Vec<usize> = (0..values.len()).collect();
    // stable sort keeps index order among equal magnitudes
    idx.sort_by(|&a, &b| values[b].abs().total_cmp(&values[a].abs()));
    idx.truncate(n);
    Ok(idx)
}

/// Residual-based adaptive refinement: draw `floor(K n)` uniform candidates
/// and keep the `n` with the largest `|residual|`.
pub fn rar_select<F>(k_factor: f64, n: usize, domain: &DomainBox, mut residual_fn: F, seed: u64) -> Result<SampleSet>
where
    F: FnMut(&Tensor) -> Result<Vec<f64>>,
{
    if !(k_factor > 1.0) {
        return Err(Error::invalid(format!("RAR candidate factor must exceed 1, got {k_factor}")));
    }
    if n == 0 {
        return Err(Error::invalid("RAR needs at least one sample"));
    }
    let m = (k_factor * n as f64).floor() as usize;
    let candidates = SampleSet::new(uniform_points(m, domain, &mut seeded_rng(seed))?, 0, Origin::Rar)?;
    let r = residual_fn(candidates.points())?;
    candidates.subset(&top_n_indices(&r, n)?)
}

/// Regularization added to a singular SAIS covariance.
pub const SAIS_RIDGE: f64 = 1e-6;

/// Gaussian proposal fitted to elite samples.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianProposal {
    mean: Vec<f64>,
    cov: Vec<f64>,
    chol: Vec<f64>,
    regularized: bool,
}

impl GaussianProposal {
    /// Sample mean and unbiased (`1/(N-1)`) covariance of the rows of
    /// `elite`; a singular covariance is replaced by `cov + 1e-6 I`.
    pub fn fit(elite: &Tensor) -> Result<Self> {
        let (n, d) = (elite.rows(), elite.cols());
        if n == 0 || elite.shape().len() != 2 {
            return Err(Error::invalid("SAIS fit needs a non-empty (n, dim) elite set"));
        }
        let mut mean = vec![0.0; d];
        for i in 0..n {
            for (m, &v) in mean.iter_mut().zip(elite.row(i)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut cov = vec![0.0; d * d];
        if n > 1 {
            for i in 0..n {
                let row = elite.row(i);
                for a in 0..d {
                    for b in 0..d {
                        cov[a * d + b] += (row[a] - mean[a]) * (row[b] - mean[b]);
                    }
                }
            }
            cov.iter_mut().for_each(|c| *c /= (n - 1) as f64);
        }
        let (chol, regularized) = match cholesky(&cov, d) {
            Some(l) => (l, false),
            None => {
                for a in 0..d {
                    cov[a * d + a] += SAIS_RIDGE;
                }
                let l = cholesky(&cov, d)
                    .ok_or_else(|| Error::NonFinite("SAIS covariance after regularization".into()))?;
                (l, true)
            }
        };
        Ok(Self { mean, cov, chol, regularized })
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    /// Row-major `d x d` covariance actually used for sampling.
    pub fn cov(&self) -> &[f64] {
        &self.cov
    }

    pub fn regularized(&self) -> bool {
        self.regularized
    }

    fn draw<R: Rng>(&self, rng: &mut R, out: &mut [f64]) {
        let d = self.mean.len();
        let z: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        for a in 0..d {
            let mut v = self.mean[a];
            for b in 0..=a {
                v += self.chol[a * d + b] * z[b];
            }
            out[a] = v;
        }
    }

    /// `n` draws truncated to the box by rejection. After `1000 n` total
    /// attempts the remaining draws are clipped instead. Returns the points
    /// and how many were clipped.
    pub fn sample_truncated<R: Rng>(&self, n: usize, domain: &DomainBox, rng: &mut R) -> Result<(Tensor, usize)> {
        let d = self.mean.len();
        if d != domain.dim() {
            return Err(Error::invalid("proposal and domain dimensions differ"));
        }
        let cap = 1000 * n;
        let mut data = Vec::with_capacity(n * d);
        let mut buf = vec![0.0; d];
        let mut attempts = 0;
        let mut clipped = 0;
        while data.len() < n * d {
            self.draw(rng, &mut buf);
            attempts += 1;
            if domain.contains(&buf, 0.0) {
                data.extend_from_slice(&buf);
            } else if attempts > cap {
                domain.clip(&mut buf);
                data.extend_from_slice(&buf);
                clipped += 1;
            }
        }
        Ok((Tensor::matrix(n, d, data)?, clipped))
    }
}

/// Lower Cholesky factor, or `None` if the matrix is not numerically
/// positive definite.
fn cholesky(a: &[f64], d: usize) -> Option<Vec<f64>> {
    let scale = (0..d).map(|i| a[i * d + i].abs()).fold(0.0, f64::max);
    let tol = 1e-12 * scale.max(f64::MIN_POSITIVE);
    let mut l = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..=i {
            let mut s = a[i * d + j];
            for k in 0..j {
                s -= l[i * d + k] * l[j * d + k];
            }
            if i == j {
                if !(s > tol) {
                    return None;
                }
                l[i * d + i] = s.sqrt();
            } else {
                l[i * d + j] = s / l[j * d + j];
            }
        }
    }
    Some(l)
}

#[derive(Debug, Clone)]
pub struct SaisOutcome {
    /// Draw of the final round.
    pub samples: SampleSet,
    /// Proposal refitted on the final round's elite set.
    pub proposal: GaussianProposal,
    /// Draws clipped after exhausting the rejection budget.
    pub clipped: usize,
}

/// Self-adaptive importance sampling. Round 0 draws uniformly; each later
/// round refits a Gaussian to the top `ceil(p0 n)` points of the previous
/// draw and samples it truncated to the box. Runs `max_rounds` rounds.
pub fn sais_step<F>(
    n_per_round: usize,
    p0: f64,
    max_rounds: usize,
    domain: &DomainBox,
    mut residual_fn: F,
    seed: u64,
) -> Result<SaisOutcome>
where
    F: FnMut(&Tensor) -> Result<Vec<f64>>,
{
    if !(p0 > 0.0 && p0 < 1.0) {
        return Err(Error::invalid(format!("SAIS p0 must lie in (0, 1), got {p0}")));
    }
    if max_rounds == 0 || n_per_round == 0 {
        return Err(Error::invalid("SAIS needs at least one round and one sample"));
    }
    let n_elite = ((p0 * n_per_round as f64).ceil() as usize).max(1);
    let mut rng = seeded_rng(seed);
    let mut draw = uniform_points(n_per_round, domain, &mut rng)?;
    let mut clipped = 0;
    let mut proposal = None;
    for round in 0..max_rounds {
        let r = residual_fn(&draw)?;
        let elite_idx = top_n_indices(&r, n_elite)?;
        let elite = SampleSet::new(draw.clone(), 0, Origin::Sais)?.subset(&elite_idx)?;
        let fitted = GaussianProposal::fit(elite.points())?;
        if round + 1 < max_rounds {
            let (next, c) = fitted.sample_truncated(n_per_round, domain, &mut rng)?;
            draw = next;
            clipped += c;
        }
        proposal = Some(fitted);
    }
    Ok(SaisOutcome {
        samples: SampleSet::new(draw, 0, Origin::Sais)?,
        proposal: proposal.expect("at least one round"),
        clipped,
    })
}

/// PGD hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttackConfig {
    /// Max-norm bound on each of the random start and the accumulated step.
    pub epsilon: f64,
    /// Per-step size.
    pub eta: f64,
    pub steps: usize,
    /// How many previous iterations to revisit; may be fractional.
    pub revisit: f64,
    /// Uniform random start in `[-epsilon, epsilon]`.
    pub random_init: bool,
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) || !(self.eta > 0.0) || self.steps == 0 || !(self.revisit >= 0.0) {
            return Err(Error::Config(format!(
                "attack needs epsilon > 0, eta > 0, steps >= 1, revisit >= 0; got {self:?}"
            )));
        }
        if !self.epsilon.is_finite() && self.random_init {
            return Err(Error::Config("infinite epsilon requires random_init = false".into()));
        }
        Ok(())
    }
}

/// Something to maximize pointwise: values and their input gradients for
/// a batch of points.
pub trait AttackObjective {
    fn value_and_grad(&mut self, points: &Tensor) -> Result<(Vec<f64>, Tensor)>;

    fn values(&mut self, points: &Tensor) -> Result<Vec<f64>> {
        Ok(self.value_and_grad(points)?.0)
    }
}

impl<F> AttackObjective for F
where
    F: FnMut(&Tensor) -> Result<(Vec<f64>, Tensor)>,
{
    fn value_and_grad(&mut self, points: &Tensor) -> Result<(Vec<f64>, Tensor)> {
        self(points)
    }
}

/// `|r(x; theta)|` of a frozen network.
pub struct ResidualObjective<'a> {
    pub problem: &'a PdeProblem,
    pub params: &'a MlpParams,
}

impl AttackObjective for ResidualObjective<'_> {
    fn value_and_grad(&mut self, points: &Tensor) -> Result<(Vec<f64>, Tensor)> {
        self.problem.abs_residual_and_grad(self.params, points)
    }

    fn values(&mut self, points: &Tensor) -> Result<Vec<f64>> {
        Ok(self
            .problem
            .residual_values(self.params, points)?
            .into_iter()
            .map(f64::abs)
            .collect())
    }
}

#[derive(Debug, Clone)]
pub struct PgdOutcome {
    pub points: Tensor,
    /// Point-steps skipped because the gradient was not finite.
    pub warnings: usize,
}

/// Evaluate the objective, falling back to point-by-point evaluation when
/// the batch fails numerically so one bad point cannot poison the rest.
fn guarded_grad<O: AttackObjective + ?Sized>(obj: &mut O, x: &Tensor) -> Result<Vec<Option<Vec<f64>>>> {
    let d = x.cols();
    match obj.value_and_grad(x) {
        Ok((_, g)) => Ok((0..x.rows())
            .map(|i| {
                let row = g.row(i);
                row.iter().all(|v| v.is_finite()).then(|| row.to_vec())
            })
            .collect()),
        Err(e) if e.is_numerical() && x.rows() > 1 => (0..x.rows())
            .map(|i| {
                let single = Tensor::matrix(1, d, x.row(i).to_vec())?;
                Ok(guarded_grad(obj, &single)?.pop().flatten())
            })
            .collect(),
        Err(e) if e.is_numerical() => Ok(vec![None]),
        Err(e) => Err(e),
    }
}

/// Sign-gradient ascent within a max-norm ball.
///
/// The start is `clip(x0 + U[-eps, eps])` (or `x0`); the accumulated step
/// `g` is kept in `[-eps, eps]` and each gradient is taken at the current
/// iterate `clip(start + g)`. Every coordinate ends within `2 eps` of `x0`.
pub fn pinn_pgd<O: AttackObjective + ?Sized>(
    x0: &Tensor,
    objective: &mut O,
    config: &AttackConfig,
    domain: &DomainBox,
    seed: u64,
) -> Result<PgdOutcome> {
    config.validate()?;
    domain.check_points(x0)?;
    let (n, d) = (x0.rows(), x0.cols());
    let eps = config.epsilon;
    let mut start = x0.clone();
    if config.random_init {
        let mut rng = seeded_rng(seed);
        for i in 0..n {
            let row = &mut start.data_mut()[i * d..(i + 1) * d];
            for v in row.iter_mut() {
                *v += rng.random_range(-eps..=eps);
            }
            domain.clip(row);
        }
    }
    let mut g = vec![0.0; n * d];
    let current = |g: &[f64]| -> Result<Tensor> {
        let mut x = start.clone();
        for i in 0..n {
            let row = &mut x.data_mut()[i * d..(i + 1) * d];
            for (v, gv) in row.iter_mut().zip(&g[i * d..]) {
                *v += gv;
            }
            domain.clip(row);
        }
        Ok(x)
    };
    let mut warnings = 0;
    for _ in 0..config.steps {
        let x = current(&g)?;
        let grads = guarded_grad(objective, &x)?;
        for (i, gi) in grads.into_iter().enumerate() {
            match gi {
                Some(gi) => {
                    for (acc, gv) in g[i * d..(i + 1) * d].iter_mut().zip(gi) {
                        *acc = (*acc + config.eta * sign(gv)).clamp(-eps, eps);
                    }
                }
                None => warnings += 1,
            }
        }
    }
    Ok(PgdOutcome {
        points: current(&g)?,
        warnings,
    })
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Which earlier iterations an attack at iteration `k` starts from.
#[derive(Debug, Clone, PartialEq)]
pub struct RevisitPlan {
    /// Iterations used in full (ascending; always contains 0).
    pub full: Vec<usize>,
    /// An older iteration of which only a fraction is used.
    pub partial: Option<(usize, f64)>,
}

/// For revisit `m`: iterations `k-1-floor(m) ..= k-1` in full, the initial
/// iteration 0, and for fractional `m` a `frac(m)` share of iteration
/// `k-2-floor(m)`. Negative indices are dropped.
pub fn revisit_plan(k: usize, m: f64) -> Result<RevisitPlan> {
    if k == 0 {
        return Err(Error::invalid("attacks start at iteration 1"));
    }
    if !(m >= 0.0) || !m.is_finite() {
        return Err(Error::invalid(format!("revisit must be finite and >= 0, got {m}")));
    }
    let whole = m.floor() as usize;
    let frac = m - m.floor();
    let first = (k - 1).saturating_sub(whole);
    let mut full: Vec<usize> = (first..k).collect();
    if full[0] != 0 {
        full.insert(0, 0);
    }
    let partial = match (k as isize - 2 - whole as isize, frac > 0.0) {
        (j, true) if j > 0 => Some((j as usize, frac)),
        _ => None,
    };
    Ok(RevisitPlan { full, partial })
}

#[derive(Debug, Clone)]
pub struct AtPinnOutcome {
    /// Selected points, tagged with the current iteration.
    pub samples: SampleSet,
    pub candidate_count: usize,
    pub warnings: usize,
    /// `|r|` of every candidate, in candidate order.
    pub candidate_residuals: Vec<f64>,
    /// Seeds that the candidates were attacked from.
    pub seeds: Tensor,
}

/// Attack the revisited history (plus `extra_seeds`, e.g. boundary points)
/// and keep the `n_k` candidates with the largest objective.
#[allow(clippy::too_many_arguments)]
pub fn at_pinn_candidates<O: AttackObjective + ?Sized>(
    history: &[SampleSet],
    extra_seeds: Option<&Tensor>,
    config: &AttackConfig,
    objective: &mut O,
    domain: &DomainBox,
    n_k: usize,
    k: usize,
    seed: u64,
) -> Result<AtPinnOutcome> {
    if history.is_empty() {
        return Err(Error::invalid("AT-PINN needs at least the initial sample set"));
    }
    if history.len() < k {
        return Err(Error::invalid(format!(
            "history has {} iterations, attack at k = {k} needs {k}",
            history.len()
        )));
    }
    let plan = revisit_plan(k, config.revisit)?;
    let d = domain.dim();
    let mut seeds = Vec::new();
    for &i in &plan.full {
        seeds.extend_from_slice(history[i].points().data());
    }
    if let Some((j, frac)) = plan.partial {
        let set = &history[j];
        let take = (frac * set.len() as f64).round() as usize;
        let mut idx: Vec<usize> = (0..set.len()).collect();
        idx.shuffle(&mut seeded_rng(derive_seed(seed, 1, k as u64)));
        idx.truncate(take);
        idx.sort_unstable();
        seeds.extend_from_slice(set.subset(&idx)?.points().data());
    }
    if let Some(extra) = extra_seeds {
        if extra.cols() != d {
            return Err(Error::invalid("extra attack seeds have the wrong dimension"));
        }
        seeds.extend_from_slice(extra.data());
    }
    let seeds = Tensor::matrix(seeds.len() / d, d, seeds)?;
    let candidate_count = seeds.rows();
    if n_k > candidate_count {
        return Err(Error::invalid(format!(
            "cannot select {n_k} adversarial samples from {candidate_count} candidates"
        )));
    }
    let attacked = pinn_pgd(&seeds, objective, config, domain, derive_seed(seed, 2, k as u64))?;
    let r = objective.values(&attacked.points)?;
    let chosen = top_n_indices(&r, n_k)?;
    let all = SampleSet::new(attacked.points, k, Origin::Adversarial)?;
    Ok(AtPinnOutcome {
        samples: all.subset(&chosen)?,
        candidate_count,
        warnings: attacked.warnings,
        candidate_residuals: r,
        seeds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit() -> DomainBox {
        DomainBox::new(vec![0.0], vec![1.0]).unwrap()
    }

    fn toy(points: &Tensor) -> Result<(Vec<f64>, Tensor)> {
        let v = points.data().iter().map(|x| -(x - 0.5) * (x - 0.5)).collect();
        let g = points.map(|x| -2.0 * (x - 0.5));
        Ok((v, g))
    }

    fn toy_cfg(epsilon: f64) -> AttackConfig {
        AttackConfig { epsilon, eta: 0.05, steps: 10, revisit: 0.0, random_init: false }
    }

    #[test]
    fn pgd_toy_stops_at_epsilon() {
        let x0 = Tensor::matrix(1, 1, vec![0.3]).unwrap();
        let out = pinn_pgd(&x0, &mut toy, &toy_cfg(0.15), &unit(), 0).unwrap();
        assert_eq!(out.points.item(), 0.3 + 0.15);
        assert!((out.points.item() - 0.45).abs() < 1e-15);
    }

    #[test]
    fn pgd_toy_reaches_maximizer() {
        let x0 = Tensor::matrix(1, 1, vec![0.3]).unwrap();
        let out = pinn_pgd(&x0, &mut toy, &toy_cfg(0.5), &unit(), 0).unwrap();
        assert_eq!(out.points.item(), 0.5);
    }

    #[test]
    fn pgd_clips_at_edge() {
        let x0 = Tensor::matrix(1, 1, vec![1.0]).unwrap();
        let mut outward = |p: &Tensor| Ok((vec![0.0; p.rows()], Tensor::filled(p.shape(), 1.0)));
        let cfg = AttackConfig { random_init: true, ..toy_cfg(0.1) };
        let out = pinn_pgd(&x0, &mut outward, &cfg, &unit(), 5).unwrap();
        assert_eq!(out.points.item(), 1.0);
    }

    #[test]
    fn pgd_counts_bad_gradients() {
        let x0 = Tensor::matrix(2, 1, vec![0.2, 0.6]).unwrap();
        let mut half_bad = |p: &Tensor| {
            let g = Tensor::matrix(2, 1, vec![f64::NAN, 1.0]).unwrap();
            Ok((vec![0.0; p.rows()], g))
        };
        let out = pinn_pgd(&x0, &mut half_bad, &toy_cfg(0.1), &unit(), 0).unwrap();
        assert_eq!(out.warnings, 10);
        assert_eq!(out.points.data()[0], 0.2);
        assert!((out.points.data()[1] - 0.7).abs() < 1e-15);
    }

    #[test]
    fn lhs_four_strata() {
        let s = lhs(4, &unit(), 9).unwrap();
        let mut xs = s.points().data().to_vec();
        xs.sort_by(f64::total_cmp);
        for (i, x) in xs.iter().enumerate() {
            assert!(*x >= i as f64 * 0.25 && *x <= (i + 1) as f64 * 0.25, "{xs:?}");
        }
    }

    #[test]
    fn top_n_examples() {
        assert_eq!(top_n_indices(&[3.0, 1.0, 4.0, 1.0, 5.0], 2).unwrap(), vec![4, 2]);
        assert_eq!(top_n_indices(&[2.0; 6], 3).unwrap(), vec![0, 1, 2]);
        assert!(top_n_indices(&[1.0, f64::NAN], 1).is_err());
        assert!(top_n_indices(&[1.0], 2).is_err());
    }

    #[test]
    fn rar_constant_field_keeps_first_candidates() {
        let d = unit();
        let s = rar_select(2.0, 3, &d, |p| Ok(vec![1.0; p.rows()]), 4).unwrap();
        let all = uniform(6, &d, 4).unwrap();
        assert_eq!(s.points().data(), &all.points().data()[..3]);
        assert!(rar_select(1.0, 3, &d, |p| Ok(vec![1.0; p.rows()]), 4).is_err());
    }

    #[test]
    fn sais_fit_square() {
        let elite = Tensor::from_rows(&[vec![0.0, 0.0], vec![2.0, 0.0], vec![0.0, 2.0], vec![2.0, 2.0]]).unwrap();
        let p = GaussianProposal::fit(&elite).unwrap();
        assert_eq!(p.mean(), &[1.0, 1.0]);
        let c = p.cov();
        assert!((c[0] - 4.0 / 3.0).abs() < 1e-15 && (c[3] - 4.0 / 3.0).abs() < 1e-15);
        assert_eq!((c[1], c[2]), (0.0, 0.0));
        assert!(!p.regularized());
    }

    #[test]
    fn sais_fit_degenerate_regularizes() {
        let elite = Tensor::from_rows(&[vec![0.3, 0.1], vec![0.3, 0.1], vec![0.3, 0.1]]).unwrap();
        let p = GaussianProposal::fit(&elite).unwrap();
        assert!(p.regularized());
        assert_eq!(p.cov(), &[SAIS_RIDGE, 0.0, 0.0, SAIS_RIDGE]);
    }

    #[test]
    fn truncated_sampling_falls_back_to_clipping() {
        // proposal centred far outside the box: rejection never succeeds
        let far = Tensor::from_rows(&[vec![10.0], vec![10.2]]).unwrap();
        let p = GaussianProposal::fit(&far).unwrap();
        let (pts, clipped) = p.sample_truncated(5, &unit(), &mut seeded_rng(1)).unwrap();
        assert_eq!(clipped, 5);
        assert!(pts.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn revisit_examples() {
        assert_eq!(revisit_plan(1, 0.0).unwrap(), RevisitPlan { full: vec![0], partial: None });
        assert_eq!(revisit_plan(3, 1.0).unwrap().full, vec![0, 1, 2]);
        assert_eq!(revisit_plan(5, 0.0).unwrap().full, vec![0, 4]);
        assert_eq!(
            revisit_plan(5, 1.5).unwrap(),
            RevisitPlan { full: vec![0, 3, 4], partial: Some((2, 0.5)) }
        );
        // the partial iteration would be the initial set, which is already in full
        assert_eq!(revisit_plan(3, 1.5).unwrap().partial, None);
    }

    #[test]
    fn at_pinn_counts_candidates() {
        let d = unit();
        let hist: Vec<SampleSet> = (0..3).map(|k| uniform(10, &d, k).unwrap().with_tag(k as usize)).collect();
        let cfg = AttackConfig { revisit: 1.0, ..toy_cfg(0.05) };
        let out = at_pinn_candidates(&hist, None, &cfg, &mut toy, &d, 7, 3, 0).unwrap();
        assert_eq!(out.candidate_count, 30);
        assert_eq!(out.samples.len(), 7);
        assert!(out.samples.tags().iter().all(|&t| t == 3));
        let err = at_pinn_candidates(&hist, None, &cfg, &mut toy, &d, 31, 3, 0);
        assert!(err.is_err());
    }

    #[test]
    fn csv_round_trip() {
        let d = DomainBox::new(vec![-1.0, 0.0], vec![1.0, 1.0]).unwrap();
        let mut s = lhs(5, &d, 1).unwrap();
        s.append(&uniform(3, &d, 2).unwrap().with_tag(4)).unwrap();
        let mut buf = Vec::new();
        s.write_csv(&mut buf).unwrap();
        let back = SampleSet::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn derived_seeds_differ() {
        assert_ne!(derive_seed(1, 0, 0), derive_seed(1, 0, 1));
        assert_ne!(derive_seed(1, 0, 0), derive_seed(1, 1, 0));
        assert_eq!(derive_seed(7, 3, 2), derive_seed(7, 3, 2));
    }
}
