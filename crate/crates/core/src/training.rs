//! PINN loss, Adam, and the iterative resample-and-retrain loop.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::network::{forward, layer_sizes, MlpParams, ParamNodes};
use crate::pde::{BoundaryData, DomainBox, PdeProblem};
use crate::sampling::{
    at_pinn_candidates, derive_seed, lhs, rar_select, sais_step, seeded_rng, uniform, AttackConfig, Origin,
    ResidualObjective, SampleSet,
};
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

// Seed purposes, mixed with the run seed by `derive_seed`.
const SEED_INIT: u64 = 10;
const SEED_BOUNDARY: u64 = 11;
const SEED_SAMPLES: u64 = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Strategy {
    LhsBaseline,
    Uniform,
    Rar,
    Sais,
    AtPinn,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::LhsBaseline,
        Strategy::Uniform,
        Strategy::Rar,
        Strategy::Sais,
        Strategy::AtPinn,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::LhsBaseline => "lhs_baseline",
            Strategy::Uniform => "uniform",
            Strategy::Rar => "rar",
            Strategy::Sais => "sais",
            Strategy::AtPinn => "at_pinn",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown strategy `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SaisConfig {
    pub n_per_round: usize,
    pub p0: f64,
    pub max_rounds: usize,
}

impl Default for SaisConfig {
    fn default() -> Self {
        Self { n_per_round: 300, p0: 0.1, max_rounds: 10 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lambda_boundary: f64,
    pub learning_rate: f64,
    /// `ep_0..ep_K`; the last entry repeats.
    pub epochs: Vec<usize>,
    /// `N_0..N_K`; the last entry repeats.
    pub samples: Vec<usize>,
    pub n_boundary: usize,
    /// Number of resampling iterations `K` after the initial fit.
    pub iterations: usize,
    pub strategy: Strategy,
    pub attack: Option<AttackConfig>,
    pub sais: SaisConfig,
    /// RAR candidate factor.
    pub rar_factor: f64,
    /// Epochs of the single LHS-baseline fit.
    pub baseline_epochs: usize,
    /// Upper bound on time for the initial samples of evolution problems.
    pub initial_time_window: Option<f64>,
    pub hidden_layers: usize,
    pub width: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.learning_rate > 0.0) {
            return bad(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        if !(self.lambda_boundary > 0.0) {
            return bad(format!("lambda_boundary must be > 0, got {}", self.lambda_boundary));
        }
        if self.epochs.is_empty() || self.samples.is_empty() {
            return bad("epochs and samples lists must be non-empty".into());
        }
        if self.epochs.contains(&0) || self.samples.contains(&0) || self.n_boundary == 0 {
            return bad("all epoch and sample counts must be >= 1".into());
        }
        if self.hidden_layers == 0 || self.width == 0 {
            return bad("network needs at least one hidden layer of width >= 1".into());
        }
        match (self.strategy, &self.attack) {
            (Strategy::AtPinn, None) => return bad("strategy at_pinn requires an attack section".into()),
            (Strategy::AtPinn, Some(a)) => a.validate()?,
            _ => {}
        }
        if self.strategy == Strategy::Rar && !(self.rar_factor > 1.0) {
            return bad(format!("rar_factor must exceed 1, got {}", self.rar_factor));
        }
        if self.strategy == Strategy::LhsBaseline && self.baseline_epochs == 0 {
            return bad("baseline_epochs must be >= 1".into());
        }
        if let Some(w) = self.initial_time_window {
            if !(w > 0.0) {
                return bad(format!("initial_time_window must be > 0, got {w}"));
            }
        }
        Ok(())
    }

    pub fn epochs_at(&self, k: usize) -> usize {
        *self.epochs.get(k).unwrap_or_else(|| self.epochs.last().expect("validated"))
    }

    pub fn samples_at(&self, k: usize) -> usize {
        *self.samples.get(k).unwrap_or_else(|| self.samples.last().expect("validated"))
    }

    pub fn total_samples(&self) -> usize {
        (0..=self.iterations).map(|k| self.samples_at(k)).sum()
    }
}

/// Parameters plus Adam state.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: MlpParams,
    /// First moments, one tensor per parameter tensor.
    pub adam_m: Vec<Tensor>,
    pub adam_v: Vec<Tensor>,
    pub step_count: u64,
    pub loss_history: Vec<f64>,
    /// Steps skipped because of non-finite gradients.
    pub skipped_steps: u64,
}

impl TrainState {
    pub fn new(params: MlpParams) -> Self {
        let zeros: Vec<Tensor> = params.tensors().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            params,
            adam_m: zeros.clone(),
            adam_v: zeros,
            step_count: 0,
            loss_history: Vec::new(),
            skipped_steps: 0,
        }
    }
}

/// Zero both moments and the step counter; parameters are untouched.
pub fn reset_momentum(state: &mut TrainState) {
    for t in state.adam_m.iter_mut().chain(state.adam_v.iter_mut()) {
        t.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    state.step_count = 0;
}

/// One bias-corrected Adam update. Returns `false` (and counts a skip)
/// when any gradient entry is not finite.
pub fn adam_step(state: &mut TrainState, grads: &[Tensor], lr: f64) -> Result<bool> {
    if grads.len() != state.adam_m.len()
        || grads.iter().zip(&state.adam_m).any(|(g, m)| g.shape() != m.shape())
    {
        return Err(Error::invalid("gradient shapes must mirror the parameters"));
    }
    if !grads.iter().all(Tensor::is_finite) {
        state.skipped_steps += 1;
        return Ok(false);
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    let params = state.params.tensors_mut();
    for (((p, g), m), v) in params.zip(grads).zip(&mut state.adam_m).zip(&mut state.adam_v) {
        for (((p, &g), m), v) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
            *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
        }
    }
    Ok(true)
}

/// `mean(r^2) + lambda * mean((u - g)^2)` on the tape.
pub fn pinn_loss(
    tape: &mut Tape,
    params: &ParamNodes,
    problem: &PdeProblem,
    collocation: &Tensor,
    boundary: Option<&BoundaryData>,
    lambda: f64,
) -> Result<NodeId> {
    if collocation.rows() == 0 {
        return Err(Error::invalid("loss needs at least one collocation point"));
    }
    let x = tape.constant(collocation.clone())?;
    let r = problem.residual_batch(tape, params, x)?;
    let r2 = tape.square(r)?;
    let pde = tape.mean(r2)?;
    match boundary {
        Some(b) if !b.is_empty() => {
            let xb = tape.constant(b.points.clone())?;
            let ub = forward(tape, params, xb)?;
            let target = tape.constant(Tensor::matrix(b.len(), 1, b.targets.clone())?)?;
            let diff = tape.sub(ub, target)?;
            let d2 = tape.square(diff)?;
            let bl = tape.mean(d2)?;
            let bl = tape.scale(bl, lambda)?;
            tape.add(pde, bl)
        }
        _ => Ok(pde),
    }
}

/// Loss value and its gradient for every parameter tensor.
pub fn loss_and_grad(
    params: &MlpParams,
    problem: &PdeProblem,
    collocation: &Tensor,
    boundary: Option<&BoundaryData>,
    lambda: f64,
) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let nodes = params.to_tape(&mut tape, true)?;
    let loss = pinn_loss(&mut tape, &nodes, problem, collocation, boundary, lambda)?;
    let value = tape.value(loss).item();
    let mut g = tape.backward(loss)?;
    // bias leaves are recorded as rows; hand gradients back in parameter shape
    let grads = nodes
        .leaves()
        .into_iter()
        .zip(params.tensors())
        .map(|(id, p)| g.take(&tape, id).reshape(p.shape().to_vec()))
        .collect::<Result<Vec<_>>>()?;
    Ok((value, grads))
}

/// `epochs` full-batch Adam steps.
pub fn train_epochs(
    state: &mut TrainState,
    problem: &PdeProblem,
    collocation: &Tensor,
    boundary: &BoundaryData,
    config: &TrainConfig,
    epochs: usize,
) -> Result<()> {
    state.loss_history.reserve(epochs);
    for epoch in 0..epochs {
        let (loss, grads) =
            loss_and_grad(&state.params, problem, collocation, Some(boundary), config.lambda_boundary)
                .map_err(|e| match e {
                    Error::NonFinite(what) => Error::NonFinite(format!(
                        "{what} (epoch {epoch}, {} points, step {})",
                        collocation.rows(),
                        state.step_count
                    )),
                    other => other,
                })?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("loss {loss} at epoch {epoch}")));
        }
        state.loss_history.push(loss);
        adam_step(state, &grads, config.learning_rate)?;
    }
    Ok(())
}

/// What the loop reports after each iteration.
#[derive(Debug, Clone)]
pub struct IterationInfo {
    pub k: usize,
    /// Cumulative collocation points trained on.
    pub dataset_size: usize,
    /// `max |r|` over the new samples under the model that selected them.
    pub new_max_residual_before: f64,
    /// `max |r|` over the new samples after retraining.
    pub new_max_residual_after: f64,
    /// Candidate count (AT-PINN only).
    pub candidates: Option<usize>,
    pub pgd_warnings: usize,
    pub final_loss: f64,
}

/// Produces the new samples at iteration `k >= 1`.
pub trait SampleGenerator {
    fn generate(&mut self, ctx: &GenerationContext<'_>) -> Result<Generated>;
}

pub struct GenerationContext<'a> {
    pub problem: &'a PdeProblem,
    pub config: &'a TrainConfig,
    pub params: &'a MlpParams,
    pub history: &'a [SampleSet],
    pub boundary: &'a BoundaryData,
    pub k: usize,
    pub n_k: usize,
    pub seed: u64,
}

pub struct Generated {
    pub samples: SampleSet,
    pub candidates: Option<usize>,
    pub pgd_warnings: usize,
}

/// The sampler selected by `config.strategy`.
pub struct StrategySampler;

impl SampleGenerator for StrategySampler {
    fn generate(&mut self, ctx: &GenerationContext<'_>) -> Result<Generated> {
        let domain = ctx.problem.domain();
        let abs_r = |pts: &Tensor| -> Result<Vec<f64>> {
            Ok(ctx.problem.residual_values(ctx.params, pts)?.into_iter().map(f64::abs).collect())
        };
        let plain = |samples: SampleSet| Generated { samples, candidates: None, pgd_warnings: 0 };
        Ok(match ctx.config.strategy {
            Strategy::Uniform => plain(uniform(ctx.n_k, domain, ctx.seed)?),
            Strategy::Rar => plain(rar_select(ctx.config.rar_factor, ctx.n_k, domain, abs_r, ctx.seed)?),
            Strategy::Sais => {
                let s = &ctx.config.sais;
                let out = sais_step(s.n_per_round, s.p0, s.max_rounds, domain, abs_r, ctx.seed)?;
                let mut rng = seeded_rng(derive_seed(ctx.seed, 1, 0));
                let (pts, _) = out.proposal.sample_truncated(ctx.n_k, domain, &mut rng)?;
                plain(SampleSet::new(pts, 0, Origin::Sais)?)
            }
            Strategy::AtPinn => {
                let attack = ctx.config.attack.as_ref().expect("validated");
                let extra = ctx.problem.is_evolution().then_some(&ctx.boundary.points);
                let mut obj = ResidualObjective { problem: ctx.problem, params: ctx.params };
                let out = at_pinn_candidates(ctx.history, extra, attack, &mut obj, domain, ctx.n_k, ctx.k, ctx.seed)?;
                Generated {
                    samples: out.samples,
                    candidates: Some(out.candidate_count),
                    pgd_warnings: out.warnings,
                }
            }
            Strategy::LhsBaseline => return Err(Error::invalid("the LHS baseline does not resample")),
        })
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: TrainState,
    /// `history[k]` holds the samples added at iteration `k`.
    pub history: Vec<SampleSet>,
    pub boundary: BoundaryData,
    pub iterations: Vec<IterationInfo>,
}

/// Domain for the initial samples.
pub fn initial_domain(problem: &PdeProblem, config: &TrainConfig) -> Result<DomainBox> {
    match config.initial_time_window {
        Some(w) if problem.is_evolution() => {
            let t = problem.dim() - 1;
            problem.domain().restrict(t, problem.domain().lo()[t], w)
        }
        Some(_) => Err(Error::Config(format!(
            "initial_time_window only applies to evolution problems, not {}",
            problem.name()
        ))),
        None => Ok(problem.domain().clone()),
    }
}

fn max_abs_residual(problem: &PdeProblem, params: &MlpParams, pts: &Tensor) -> Result<f64> {
    Ok(problem.residual_values(params, pts)?.iter().fold(0.0, |m, r| m.max(r.abs())))
}

/// Iterative training with the configured strategy. `observer` is called
/// after every iteration with the current state and history.
pub fn run_iterative_training(
    problem: &PdeProblem,
    config: &TrainConfig,
    observer: &mut dyn FnMut(&IterationInfo, &TrainState, &[SampleSet]) -> Result<()>,
) -> Result<TrainOutcome> {
    run_iterative_training_with(problem, config, &mut StrategySampler, observer)
}

/// [`run_iterative_training`] with an explicit sample generator.
pub fn run_iterative_training_with(
    problem: &PdeProblem,
    config: &TrainConfig,
    generator: &mut dyn SampleGenerator,
    observer: &mut dyn FnMut(&IterationInfo, &TrainState, &[SampleSet]) -> Result<()>,
) -> Result<TrainOutcome> {
    config.validate()?;
    let sizes = layer_sizes(problem.dim(), config.hidden_layers, config.width);
    let params = MlpParams::init(&sizes, derive_seed(config.seed, SEED_INIT, 0))?;
    let mut state = TrainState::new(params);
    let boundary = problem.boundary_points(
        config.n_boundary,
        &mut seeded_rng(derive_seed(config.seed, SEED_BOUNDARY, 0)),
    )?;
    let init_domain = initial_domain(problem, config)?;
    let sample_seed = |k: usize| derive_seed(config.seed, SEED_SAMPLES, k as u64);
    let mut iterations = Vec::new();

    if config.strategy == Strategy::LhsBaseline {
        let k = config.iterations;
        // no iterations, so no initial window either
        let set = lhs(config.total_samples(), problem.domain(), sample_seed(0))?.with_tag(k);
        let before = max_abs_residual(problem, &state.params, set.points())?;
        train_epochs(&mut state, problem, set.points(), &boundary, config, config.baseline_epochs)?;
        let info = IterationInfo {
            k,
            dataset_size: set.len(),
            new_max_residual_before: before,
            new_max_residual_after: max_abs_residual(problem, &state.params, set.points())?,
            candidates: None,
            pgd_warnings: 0,
            final_loss: state.loss_history.last().copied().unwrap_or(f64::NAN),
        };
        let history = vec![set];
        observer(&info, &state, &history)?;
        iterations.push(info);
        return Ok(TrainOutcome { state, history, boundary, iterations });
    }

    let mut history: Vec<SampleSet> = Vec::with_capacity(config.iterations + 1);
    let mut collocation = SampleSet::empty(problem.dim());
    for k in 0..=config.iterations {
        let n_k = config.samples_at(k);
        let generated = if k == 0 {
            Generated {
                samples: lhs(n_k, &init_domain, sample_seed(0))?,
                candidates: None,
                pgd_warnings: 0,
            }
        } else {
            let ctx = GenerationContext {
                problem,
                config,
                params: &state.params,
                history: &history,
                boundary: &boundary,
                k,
                n_k,
                seed: sample_seed(k),
            };
            generator.generate(&ctx)?
        };
        let new = generated.samples.with_tag(k);
        if new.len() != n_k {
            return Err(Error::invalid(format!("iteration {k} produced {} samples, expected {n_k}", new.len())));
        }
        new.check_domain(problem.domain())?;
        let before = max_abs_residual(problem, &state.params, new.points())?;
        collocation.append(&new)?;
        history.push(new);
        reset_momentum(&mut state);
        train_epochs(&mut state, problem, collocation.points(), &boundary, config, config.epochs_at(k))?;
        let info = IterationInfo {
            k,
            dataset_size: collocation.len(),
            new_max_residual_before: before,
            new_max_residual_after: max_abs_residual(problem, &state.params, history[k].points())?,
            candidates: generated.candidates,
            pgd_warnings: generated.pgd_warnings,
            final_loss: state.loss_history.last().copied().unwrap_or(f64::NAN),
        };
        observer(&info, &state, &history)?;
        iterations.push(info);
    }
    Ok(TrainOutcome { state, history, boundary, iterations })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pde::{multiscale_problem, poisson_problem};

    fn scalar_state(w: f64) -> TrainState {
        let sizes = vec![1, 1];
        let params = MlpParams::from_parts(
            sizes,
            vec![Tensor::matrix(1, 1, vec![w]).unwrap()],
            vec![Tensor::vector(vec![0.0])],
        )
        .unwrap();
        TrainState::new(params)
    }

    fn grads(g: f64) -> Vec<Tensor> {
        vec![Tensor::matrix(1, 1, vec![g]).unwrap(), Tensor::vector(vec![0.0])]
    }

    #[test]
    fn adam_first_step_is_lr_sized() {
        let mut s = scalar_state(1.0);
        let g = grads(2.0);
        adam_step(&mut s, &g, 0.1).unwrap();
        assert!((s.params.weights()[0].item() - 0.9).abs() < 1e-8);
        assert_eq!(s.step_count, 1);
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let mut s = scalar_state(0.7);
        let g = grads(0.0);
        adam_step(&mut s, &g, 0.1).unwrap();
        assert_eq!(s.params.weights()[0].item(), 0.7);
    }

    #[test]
    fn adam_skips_non_finite() {
        let mut s = scalar_state(0.7);
        let g = grads(f64::NAN);
        assert!(!adam_step(&mut s, &g, 0.1).unwrap());
        assert_eq!((s.skipped_steps, s.step_count), (1, 0));
        assert_eq!(s.params.weights()[0].item(), 0.7);
    }

    #[test]
    fn reset_then_step_matches_fresh() {
        let mut s = scalar_state(1.0);
        for _ in 0..5 {
            let w = s.params.weights()[0].item();
            adam_step(&mut s, &grads(2.0 * w), 0.1).unwrap();
        }
        let before = s.params.clone();
        reset_momentum(&mut s);
        assert_eq!(s.params, before);
        assert!(s.adam_m.iter().chain(&s.adam_v).all(|t| t.max_abs() == 0.0));
        reset_momentum(&mut s);
        assert_eq!(s.step_count, 0);

        let w = s.params.weights()[0].item();
        let mut fresh = TrainState::new(s.params.clone());
        adam_step(&mut s, &grads(2.0 * w), 0.1).unwrap();
        adam_step(&mut fresh, &grads(2.0 * w), 0.1).unwrap();
        assert_eq!(s.params, fresh.params);
    }

    #[test]
    fn loss_of_single_residual() {
        // zero network: residual of the multiscale problem is -sin(x)
        let p = multiscale_problem();
        let params = MlpParams::zeros(&layer_sizes(1, 1, 3)).unwrap();
        let x = std::f64::consts::FRAC_PI_2;
        let pts = Tensor::matrix(1, 1, vec![x]).unwrap();
        let (loss, _) = loss_and_grad(&params, &p, &pts, None, 1.0).unwrap();
        assert!((loss - 1.0).abs() < 1e-15);
        let b = BoundaryData { points: Tensor::matrix(1, 1, vec![0.0]).unwrap(), targets: vec![2.0] };
        let (loss, _) = loss_and_grad(&params, &p, &pts, Some(&b), 0.5).unwrap();
        assert!((loss - 3.0).abs() < 1e-15);
    }

    #[test]
    fn config_validation() {
        let mut c = small_config(Strategy::AtPinn);
        c.attack = None;
        assert!(c.validate().is_err());
        let mut c = small_config(Strategy::Uniform);
        c.learning_rate = 0.0;
        assert!(c.validate().is_err());
        assert!("annealing".parse::<Strategy>().is_err());
        assert_eq!("at_pinn".parse::<Strategy>().unwrap(), Strategy::AtPinn);
    }

    pub(crate) fn small_config(strategy: Strategy) -> TrainConfig {
        TrainConfig {
            lambda_boundary: 1.0,
            learning_rate: 1e-3,
            epochs: vec![3, 2],
            samples: vec![12, 6],
            n_boundary: 8,
            iterations: 2,
            strategy,
            attack: Some(AttackConfig { epsilon: 0.1, eta: 0.02, steps: 2, revisit: 1.0, random_init: true }),
            sais: SaisConfig { n_per_round: 20, p0: 0.1, max_rounds: 3 },
            rar_factor: 2.0,
            baseline_epochs: 4,
            initial_time_window: None,
            hidden_layers: 2,
            width: 5,
            seed: 3,
        }
    }

    #[test]
    fn dataset_grows_by_n_k() {
        let p = poisson_problem();
        for strategy in [Strategy::Uniform, Strategy::Rar, Strategy::Sais, Strategy::AtPinn] {
            let c = small_config(strategy);
            let out = run_iterative_training(&p, &c, &mut |_, _, _| Ok(())).unwrap();
            let sizes: Vec<usize> = out.iterations.iter().map(|i| i.dataset_size).collect();
            assert_eq!(sizes, vec![12, 18, 24], "{strategy}");
            assert_eq!(out.state.loss_history.len(), 3 + 2 + 2);
        }
    }

    #[test]
    fn baseline_trains_once_on_all_samples() {
        let c = small_config(Strategy::LhsBaseline);
        let out = run_iterative_training(&poisson_problem(), &c, &mut |_, _, _| Ok(())).unwrap();
        assert_eq!(out.iterations.len(), 1);
        assert_eq!(out.iterations[0].dataset_size, 24);
        assert_eq!(out.state.loss_history.len(), 4);
    }
}
