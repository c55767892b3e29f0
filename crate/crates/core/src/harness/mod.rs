//! Batch experiments: run configured strategies over seeds, evaluate on the
//! 256-per-dimension grid and write CSV artifacts.
//!
//! Layout of one run directory (`<out>/seed_<S>/`):
//!
//! | file | contents |
//! |------|----------|
//! | `manifest.toml` | status, resolved config, profile, assumptions |
//! | `metrics.csv` | one [`MetricRow`] per iteration |
//! | `timing.csv` | wall-clock seconds per iteration |
//! | `loss.csv` | training loss per epoch |
//! | `boundary.csv` | supervised boundary/initial points and targets |
//! | `samples_k<k>.csv` | samples added at iteration `k` |
//! | `checkpoint_k<k>.txt` | network parameters after iteration `k` |
//! | `prediction_grid.csv` | final prediction, reference and residual on the grid |

mod config;

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

pub use config::{
    preset, preset_names, AttackSection, ExperimentConfig, NetworkSection, OutputSection, Profile, RarSection,
    SaisSection, SweepParam, TrainingSection,
};

use crate::error::{Error, Result};
use crate::network::MlpParams;
use crate::oracle::{evaluation_axes, interp_uniform_cubic, load_or_build, ReferenceGrid};
use crate::pde::{Benchmark, MetricKind, PdeProblem};
use crate::sampling::SampleSet;
use crate::tensor::Tensor;
use crate::training::{run_iterative_training, IterationInfo, TrainState};

/// Modelling choices recorded in every manifest.
pub const ASSUMPTIONS: &[&str] = &[
    "error metric: relative L2 ||u_pred - u_ref||_2 / ||u_ref||_2 on the evaluation grid; multiscale reports residual MSE",
    "epochs count full-batch Adam steps (no minibatching)",
    "Adam beta1=0.9 beta2=0.999 eps=1e-8; moments reset before every retrain",
    "boundary weight lambda=1 except multiscale (200)",
    "network output layer is affine; hidden layers tanh",
    "PGD gradient taken at the current iterate clip(x_init + g)",
    "fractional revisit m: iterations k-1-floor(m)..k-1 in full plus a frac(m) share of iteration k-2-floor(m), plus the initial set",
    "evolution problems: boundary/initial points are also attack seeds",
    "SAIS: 10 rounds of 300 samples fit the proposal; the N_k new samples are drawn from the final fit",
    "boundary points drawn once at k=0",
    "multiscale epochs 3e4 per iteration",
];

/// Points and (optional) reference values of the evaluation grid.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub axes: Vec<Vec<f64>>,
    pub points: Tensor,
    pub reference: Option<Vec<f64>>,
}

impl Evaluation {
    pub fn new(problem: &PdeProblem, cache_dir: Option<&Path>) -> Result<Self> {
        let axes = evaluation_axes(problem);
        let grid = load_or_build(problem, cache_dir)?;
        let reference = if problem.benchmark() == Benchmark::Multiscale {
            // the FD reference lives on its own fine grid
            let (fx, fu) = (&grid.axes()[0], grid.values());
            axes[0].iter().map(|&x| interp_uniform_cubic(fx, fu, x)).collect()
        } else {
            if grid.axes() != axes.as_slice() {
                return Err(Error::Oracle("reference grid does not match the evaluation grid".into()));
            }
            grid.values().to_vec()
        };
        let points = ReferenceGrid::new(axes.clone(), reference.clone())?.points();
        Ok(Self { axes, points, reference: Some(reference) })
    }

    /// Grid without reference values.
    pub fn without_reference(problem: &PdeProblem) -> Result<Self> {
        let axes = evaluation_axes(problem);
        let zeros = vec![0.0; axes.iter().map(Vec::len).product()];
        let points = ReferenceGrid::new(axes.clone(), zeros)?.points();
        Ok(Self { axes, points, reference: None })
    }
}

/// Grid metrics of one parameter set.
#[derive(Debug, Clone, PartialEq)]
pub struct GridMetrics {
    pub relative_l2: Option<f64>,
    pub residual_mse: f64,
    pub max_abs_residual: f64,
    pub prediction: Vec<f64>,
    pub residual: Vec<f64>,
}

pub fn relative_l2(pred: &[f64], reference: &[f64]) -> f64 {
    let num: f64 = pred.iter().zip(reference).map(|(p, r)| (p - r) * (p - r)).sum();
    let den: f64 = reference.iter().map(|r| r * r).sum();
    (num / den).sqrt()
}

pub fn evaluate_metrics(problem: &PdeProblem, params: &MlpParams, eval: &Evaluation) -> Result<GridMetrics> {
    let prediction = params.predict(&eval.points)?;
    let residual = problem.residual_values(params, &eval.points)?;
    let residual_mse = residual.iter().map(|r| r * r).sum::<f64>() / residual.len() as f64;
    let max_abs_residual = residual.iter().fold(0.0_f64, |m, r| m.max(r.abs()));
    let relative_l2 = eval.reference.as_ref().map(|r| relative_l2(&prediction, r));
    if relative_l2.is_some_and(|v| !v.is_finite()) || !residual_mse.is_finite() {
        return Err(Error::NonFinite("evaluation metrics".into()));
    }
    Ok(GridMetrics { relative_l2, residual_mse, max_abs_residual, prediction, residual })
}

/// One line of `metrics.csv`. Optional values are written as empty fields.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub k: usize,
    pub samples: usize,
    pub metric_name: String,
    pub metric: f64,
    pub relative_l2: Option<f64>,
    pub residual_mse: f64,
    pub grid_max_abs_residual: f64,
    pub new_max_abs_residual_before: f64,
    pub new_max_abs_residual_after: f64,
    pub new_median_t: Option<f64>,
    pub new_max_t: Option<f64>,
    pub candidates: Option<usize>,
    pub pgd_warnings: usize,
    pub final_loss: f64,
}

pub const METRIC_COLUMNS: [&str; 14] = [
    "k",
    "samples",
    "metric_name",
    "metric",
    "relative_l2",
    "residual_mse",
    "grid_max_abs_residual",
    "new_max_abs_residual_before",
    "new_max_abs_residual_after",
    "new_median_t",
    "new_max_t",
    "candidates",
    "pgd_warnings",
    "final_loss",
];

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

fn parse_opt<T: std::str::FromStr>(s: &str) -> Result<Option<T>> {
    if s.is_empty() {
        return Ok(None);
    }
    s.parse().map(Some).map_err(|_| Error::invalid(format!("bad metrics field `{s}`")))
}

fn parse_req<T: std::str::FromStr>(s: &str) -> Result<T> {
    s.parse().map_err(|_| Error::invalid(format!("bad metrics field `{s}`")))
}

impl MetricRow {
    fn record(&self) -> Vec<String> {
        vec![
            self.k.to_string(),
            self.samples.to_string(),
            self.metric_name.clone(),
            self.metric.to_string(),
            opt(self.relative_l2),
            self.residual_mse.to_string(),
            self.grid_max_abs_residual.to_string(),
            self.new_max_abs_residual_before.to_string(),
            self.new_max_abs_residual_after.to_string(),
            opt(self.new_median_t),
            opt(self.new_max_t),
            opt(self.candidates),
            self.pgd_warnings.to_string(),
            self.final_loss.to_string(),
        ]
    }

    fn from_record(r: &csv::StringRecord) -> Result<Self> {
        if r.len() != METRIC_COLUMNS.len() {
            return Err(Error::invalid(format!("metrics row has {} fields", r.len())));
        }
        Ok(Self {
            k: parse_req(&r[0])?,
            samples: parse_req(&r[1])?,
            metric_name: r[2].to_string(),
            metric: parse_req(&r[3])?,
            relative_l2: parse_opt(&r[4])?,
            residual_mse: parse_req(&r[5])?,
            grid_max_abs_residual: parse_req(&r[6])?,
            new_max_abs_residual_before: parse_req(&r[7])?,
            new_max_abs_residual_after: parse_req(&r[8])?,
            new_median_t: parse_opt(&r[9])?,
            new_max_t: parse_opt(&r[10])?,
            candidates: parse_opt(&r[11])?,
            pgd_warnings: parse_req(&r[12])?,
            final_loss: parse_req(&r[13])?,
        })
    }
}

pub fn write_metrics_csv<W: Write>(w: W, rows: &[MetricRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(w);
    w.write_record(METRIC_COLUMNS)?;
    for r in rows {
        w.write_record(r.record())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics_csv<R: std::io::Read>(r: R) -> Result<Vec<MetricRow>> {
    let mut rdr = csv::Reader::from_reader(r);
    if rdr.headers()?.iter().ne(METRIC_COLUMNS) {
        return Err(Error::invalid("unexpected metrics.csv header"));
    }
    rdr.records().map(|r| MetricRow::from_record(&r?)).collect()
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

/// Metric row for iteration `info.k`.
pub fn metric_row(
    problem: &PdeProblem,
    info: &IterationInfo,
    new_samples: &SampleSet,
    grid: &GridMetrics,
) -> MetricRow {
    let (metric_name, metric) = match (problem.metric_kind(), grid.relative_l2) {
        (MetricKind::RelativeL2, Some(v)) => (MetricKind::RelativeL2.as_str(), v),
        _ => (MetricKind::ResidualMse.as_str(), grid.residual_mse),
    };
    let times: Option<Vec<f64>> = problem.is_evolution().then(|| {
        let t = problem.dim() - 1;
        (0..new_samples.len()).map(|i| new_samples.point(i)[t]).collect()
    });
    MetricRow {
        k: info.k,
        samples: info.dataset_size,
        metric_name: metric_name.to_string(),
        metric,
        relative_l2: grid.relative_l2,
        residual_mse: grid.residual_mse,
        grid_max_abs_residual: grid.max_abs_residual,
        new_max_abs_residual_before: info.new_max_residual_before,
        new_max_abs_residual_after: info.new_max_residual_after,
        new_median_t: times.clone().and_then(median),
        new_max_t: times.map(|t| t.into_iter().fold(f64::NEG_INFINITY, f64::max)),
        candidates: info.candidates,
        pgd_warnings: info.pgd_warnings,
        final_loss: info.final_loss,
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    format: u32,
    status: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
    seed: u64,
    profile: &'a str,
    iterations_completed: usize,
    crate_version: &'a str,
    assumptions: &'a [&'a str],
    resolved: ResolvedTraining,
    config: &'a ExperimentConfig,
}

/// Epoch and sample counts after applying the profile.
#[derive(Serialize)]
struct ResolvedTraining {
    epochs: Vec<usize>,
    samples: Vec<usize>,
    baseline_epochs: usize,
    skipped_steps: u64,
}

/// Outcome of one seed.
#[derive(Debug, Clone)]
pub struct SeedRun {
    pub seed: u64,
    pub dir: PathBuf,
    pub rows: Vec<MetricRow>,
    pub history: Vec<SampleSet>,
    pub params: MlpParams,
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    Ok(BufWriter::new(fs::File::create(path)?))
}

fn write_manifest(
    dir: &Path,
    cfg: &ExperimentConfig,
    seed: u64,
    profile: Profile,
    status: &str,
    error: Option<String>,
    completed: usize,
    skipped: u64,
) -> Result<()> {
    let t = cfg.train_config(seed, profile)?;
    let m = Manifest {
        format: 1,
        status,
        error,
        seed,
        profile: profile.as_str(),
        iterations_completed: completed,
        crate_version: env!("CARGO_PKG_VERSION"),
        assumptions: ASSUMPTIONS,
        resolved: ResolvedTraining {
            epochs: (0..=t.iterations).map(|k| t.epochs_at(k)).collect(),
            samples: (0..=t.iterations).map(|k| t.samples_at(k)).collect(),
            baseline_epochs: t.baseline_epochs,
            skipped_steps: skipped,
        },
        config: cfg,
    };
    let text = toml::to_string(&m).map_err(|e| Error::invalid(format!("manifest: {e}")))?;
    fs::write(dir.join("manifest.toml"), text)?;
    Ok(())
}

fn write_prediction_grid(path: &Path, eval: &Evaluation, g: &GridMetrics) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    let d = eval.points.cols();
    let mut header: Vec<String> = (0..d).map(|i| format!("x{i}")).collect();
    header.extend(["u_pred", "u_ref", "residual"].map(String::from));
    w.write_record(&header)?;
    for i in 0..eval.points.rows() {
        let mut rec: Vec<String> = eval.points.row(i).iter().map(|v| v.to_string()).collect();
        rec.push(g.prediction[i].to_string());
        rec.push(opt(eval.reference.as_ref().map(|r| r[i])));
        rec.push(g.residual[i].to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

fn write_loss(path: &Path, loss: &[f64]) -> Result<()> {
    let mut w = create(path)?;
    writeln!(w, "epoch,loss")?;
    for (i, l) in loss.iter().enumerate() {
        writeln!(w, "{i},{l}")?;
    }
    w.flush()?;
    Ok(())
}

fn write_boundary(path: &Path, b: &crate::pde::BoundaryData) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    let d = b.points.cols();
    let mut header: Vec<String> = (0..d).map(|i| format!("x{i}")).collect();
    header.push("target".into());
    w.write_record(&header)?;
    for i in 0..b.len() {
        let mut rec: Vec<String> = b.points.row(i).iter().map(|v| v.to_string()).collect();
        rec.push(b.targets[i].to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Train one seed and write its artifacts into `dir`.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64, profile: Profile, eval: &Evaluation, dir: &Path) -> Result<SeedRun> {
    let problem = cfg.problem()?;
    let train = cfg.train_config(seed, profile)?;
    train.validate()?;
    fs::create_dir_all(dir)?;
    write_manifest(dir, cfg, seed, profile, "running", None, 0, 0)?;

    let mut rows: Vec<MetricRow> = Vec::new();
    let mut timing: Vec<(usize, f64)> = Vec::new();
    let mut clock = Instant::now();
    let mut last_grid: Option<GridMetrics> = None;
    let mut observer = |info: &IterationInfo, state: &TrainState, history: &[SampleSet]| -> Result<()> {
        let elapsed = clock.elapsed().as_secs_f64();
        let new = history.last().expect("observer runs after an iteration");
        let grid = evaluate_metrics(&problem, &state.params, eval)?;
        rows.push(metric_row(&problem, info, new, &grid));
        timing.push((info.k, elapsed));
        write_metrics_csv(create(&dir.join("metrics.csv"))?, &rows)?;
        let mut tw = create(&dir.join("timing.csv"))?;
        writeln!(tw, "k,wall_seconds")?;
        for (k, s) in &timing {
            writeln!(tw, "{k},{s}")?;
        }
        tw.flush()?;
        new.write_csv(create(&dir.join(format!("samples_k{}.csv", info.k)))?)?;
        if cfg.output.checkpoints {
            state.params.save(&dir.join(format!("checkpoint_k{}.txt", info.k)))?;
        }
        last_grid = Some(grid);
        clock = Instant::now();
        Ok(())
    };
    let outcome = match run_iterative_training(&problem, &train, &mut observer) {
        Ok(o) => o,
        Err(e) => {
            let done = rows.len();
            write_manifest(dir, cfg, seed, profile, "incomplete", Some(e.to_string()), done, 0)?;
            return Err(e);
        }
    };
    write_boundary(&dir.join("boundary.csv"), &outcome.boundary)?;
    write_loss(&dir.join("loss.csv"), &outcome.state.loss_history)?;
    if let Some(g) = &last_grid {
        write_prediction_grid(&dir.join("prediction_grid.csv"), eval, g)?;
    }
    write_manifest(dir, cfg, seed, profile, "complete", None, rows.len(), outcome.state.skipped_steps)?;
    Ok(SeedRun { seed, dir: dir.to_path_buf(), rows, history: outcome.history, params: outcome.state.params })
}

/// Run every seed of `cfg` sequentially under `out/seed_<S>/`.
pub fn run_experiment(cfg: &ExperimentConfig, profile: Profile, out: &Path) -> Result<Vec<SeedRun>> {
    cfg.validate()?;
    let problem = cfg.problem()?;
    let eval = Evaluation::new(&problem, Some(&cfg.output.oracle_cache))?;
    fs::create_dir_all(out)?;
    fs::write(out.join("config.toml"), cfg.to_toml())?;
    cfg.seeds
        .iter()
        .map(|&s| run_seed(cfg, s, profile, &eval, &out.join(format!("seed_{s}"))))
        .collect()
}

/// Parse `source` (file or preset), apply overrides and run.
pub fn run_from_config(source: &str, profile: Profile, seed: Option<u64>, out: Option<&Path>) -> Result<Vec<SeedRun>> {
    let mut cfg = ExperimentConfig::resolve(source)?;
    if let Some(s) = seed {
        cfg.seeds = vec![s];
    }
    let out = out.map(Path::to_path_buf).unwrap_or_else(|| cfg.default_output_dir());
    run_experiment(&cfg, profile, &out)
}

/// One experiment per value; writes `out/sweep_<P>.csv` merging every
/// seed's metric rows, and returns its path.
pub fn sweep(cfg: &ExperimentConfig, param: SweepParam, values: &[f64], profile: Profile, out: &Path) -> Result<PathBuf> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    let variants = values
        .iter()
        .map(|&v| param.apply(cfg, v).map(|c| (v, c)))
        .collect::<Result<Vec<_>>>()?;
    fs::create_dir_all(out)?;
    let path = out.join(format!("sweep_{}.csv", param.as_str()));
    let mut merged = csv::Writer::from_writer(create(&path)?);
    let mut header = vec!["value".to_string(), "seed".to_string()];
    header.extend(METRIC_COLUMNS.iter().map(|s| s.to_string()));
    merged.write_record(&header)?;
    for (v, c) in variants {
        let runs = run_experiment(&c, profile, &out.join(format!("{}_{v}", param.as_str())))?;
        for run in runs {
            for row in &run.rows {
                let mut rec = vec![v.to_string(), run.seed.to_string()];
                rec.extend(row.record());
                merged.write_record(&rec)?;
            }
        }
    }
    merged.flush()?;
    Ok(path)
}
