//! Experiment configuration: TOML files, builtin presets and profiles.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pde::{Benchmark, PdeProblem};
use crate::sampling::AttackConfig;
use crate::training::{SaisConfig, Strategy, TrainConfig};

/// Epoch scaling. `Desk` divides every epoch count by 10.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Profile {
    Desk,
    #[default]
    Full,
}

impl Profile {
    pub fn as_str(self) -> &'static str {
        match self {
            Profile::Desk => "desk",
            Profile::Full => "full",
        }
    }

    pub fn scale_epochs(self, epochs: usize) -> usize {
        match self {
            Profile::Desk => (epochs / 10).max(1),
            Profile::Full => epochs,
        }
    }
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Profile::Desk),
            "full" => Ok(Profile::Full),
            other => Err(Error::Config(format!("unknown profile `{other}` (expected desk or full)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSection {
    #[serde(default = "default_hidden")]
    pub hidden_layers: usize,
    #[serde(default = "default_width")]
    pub width: usize,
}

fn default_hidden() -> usize {
    8
}

fn default_width() -> usize {
    20
}

impl Default for NetworkSection {
    fn default() -> Self {
        Self { hidden_layers: default_hidden(), width: default_width() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSection {
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_lambda")]
    pub lambda_boundary: f64,
    pub n_boundary: usize,
    pub iterations: usize,
    /// `N_0, N_1, ...`; the last value repeats.
    pub samples: Vec<usize>,
    /// `ep_0, ep_1, ...`; the last value repeats.
    pub epochs: Vec<usize>,
    #[serde(default = "default_baseline_epochs")]
    pub baseline_epochs: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_time_window: Option<f64>,
}

fn default_lr() -> f64 {
    1e-4
}

fn default_lambda() -> f64 {
    1.0
}

fn default_baseline_epochs() -> usize {
    50_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSection {
    pub epsilon: f64,
    pub eta: f64,
    pub steps: usize,
    pub revisit: f64,
    #[serde(default = "default_true")]
    pub random_init: bool,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RarSection {
    #[serde(default = "default_rar_factor")]
    pub factor: f64,
}

fn default_rar_factor() -> f64 {
    2.0
}

impl Default for RarSection {
    fn default() -> Self {
        Self { factor: default_rar_factor() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SaisSection {
    #[serde(default = "default_sais_n")]
    pub n_per_round: usize,
    #[serde(default = "default_sais_p0")]
    pub p0: f64,
    #[serde(default = "default_sais_rounds")]
    pub max_rounds: usize,
}

fn default_sais_n() -> usize {
    SaisConfig::default().n_per_round
}

fn default_sais_p0() -> f64 {
    SaisConfig::default().p0
}

fn default_sais_rounds() -> usize {
    SaisConfig::default().max_rounds
}

impl Default for SaisSection {
    fn default() -> Self {
        Self { n_per_round: default_sais_n(), p0: default_sais_p0(), max_rounds: default_sais_rounds() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    /// Write a parameter checkpoint after every iteration.
    #[serde(default = "default_true")]
    pub checkpoints: bool,
    /// Directory for cached reference grids.
    #[serde(default = "default_cache")]
    pub oracle_cache: PathBuf,
}

fn default_cache() -> PathBuf {
    PathBuf::from("oracle_cache")
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { checkpoints: true, oracle_cache: default_cache() }
    }
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

/// One experiment: a problem, a strategy and a list of seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub problem: String,
    pub strategy: String,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub network: NetworkSection,
    pub training: TrainingSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attack: Option<AttackSection>,
    #[serde(default)]
    pub rar: RarSection,
    #[serde(default)]
    pub sais: SaisSection,
    #[serde(default)]
    pub output: OutputSection,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// A file path if it exists, otherwise a builtin preset name.
    pub fn resolve(source: &str) -> Result<Self> {
        let path = Path::new(source);
        if path.exists() {
            return Self::load(path);
        }
        preset(source).ok_or_else(|| {
            Error::Config(format!(
                "`{source}` is neither a config file nor a preset (presets: {})",
                preset_names().join(", ")
            ))
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    pub fn problem(&self) -> Result<PdeProblem> {
        PdeProblem::by_name(&self.problem)
    }

    pub fn strategy(&self) -> Result<Strategy> {
        self.strategy.parse()
    }

    pub fn validate(&self) -> Result<()> {
        self.problem()?;
        if self.seeds.is_empty() {
            return Err(Error::Config("seed list must not be empty".into()));
        }
        self.train_config(self.seeds[0], Profile::Full)?.validate()
    }

    /// Resolved training configuration for one seed.
    pub fn train_config(&self, seed: u64, profile: Profile) -> Result<TrainConfig> {
        let t = &self.training;
        let strategy = self.strategy()?;
        Ok(TrainConfig {
            lambda_boundary: t.lambda_boundary,
            learning_rate: t.learning_rate,
            epochs: t.epochs.iter().map(|&e| profile.scale_epochs(e)).collect(),
            samples: t.samples.clone(),
            n_boundary: t.n_boundary,
            iterations: t.iterations,
            strategy,
            attack: self.attack.as_ref().map(|a| AttackConfig {
                epsilon: a.epsilon,
                eta: a.eta,
                steps: a.steps,
                revisit: a.revisit,
                random_init: a.random_init,
            }),
            sais: SaisConfig { n_per_round: self.sais.n_per_round, p0: self.sais.p0, max_rounds: self.sais.max_rounds },
            rar_factor: self.rar.factor,
            baseline_epochs: profile.scale_epochs(t.baseline_epochs),
            initial_time_window: t.initial_time_window,
            hidden_layers: self.network.hidden_layers,
            width: self.network.width,
            seed,
        })
    }

    pub fn default_output_dir(&self) -> PathBuf {
        self.output_dir
            .clone()
            .unwrap_or_else(|| PathBuf::from("runs").join(format!("{}-{}", self.problem, self.strategy)))
    }
}

fn problem_slug(b: Benchmark) -> &'static str {
    match b {
        Benchmark::Poisson2d => "poisson",
        Benchmark::Burgers => "burgers",
        Benchmark::Multiscale => "multiscale",
        Benchmark::AllenCahn => "allen-cahn",
    }
}

pub fn preset_names() -> Vec<String> {
    let problems = [Benchmark::Poisson2d, Benchmark::Burgers, Benchmark::Multiscale, Benchmark::AllenCahn];
    problems
        .iter()
        .flat_map(|&b| {
            Strategy::ALL
                .iter()
                .map(move |s| format!("{}-{}", problem_slug(b), s.as_str().replace('_', "-")))
        })
        .collect()
}

/// Builtin experiment settings, named `<problem>-<strategy>`, e.g.
/// `poisson-at-pinn` or `allen-cahn-uniform`. Epoch counts are the full
/// values; apply a [`Profile`] to shrink them.
pub fn preset(name: &str) -> Option<ExperimentConfig> {
    let (slug, strategy) = Strategy::ALL.iter().find_map(|s| {
        let suffix = format!("-{}", s.as_str().replace('_', "-"));
        name.strip_suffix(&suffix).map(|p| (p.to_string(), *s))
    })?;
    let problem = match slug.as_str() {
        "poisson" => "poisson2d",
        "burgers" => "burgers",
        "multiscale" => "multiscale",
        "allen-cahn" => "allen_cahn",
        _ => return None,
    };
    let attack = |epsilon: f64, steps: usize, revisit: f64| AttackSection {
        epsilon,
        eta: 0.02,
        steps,
        revisit,
        random_init: true,
    };
    let (training, atk) = match problem {
        "poisson2d" => (
            TrainingSection {
                learning_rate: 1e-4,
                lambda_boundary: 1.0,
                n_boundary: 200,
                iterations: 8,
                samples: vec![500, 500, 1000],
                epochs: vec![200_000, 50_000],
                baseline_epochs: 50_000,
                initial_time_window: None,
            },
            attack(0.1, 20, 1.0),
        ),
        "burgers" => (
            TrainingSection {
                learning_rate: 1e-4,
                lambda_boundary: 1.0,
                n_boundary: 100,
                iterations: 2,
                samples: vec![500, 500, 1000],
                epochs: vec![100_000, 200_000, 100_000],
                baseline_epochs: 50_000,
                initial_time_window: None,
            },
            attack(0.1, 20, 1.0),
        ),
        "multiscale" => (
            TrainingSection {
                learning_rate: 1e-4,
                lambda_boundary: 200.0,
                n_boundary: 2,
                iterations: 29,
                samples: vec![200],
                epochs: vec![30_000],
                baseline_epochs: 50_000,
                initial_time_window: None,
            },
            attack(0.2, 2, 2.0),
        ),
        _ => (
            TrainingSection {
                learning_rate: 1e-4,
                lambda_boundary: 1.0,
                n_boundary: 400,
                iterations: 8,
                samples: vec![500],
                epochs: vec![1_000_000],
                baseline_epochs: 50_000,
                initial_time_window: (strategy != Strategy::LhsBaseline).then_some(0.2),
            },
            attack(0.2, 20, 1.5),
        ),
    };
    Some(ExperimentConfig {
        problem: problem.to_string(),
        strategy: strategy.as_str().to_string(),
        seeds: vec![0, 1, 2],
        output_dir: None,
        network: NetworkSection::default(),
        training,
        attack: (strategy == Strategy::AtPinn).then_some(atk),
        rar: RarSection::default(),
        sais: SaisSection::default(),
        output: OutputSection::default(),
    })
}

/// Parameters accepted by a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParam {
    Steps,
    Revisit,
    Eta,
    Epsilon,
    Samples,
    Epochs,
    Seed,
}

impl FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "T" | "steps" => SweepParam::Steps,
            "m" | "revisit" => SweepParam::Revisit,
            "eta" => SweepParam::Eta,
            "epsilon" => SweepParam::Epsilon,
            "N" | "samples" => SweepParam::Samples,
            "epochs" => SweepParam::Epochs,
            "seed" => SweepParam::Seed,
            other => {
                return Err(Error::Config(format!(
                    "unknown sweep parameter `{other}` (expected T, m, eta, epsilon, N, epochs or seed)"
                )))
            }
        })
    }
}

impl SweepParam {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepParam::Steps => "T",
            SweepParam::Revisit => "m",
            SweepParam::Eta => "eta",
            SweepParam::Epsilon => "epsilon",
            SweepParam::Samples => "N",
            SweepParam::Epochs => "epochs",
            SweepParam::Seed => "seed",
        }
    }

    /// Copy of `cfg` with this parameter set to `value`.
    pub fn apply(self, cfg: &ExperimentConfig, value: f64) -> Result<ExperimentConfig> {
        let mut out = cfg.clone();
        let count = |v: f64| -> Result<usize> {
            if v >= 0.0 && v.fract() == 0.0 && v.is_finite() {
                Ok(v as usize)
            } else {
                Err(Error::Config(format!("sweep value {v} must be a non-negative integer")))
            }
        };
        let name = self.as_str();
        fn attack<'a>(out: &'a mut ExperimentConfig, name: &str) -> Result<&'a mut AttackSection> {
            out.attack
                .as_mut()
                .ok_or_else(|| Error::Config(format!("sweeping {name} needs an attack section")))
        }
        match self {
            SweepParam::Steps => attack(&mut out, name)?.steps = count(value)?,
            SweepParam::Revisit => attack(&mut out, name)?.revisit = value,
            SweepParam::Eta => attack(&mut out, name)?.eta = value,
            SweepParam::Epsilon => attack(&mut out, name)?.epsilon = value,
            SweepParam::Samples => out.training.samples = vec![count(value)?],
            SweepParam::Epochs => {
                out.training.epochs = vec![count(value)?];
                out.training.baseline_epochs = count(value)?;
            }
            SweepParam::Seed => out.seeds = vec![count(value)? as u64],
        }
        out.validate()?;
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_preset_validates_and_round_trips() {
        for name in preset_names() {
            let cfg = preset(&name).unwrap_or_else(|| panic!("{name}"));
            cfg.validate().unwrap();
            assert_eq!(ExperimentConfig::parse(&cfg.to_toml()).unwrap(), cfg, "{name}");
        }
        assert_eq!(preset_names().len(), 20);
        assert!(preset("heat-at-pinn").is_none());
    }

    #[test]
    fn poisson_preset_matches_setup() {
        let c = preset("poisson-at-pinn").unwrap();
        let t = c.train_config(0, Profile::Full).unwrap();
        assert_eq!(t.n_boundary, 200);
        assert_eq!((t.samples_at(0), t.samples_at(1), t.samples_at(5)), (500, 500, 1000));
        assert_eq!((t.epochs_at(0), t.epochs_at(1), t.epochs_at(7)), (200_000, 50_000, 50_000));
        let a = t.attack.unwrap();
        assert_eq!((a.revisit, a.epsilon, a.steps, a.eta), (1.0, 0.1, 20, 0.02));
        assert_eq!(t.learning_rate, 1e-4);
    }

    #[test]
    fn allen_cahn_preset_windows_initial_samples() {
        let t = preset("allen-cahn-at-pinn").unwrap().train_config(0, Profile::Full).unwrap();
        assert_eq!(t.initial_time_window, Some(0.2));
        assert_eq!((t.n_boundary, t.samples_at(3)), (400, 500));
        let a = t.attack.unwrap();
        assert_eq!((a.epsilon, a.revisit), (0.2, 1.5));
    }

    #[test]
    fn desk_profile_divides_epochs() {
        let c = preset("burgers-uniform").unwrap();
        let t = c.train_config(0, Profile::Desk).unwrap();
        assert_eq!(t.epochs, vec![10_000, 20_000, 10_000]);
        assert_eq!(t.baseline_epochs, 5_000);
    }

    #[test]
    fn unknown_keys_and_names_are_config_errors() {
        let base = preset("poisson-uniform").unwrap().to_toml();
        let typo = base.replace("learning_rate", "learn_rate");
        assert!(matches!(ExperimentConfig::parse(&typo), Err(Error::Config(_))));
        let bad = base.replace("strategy = \"uniform\"", "strategy = \"annealing\"");
        assert!(matches!(ExperimentConfig::parse(&bad), Err(Error::Config(_))));
        let err = ExperimentConfig::parse("problem = \"poisson2d\"\nstrategy = ").unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }

    #[test]
    fn sweep_params() {
        let c = preset("multiscale-at-pinn").unwrap();
        let s = "T".parse::<SweepParam>().unwrap().apply(&c, 5.0).unwrap();
        assert_eq!(s.attack.unwrap().steps, 5);
        assert!("T".parse::<SweepParam>().unwrap().apply(&c, 1.5).is_err());
        let u = preset("multiscale-uniform").unwrap();
        assert!(SweepParam::Eta.apply(&u, 0.1).is_err());
        assert_eq!(SweepParam::Seed.apply(&u, 4.0).unwrap().seeds, vec![4]);
    }
}
