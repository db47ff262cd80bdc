//! Experiment runner for adaptive NTK loss weighting.
//!
//! Three experiments are available: `poisson-convergence` (exact weights,
//! convergence diagnostics), `quadratic-mc` (Monte Carlo behaviour of the
//! sketched kernel) and `wave-pinn` (sketched weights with resampling). Each
//! reads a strict `key = value` config, writes CSV artifacts whose header
//! comments record the config hash and seed, and returns a typed report.

pub mod artifacts;
pub mod config;
pub mod poisson;
pub mod quadratic;
pub mod wave;

use std::path::Path;

use thiserror::Error;

pub use artifacts::Artifacts;
pub use config::{Experiment, RawConfig};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("training diverged at step {step}")]
    Diverged { step: usize },
    #[error(transparent)]
    Core(adaptive_ntk::Error),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl From<adaptive_ntk::Error> for CliError {
    fn from(e: adaptive_ntk::Error) -> Self {
        match e {
            adaptive_ntk::Error::Diverged { step } => CliError::Diverged { step },
            adaptive_ntk::Error::InvalidConfig(m) => CliError::Config(m),
            other => CliError::Core(other),
        }
    }
}

impl CliError {
    /// 2 for configuration problems, 3 for divergence, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Diverged { .. } => 3,
            _ => 1,
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

/// A parsed experiment config: which experiment, the effective seed, the file
/// hash and the typed settings.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    pub seed: u64,
    pub hash: String,
    pub settings: Settings,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Settings {
    Poisson(poisson::PoissonSettings),
    Quadratic(quadratic::QuadraticSettings),
    Wave(wave::WaveSettings),
}

impl ExperimentConfig {
    /// `seed` overrides the file's top-level `seed` key (default 0).
    pub fn from_raw(mut raw: RawConfig, seed: Option<u64>) -> Result<Self> {
        let name: Option<String> = raw.get_opt("", "experiment")?;
        let experiment: Experiment = name
            .ok_or_else(|| CliError::Config("missing top-level `experiment` key".into()))?
            .parse()?;
        let file_seed: u64 = raw.get("", "seed", 0)?;
        let settings = match experiment {
            Experiment::PoissonConvergence => {
                Settings::Poisson(poisson::PoissonSettings::read(&mut raw)?)
            }
            Experiment::QuadraticMc => {
                Settings::Quadratic(quadratic::QuadraticSettings::read(&mut raw)?)
            }
            Experiment::WavePinn => Settings::Wave(wave::WaveSettings::read(&mut raw)?),
        };
        let hash = raw.hash().to_owned();
        raw.finish()?;
        Ok(Self {
            experiment,
            seed: seed.unwrap_or(file_seed),
            hash,
            settings,
        })
    }

    pub fn parse(text: &str, seed: Option<u64>) -> Result<Self> {
        Self::from_raw(RawConfig::parse(text)?, seed)
    }

    pub fn load(path: &Path, seed: Option<u64>) -> Result<Self> {
        Self::from_raw(RawConfig::load(path)?, seed)
    }

    /// Lines embedded at the top of every artifact.
    pub fn header(&self) -> String {
        format!(
            "experiment={}\nconfig_sha256={}\nseed={}\nrng={}",
            self.experiment,
            self.hash,
            self.seed,
            adaptive_ntk::rng::ALGORITHM
        )
    }
}

#[derive(Debug, Clone)]
pub enum Report {
    Poisson(poisson::PoissonReport),
    Quadratic(quadratic::QuadraticReport),
    Wave(wave::WaveReport),
}

impl Report {
    /// Short human-readable summary.
    pub fn summary(&self) -> String {
        match self {
            Report::Poisson(r) => r.summary(),
            Report::Quadratic(r) => r.summary(),
            Report::Wave(r) => r.summary(),
        }
    }
}

/// Runs the configured experiment, writing artifacts under `out`.
pub fn run(cfg: &ExperimentConfig, out: &Path) -> Result<Report> {
    let art = Artifacts::create(out, cfg.header())?;
    Ok(match &cfg.settings {
        Settings::Poisson(s) => Report::Poisson(poisson::run(s, cfg.seed, &art)?),
        Settings::Quadratic(s) => Report::Quadratic(quadratic::run(s, cfg.seed, &art)?),
        Settings::Wave(s) => Report::Wave(wave::run(s, cfg.seed, &art)?),
    })
}

/// Exact NTK CSV at step `step` of the configured training run.
pub fn dump_ntk(cfg: &ExperimentConfig, step: usize) -> Result<String> {
    let k = match &cfg.settings {
        Settings::Poisson(s) => poisson::ntk_at_step(s, cfg.seed, step)?,
        Settings::Quadratic(s) => quadratic::ntk_at_step(s, cfg.seed, step)?,
        Settings::Wave(s) => wave::ntk_at_step(s, cfg.seed, step)?,
    };
    let mut out = String::new();
    for line in cfg.header().lines() {
        out.push_str("# ");
        out.push_str(line);
        out.push('\n');
    }
    out.push_str(&format!("# step={step}\n"));
    out.push_str(&k.to_csv());
    Ok(out)
}
