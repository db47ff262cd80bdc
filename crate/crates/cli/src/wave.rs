//! Wave equation on the unit square with sketched trace-ratio weights and
//! fresh collocation points every step.

use adaptive_ntk::model::MlpConfig;
use adaptive_ntk::ntk_exact::{ntk, NtkMatrix};
use adaptive_ntk::ntk_sketch::{AccumulatorMode, SketchConfig};
use adaptive_ntk::problems::{
    exact_solution_error, uniform_grid, Engine, GroupLayout, PointPlan, Problem, ProblemSource,
    ProblemSpec, ResidualSource, ResidualSystem,
};
use adaptive_ntk::rng::{purpose, StreamId};
use adaptive_ntk::trainer::{train, EigCadence, TrainConfig, TrainingTrace, WeightMode};

use crate::artifacts::{cell, key_values, Artifacts};
use crate::config::RawConfig;
use crate::poisson::read_engine;
use crate::{CliError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct WaveSettings {
    pub hidden: Vec<usize>,
    pub engine: Engine,
    /// Points per group in the order D, Di, Bi, B1, B2.
    pub counts: Vec<usize>,
    pub eta: f64,
    pub steps: usize,
    pub sketch: SketchConfig,
    pub alpha: f64,
    pub init_samples: usize,
    /// Exact per-group traces are computed every this many steps.
    pub compare_every: usize,
    pub log_every: usize,
    pub grid: usize,
}

impl Default for WaveSettings {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            engine: Engine::Dense,
            counts: vec![300, 300, 100, 100, 100],
            eta: 3e-6,
            steps: 5000,
            sketch: SketchConfig::default(),
            alpha: 1e-3,
            init_samples: 1000,
            compare_every: 50,
            log_every: 10,
            grid: 101,
        }
    }
}

const GROUPS: [&str; 5] = ["D", "Di", "Bi", "B1", "B2"];

impl WaveSettings {
    pub fn read(raw: &mut RawConfig) -> Result<Self> {
        let d = Self::default();
        let s = Self {
            hidden: raw.get_list("model", "hidden", d.hidden)?,
            engine: read_engine(raw)?,
            counts: raw.get_list("problem", "counts", d.counts)?,
            eta: raw.get("train", "eta", d.eta)?,
            steps: raw.get("train", "steps", d.steps)?,
            sketch: SketchConfig {
                dt: raw.get("sketch", "dt", d.sketch.dt)?,
                mask_eps: raw.get("sketch", "mask_eps", d.sketch.mask_eps)?,
            },
            alpha: raw.get("sketch", "alpha", d.alpha)?,
            init_samples: raw.get("sketch", "init_samples", d.init_samples)?,
            compare_every: raw.get("output", "compare_every", d.compare_every)?,
            log_every: raw.get("output", "log_every", d.log_every)?,
            grid: raw.get("output", "grid", d.grid)?,
        };
        if s.counts.len() != GROUPS.len() {
            return Err(CliError::Config(format!(
                "problem.counts needs {} entries (D, Di, Bi, B1, B2)",
                GROUPS.len()
            )));
        }
        if s.compare_every == 0 || s.log_every == 0 || s.grid < 2 {
            return Err(CliError::Config("output settings out of range".into()));
        }
        Ok(s)
    }

    pub fn layout(&self) -> Result<GroupLayout> {
        let groups: Vec<(&str, usize)> = GROUPS
            .iter()
            .copied()
            .zip(self.counts.iter().copied())
            .collect();
        Ok(GroupLayout::from_counts(&groups)?)
    }

    pub fn problem(&self) -> Result<Problem> {
        let model =
            MlpConfig::new(2, self.hidden.clone(), 1).normalized_for_box(&[0.0, 0.0], &[1.0, 1.0]);
        Ok(Problem::new(
            ProblemSpec::wave1d(),
            Some(model),
            self.engine,
        )?)
    }

    fn source<'a>(&self, problem: &'a Problem, seed: u64) -> Result<ProblemSource<'a>> {
        Ok(ProblemSource {
            problem,
            points: PointPlan::Resample {
                layout: self.layout()?,
                stream: StreamId::new(seed, purpose::COLLOCATION),
            },
        })
    }

    pub fn train_config(&self, steps: usize, seed: u64) -> TrainConfig {
        let mut c = TrainConfig::new(
            self.eta,
            steps,
            WeightMode::Sketch {
                sketch: self.sketch,
                alpha: self.alpha,
                init_samples: self.init_samples,
                mode: AccumulatorMode::Traces,
            },
        );
        c.seed = seed;
        c.eig_cadence = EigCadence::Never;
        c.exact_compare_every = Some(self.compare_every);
        c
    }
}

#[derive(Debug, Clone)]
pub struct WaveReport {
    pub relative_error: f64,
    /// Fraction of compared steps where the largest estimated weight belongs
    /// to the same group as the largest exact weight.
    pub ordering_match: f64,
    /// Per-group mean of `|λ̂ − λ| / λ` over compared steps.
    pub relative_gaps: Vec<f64>,
    pub compared_steps: usize,
    pub trace: TrainingTrace,
}

impl WaveReport {
    pub fn summary(&self) -> String {
        format!(
            "relative L2 error {:.4}; largest-weight agreement {:.1}% over {} compared steps; mean relative weight gaps {:?}",
            self.relative_error,
            100.0 * self.ordering_match,
            self.compared_steps,
            self.relative_gaps.iter().map(|g| format!("{g:.3}")).collect::<Vec<_>>()
        )
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

pub fn run(s: &WaveSettings, seed: u64, art: &Artifacts) -> Result<WaveReport> {
    let problem = s.problem()?;
    let source = s.source(&problem, seed)?;
    let theta0 = problem.init_params(seed)?.into_values();
    let note = format!(
        "network=2-{}-1 tanh\ncounts={}\nalpha={:e}\ndt={:e}",
        s.hidden
            .iter()
            .map(|h| h.to_string())
            .collect::<Vec<_>>()
            .join("-"),
        s.counts
            .iter()
            .map(|c| c.to_string())
            .collect::<Vec<_>>()
            .join(";"),
        s.alpha,
        s.sketch.dt
    );
    let trace = train(&source, &theta0, &s.train_config(s.steps, seed))?;

    let mut thinned = trace.clone();
    thinned
        .records
        .retain(|r| r.step % s.log_every == 0 || r.step == s.steps);
    art.write(
        "trace.csv",
        "",
        &thinned.to_csv(&format!("{note}\nlog_every={}", s.log_every)),
    )?;

    let mut columns = vec!["step".to_owned()];
    columns.extend(GROUPS.iter().map(|g| format!("est_{g}")));
    columns.extend(GROUPS.iter().map(|g| format!("exact_{g}")));
    let mut rows = Vec::new();
    let mut matches = 0usize;
    let mut gaps = vec![0.0; GROUPS.len()];
    for r in &trace.records {
        let Some(ex) = &r.exact_weights else { continue };
        if argmax(&r.weights) == argmax(ex) {
            matches += 1;
        }
        for (g, (e, x)) in r.weights.iter().zip(ex).enumerate() {
            gaps[g] += (e - x).abs() / x;
        }
        let mut row = vec![r.step as f64];
        row.extend(&r.weights);
        row.extend(ex);
        rows.push(row);
    }
    let compared_steps = rows.len();
    let denom = compared_steps.max(1) as f64;
    for g in &mut gaps {
        *g /= denom;
    }
    let cols: Vec<&str> = columns.iter().map(String::as_str).collect();
    art.write_table("weights.csv", &note, &cols, &rows)?;

    let grid = uniform_grid(problem.spec(), s.grid);
    let relative_error = exact_solution_error(&problem, &trace.final_theta, grid.view())?;
    let u_hat = problem.predict(&trace.final_theta, grid.view())?;
    let sol_rows: Vec<Vec<f64>> = grid
        .rows()
        .into_iter()
        .zip(&u_hat)
        .map(|(p, u)| vec![p[0], p[1], *u, problem.spec().exact(&[p[0], p[1]])])
        .collect();
    art.write_table(
        "solution.csv",
        &note,
        &["x", "t", "u_hat", "u_exact"],
        &sol_rows,
    )?;

    let ordering_match = matches as f64 / denom;
    art.write(
        "summary.csv",
        &note,
        &key_values(&[
            ("relative_l2_error", format!("{relative_error:e}")),
            ("largest_weight_agreement", format!("{ordering_match:e}")),
            ("compared_steps", compared_steps.to_string()),
            (
                "mean_relative_weight_gap",
                gaps.iter().map(|g| cell(*g)).collect::<Vec<_>>().join(";"),
            ),
            (
                "final_loss",
                format!("{:e}", trace.records.last().map_or(f64::NAN, |r| r.loss)),
            ),
        ]),
    )?;
    Ok(WaveReport {
        relative_error,
        ordering_match,
        relative_gaps: gaps,
        compared_steps,
        trace,
    })
}

pub fn ntk_at_step(s: &WaveSettings, seed: u64, step: usize) -> Result<NtkMatrix> {
    let problem = s.problem()?;
    let source = s.source(&problem, seed)?;
    let theta0 = problem.init_params(seed)?.into_values();
    let mut cfg = s.train_config(step, seed);
    cfg.exact_compare_every = None;
    let trace = train(&source, &theta0, &cfg)?;
    let sys = source.at_step(step)?;
    Ok(ntk(&sys.jacobian(&trace.final_theta)?, sys.layout())?)
}
