//! One-dimensional Poisson convergence experiment with exact trace-ratio
//! weights and the residual-average certificate.

use adaptive_ntk::model::MlpConfig;
use adaptive_ntk::ntk_exact::{ntk, NtkMatrix};
use adaptive_ntk::problems::{poisson_points, Engine, Fixed, Problem, ProblemSpec, ResidualSystem};
use adaptive_ntk::trainer::{
    assumption_diagnostics, descent_lemma_check, lipschitz_estimate, log_spaced, loglog_slope,
    objective_and_gradient, residual_average_certificate, stabilization_onset,
    time_averaged_gradients, time_averaged_residuals, train, weight_stability, CertificateRow,
    DescentReport, DiagnosticsRecord, EigCadence, TrainConfig, TrainingTrace, WeightMode,
};

use crate::artifacts::{cell, key_values, Artifacts};
use crate::config::RawConfig;
use crate::{CliError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct PoissonSettings {
    pub hidden: Vec<usize>,
    pub engine: Engine,
    /// Interior collocation points in (0,1).
    pub interior: Vec<f64>,
    pub eta: f64,
    pub steps: usize,
    pub update_every: usize,
    /// Relative band for detecting when eigenvalues and weights settle.
    pub stabilization_tol: f64,
    /// Length of the certificate run restarted from the stabilized iterate.
    pub restart_steps: usize,
    /// Fraction of the diagnosed admissible learning rate used on restart.
    pub eta_fraction: f64,
    pub logged_points: usize,
    pub lipschitz_snapshots: usize,
}

impl Default for PoissonSettings {
    fn default() -> Self {
        Self {
            hidden: vec![100],
            engine: Engine::Dense,
            interior: vec![1.0 / 3.0, 2.0 / 3.0],
            eta: 1e-5,
            steps: 2000,
            update_every: 1,
            stabilization_tol: 1e-3,
            restart_steps: 2000,
            eta_fraction: 0.5,
            logged_points: 25,
            lipschitz_snapshots: 40,
        }
    }
}

pub(crate) fn read_engine(raw: &mut RawConfig) -> Result<Engine> {
    let name: String = raw.get("model", "engine", "dense".to_owned())?;
    match name.as_str() {
        "dense" => Ok(Engine::Dense),
        "graph" => Ok(Engine::Graph),
        other => Err(CliError::Config(format!(
            "unknown engine `{other}` (dense or graph)"
        ))),
    }
}

impl PoissonSettings {
    pub fn read(raw: &mut RawConfig) -> Result<Self> {
        let d = Self::default();
        let s = Self {
            hidden: raw.get_list("model", "hidden", d.hidden)?,
            engine: read_engine(raw)?,
            interior: raw.get_list("problem", "interior", d.interior)?,
            eta: raw.get("train", "eta", d.eta)?,
            steps: raw.get("train", "steps", d.steps)?,
            update_every: raw.get("train", "update_every", d.update_every)?,
            stabilization_tol: raw.get("diagnostics", "stabilization_tol", d.stabilization_tol)?,
            restart_steps: raw.get("diagnostics", "restart_steps", d.restart_steps)?,
            eta_fraction: raw.get("diagnostics", "eta_fraction", d.eta_fraction)?,
            logged_points: raw.get("diagnostics", "logged_points", d.logged_points)?,
            lipschitz_snapshots: raw.get(
                "diagnostics",
                "lipschitz_snapshots",
                d.lipschitz_snapshots,
            )?,
        };
        if s.interior.iter().any(|x| !(*x > 0.0 && *x < 1.0)) {
            return Err(CliError::Config("interior points must lie in (0,1)".into()));
        }
        if s.steps == 0 || s.restart_steps == 0 {
            return Err(CliError::Config("step counts must be at least 1".into()));
        }
        if !(s.eta_fraction > 0.0) || s.logged_points < 2 || s.lipschitz_snapshots < 2 {
            return Err(CliError::Config("diagnostics settings out of range".into()));
        }
        Ok(s)
    }

    pub fn problem(&self) -> Result<Problem> {
        let model = MlpConfig::new(1, self.hidden.clone(), 1).normalized_for_box(&[0.0], &[1.0]);
        Ok(Problem::new(
            ProblemSpec::poisson1d(),
            Some(model),
            self.engine,
        )?)
    }

    fn train_config(&self, eta: f64, steps: usize, seed: u64) -> TrainConfig {
        let mut c = TrainConfig::new(
            eta,
            steps,
            WeightMode::ExactNtk {
                update_every: self.update_every,
            },
        );
        c.seed = seed;
        c.eig_cadence = EigCadence::Every(1);
        c.snapshot_every = Some(1);
        c
    }
}

#[derive(Debug, Clone)]
pub struct PoissonReport {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub steps: usize,
    pub stabilization_step: usize,
    pub diagnostics: DiagnosticsRecord,
    pub descent: DescentReport,
    pub restart_eta: f64,
    pub certificate: Vec<CertificateRow>,
    pub gradient_slope: f64,
    pub residual_slope: f64,
    /// Per-group max/min weight ratio over the final 20% of steps.
    pub weight_ratio: Vec<f64>,
    /// Steps in the stabilized regime where some sorted eigenvalue decreased.
    pub eig_decreases: usize,
    pub trace: TrainingTrace,
}

impl PoissonReport {
    pub fn certificate_holds(&self) -> bool {
        !self.certificate.is_empty() && self.certificate.iter().all(|c| c.holds)
    }

    pub fn summary(&self) -> String {
        format!(
            "final loss {:e} after {} steps; stabilized at step {}; admissible eta {:e}; certificate {}; gradient-average slope {:.3}",
            self.final_loss,
            self.steps,
            self.stabilization_step,
            self.diagnostics.eta_admissible,
            if self.certificate_holds() { "holds" } else { "violated" },
            self.gradient_slope
        )
    }
}

fn average_table(trace: &TrainingTrace) -> Result<Vec<Vec<f64>>> {
    let mut rows = Vec::with_capacity(trace.len());
    let mut grad_f = 0.0;
    for t in 1..=trace.len() {
        grad_f += trace.records[t - 1].grad_f_norm_sq;
        rows.push(vec![
            t as f64,
            time_averaged_residuals(trace, t)?,
            time_averaged_gradients(trace, t)?,
            grad_f / t as f64,
        ]);
    }
    Ok(rows)
}

/// Iterates `θ_t` spread over `from..=to`, at most `count` of them.
fn spread_snapshots(trace: &TrainingTrace, from: usize, to: usize, count: usize) -> Vec<Vec<f64>> {
    let span = to - from;
    let mut steps: Vec<usize> = (0..count)
        .map(|i| from + i * span / (count - 1).max(1))
        .collect();
    steps.dedup();
    steps
        .iter()
        .filter_map(|&s| trace.snapshot(s).map(<[f64]>::to_vec))
        .collect()
}

pub fn run(s: &PoissonSettings, seed: u64, art: &Artifacts) -> Result<PoissonReport> {
    let problem = s.problem()?;
    let pts = poisson_points(&s.interior)?;
    let sys = problem.bind(&pts)?;
    let theta0 = problem.init_params(seed)?.into_values();
    let note = format!(
        "interior_points={}\nnetwork=1-{}-1 tanh",
        s.interior
            .iter()
            .map(|x| format!("{x:e}"))
            .collect::<Vec<_>>()
            .join(";"),
        s.hidden
            .iter()
            .map(|h| h.to_string())
            .collect::<Vec<_>>()
            .join("-")
    );

    let trace = train(&Fixed(&sys), &theta0, &s.train_config(s.eta, s.steps, seed))?;
    art.write("trace.csv", "", &trace.to_csv(&note))?;
    art.write_table(
        "time_averages.csv",
        &note,
        &[
            "T",
            "avg_res_norm_sq",
            "avg_gradG_norm_sq",
            "avg_gradF_norm_sq",
        ],
        &average_table(&trace)?,
    )?;

    let last = trace.len() - 1;
    let t_s = stabilization_onset(&trace, s.stabilization_tol)
        .unwrap_or(last)
        .min(last.saturating_sub(1));

    let snaps = spread_snapshots(&trace, t_s, last, s.lipschitz_snapshots);
    let max_dist = snaps
        .iter()
        .flat_map(|a| snaps.iter().map(move |b| dist(a, b)))
        .fold(0.0, f64::max);
    let l_obs = lipschitz_estimate(&sys, &snaps, 1e-3 * max_dist)?;
    // keep a usable bound when the stabilized iterates have not moved at all
    let l_hat = 2.0
        * if l_obs > 0.0 {
            l_obs
        } else {
            lipschitz_estimate(
                &sys,
                &spread_snapshots(&trace, 0, last, s.lipschitz_snapshots),
                0.0,
            )?
        };
    let pairs: Vec<(Vec<f64>, Vec<f64>)> = snaps
        .windows(2)
        .flat_map(|w| [(w[1].clone(), w[0].clone()), (w[0].clone(), w[1].clone())])
        .collect();
    // round-off floor of F: disagreement between two independent evaluators
    let graph_problem = problem.with_engine(match s.engine {
        Engine::Dense => Engine::Graph,
        Engine::Graph => Engine::Dense,
    });
    let other = graph_problem.bind(&pts)?;
    let mut f_noise = 0.0f64;
    for th in &snaps {
        let (a, _) = objective_and_gradient(&sys, th)?;
        let (b, _) = objective_and_gradient(&other, th)?;
        f_noise = f_noise.max(4.0 * (a - b).abs());
    }
    let descent = descent_lemma_check(&sys, &pairs, l_hat, f_noise)?;
    let diagnostics = assumption_diagnostics(&trace, t_s, l_hat)?;

    let restart_eta = s.eta_fraction * diagnostics.eta_admissible;
    let theta_s = trace
        .snapshot(t_s)
        .expect("every step is snapshotted")
        .to_vec();
    let mut restart_cfg = s.train_config(restart_eta, s.restart_steps, seed);
    restart_cfg.snapshot_every = None;
    let restart = train(&Fixed(&sys), &theta_s, &restart_cfg)?;
    let horizons = log_spaced(1, s.restart_steps, s.logged_points);
    let certificate = residual_average_certificate(&restart, restart_eta, &horizons);
    art.write(
        "restart_trace.csv",
        "",
        &restart.to_csv(&format!(
            "{note}\nrestart_from_step={t_s}\neta={restart_eta:e}"
        )),
    )?;
    let cert_rows: Vec<Vec<f64>> = certificate
        .iter()
        .map(|c| {
            vec![
                c.horizon as f64,
                c.lhs,
                c.rhs,
                if c.holds { 1.0 } else { 0.0 },
            ]
        })
        .collect();
    art.write_table(
        "certificate.csv",
        &format!("restart_from_step={t_s}\neta={restart_eta:e}"),
        &["T", "avg_res_norm_sq", "bound", "holds"],
        &cert_rows,
    )?;

    let ts: Vec<usize> = log_spaced(t_s.max(1), trace.len(), 20);
    let xs: Vec<f64> = ts.iter().map(|&t| t as f64).collect();
    let grads: Vec<f64> = ts
        .iter()
        .map(|&t| time_averaged_gradients(&trace, t))
        .collect::<Result<_, _>>()?;
    let ress: Vec<f64> = ts
        .iter()
        .map(|&t| time_averaged_residuals(&trace, t))
        .collect::<Result<_, _>>()?;
    let gradient_slope = loglog_slope(&xs, &grads);
    let residual_slope = loglog_slope(&xs, &ress);

    let eig_decreases = trace.records[t_s..]
        .windows(2)
        .filter(|w| match (&w[0].eigs, &w[1].eigs) {
            (Some(a), Some(b)) => a.iter().zip(b).any(|(x, y)| y < &(x - 1e-9 * x.abs())),
            _ => false,
        })
        .count();
    let weight_ratio = weight_stability(&trace, 0.2);

    let report = PoissonReport {
        initial_loss: trace.records[0].loss,
        final_loss: trace.records[last].loss,
        steps: s.steps,
        stabilization_step: t_s,
        diagnostics,
        descent,
        restart_eta,
        certificate,
        gradient_slope,
        residual_slope,
        weight_ratio,
        eig_decreases,
        trace,
    };
    let d = &report.diagnostics;
    art.write(
        "diagnostics.csv",
        &note,
        &key_values(&[
            ("initial_loss", format!("{:e}", report.initial_loss)),
            ("final_loss", format!("{:e}", report.final_loss)),
            ("stabilization_step", t_s.to_string()),
            ("k_min", format!("{:e}", d.k_min)),
            ("k_max", format!("{:e}", d.k_max)),
            ("l_min", format!("{:e}", d.l_min)),
            ("l_max", format!("{:e}", d.l_max)),
            ("lipschitz_estimate", format!("{:e}", d.l_hat)),
            ("eta_admissible", format!("{:e}", d.eta_admissible)),
            ("eta_used", format!("{:e}", s.eta)),
            ("restart_eta", format!("{:e}", restart_eta)),
            ("certificate_holds", report.certificate_holds().to_string()),
            ("descent_violations", report.descent.violations.to_string()),
            (
                "descent_max_gap",
                format!("{:e}", report.descent.max_violation),
            ),
            ("objective_noise_floor", format!("{f_noise:e}")),
            ("gradient_average_slope", format!("{gradient_slope:e}")),
            ("residual_average_slope", format!("{residual_slope:e}")),
            (
                "weight_ratio_final_20pct",
                report
                    .weight_ratio
                    .iter()
                    .map(|v| cell(*v))
                    .collect::<Vec<_>>()
                    .join(";"),
            ),
            ("eigenvalue_decreases", eig_decreases.to_string()),
        ]),
    )?;
    Ok(report)
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

pub fn ntk_at_step(s: &PoissonSettings, seed: u64, step: usize) -> Result<NtkMatrix> {
    let problem = s.problem()?;
    let pts = poisson_points(&s.interior)?;
    let sys = problem.bind(&pts)?;
    let theta0 = problem.init_params(seed)?.into_values();
    let mut cfg = s.train_config(s.eta, step, seed);
    cfg.eig_cadence = EigCadence::Never;
    cfg.snapshot_every = None;
    let trace = train(&Fixed(&sys), &theta0, &cfg)?;
    Ok(ntk(&sys.jacobian(&trace.final_theta)?, sys.layout())?)
}
