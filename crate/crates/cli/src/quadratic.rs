//! Quadratically parameterized regression: Monte Carlo sketches of the
//! kernel at initialization, their error rates, and training with a
//! moving-average estimate.

use std::f64::consts::FRAC_1_SQRT_2;

use adaptive_ntk::ntk_exact::{ntk, NtkMatrix};
use adaptive_ntk::ntk_sketch::{monte_carlo_average, AccumulatorMode, Estimate, SketchConfig};
use adaptive_ntk::par;
use adaptive_ntk::problems::{
    quadratic_truth, regression_points, relative_l2_error, Engine, Fixed, Problem, ProblemSpec,
    ResidualSystem,
};
use adaptive_ntk::rng::{purpose, StreamId};
use adaptive_ntk::trainer::{
    loglog_slope, train, EigCadence, TrainConfig, TrainingTrace, WeightMode,
};
use ndarray::Array2;

use crate::artifacts::{key_values, Artifacts};
use crate::config::RawConfig;
use crate::{CliError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticSettings {
    pub points: usize,
    /// Standard deviation of the additive data noise.
    pub sigma: f64,
    pub sketch: SketchConfig,
    /// Sample counts for the mean-sketch snapshots.
    pub mean_sizes: Vec<usize>,
    /// Sample counts for the error-rate table.
    pub rate_sizes: Vec<usize>,
    pub replicates: usize,
    pub eta: f64,
    pub steps: usize,
    pub alpha: f64,
    pub init_samples: usize,
    /// Keep every this many steps in the training trace CSV.
    pub log_every: usize,
    pub eval_points: usize,
}

impl Default for QuadraticSettings {
    fn default() -> Self {
        Self {
            points: 50,
            sigma: FRAC_1_SQRT_2,
            sketch: SketchConfig::default(),
            mean_sizes: vec![1, 2000, 20000],
            rate_sizes: vec![1, 10, 100, 1000],
            replicates: 100,
            eta: 1e-3,
            steps: 100_000,
            alpha: 1e-4,
            init_samples: 100,
            log_every: 100,
            eval_points: 201,
        }
    }
}

impl QuadraticSettings {
    pub fn read(raw: &mut RawConfig) -> Result<Self> {
        let d = Self::default();
        let s = Self {
            points: raw.get("problem", "points", d.points)?,
            sigma: raw.get("problem", "sigma", d.sigma)?,
            sketch: SketchConfig {
                dt: raw.get("sketch", "dt", d.sketch.dt)?,
                mask_eps: raw.get("sketch", "mask_eps", d.sketch.mask_eps)?,
            },
            mean_sizes: raw.get_list("mc", "mean_sizes", d.mean_sizes)?,
            rate_sizes: raw.get_list("mc", "rate_sizes", d.rate_sizes)?,
            replicates: raw.get("mc", "replicates", d.replicates)?,
            eta: raw.get("train", "eta", d.eta)?,
            steps: raw.get("train", "steps", d.steps)?,
            alpha: raw.get("train", "alpha", d.alpha)?,
            init_samples: raw.get("train", "init_samples", d.init_samples)?,
            log_every: raw.get("output", "log_every", d.log_every)?,
            eval_points: raw.get("output", "eval_points", d.eval_points)?,
        };
        s.sketch.validate()?;
        if s.points < 2 || !(s.sigma >= 0.0) {
            return Err(CliError::Config(
                "need at least two data points and sigma ≥ 0".into(),
            ));
        }
        if s.replicates < 2
            || s.mean_sizes.contains(&0)
            || s.rate_sizes.len() < 2
            || s.rate_sizes.contains(&0)
        {
            return Err(CliError::Config(
                "Monte Carlo sizes must be positive (two or more rate sizes)".into(),
            ));
        }
        if s.log_every == 0 || s.eval_points < 2 {
            return Err(CliError::Config("output settings out of range".into()));
        }
        Ok(s)
    }

    pub fn problem(&self, seed: u64) -> Result<Problem> {
        let spec = ProblemSpec::quadratic_regression(
            self.points,
            self.sigma,
            StreamId::new(seed, purpose::NOISE),
        )?;
        Ok(Problem::new(spec, None, Engine::Dense)?)
    }

    fn train_config(&self, steps: usize, seed: u64) -> TrainConfig {
        let mut c = TrainConfig::new(
            self.eta,
            steps,
            WeightMode::Sketch {
                sketch: self.sketch,
                alpha: self.alpha,
                init_samples: self.init_samples,
                mode: AccumulatorMode::Full,
            },
        );
        c.seed = seed;
        c.eig_cadence = EigCadence::Never;
        c
    }
}

/// Mean squared error of replicated estimates and its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateRow {
    pub samples: usize,
    pub matrix_mse: f64,
    pub matrix_se: f64,
    pub trace_mse: f64,
    pub trace_se: f64,
}

#[derive(Debug, Clone)]
pub struct QuadraticReport {
    pub exact_t0: NtkMatrix,
    /// `(N, ‖mean − K‖_F / ‖K‖_F)` for each mean-sketch size.
    pub mean_errors: Vec<(usize, f64)>,
    pub rates: Vec<RateRow>,
    pub matrix_slope: f64,
    pub trace_slope: f64,
    pub predictor_error: f64,
    pub final_theta: Vec<f64>,
    pub trace: TrainingTrace,
}

impl QuadraticReport {
    pub fn summary(&self) -> String {
        format!(
            "MC slopes {:.3} (matrix), {:.3} (trace); predictor relative L2 error {:.3e}; theta {:?}",
            self.matrix_slope, self.trace_slope, self.predictor_error, self.final_theta
        )
    }
}

fn mean_se(v: &[f64]) -> (f64, f64) {
    let m = v.len() as f64;
    let mean = par::pairwise_sum(v) / m;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (m - 1.0);
    (mean, (var / m).sqrt())
}

/// Replicated Monte Carlo errors against the exact kernel.
pub fn rate_table<S: ResidualSystem>(
    sys: &S,
    theta: &[f64],
    exact: &NtkMatrix,
    cfg: &SketchConfig,
    sizes: &[usize],
    replicates: usize,
    stream: StreamId,
) -> Result<Vec<RateRow>> {
    let r0 = sys.residual(theta)?;
    let tr = exact.trace();
    sizes
        .iter()
        .enumerate()
        .map(|(k, &n)| {
            let base = stream.child(k as u64);
            let errs = par::map_indexed(replicates, |i| {
                monte_carlo_average(sys, theta, &r0, cfg, n, base.child(i as u64))
                    .map(|(m, t)| (m.distance(exact).powi(2), (t - tr).powi(2)))
            })
            .into_iter()
            .collect::<Result<Vec<_>, _>>()?;
            let (mats, trs): (Vec<f64>, Vec<f64>) = errs.into_iter().unzip();
            let (matrix_mse, matrix_se) = mean_se(&mats);
            let (trace_mse, trace_se) = mean_se(&trs);
            Ok(RateRow {
                samples: n,
                matrix_mse,
                matrix_se,
                trace_mse,
                trace_se,
            })
        })
        .collect()
}

fn estimate_matrix(est: &Estimate) -> Option<&NtkMatrix> {
    match est {
        Estimate::Full(k) => Some(k),
        Estimate::Traces(_) => None,
    }
}

pub fn run(s: &QuadraticSettings, seed: u64, art: &Artifacts) -> Result<QuadraticReport> {
    let problem = s.problem(seed)?;
    let pts = regression_points(problem.spec())?;
    let sys = problem.bind(&pts)?;
    let theta0 = problem.init_params(seed)?.into_values();
    let r0 = sys.residual(&theta0)?;
    let note = format!(
        "points={}\nsigma={:e}\ndt={:e}",
        s.points, s.sigma, s.sketch.dt
    );

    let data: Vec<Vec<f64>> = problem
        .spec()
        .data
        .iter()
        .map(|&(x, y)| vec![x, y])
        .collect();
    art.write_table("data.csv", &note, &["x", "y"], &data)?;

    let exact_t0 = ntk(&sys.jacobian(&theta0)?, sys.layout())?;
    art.write("ntk_exact_t0.csv", &note, &exact_t0.to_csv())?;

    let means_stream = StreamId::new(seed, purpose::REPLICATE).child(0);
    let mut mean_errors = Vec::new();
    for &n in &s.mean_sizes {
        let (mean, _) = monte_carlo_average(
            &sys,
            &theta0,
            &r0,
            &s.sketch,
            n,
            means_stream.child(n as u64),
        )?;
        mean_errors.push((n, mean.distance(&exact_t0) / exact_t0.frobenius()));
        art.write(
            &format!("ntk_mean_N{n}.csv"),
            &format!("{note}\nsamples={n}"),
            &mean.to_csv(),
        )?;
    }

    let rates = rate_table(
        &sys,
        &theta0,
        &exact_t0,
        &s.sketch,
        &s.rate_sizes,
        s.replicates,
        StreamId::new(seed, purpose::REPLICATE).child(1),
    )?;
    let xs: Vec<f64> = rates.iter().map(|r| r.samples as f64).collect();
    let matrix_slope = loglog_slope(&xs, &rates.iter().map(|r| r.matrix_mse).collect::<Vec<_>>());
    let trace_slope = loglog_slope(&xs, &rates.iter().map(|r| r.trace_mse).collect::<Vec<_>>());
    let rows: Vec<Vec<f64>> = rates
        .iter()
        .map(|r| {
            vec![
                r.samples as f64,
                r.matrix_mse,
                r.matrix_se,
                r.trace_mse,
                r.trace_se,
            ]
        })
        .collect();
    art.write_table(
        "mc_rates.csv",
        &format!("{note}\nreplicates={}", s.replicates),
        &["N", "matrix_mse", "matrix_se", "trace_mse", "trace_se"],
        &rows,
    )?;

    let trace = train(&Fixed(&sys), &theta0, &s.train_config(s.steps, seed))?;
    let mut thinned = trace.clone();
    thinned
        .records
        .retain(|r| r.step % s.log_every == 0 || r.step == s.steps);
    art.write(
        "trace.csv",
        "",
        &thinned.to_csv(&format!("{note}\nlog_every={}", s.log_every)),
    )?;
    let theta_t = trace.final_theta.clone();
    let exact_final = ntk(&sys.jacobian(&theta_t)?, sys.layout())?;
    art.write("ntk_exact_final.csv", &note, &exact_final.to_csv())?;
    for (name, acc) in [
        ("ntk_estimate_t0.csv", &trace.initial_estimate),
        ("ntk_estimate_final.csv", &trace.final_estimate),
    ] {
        if let Some(k) = acc.as_ref().and_then(|a| estimate_matrix(a.estimate())) {
            art.write(name, &note, &k.to_csv())?;
        }
    }

    let grid = Array2::from_shape_fn((s.eval_points, 1), |(i, _)| {
        -1.0 + 2.0 * i as f64 / (s.eval_points - 1) as f64
    });
    let fhat = problem.predict(&theta_t, grid.view())?;
    let truth: Vec<f64> = grid.column(0).iter().map(|&x| quadratic_truth(x)).collect();
    let predictor_error = relative_l2_error(&fhat, &truth)?;
    let pred_rows: Vec<Vec<f64>> = (0..s.eval_points)
        .map(|i| vec![grid[[i, 0]], truth[i], fhat[i]])
        .collect();
    art.write_table("predictor.csv", &note, &["x", "f", "f_hat"], &pred_rows)?;

    let mut pairs: Vec<(&str, String)> = vec![
        ("matrix_rate_slope", format!("{matrix_slope:e}")),
        ("trace_rate_slope", format!("{trace_slope:e}")),
        ("predictor_rel_l2_error", format!("{predictor_error:e}")),
        (
            "theta_final",
            theta_t
                .iter()
                .map(|v| format!("{v:e}"))
                .collect::<Vec<_>>()
                .join(";"),
        ),
    ];
    let labels: Vec<String> = mean_errors
        .iter()
        .map(|(n, _)| format!("mean_rel_error_N{n}"))
        .collect();
    for ((_, e), l) in mean_errors.iter().zip(&labels) {
        pairs.push((l.as_str(), format!("{e:e}")));
    }
    art.write("summary.csv", &note, &key_values(&pairs))?;

    Ok(QuadraticReport {
        exact_t0,
        mean_errors,
        rates,
        matrix_slope,
        trace_slope,
        predictor_error,
        final_theta: theta_t,
        trace,
    })
}

pub fn ntk_at_step(s: &QuadraticSettings, seed: u64, step: usize) -> Result<NtkMatrix> {
    let problem = s.problem(seed)?;
    let pts = regression_points(problem.spec())?;
    let sys = problem.bind(&pts)?;
    let theta0 = problem.init_params(seed)?.into_values();
    let trace = train(&Fixed(&sys), &theta0, &s.train_config(step, seed))?;
    Ok(ntk(&sys.jacobian(&trace.final_theta)?, sys.layout())?)
}
