//! Gradient descent with fixed, exact-NTK or sketched trace-ratio weights,
//! the spaced-update acceptance rule, and convergence diagnostics.
//!
//! Record `t` of a [`TrainingTrace`] describes `θ_t` together with the weights
//! `Λ_t` used for the step `θ_{t+1} = θ_t − η ∇R(θ_t) Λ_t R(θ_t)`.

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ntk_exact::{
    block_traces, eigenvalues_symmetric, ntk, trace_ratio_weights, Jacobian, LossWeights,
};
use crate::ntk_sketch::{
    moving_average_init, single_sample_sketch, sketch_weights, AccumulatorMode, SketchAccumulator,
    SketchConfig,
};
use crate::problems::{GroupLayout, ResidualSource, ResidualSystem, ResidualVector};
use crate::rng::{purpose, StreamId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightMode {
    /// Constant weights, one per group.
    Fixed(Vec<f64>),
    /// Exact trace-ratio weights recomputed every `update_every` steps.
    ExactNtk { update_every: usize },
    /// Moving-average sketch estimate.
    Sketch {
        sketch: SketchConfig,
        alpha: f64,
        init_samples: usize,
        mode: AccumulatorMode,
    },
}

/// Budget `h(t) = c·(1+t)^q`; `c = None` picks ten times the first positive
/// increment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpacedConfig {
    pub c: Option<f64>,
    pub q: f64,
}

impl Default for SpacedConfig {
    fn default() -> Self {
        Self { c: None, q: 0.5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EigCadence {
    /// Every step when `n ≤ 16`, every tenth step otherwise.
    Auto,
    Never,
    Every(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub eta: f64,
    pub steps: usize,
    pub weights: WeightMode,
    pub spaced: Option<SpacedConfig>,
    pub seed: u64,
    pub eig_cadence: EigCadence,
    /// Store `θ_t` every this many steps (and at the last step).
    pub snapshot_every: Option<usize>,
    /// Exact trace-ratio weights alongside sketched ones, every this many steps.
    pub exact_compare_every: Option<usize>,
    /// Record wall-clock milliseconds; off keeps traces reproducible byte for byte.
    pub record_wall: bool,
}

impl TrainConfig {
    pub fn new(eta: f64, steps: usize, weights: WeightMode) -> Self {
        Self {
            eta,
            steps,
            weights,
            spaced: None,
            seed: 0,
            eig_cadence: EigCadence::Auto,
            snapshot_every: None,
            exact_compare_every: None,
            record_wall: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0) || !self.eta.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "learning rate must be positive, got {}",
                self.eta
            )));
        }
        match &self.weights {
            WeightMode::ExactNtk { update_every: 0 } => {
                return Err(Error::InvalidConfig(
                    "update frequency must be at least 1".into(),
                ))
            }
            WeightMode::Sketch {
                sketch,
                alpha,
                init_samples,
                ..
            } => {
                sketch.validate()?;
                if !(*alpha > 0.0 && *alpha <= 1.0) {
                    return Err(Error::InvalidConfig(format!(
                        "alpha must lie in (0,1], got {alpha}"
                    )));
                }
                if *init_samples == 0 {
                    return Err(Error::InvalidConfig(
                        "sketch init needs at least one sample".into(),
                    ));
                }
            }
            WeightMode::Fixed(w) if w.iter().any(|v| !(*v > 0.0)) => {
                return Err(Error::InvalidConfig(
                    "fixed weights must be positive".into(),
                ))
            }
            _ => {}
        }
        if let Some(s) = &self.spaced {
            if !(s.q < 1.0) {
                return Err(Error::InvalidConfig(format!(
                    "spaced-update exponent must be below 1, got {}",
                    s.q
                )));
            }
            if s.c.is_some_and(|c| !(c >= 0.0)) {
                return Err(Error::InvalidConfig(
                    "spaced-update coefficient must be nonnegative".into(),
                ));
            }
        }
        if matches!(self.eig_cadence, EigCadence::Every(0))
            || self.snapshot_every == Some(0)
            || self.exact_compare_every == Some(0)
        {
            return Err(Error::InvalidConfig("cadences must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub res_norm_sq: f64,
    pub grad_g_norm_sq: f64,
    pub grad_f_norm_sq: f64,
    pub weights: Vec<f64>,
    pub eigs: Option<Vec<f64>>,
    /// Exact trace-ratio weights at this step, when compared.
    pub exact_weights: Option<Vec<f64>>,
    /// Whether a spaced-update candidate was accepted at this step.
    pub accepted: bool,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingTrace {
    pub layout: GroupLayout,
    pub records: Vec<StepRecord>,
    pub snapshots: Vec<(usize, Vec<f64>)>,
    pub final_theta: Vec<f64>,
    /// Running sum `S` after each step when spaced updates are on.
    pub spaced_sum: Vec<f64>,
    /// Sketch accumulator right after initialization and after the last step.
    pub initial_estimate: Option<SketchAccumulator>,
    pub final_estimate: Option<SketchAccumulator>,
}

fn fmt_f(v: f64) -> String {
    format!("{v:e}")
}

impl TrainingTrace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn res_norms(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.res_norm_sq).collect()
    }

    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss).collect()
    }

    pub fn snapshot(&self, step: usize) -> Option<&[f64]> {
        self.snapshots
            .iter()
            .find(|(s, _)| *s == step)
            .map(|(_, v)| v.as_slice())
    }

    /// CSV with columns `step, loss, res_norm_sq, gradG_norm_sq,
    /// gradF_norm_sq, w_<group>…, eig_0…, wall_ms`; eigenvalue cells are empty
    /// on steps without a record.
    pub fn to_csv(&self, header_comment: &str) -> String {
        let neig = self
            .records
            .iter()
            .filter_map(|r| r.eigs.as_ref().map(Vec::len))
            .max()
            .unwrap_or(0);
        let mut out = String::new();
        for line in header_comment.lines() {
            let _ = writeln!(out, "# {line}");
        }
        out.push_str("step,loss,res_norm_sq,gradG_norm_sq,gradF_norm_sq");
        for name in self.layout.names() {
            let _ = write!(out, ",w_{name}");
        }
        for k in 0..neig {
            let _ = write!(out, ",eig_{k}");
        }
        out.push_str(",wall_ms\n");
        for r in &self.records {
            let _ = write!(
                out,
                "{},{},{},{},{}",
                r.step,
                fmt_f(r.loss),
                fmt_f(r.res_norm_sq),
                fmt_f(r.grad_g_norm_sq),
                fmt_f(r.grad_f_norm_sq)
            );
            for w in &r.weights {
                let _ = write!(out, ",{}", fmt_f(*w));
            }
            for k in 0..neig {
                match r.eigs.as_ref().and_then(|e| e.get(k)) {
                    Some(v) => {
                        let _ = write!(out, ",{}", fmt_f(*v));
                    }
                    None => out.push(','),
                }
            }
            let _ = writeln!(out, ",{}", r.wall_ms);
        }
        out
    }
}

/// `½ Σ_g λ_g Σ_{i∈g} R_i²`.
pub fn weighted_loss(r: &ResidualVector, w: &LossWeights) -> Result<f64> {
    let lam = w.per_residual(r.layout())?;
    Ok(0.5
        * r.values()
            .iter()
            .zip(&lam)
            .map(|(x, l)| l * x * x)
            .sum::<f64>())
}

fn scaled(r: &[f64], lam: &[f64]) -> Vec<f64> {
    r.iter().zip(lam).map(|(a, b)| a * b).collect()
}

/// `θ − η·J·(Λ⊙R)`.
pub fn gd_step(
    theta: &[f64],
    j: &Jacobian,
    r: &ResidualVector,
    w: &LossWeights,
    eta: f64,
) -> Result<Vec<f64>> {
    if j.p() != theta.len() || j.n() != r.values().len() {
        return Err(Error::DimensionMismatch {
            binding: "gradient step",
            expected: j.p(),
            got: theta.len(),
        });
    }
    let lam = w.per_residual(r.layout())?;
    let g = j.times(&scaled(r.values(), &lam));
    Ok(theta.iter().zip(&g).map(|(t, d)| t - eta * d).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpacedUpdateState {
    /// Running sum `S`.
    pub s: f64,
    pub weights: LossWeights,
}

/// Accepts `candidate` iff `S + λ_max(Λ̃ − Λ)₊·‖R_next‖² ≤ h`.
///
/// Only the positive part of the increment is charged, so `S` never decreases.
pub fn spaced_update(
    state: &SpacedUpdateState,
    candidate: &LossWeights,
    r_next_norm_sq: f64,
    h: f64,
) -> (SpacedUpdateState, bool) {
    let inc = spaced_increment(&state.weights, candidate, r_next_norm_sq);
    if state.s + inc <= h {
        (
            SpacedUpdateState {
                s: state.s + inc,
                weights: candidate.clone(),
            },
            true,
        )
    } else {
        (state.clone(), false)
    }
}

pub fn spaced_increment(
    current: &LossWeights,
    candidate: &LossWeights,
    r_next_norm_sq: f64,
) -> f64 {
    candidate.max_increase_over(current).max(0.0) * r_next_norm_sq
}

pub fn h_budget(c: f64, q: f64, t: usize) -> f64 {
    c * (1.0 + t as f64).powf(q)
}

fn cadence_hit(cadence: EigCadence, n: usize, t: usize) -> bool {
    match cadence {
        EigCadence::Never => false,
        EigCadence::Auto => n <= 16 || t % 10 == 0,
        EigCadence::Every(k) => t % k == 0,
    }
}

struct Runner<'c> {
    cfg: &'c TrainConfig,
    probe_stream: StreamId,
    acc: Option<SketchAccumulator>,
    initial: Option<SketchAccumulator>,
    spaced: Option<SpacedUpdateState>,
    spaced_c: Option<f64>,
    weights: Option<LossWeights>,
}

impl Runner<'_> {
    /// Weights for step `t` at `θ_t`, and whether a candidate was accepted.
    fn weights_at<S: ResidualSystem>(
        &mut self,
        t: usize,
        sys: &S,
        theta: &[f64],
        r: &[f64],
        jac: &mut Option<Jacobian>,
    ) -> Result<(LossWeights, bool)> {
        let layout = sys.layout();
        let prev = self.weights.clone();
        let candidate = match &self.cfg.weights {
            WeightMode::Fixed(w) => Some(LossWeights::new(layout, w.clone())?),
            WeightMode::ExactNtk { update_every } => {
                if t % update_every == 0 || prev.is_none() {
                    let j = match jac.take() {
                        Some(j) => j,
                        None => sys.jacobian(theta)?,
                    };
                    let k = ntk(&j, layout)?;
                    *jac = Some(j);
                    match crate::ntk_exact::ntk_weights(&k) {
                        Ok(w) => Some(w),
                        Err(Error::DegenerateKernel { .. }) => {
                            Some(prev.clone().unwrap_or_else(|| LossWeights::ones(layout)))
                        }
                        Err(e) => return Err(e),
                    }
                } else {
                    None
                }
            }
            WeightMode::Sketch {
                sketch,
                alpha,
                init_samples,
                mode,
            } => {
                let fallback = prev.clone().unwrap_or_else(|| LossWeights::ones(layout));
                match &mut self.acc {
                    None => {
                        let acc = moving_average_init(
                            sys,
                            theta,
                            r,
                            sketch,
                            *init_samples,
                            *alpha,
                            *mode,
                            self.probe_stream.child(0),
                        )?;
                        let w = sketch_weights(&acc, &fallback);
                        self.initial = Some(acc.clone());
                        self.acc = Some(acc);
                        Some(w)
                    }
                    // step 0 is the initialization draw, so per-step probes never collide with it
                    Some(acc) => {
                        let full = *mode == AccumulatorMode::Full;
                        let s = single_sample_sketch(
                            sys,
                            theta,
                            r,
                            sketch,
                            self.probe_stream.child(t as u64),
                            full,
                        )?;
                        acc.update(&s)?;
                        Some(sketch_weights(acc, &fallback))
                    }
                }
            }
        };
        let Some(candidate) = candidate else {
            return Ok((prev.expect("weights exist after the first step"), false));
        };
        let Some(spaced) = &self.cfg.spaced else {
            self.weights = Some(candidate.clone());
            return Ok((candidate, true));
        };
        let r2: f64 = r.iter().map(|v| v * v).sum();
        let (next, accepted) = match &self.spaced {
            None => (
                SpacedUpdateState {
                    s: 0.0,
                    weights: candidate,
                },
                true,
            ),
            Some(state) => {
                let inc = spaced_increment(&state.weights, &candidate, r2);
                if self.spaced_c.is_none() && inc > 0.0 {
                    self.spaced_c = Some(spaced.c.unwrap_or(10.0 * inc));
                }
                let h = h_budget(self.spaced_c.unwrap_or(0.0), spaced.q, t);
                spaced_update(state, &candidate, r2, h)
            }
        };
        self.weights = Some(next.weights.clone());
        let w = next.weights.clone();
        self.spaced = Some(next);
        Ok((w, accepted))
    }
}

/// Runs `cfg.steps` gradient-descent steps from `theta0`.
pub fn train<Src: ResidualSource>(
    source: &Src,
    theta0: &[f64],
    cfg: &TrainConfig,
) -> Result<TrainingTrace> {
    cfg.validate()?;
    let start = Instant::now();
    let mut runner = Runner {
        cfg,
        probe_stream: StreamId::new(cfg.seed, purpose::PROBE),
        acc: None,
        initial: None,
        spaced: None,
        spaced_c: cfg.spaced.and_then(|s| s.c),
        weights: None,
    };
    let mut theta = theta0.to_vec();
    let mut records = Vec::with_capacity(cfg.steps + 1);
    let mut snapshots = Vec::new();
    let mut spaced_sum = Vec::new();
    let mut layout = None;
    for t in 0..=cfg.steps {
        let sys = source.at_step(t)?;
        if sys.num_params() != theta.len() {
            return Err(Error::DimensionMismatch {
                binding: "params",
                expected: sys.num_params(),
                got: theta.len(),
            });
        }
        let lay = sys.layout().clone();
        let r = sys.residual(&theta)?;
        let mut jac = None;
        let (w, accepted) = runner.weights_at(t, &sys, &theta, &r, &mut jac)?;
        let lam = w.per_residual(&lay)?;
        let res_norm_sq: f64 = r.iter().map(|v| v * v).sum();
        let loss = 0.5 * r.iter().zip(&lam).map(|(x, l)| l * x * x).sum::<f64>();
        if !loss.is_finite() {
            return Err(Error::Diverged { step: t });
        }
        let n = lay.n();
        let want_eigs = cadence_hit(cfg.eig_cadence, n, t);
        let want_exact = cfg.exact_compare_every.is_some_and(|k| t % k == 0);
        if (want_eigs || want_exact) && jac.is_none() {
            jac = Some(sys.jacobian(&theta)?);
        }
        let kernel = match &jac {
            Some(j) if want_eigs || want_exact => Some(ntk(j, &lay)?),
            _ => None,
        };
        let eigs = match (&kernel, want_eigs) {
            (Some(k), true) => Some(eigenvalues_symmetric(k)?),
            _ => None,
        };
        let exact_weights = match (&kernel, want_exact) {
            (Some(k), true) => trace_ratio_weights(&lay, &block_traces(k))
                .ok()
                .map(|w| w.values().to_vec()),
            _ => None,
        };
        let grad_g = match &jac {
            Some(j) => j.times(&scaled(&r, &lam)),
            None => sys.jvp(&theta, &scaled(&r, &lam))?,
        };
        let grad_f = match &jac {
            Some(j) => j.times(&r),
            None => sys.jvp(&theta, &r)?,
        };
        if cfg.snapshot_every.is_some_and(|k| t % k == 0)
            || (cfg.snapshot_every.is_some() && t == cfg.steps)
        {
            snapshots.push((t, theta.clone()));
        }
        records.push(StepRecord {
            step: t,
            loss,
            res_norm_sq,
            grad_g_norm_sq: grad_g.iter().map(|v| v * v).sum(),
            grad_f_norm_sq: grad_f.iter().map(|v| v * v).sum(),
            weights: w.values().to_vec(),
            eigs,
            exact_weights,
            accepted,
            wall_ms: if cfg.record_wall {
                start.elapsed().as_millis() as u64
            } else {
                0
            },
        });
        if let Some(s) = &runner.spaced {
            spaced_sum.push(s.s);
        }
        layout = Some(lay);
        if t == cfg.steps {
            break;
        }
        for (th, g) in theta.iter_mut().zip(&grad_g) {
            *th -= cfg.eta * g;
        }
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged { step: t + 1 });
        }
    }
    Ok(TrainingTrace {
        layout: layout.expect("at least one record"),
        records,
        snapshots,
        final_theta: theta,
        spaced_sum,
        initial_estimate: runner.initial,
        final_estimate: runner.acc,
    })
}

fn prefix_mean(values: impl Iterator<Item = f64>, len: usize, upto: usize) -> Result<f64> {
    if upto == 0 {
        return Err(Error::InvalidConfig(
            "time average needs at least one step".into(),
        ));
    }
    if upto > len {
        return Err(Error::InvalidConfig(format!(
            "time average over {upto} steps exceeds trace length {len}"
        )));
    }
    Ok(values.take(upto).sum::<f64>() / upto as f64)
}

/// `(1/T')Σ_{t<T'} ‖R(θ_t)‖²`.
pub fn time_averaged_residuals(trace: &TrainingTrace, upto: usize) -> Result<f64> {
    prefix_mean(
        trace.records.iter().map(|r| r.res_norm_sq),
        trace.len(),
        upto,
    )
}

/// `(1/T')Σ_{t<T'} ‖∇_θG(θ_t;θ_t)‖²`.
pub fn time_averaged_gradients(trace: &TrainingTrace, upto: usize) -> Result<f64> {
    prefix_mean(
        trace.records.iter().map(|r| r.grad_g_norm_sq),
        trace.len(),
        upto,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CertificateRow {
    pub horizon: usize,
    /// `(1/T)Σ_{t<T}‖R_t‖²`.
    pub lhs: f64,
    /// `(‖R_0‖² − ‖R_T‖²)/(Tη)`.
    pub rhs: f64,
    pub holds: bool,
}

/// Checks the residual-average bound at each horizon in `horizons`
/// (every `T ≥ 1` in the trace when empty).
pub fn residual_average_certificate(
    trace: &TrainingTrace,
    eta: f64,
    horizons: &[usize],
) -> Vec<CertificateRow> {
    let r = trace.res_norms();
    let all: Vec<usize> = (1..r.len()).collect();
    let hs = if horizons.is_empty() {
        &all[..]
    } else {
        horizons
    };
    let mut prefix = vec![0.0; r.len() + 1];
    for (i, v) in r.iter().enumerate() {
        prefix[i + 1] = prefix[i] + v;
    }
    hs.iter()
        .filter(|&&t| t >= 1 && t < r.len())
        .map(|&t| {
            let lhs = prefix[t] / t as f64;
            let rhs = (r[0] - r[t]) / (t as f64 * eta);
            CertificateRow {
                horizon: t,
                lhs,
                rhs,
                holds: lhs <= rhs,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DescentReport {
    pub pairs: usize,
    pub violations: usize,
    /// Largest `F(x) − F(y) − ⟨∇F(y),x−y⟩ − L/2‖x−y‖²` seen.
    pub max_violation: f64,
}

/// `F(θ) = ½‖R(θ)‖²` and `∇F = ∇R·R`.
pub fn objective_and_gradient<S: ResidualSystem + ?Sized>(
    sys: &S,
    theta: &[f64],
) -> Result<(f64, Vec<f64>)> {
    let r = sys.residual(theta)?;
    let g = sys.jvp(theta, &r)?;
    Ok((0.5 * r.iter().map(|v| v * v).sum::<f64>(), g))
}

/// Descent-lemma inequality on each `(x, y)` pair. A pair counts as a
/// violation when the gap exceeds `f_noise` (absolute round-off floor of `F`)
/// plus a relative `1e-12` of the terms involved.
pub fn descent_lemma_check<S: ResidualSystem + ?Sized>(
    sys: &S,
    pairs: &[(Vec<f64>, Vec<f64>)],
    l_hat: f64,
    f_noise: f64,
) -> Result<DescentReport> {
    let mut report = DescentReport {
        pairs: pairs.len(),
        violations: 0,
        max_violation: f64::NEG_INFINITY,
    };
    for (x, y) in pairs {
        let (fx, _) = objective_and_gradient(sys, x)?;
        let (fy, gy) = objective_and_gradient(sys, y)?;
        let mut inner = 0.0;
        let mut d2 = 0.0;
        for ((a, b), g) in x.iter().zip(y).zip(&gy) {
            inner += g * (a - b);
            d2 += (a - b) * (a - b);
        }
        let gap = fx - fy - inner - 0.5 * l_hat * d2;
        let slack = f_noise + 1e-12 * (fx.abs() + fy.abs() + inner.abs());
        if gap > slack {
            report.violations += 1;
        }
        report.max_violation = report.max_violation.max(gap);
    }
    if pairs.is_empty() {
        report.max_violation = 0.0;
    }
    Ok(report)
}

/// `max ‖∇F(a) − ∇F(b)‖/‖a − b‖` over all snapshot pairs at least
/// `min_dist` apart.
pub fn lipschitz_estimate<S: ResidualSystem + ?Sized>(
    sys: &S,
    points: &[Vec<f64>],
    min_dist: f64,
) -> Result<f64> {
    let grads = points
        .iter()
        .map(|p| objective_and_gradient(sys, p).map(|(_, g)| g))
        .collect::<Result<Vec<_>>>()?;
    let mut best = 0.0f64;
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            let d: f64 = points[i]
                .iter()
                .zip(&points[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            if d <= min_dist {
                continue;
            }
            let dg: f64 = grads[i]
                .iter()
                .zip(&grads[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            best = best.max(dg / d);
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsRecord {
    pub k_min: f64,
    pub k_max: f64,
    pub l_min: f64,
    pub l_max: f64,
    pub l_hat: f64,
    /// `2 k_min ℓ_min / (L̂ k_max ℓ_max²)`.
    pub eta_admissible: f64,
}

/// Extreme eigenvalues and weights over records `from..`, and the admissible
/// learning rate for the given Lipschitz estimate.
pub fn assumption_diagnostics(
    trace: &TrainingTrace,
    from: usize,
    l_hat: f64,
) -> Result<DiagnosticsRecord> {
    let recs = trace.records.get(from..).unwrap_or(&[]);
    let eigs: Vec<&Vec<f64>> = recs.iter().filter_map(|r| r.eigs.as_ref()).collect();
    if eigs.is_empty() {
        return Err(Error::InvalidConfig(
            "no eigenvalues recorded in the requested range".into(),
        ));
    }
    let k_min = eigs.iter().map(|e| e[0]).fold(f64::INFINITY, f64::min);
    let k_max = eigs
        .iter()
        .map(|e| e[e.len() - 1])
        .fold(f64::NEG_INFINITY, f64::max);
    let ws = recs.iter().flat_map(|r| r.weights.iter().copied());
    let (l_min, l_max) = ws.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), w| {
        (a.min(w), b.max(w))
    });
    Ok(DiagnosticsRecord {
        k_min,
        k_max,
        l_min,
        l_max,
        l_hat,
        eta_admissible: 2.0 * k_min * l_min / (l_hat * k_max * l_max * l_max),
    })
}

/// Per-group `max/min` of the weights over the final `fraction` of records.
pub fn weight_stability(trace: &TrainingTrace, fraction: f64) -> Vec<f64> {
    let n = trace.len();
    let from = n - ((n as f64 * fraction).ceil() as usize).clamp(1, n);
    let groups = trace.layout.num_groups();
    (0..groups)
        .map(|g| {
            let (lo, hi) = trace.records[from..]
                .iter()
                .map(|r| r.weights[g])
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), w| {
                    (a.min(w), b.max(w))
                });
            hi / lo
        })
        .collect()
}

/// First step after which every recorded eigenvalue and every weight stays
/// within relative distance `tol` of its final value.
pub fn stabilization_onset(trace: &TrainingTrace, tol: f64) -> Option<usize> {
    let last = trace.records.last()?;
    let final_eigs = trace.records.iter().rev().find_map(|r| r.eigs.clone());
    let close = |a: f64, b: f64| (a - b).abs() <= tol * b.abs().max(f64::MIN_POSITIVE);
    let settled = |r: &StepRecord| {
        let w_ok = r
            .weights
            .iter()
            .zip(&last.weights)
            .all(|(a, b)| close(*a, *b));
        let e_ok = match (&r.eigs, &final_eigs) {
            (Some(e), Some(f)) => e.iter().zip(f).all(|(a, b)| close(*a, *b)),
            _ => true,
        };
        w_ok && e_ok
    };
    let mut onset = None;
    for r in trace.records.iter().rev() {
        if settled(r) {
            onset = Some(r.step);
        } else {
            break;
        }
    }
    onset
}

/// Least-squares slope of `log y` against `log x`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

/// Roughly `count` distinct integers spaced evenly in log scale over `[lo, hi]`.
pub fn log_spaced(lo: usize, hi: usize, count: usize) -> Vec<usize> {
    let (a, b) = ((lo.max(1)) as f64, hi.max(lo.max(1)) as f64);
    let mut out: Vec<usize> = (0..count)
        .map(|i| {
            let f = if count == 1 {
                0.0
            } else {
                i as f64 / (count - 1) as f64
            };
            (a * (b / a).powf(f)).round() as usize
        })
        .collect();
    out.dedup();
    out
}
