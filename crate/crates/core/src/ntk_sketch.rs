//! Randomized NTK estimates from predictor steps.
//!
//! A predictor step `θ̂ = θ + Δt·∇R(θ)(g ⊙ mask)` moves the residual by
//! approximately `Δt·K g`, so one Jacobian-vector product and one extra
//! residual evaluation give a probe `K g` without forming `∇R`. From it we
//! build the rank-two sketch `K̂ = (K̃ + K̃ᵀ)/2` with `K̃ = (Kg) gᵀ`, the
//! Hutchinson trace `gᵀKg`, Monte Carlo means, and a moving average that
//! tracks the kernel during training.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ntk_exact::{block_traces, trace_ratio_weights, LossWeights, NtkMatrix};
use crate::par;
use crate::problems::{GroupLayout, ResidualSystem};
use crate::rng::StreamId;

/// Samples per fixed reduction chunk in Monte Carlo means.
const MC_CHUNK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SketchConfig {
    /// Predictor step size `Δt`.
    pub dt: f64,
    /// Residuals with `|R_i| ≤ mask_eps` are excluded from the predictor step.
    pub mask_eps: f64,
}

impl Default for SketchConfig {
    fn default() -> Self {
        Self {
            dt: 1e-4,
            mask_eps: 1e-12,
        }
    }
}

impl SketchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "sketch dt must be positive, got {}",
                self.dt
            )));
        }
        if !(self.mask_eps >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "mask threshold must be nonnegative, got {}",
                self.mask_eps
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AltTraceConfig {
    pub eps: f64,
}

impl AltTraceConfig {
    pub fn new(eps: f64) -> Result<Self> {
        if !(eps > 0.0) || !eps.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "perturbation scale must be positive, got {eps}"
            )));
        }
        Ok(Self { eps })
    }
}

/// One predictor-step sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SketchSample {
    pub probe: Vec<f64>,
    /// Approximation of `K g`.
    pub matvec: Vec<f64>,
    /// `gᵀ(Kg)`.
    pub trace: f64,
    /// `K̂ = (K̃+K̃ᵀ)/2`, present when the full matrix was requested.
    pub k_hat: Option<NtkMatrix>,
    pub layout: GroupLayout,
}

impl SketchSample {
    /// Block traces of `K̂`; its diagonal is `(Kg)_i g_i`.
    pub fn block_traces(&self) -> Vec<f64> {
        self.layout
            .ranges()
            .map(|r| r.map(|i| self.matvec[i] * self.probe[i]).sum())
            .collect()
    }
}

/// `K̂_{ai} = (m_a g_i + m_i g_a)/2`, symmetric bit for bit.
pub fn symmetric_sketch(matvec: &[f64], probe: &[f64], layout: &GroupLayout) -> Result<NtkMatrix> {
    let n = probe.len();
    let mut k = NtkMatrix::zeros(layout.clone());
    let v = k.values_mut();
    for a in 0..n {
        for i in 0..n {
            v[[a, i]] = 0.5 * (matvec[a] * probe[i] + matvec[i] * probe[a]);
        }
    }
    Ok(k)
}

pub fn draw_probe(n: usize, stream: StreamId) -> Vec<f64> {
    let mut rng = stream.rng();
    (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
}

/// `(R(θ̂) − R(θ))/Δt` with `θ̂ = θ + Δt·∇R(θ)(g ⊙ mask)`, given `r0 = R(θ)`.
pub fn sketch_matvec_cached<S: ResidualSystem + ?Sized>(
    sys: &S,
    theta: &[f64],
    r0: &[f64],
    g: &[f64],
    cfg: &SketchConfig,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    let n = sys.layout().n();
    if g.len() != n || r0.len() != n {
        return Err(Error::DimensionMismatch {
            binding: "probe",
            expected: n,
            got: g.len().min(r0.len()),
        });
    }
    let step = sys.jvp(theta, &mask_probe(g, r0, cfg))?;
    let theta_hat: Vec<f64> = theta
        .iter()
        .zip(&step)
        .map(|(t, s)| t + cfg.dt * s)
        .collect();
    let r1 = sys.residual(&theta_hat)?;
    Ok(r1.iter().zip(r0).map(|(a, b)| (a - b) / cfg.dt).collect())
}

/// `g ⊙ 1{|R_i| > ε₀}`.
pub fn mask_probe(g: &[f64], r0: &[f64], cfg: &SketchConfig) -> Vec<f64> {
    g.iter()
        .zip(r0)
        .map(|(gi, ri)| if ri.abs() > cfg.mask_eps { *gi } else { 0.0 })
        .collect()
}

pub fn sketch_matvec<S: ResidualSystem + ?Sized>(
    sys: &S,
    theta: &[f64],
    g: &[f64],
    cfg: &SketchConfig,
) -> Result<Vec<f64>> {
    let r0 = sys.residual(theta)?;
    sketch_matvec_cached(sys, theta, &r0, g, cfg)
}

/// One sample with probe `g ~ N(0, Iₙ)` drawn from `stream`. `r0` is the
/// cached `R(θ)`; the sample costs one Jacobian-vector product and one
/// residual evaluation.
pub fn single_sample_sketch<S: ResidualSystem + ?Sized>(
    sys: &S,
    theta: &[f64],
    r0: &[f64],
    cfg: &SketchConfig,
    stream: StreamId,
    full_matrix: bool,
) -> Result<SketchSample> {
    let layout = sys.layout().clone();
    // the stored probe is masked so K̂, its trace and the predictor agree
    let probe = mask_probe(&draw_probe(layout.n(), stream), r0, cfg);
    let matvec = sketch_matvec_cached(sys, theta, r0, &probe, cfg)?;
    let trace = probe.iter().zip(&matvec).map(|(g, m)| g * m).sum();
    let k_hat = if full_matrix {
        Some(symmetric_sketch(&matvec, &probe, &layout)?)
    } else {
        None
    };
    Ok(SketchSample {
        probe,
        matvec,
        trace,
        k_hat,
        layout,
    })
}

/// Entrywise `max(K̂, 0)`.
pub fn clip_nonnegative(k: &NtkMatrix) -> NtkMatrix {
    let mut out = k.clone();
    out.values_mut().mapv_inplace(|v| v.max(0.0));
    out
}

/// Mean of `samples` independent sketches (sample `j` uses `stream.child(j)`),
/// reduced in a fixed order.
pub fn monte_carlo_average<S: ResidualSystem + ?Sized>(
    sys: &S,
    theta: &[f64],
    r0: &[f64],
    cfg: &SketchConfig,
    samples: usize,
    stream: StreamId,
) -> Result<(NtkMatrix, f64)> {
    if samples == 0 {
        return Err(Error::InvalidConfig(
            "Monte Carlo needs at least one sample".into(),
        ));
    }
    let layout = sys.layout().clone();
    let n = layout.n();
    let failure = std::sync::Mutex::new(None);
    let sum = par::chunked_vec_sum(samples, MC_CHUNK, n * n + 1, |j, acc| {
        let g = mask_probe(&draw_probe(n, stream.child(j as u64)), r0, cfg);
        match sketch_matvec_cached(sys, theta, r0, &g, cfg) {
            Ok(m) => {
                for a in 0..n {
                    for i in 0..n {
                        acc[a * n + i] += 0.5 * (m[a] * g[i] + m[i] * g[a]);
                    }
                }
                acc[n * n] += g.iter().zip(&m).map(|(x, y)| x * y).sum::<f64>();
            }
            Err(e) => *failure.lock().unwrap() = Some(e),
        }
    });
    if let Some(e) = failure.into_inner().unwrap() {
        return Err(e);
    }
    let inv = 1.0 / samples as f64;
    let values =
        ndarray::Array2::from_shape_vec((n, n), sum[..n * n].iter().map(|v| v * inv).collect())
            .expect("n×n buffer");
    Ok((NtkMatrix::new(values, layout)?, sum[n * n] * inv))
}

/// Mean per-group block traces and total trace of `samples` sketches.
pub fn monte_carlo_traces<S: ResidualSystem + ?Sized>(
    sys: &S,
    theta: &[f64],
    r0: &[f64],
    cfg: &SketchConfig,
    samples: usize,
    stream: StreamId,
) -> Result<(Vec<f64>, f64)> {
    if samples == 0 {
        return Err(Error::InvalidConfig(
            "Monte Carlo needs at least one sample".into(),
        ));
    }
    let layout = sys.layout().clone();
    let groups = layout.num_groups();
    let failure = std::sync::Mutex::new(None);
    let sum =
        par::chunked_vec_sum(
            samples,
            MC_CHUNK,
            groups + 1,
            |j, acc| match single_sample_sketch(sys, theta, r0, cfg, stream.child(j as u64), false)
            {
                Ok(s) => {
                    for (a, t) in acc.iter_mut().zip(s.block_traces()) {
                        *a += t;
                    }
                    acc[groups] += s.trace;
                }
                Err(e) => *failure.lock().unwrap() = Some(e),
            },
        );
    if let Some(e) = failure.into_inner().unwrap() {
        return Err(e);
    }
    let inv = 1.0 / samples as f64;
    Ok((
        sum[..groups].iter().map(|v| v * inv).collect(),
        sum[groups] * inv,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AccumulatorMode {
    Full,
    Traces,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Estimate {
    Full(NtkMatrix),
    Traces(Vec<f64>),
}

/// Exponential moving average `K̂_t = (1−α)K̂_{t−1} + αK̂⁽¹⁾`.
#[derive(Debug, Clone, PartialEq)]
pub struct SketchAccumulator {
    alpha: f64,
    estimate: Estimate,
    layout: GroupLayout,
    samples: usize,
}

impl SketchAccumulator {
    pub fn new(
        alpha: f64,
        estimate: Estimate,
        layout: GroupLayout,
        samples: usize,
    ) -> Result<Self> {
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "moving-average decay must lie in (0,1], got {alpha}"
            )));
        }
        match &estimate {
            Estimate::Full(k) if k.layout() != &layout => return Err(Error::LayoutMismatch),
            Estimate::Traces(t) if t.len() != layout.num_groups() => {
                return Err(Error::LayoutMismatch)
            }
            _ => {}
        }
        Ok(Self {
            alpha,
            estimate,
            layout,
            samples,
        })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn mode(&self) -> AccumulatorMode {
        match self.estimate {
            Estimate::Full(_) => AccumulatorMode::Full,
            Estimate::Traces(_) => AccumulatorMode::Traces,
        }
    }

    pub fn estimate(&self) -> &Estimate {
        &self.estimate
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    pub fn layout(&self) -> &GroupLayout {
        &self.layout
    }

    pub fn block_traces(&self) -> Vec<f64> {
        match &self.estimate {
            Estimate::Full(k) => block_traces(k),
            Estimate::Traces(t) => t.clone(),
        }
    }

    pub fn trace(&self) -> f64 {
        self.block_traces().iter().sum()
    }

    /// In-place form of [`moving_average_update`].
    pub fn update(&mut self, sample: &SketchSample) -> Result<()> {
        if sample.layout != self.layout {
            return Err(Error::LayoutMismatch);
        }
        let a = self.alpha;
        match &mut self.estimate {
            Estimate::Full(k) => {
                let s = sample.k_hat.as_ref().ok_or_else(|| {
                    Error::InvalidConfig("full-matrix accumulator needs full-matrix samples".into())
                })?;
                k.values_mut()
                    .zip_mut_with(s.values(), |x, y| *x = (1.0 - a) * *x + a * y);
            }
            Estimate::Traces(t) => {
                for (x, y) in t.iter_mut().zip(sample.block_traces()) {
                    *x = (1.0 - a) * *x + a * y;
                }
            }
        }
        self.samples += 1;
        Ok(())
    }
}

/// Accumulator initialized with the mean of `samples` sketches at `θ₀`.
#[allow(clippy::too_many_arguments)]
pub fn moving_average_init<S: ResidualSystem + ?Sized>(
    sys: &S,
    theta0: &[f64],
    r0: &[f64],
    cfg: &SketchConfig,
    samples: usize,
    alpha: f64,
    mode: AccumulatorMode,
    stream: StreamId,
) -> Result<SketchAccumulator> {
    let layout = sys.layout().clone();
    let estimate = match mode {
        AccumulatorMode::Full => {
            Estimate::Full(monte_carlo_average(sys, theta0, r0, cfg, samples, stream)?.0)
        }
        AccumulatorMode::Traces => {
            Estimate::Traces(monte_carlo_traces(sys, theta0, r0, cfg, samples, stream)?.0)
        }
    };
    SketchAccumulator::new(alpha, estimate, layout, samples)
}

pub fn moving_average_update(
    mut acc: SketchAccumulator,
    sample: &SketchSample,
) -> Result<SketchAccumulator> {
    acc.update(sample)?;
    Ok(acc)
}

/// Trace-ratio weights from the estimated block traces, or `fallback` when
/// any estimated block trace is not positive.
pub fn sketch_weights(acc: &SketchAccumulator, fallback: &LossWeights) -> LossWeights {
    trace_ratio_weights(&acc.layout, &acc.block_traces()).unwrap_or_else(|_| fallback.clone())
}

/// `‖(R(θ+h) − R(θ))/ε‖²` with `h ~ N(0, ε² I_p)`; `r0` is the cached `R(θ)`.
pub fn alt_trace_estimate<S: ResidualSystem + ?Sized>(
    sys: &S,
    theta: &[f64],
    r0: &[f64],
    cfg: &AltTraceConfig,
    stream: StreamId,
) -> Result<f64> {
    let cfg = AltTraceConfig::new(cfg.eps)?;
    let mut rng = stream.rng();
    let shifted: Vec<f64> = theta
        .iter()
        .map(|t| {
            let z: f64 = StandardNormal.sample(&mut rng);
            t + cfg.eps * z
        })
        .collect();
    let r1 = sys.residual(&shifted)?;
    Ok(r1
        .iter()
        .zip(r0)
        .map(|(a, b)| {
            let d = (a - b) / cfg.eps;
            d * d
        })
        .sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ntk_exact::{ntk, Jacobian};
    use crate::problems::LinearResidual;
    use ndarray::{arr1, Array2};

    fn identity_system(n: usize) -> LinearResidual {
        let layout = GroupLayout::from_counts(&[("D", n - 1), ("B", 1)]).unwrap();
        LinearResidual::new(Jacobian::from_columns(Array2::eye(n)), vec![1.0; n], layout).unwrap()
    }

    #[test]
    fn identity_trace_is_probe_norm() {
        let sys = identity_system(5);
        let theta = vec![0.0; 5];
        let r0 = sys.residual(&theta).unwrap();
        let s = single_sample_sketch(
            &sys,
            &theta,
            &r0,
            &SketchConfig::default(),
            StreamId::new(1, 3),
            true,
        )
        .unwrap();
        let g2: f64 = s.probe.iter().map(|g| g * g).sum();
        assert!((s.trace - g2).abs() < 1e-9 * g2);
        let k = s.k_hat.unwrap();
        assert_eq!(k.values(), &k.values().t());
    }

    #[test]
    fn zero_probe_gives_zero_matvec() {
        let sys = identity_system(3);
        let m = sketch_matvec(&sys, &[0.5, 0.1, 0.2], &[0.0; 3], &SketchConfig::default()).unwrap();
        assert_eq!(m, vec![0.0; 3]);
    }

    #[test]
    fn clip_examples() {
        let layout = GroupLayout::from_counts(&[("D", 2)]).unwrap();
        let neg = NtkMatrix::new(Array2::from_elem((2, 2), -1.0), layout.clone()).unwrap();
        assert_eq!(
            clip_nonnegative(&neg).values(),
            &Array2::<f64>::zeros((2, 2))
        );
        let pos = NtkMatrix::new(ndarray::arr2(&[[2.0, 1.0], [1.0, 2.0]]), layout).unwrap();
        assert_eq!(clip_nonnegative(&pos), pos);
    }

    #[test]
    fn accumulator_alpha_one_tracks_newest_sample() {
        let sys = identity_system(4);
        let theta = vec![0.0; 4];
        let r0 = sys.residual(&theta).unwrap();
        let cfg = SketchConfig::default();
        let mut acc = moving_average_init(
            &sys,
            &theta,
            &r0,
            &cfg,
            1,
            1.0,
            AccumulatorMode::Full,
            StreamId::new(0, 3),
        )
        .unwrap();
        for j in 0..3 {
            let s =
                single_sample_sketch(&sys, &theta, &r0, &cfg, StreamId::new(9, j), true).unwrap();
            acc = moving_average_update(acc, &s).unwrap();
            assert_eq!(acc.estimate(), &Estimate::Full(s.k_hat.clone().unwrap()));
        }
    }

    #[test]
    fn traces_init_matches_full_init() {
        let sys = identity_system(4);
        let theta = vec![0.3; 4];
        let r0 = sys.residual(&theta).unwrap();
        let cfg = SketchConfig::default();
        let s = StreamId::new(4, 3);
        let full = moving_average_init(&sys, &theta, &r0, &cfg, 37, 0.1, AccumulatorMode::Full, s)
            .unwrap();
        let tr = moving_average_init(&sys, &theta, &r0, &cfg, 37, 0.1, AccumulatorMode::Traces, s)
            .unwrap();
        for (a, b) in full.block_traces().iter().zip(tr.block_traces()) {
            assert!((a - b).abs() < 1e-12 * (1.0 + a.abs()));
        }
    }

    #[test]
    fn sketch_weights_match_exact_and_fall_back() {
        let layout = GroupLayout::from_counts(&[("D", 2), ("B", 2)]).unwrap();
        let k = NtkMatrix::new(
            Array2::from_diag(&arr1(&[3.0, 3.0, 1.0, 1.0])),
            layout.clone(),
        )
        .unwrap();
        let acc = SketchAccumulator::new(0.5, Estimate::Full(k), layout.clone(), 1).unwrap();
        let fallback = LossWeights::ones(&layout);
        let w = sketch_weights(&acc, &fallback);
        assert!((w.values()[0] - 8.0 / 6.0).abs() < 1e-15 && w.values()[1] == 4.0);
        let bad =
            SketchAccumulator::new(0.5, Estimate::Traces(vec![1.0, -0.5]), layout, 1).unwrap();
        assert_eq!(sketch_weights(&bad, &fallback), fallback);
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(SketchConfig {
            dt: 0.0,
            mask_eps: 0.0
        }
        .validate()
        .is_err());
        assert!(AltTraceConfig::new(-1.0).is_err());
        let layout = GroupLayout::from_counts(&[("D", 1)]).unwrap();
        assert!(SketchAccumulator::new(0.0, Estimate::Traces(vec![1.0]), layout, 1).is_err());
    }

    #[test]
    fn alt_trace_of_constant_residual_is_zero() {
        let layout = GroupLayout::from_counts(&[("D", 3)]).unwrap();
        let sys = LinearResidual::new(
            Jacobian::from_columns(Array2::zeros((3, 2))),
            vec![1.0, 2.0, 3.0],
            layout,
        )
        .unwrap();
        let theta = [0.4, -0.2];
        let r0 = sys.residual(&theta).unwrap();
        let v = alt_trace_estimate(
            &sys,
            &theta,
            &r0,
            &AltTraceConfig::new(0.1).unwrap(),
            StreamId::new(0, 6),
        )
        .unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn linear_matvec_is_exact() {
        let layout = GroupLayout::from_counts(&[("D", 2), ("B", 1)]).unwrap();
        let j = Jacobian::from_pn(ndarray::arr2(&[[1.0, 2.0, 0.5], [-1.0, 0.0, 3.0]]).view());
        let sys = LinearResidual::new(j.clone(), vec![0.1, 0.2, 0.3], layout.clone()).unwrap();
        let k = ntk(&j, &layout).unwrap();
        let g = [0.3, -1.2, 0.7];
        let kg = k.values().dot(&arr1(&g));
        let norm = kg.dot(&kg).sqrt();
        for dt in [1e-3, 1e-1, 1.0, 10.0] {
            let m = sketch_matvec(
                &sys,
                &[0.2, 0.4],
                &g,
                &SketchConfig {
                    dt,
                    mask_eps: 1e-12,
                },
            )
            .unwrap();
            let err: f64 = m
                .iter()
                .zip(kg.iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            assert!(err <= 1e-12 * norm, "dt={dt} err={err}");
        }
    }
}
