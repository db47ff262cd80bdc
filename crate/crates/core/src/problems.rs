//! Residual assemblies for the 1D Poisson problem, the 1D wave equation and
//! quadratically parameterized regression.
//!
//! A residual vector is partitioned into named groups (interior first). Every
//! residual is `Σ c·D u_θ(x) − target(x)` for a group-specific list of
//! derivative terms, so the same machinery serves all groups.

use std::borrow::Cow;
use std::f64::consts::{E, PI, SQRT_2};
use std::ops::Range;
use std::sync::atomic::{AtomicUsize, Ordering};

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Component, Derivative, GraphBuilder, Plan, ScalarGraph, Workspace};
use crate::error::{Error, Result};
use crate::model::{compile, init_xavier, DenseMlp, MlpConfig, ParamVector};
use crate::ntk_exact::Jacobian;
use crate::par;
use crate::rng::{purpose, StreamId};

/// Points per batch in the dense engine; fixed so reductions do not depend on
/// the number of workers.
const CHUNK: usize = 128;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupLayout {
    groups: Vec<(String, usize)>,
}

impl GroupLayout {
    /// The first group is the interior group.
    pub fn new(groups: Vec<(String, usize)>) -> Result<Self> {
        if groups.is_empty() {
            return Err(Error::Schema("layout has no groups".into()));
        }
        for (i, (name, _)) in groups.iter().enumerate() {
            if groups[..i].iter().any(|(n, _)| n == name) {
                return Err(Error::Schema(format!("duplicate group `{name}`")));
            }
        }
        let layout = Self { groups };
        if layout.n() == 0 {
            return Err(Error::Schema("layout has no residuals".into()));
        }
        Ok(layout)
    }

    pub fn from_counts(groups: &[(&str, usize)]) -> Result<Self> {
        Self::new(groups.iter().map(|(n, c)| (n.to_string(), *c)).collect())
    }

    pub fn n(&self) -> usize {
        self.groups.iter().map(|g| g.1).sum()
    }

    pub fn num_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn interior(&self) -> &str {
        &self.groups[0].0
    }

    pub fn name(&self, g: usize) -> &str {
        &self.groups[g].0
    }

    pub fn count(&self, g: usize) -> usize {
        self.groups[g].1
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.groups.iter().map(|g| g.0.as_str())
    }

    pub fn groups(&self) -> impl Iterator<Item = (&str, usize)> {
        self.groups.iter().map(|g| (g.0.as_str(), g.1))
    }

    pub fn index(&self, name: &str) -> Result<usize> {
        self.groups
            .iter()
            .position(|g| g.0 == name)
            .ok_or_else(|| Error::UnknownGroup(name.to_owned()))
    }

    pub fn ranges(&self) -> impl Iterator<Item = Range<usize>> + '_ {
        let mut start = 0;
        self.groups.iter().map(move |g| {
            let r = start..start + g.1;
            start += g.1;
            r
        })
    }

    pub fn range_of(&self, g: usize) -> Range<usize> {
        self.ranges().nth(g).expect("group index in range")
    }

    pub fn range(&self, name: &str) -> Result<Range<usize>> {
        Ok(self.range_of(self.index(name)?))
    }

    /// Group index of residual `i`.
    pub fn group_of(&self, i: usize) -> usize {
        self.ranges()
            .position(|r| r.contains(&i))
            .expect("index below n")
    }

    /// `name:k` labels for every residual.
    pub fn labels(&self) -> Vec<String> {
        self.groups
            .iter()
            .flat_map(|(name, c)| (0..*c).map(move |k| format!("{name}:{k}")))
            .collect()
    }
}

/// Collocation points grouped as in a [`GroupLayout`].
#[derive(Debug, Clone, PartialEq)]
pub struct CollocationSet {
    layout: GroupLayout,
    dim: usize,
    points: Vec<Array2<f64>>,
}

impl CollocationSet {
    pub fn new(layout: GroupLayout, dim: usize, points: Vec<Array2<f64>>) -> Result<Self> {
        if points.len() != layout.num_groups() {
            return Err(Error::DimensionMismatch {
                binding: "point groups",
                expected: layout.num_groups(),
                got: points.len(),
            });
        }
        for (g, p) in points.iter().enumerate() {
            if p.nrows() != layout.count(g) || p.ncols() != dim {
                return Err(Error::Schema(format!(
                    "group `{}` expects {}×{} points, got {}×{}",
                    layout.name(g),
                    layout.count(g),
                    dim,
                    p.nrows(),
                    p.ncols()
                )));
            }
        }
        Ok(Self {
            layout,
            dim,
            points,
        })
    }

    /// Builds a set from nested coordinate lists, one list per group.
    pub fn from_lists(layout: GroupLayout, dim: usize, lists: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        let points = lists
            .into_iter()
            .map(|g| {
                let rows = g.len();
                let flat: Vec<f64> = g.into_iter().flatten().collect();
                Array2::from_shape_vec((rows, dim), flat)
                    .map_err(|e| Error::Schema(format!("ragged point list: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(layout, dim, points)
    }

    pub fn layout(&self) -> &GroupLayout {
        &self.layout
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn group(&self, g: usize) -> ArrayView2<'_, f64> {
        self.points[g].view()
    }

    pub fn group_by_name(&self, name: &str) -> Result<ArrayView2<'_, f64>> {
        Ok(self.group(self.layout.index(name)?))
    }

    /// Reorders the points of group `g` so that new row `k` is old row `perm[k]`.
    pub fn permute_group(&mut self, g: usize, perm: &[usize]) {
        let old = self.points[g].clone();
        for (k, &src) in perm.iter().enumerate() {
            self.points[g].row_mut(k).assign(&old.row(src));
        }
    }
}

/// `R(θ)` in layout order.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualVector {
    values: Vec<f64>,
    layout: GroupLayout,
}

impl ResidualVector {
    pub fn new(values: Vec<f64>, layout: GroupLayout) -> Result<Self> {
        if values.len() != layout.n() {
            return Err(Error::DimensionMismatch {
                binding: "residual",
                expected: layout.n(),
                got: values.len(),
            });
        }
        Ok(Self { values, layout })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn layout(&self) -> &GroupLayout {
        &self.layout
    }

    pub fn group(&self, name: &str) -> Result<&[f64]> {
        Ok(&self.values[self.layout.range(name)?])
    }

    pub fn norm_sq(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProblemKind {
    Poisson1d,
    Wave1d,
    QuadraticRegression,
}

impl ProblemKind {
    pub fn name(&self) -> &'static str {
        match self {
            ProblemKind::Poisson1d => "poisson1d",
            ProblemKind::Wave1d => "wave1d",
            ProblemKind::QuadraticRegression => "quadratic-regression",
        }
    }
}

/// Derivative terms defining one residual group.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupSchema {
    pub name: &'static str,
    pub terms: Vec<(Derivative, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProblemSpec {
    pub kind: ProblemKind,
    /// Lower corner of the domain, one entry per input coordinate.
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    /// `c²` in `u_tt − c² u_xx = 0`.
    pub wave_speed_sq: f64,
    /// Regression data `(x_i, y_i)`.
    pub data: Vec<(f64, f64)>,
}

/// Parameters with `(θ ⊙ θ)·(1, x, x²) = πx² + ex + √2`.
pub fn quadratic_optimum() -> [f64; 3] {
    [SQRT_2.sqrt(), E.sqrt(), PI.sqrt()]
}

/// Feature map `(1, x, x²)`.
pub fn quadratic_features(x: f64) -> [f64; 3] {
    [1.0, x, x * x]
}

pub fn quadratic_truth(x: f64) -> f64 {
    PI * x * x + E * x + SQRT_2
}

impl ProblemSpec {
    /// `u_xx = −16π² sin(4πx)` on (0,1) with zero Dirichlet data.
    pub fn poisson1d() -> Self {
        Self {
            kind: ProblemKind::Poisson1d,
            lower: vec![0.0],
            upper: vec![1.0],
            wave_speed_sq: 0.0,
            data: Vec::new(),
        }
    }

    /// `u_tt − 4u_xx = 0` on (0,1)², coordinates ordered `(x, t)`.
    pub fn wave1d() -> Self {
        Self {
            kind: ProblemKind::Wave1d,
            lower: vec![0.0, 0.0],
            upper: vec![1.0, 1.0],
            wave_speed_sq: 4.0,
            data: Vec::new(),
        }
    }

    /// `points` equispaced inputs on [−1,1] with `y = f(x) + ξ`, `ξ ~ N(0, σ²)`.
    pub fn quadratic_regression(points: usize, sigma: f64, noise: StreamId) -> Result<Self> {
        if points == 0 {
            return Err(Error::InvalidConfig(
                "regression needs at least one point".into(),
            ));
        }
        let normal = Normal::new(0.0, sigma)
            .map_err(|e| Error::InvalidConfig(format!("noise level {sigma}: {e}")))?;
        let mut rng = noise.rng();
        let data = (0..points)
            .map(|i| {
                let x = if points == 1 {
                    0.0
                } else {
                    -1.0 + 2.0 * i as f64 / (points - 1) as f64
                };
                let xi = if sigma == 0.0 {
                    0.0
                } else {
                    normal.sample(&mut rng)
                };
                (x, quadratic_truth(x) + xi)
            })
            .collect();
        Ok(Self {
            kind: ProblemKind::QuadraticRegression,
            lower: vec![-1.0],
            upper: vec![1.0],
            wave_speed_sq: 0.0,
            data,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.lower.len()
    }

    /// Width of a collocation tuple (regression points also carry `y`).
    pub fn point_dim(&self) -> usize {
        match self.kind {
            ProblemKind::QuadraticRegression => 2,
            _ => self.input_dim(),
        }
    }

    pub fn group_schema(&self) -> Vec<GroupSchema> {
        use Derivative::*;
        match self.kind {
            ProblemKind::Poisson1d => vec![
                GroupSchema {
                    name: "D",
                    terms: vec![(Second(0, 0), 1.0)],
                },
                GroupSchema {
                    name: "B1",
                    terms: vec![(Value, 1.0)],
                },
                GroupSchema {
                    name: "B2",
                    terms: vec![(Value, 1.0)],
                },
            ],
            ProblemKind::Wave1d => vec![
                GroupSchema {
                    name: "D",
                    terms: vec![(Second(1, 1), 1.0), (Second(0, 0), -self.wave_speed_sq)],
                },
                GroupSchema {
                    name: "Di",
                    terms: vec![(First(1), 1.0)],
                },
                GroupSchema {
                    name: "Bi",
                    terms: vec![(Value, 1.0)],
                },
                GroupSchema {
                    name: "B1",
                    terms: vec![(Value, 1.0)],
                },
                GroupSchema {
                    name: "B2",
                    terms: vec![(Value, 1.0)],
                },
            ],
            ProblemKind::QuadraticRegression => vec![GroupSchema {
                name: "data",
                terms: vec![(Value, 1.0)],
            }],
        }
    }

    pub fn check_layout(&self, layout: &GroupLayout) -> Result<()> {
        let schema = self.group_schema();
        let expected: Vec<&str> = schema.iter().map(|g| g.name).collect();
        if !layout.names().eq(expected.iter().copied()) {
            if let Some(bad) = layout.names().find(|n| !expected.contains(n)) {
                return Err(Error::UnknownGroup(bad.to_owned()));
            }
            return Err(Error::Schema(format!(
                "{} expects groups {:?}",
                self.kind.name(),
                expected
            )));
        }
        if self.kind == ProblemKind::QuadraticRegression && layout.count(0) != self.data.len() {
            return Err(Error::Schema(format!(
                "regression data has {} points, layout asks for {}",
                self.data.len(),
                layout.count(0)
            )));
        }
        Ok(())
    }

    /// Point counts used by the experiments.
    pub fn default_layout(&self) -> GroupLayout {
        let counts: Vec<(&str, usize)> = match self.kind {
            ProblemKind::Poisson1d => vec![("D", 2), ("B1", 1), ("B2", 1)],
            ProblemKind::Wave1d => vec![
                ("D", 300),
                ("Di", 300),
                ("Bi", 100),
                ("B1", 100),
                ("B2", 100),
            ],
            ProblemKind::QuadraticRegression => vec![("data", self.data.len())],
        };
        GroupLayout::from_counts(&counts).expect("default layouts are valid")
    }

    /// Right-hand side of the interior equation.
    pub fn forcing(&self, x: &[f64]) -> f64 {
        match self.kind {
            ProblemKind::Poisson1d => -16.0 * PI * PI * (4.0 * PI * x[0]).sin(),
            _ => 0.0,
        }
    }

    /// Value each residual of group `g` is compared with at point `x`.
    pub fn target(&self, g: usize, x: &[f64]) -> f64 {
        match (self.kind, g) {
            (ProblemKind::QuadraticRegression, _) => x[1],
            (_, 0) => self.forcing(x),
            (ProblemKind::Wave1d, 2) => (PI * x[0]).sin() + 0.5 * (4.0 * PI * x[0]).sin(),
            _ => 0.0,
        }
    }

    pub fn exact(&self, x: &[f64]) -> f64 {
        match self.kind {
            ProblemKind::Poisson1d => (4.0 * PI * x[0]).sin(),
            ProblemKind::Wave1d => {
                let (xx, t) = (x[0], x[1]);
                (PI * xx).sin() * (2.0 * PI * t).cos()
                    + 0.5 * (4.0 * PI * xx).sin() * (8.0 * PI * t).cos()
            }
            ProblemKind::QuadraticRegression => quadratic_truth(x[0]),
        }
    }

    /// The exact solution as a parameter-free graph, for derivative checks.
    pub fn exact_graph(&self) -> ScalarGraph {
        let mut b = GraphBuilder::new(self.input_dim(), 0);
        let x = b.input(0);
        let out = match self.kind {
            ProblemKind::Poisson1d => {
                let k = b.constant(4.0 * PI);
                let kx = b.mul(k, x);
                b.sin(kx)
            }
            ProblemKind::Wave1d => {
                let t = b.input(1);
                let mode = |b: &mut GraphBuilder, kx: f64, kt: f64, amp: f64| {
                    let cx = b.constant(kx);
                    let ct = b.constant(kt);
                    let a = b.constant(amp);
                    let px = b.mul(cx, x);
                    let pt = b.mul(ct, t);
                    let s = b.sin(px);
                    let c = b.cos(pt);
                    let sc = b.mul(s, c);
                    b.mul(a, sc)
                };
                let m1 = mode(&mut b, PI, 2.0 * PI, 1.0);
                let m2 = mode(&mut b, 4.0 * PI, 8.0 * PI, 0.5);
                b.add(m1, m2)
            }
            ProblemKind::QuadraticRegression => {
                let (c2, c1, c0) = (b.constant(PI), b.constant(E), b.constant(SQRT_2));
                let x2 = b.powi(x, 2);
                let a = b.mul(c2, x2);
                let l = b.mul(c1, x);
                let s = b.add(a, l);
                b.add(s, c0)
            }
        };
        b.output(out);
        b.build().expect("exact-solution graph is well formed")
    }

    /// `(θ ⊙ θ)·(1, x, x²)` as a graph with three parameters.
    pub fn quadratic_graph() -> ScalarGraph {
        let mut b = GraphBuilder::new(1, 3);
        let x = b.input(0);
        let feats = [b.constant(1.0), x, b.powi(x, 2)];
        let mut acc = None;
        for (j, &f) in feats.iter().enumerate() {
            let t = b.param(j);
            let t2 = b.mul(t, t);
            let term = b.mul(t2, f);
            acc = Some(match acc {
                None => term,
                Some(prev) => b.add(prev, term),
            });
        }
        b.output(acc.unwrap());
        b.build().expect("quadratic graph is well formed")
    }
}

/// Draws collocation points for `layout`.
///
/// Interior points are uniform on the open domain; initial-time groups sample
/// `x` uniformly at `t = 0`; spatial boundary groups sit at the endpoints and,
/// for the wave problem, sample `t` uniformly. Regression points are the data.
pub fn sample_collocation(
    spec: &ProblemSpec,
    layout: &GroupLayout,
    stream: StreamId,
) -> Result<CollocationSet> {
    spec.check_layout(layout)?;
    let mut rng = stream.rng();
    let open = |rng: &mut rand_chacha::ChaCha8Rng| loop {
        let u: f64 = rng.random();
        if u > 0.0 {
            return u;
        }
    };
    let lists = layout
        .groups()
        .enumerate()
        .map(|(g, (_, count))| {
            (0..count)
                .map(|i| match (spec.kind, g) {
                    (ProblemKind::Poisson1d, 0) => vec![open(&mut rng)],
                    (ProblemKind::Poisson1d, 1) => vec![spec.lower[0]],
                    (ProblemKind::Poisson1d, _) => vec![spec.upper[0]],
                    (ProblemKind::Wave1d, 0) => vec![open(&mut rng), open(&mut rng)],
                    (ProblemKind::Wave1d, 1 | 2) => vec![rng.random::<f64>(), 0.0],
                    (ProblemKind::Wave1d, 3) => vec![0.0, rng.random::<f64>()],
                    (ProblemKind::Wave1d, _) => vec![1.0, rng.random::<f64>()],
                    (ProblemKind::QuadraticRegression, _) => {
                        let (x, y) = spec.data[i];
                        vec![x, y]
                    }
                })
                .collect()
        })
        .collect();
    CollocationSet::from_lists(layout.clone(), spec.point_dim(), lists)
}

/// Poisson points with the given interior locations and both endpoints.
pub fn poisson_points(interior: &[f64]) -> Result<CollocationSet> {
    let layout = GroupLayout::from_counts(&[("D", interior.len()), ("B1", 1), ("B2", 1)])?;
    CollocationSet::from_lists(
        layout,
        1,
        vec![
            interior.iter().map(|&x| vec![x]).collect(),
            vec![vec![0.0]],
            vec![vec![1.0]],
        ],
    )
}

/// Regression points: the data itself.
pub fn regression_points(spec: &ProblemSpec) -> Result<CollocationSet> {
    let layout = spec.default_layout();
    sample_collocation(spec, &layout, StreamId::new(0, purpose::COLLOCATION))
}

/// Anything with residuals `R(θ) ∈ ℝⁿ` and a residual Jacobian.
pub trait ResidualSystem: Sync {
    fn layout(&self) -> &GroupLayout;

    fn num_params(&self) -> usize;

    fn residual(&self, theta: &[f64]) -> Result<Vec<f64>>;

    /// `∇R(θ)·w ∈ ℝᵖ`, where `∇R` is p×n.
    fn jvp(&self, theta: &[f64], w: &[f64]) -> Result<Vec<f64>>;

    fn jacobian(&self, theta: &[f64]) -> Result<Jacobian>;
}

impl<S: ResidualSystem + ?Sized> ResidualSystem for &S {
    fn layout(&self) -> &GroupLayout {
        (**self).layout()
    }
    fn num_params(&self) -> usize {
        (**self).num_params()
    }
    fn residual(&self, theta: &[f64]) -> Result<Vec<f64>> {
        (**self).residual(theta)
    }
    fn jvp(&self, theta: &[f64], w: &[f64]) -> Result<Vec<f64>> {
        (**self).jvp(theta, w)
    }
    fn jacobian(&self, theta: &[f64]) -> Result<Jacobian> {
        (**self).jacobian(theta)
    }
}

/// A system that may change from step to step (fresh collocation points).
pub trait ResidualSource: Sync {
    type System<'a>: ResidualSystem
    where
        Self: 'a;

    fn at_step(&self, step: usize) -> Result<Self::System<'_>>;

    fn resamples(&self) -> bool {
        false
    }
}

/// A fixed system viewed as a source.
#[derive(Debug, Clone)]
pub struct Fixed<S>(pub S);

impl<S: ResidualSystem> ResidualSource for Fixed<S> {
    type System<'a>
        = &'a S
    where
        Self: 'a;

    fn at_step(&self, _step: usize) -> Result<&S> {
        Ok(&self.0)
    }
}

/// `R(θ) = Aᵀθ − b` for a fixed p×n matrix `A`.
#[derive(Debug, Clone)]
pub struct LinearResidual {
    jac: Jacobian,
    b: Vec<f64>,
    layout: GroupLayout,
}

impl LinearResidual {
    pub fn new(jac: Jacobian, b: Vec<f64>, layout: GroupLayout) -> Result<Self> {
        if jac.n() != layout.n() || b.len() != layout.n() {
            return Err(Error::DimensionMismatch {
                binding: "linear residual",
                expected: layout.n(),
                got: b.len(),
            });
        }
        Ok(Self { jac, b, layout })
    }

    /// First-order expansion of `sys` at `θ₀`: same value and Jacobian there.
    pub fn frozen_at<S: ResidualSystem + ?Sized>(sys: &S, theta0: &[f64]) -> Result<Self> {
        let jac = sys.jacobian(theta0)?;
        let r0 = sys.residual(theta0)?;
        let at = jac.transpose_times(theta0);
        let b = at.iter().zip(&r0).map(|(a, r)| a - r).collect();
        Self::new(jac, b, sys.layout().clone())
    }

    pub fn matrix(&self) -> &Jacobian {
        &self.jac
    }
}

impl ResidualSystem for LinearResidual {
    fn layout(&self) -> &GroupLayout {
        &self.layout
    }

    fn num_params(&self) -> usize {
        self.jac.p()
    }

    fn residual(&self, theta: &[f64]) -> Result<Vec<f64>> {
        check_len("params", self.jac.p(), theta.len())?;
        Ok(self
            .jac
            .transpose_times(theta)
            .iter()
            .zip(&self.b)
            .map(|(a, b)| a - b)
            .collect())
    }

    fn jvp(&self, theta: &[f64], w: &[f64]) -> Result<Vec<f64>> {
        check_len("params", self.jac.p(), theta.len())?;
        check_len("residual weights", self.jac.n(), w.len())?;
        Ok(self.jac.times(w))
    }

    fn jacobian(&self, theta: &[f64]) -> Result<Jacobian> {
        check_len("params", self.jac.p(), theta.len())?;
        Ok(self.jac.clone())
    }
}

/// Counts calls into the wrapped system.
#[derive(Debug, Default)]
pub struct Counted<S> {
    pub inner: S,
    pub residuals: AtomicUsize,
    pub jvps: AtomicUsize,
    pub jacobians: AtomicUsize,
}

impl<S> Counted<S> {
    pub fn new(inner: S) -> Self {
        Self {
            inner,
            residuals: AtomicUsize::new(0),
            jvps: AtomicUsize::new(0),
            jacobians: AtomicUsize::new(0),
        }
    }

    /// `(residual evaluations, Jacobian-vector products, full Jacobians)`.
    pub fn counts(&self) -> (usize, usize, usize) {
        (
            self.residuals.load(Ordering::SeqCst),
            self.jvps.load(Ordering::SeqCst),
            self.jacobians.load(Ordering::SeqCst),
        )
    }
}

impl<S: ResidualSystem> ResidualSystem for Counted<S> {
    fn layout(&self) -> &GroupLayout {
        self.inner.layout()
    }
    fn num_params(&self) -> usize {
        self.inner.num_params()
    }
    fn residual(&self, theta: &[f64]) -> Result<Vec<f64>> {
        self.residuals.fetch_add(1, Ordering::SeqCst);
        self.inner.residual(theta)
    }
    fn jvp(&self, theta: &[f64], w: &[f64]) -> Result<Vec<f64>> {
        self.jvps.fetch_add(1, Ordering::SeqCst);
        self.inner.jvp(theta, w)
    }
    fn jacobian(&self, theta: &[f64]) -> Result<Jacobian> {
        self.jacobians.fetch_add(1, Ordering::SeqCst);
        self.inner.jacobian(theta)
    }
}

fn check_len(binding: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        Err(Error::DimensionMismatch {
            binding,
            expected,
            got,
        })
    } else {
        Ok(())
    }
}

/// How derivatives are computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Engine {
    /// Batched dense jets for networks, closed forms for regression.
    #[default]
    Dense,
    /// Per-point scalar graphs.
    Graph,
}

/// A problem together with its model.
#[derive(Debug, Clone)]
pub struct Problem {
    spec: ProblemSpec,
    model: Option<MlpConfig>,
    dense: Option<DenseMlp>,
    graph: ScalarGraph,
    engine: Engine,
    plans: Vec<Plan>,
}

impl Problem {
    /// PDE problems need a network; regression uses its fixed features.
    pub fn new(spec: ProblemSpec, model: Option<MlpConfig>, engine: Engine) -> Result<Self> {
        let (dense, graph) = match (spec.kind, &model) {
            (ProblemKind::QuadraticRegression, None) => (None, ProblemSpec::quadratic_graph()),
            (ProblemKind::QuadraticRegression, Some(_)) => {
                return Err(Error::InvalidConfig(
                    "regression uses fixed quadratic features, not a network".into(),
                ))
            }
            (_, None) => return Err(Error::InvalidConfig("PDE problems need a network".into())),
            (_, Some(cfg)) => {
                if cfg.input_dim != spec.input_dim() || cfg.output_dim != 1 {
                    return Err(Error::InvalidConfig(format!(
                        "{} needs a network with {} inputs and one output",
                        spec.kind.name(),
                        spec.input_dim()
                    )));
                }
                let mut graphs = compile(cfg)?;
                (Some(DenseMlp::new(cfg)?), graphs.remove(0))
            }
        };
        let plans = spec
            .group_schema()
            .iter()
            .map(|g| Plan::new(spec.input_dim(), &g.terms))
            .collect::<Result<_>>()?;
        Ok(Self {
            spec,
            model,
            dense,
            graph,
            engine,
            plans,
        })
    }

    pub fn spec(&self) -> &ProblemSpec {
        &self.spec
    }

    pub fn model(&self) -> Option<&MlpConfig> {
        self.model.as_ref()
    }

    pub fn engine(&self) -> Engine {
        self.engine
    }

    pub fn with_engine(&self, engine: Engine) -> Self {
        Self {
            engine,
            ..self.clone()
        }
    }

    pub fn num_params(&self) -> usize {
        self.graph.num_params()
    }

    /// Xavier-initialized network, or `(1,1,1)` for regression.
    pub fn init_params(&self, seed: u64) -> Result<ParamVector> {
        match &self.model {
            Some(cfg) => init_xavier(cfg, seed),
            None => Ok(ParamVector::flat(vec![1.0; 3])),
        }
    }

    pub fn graph(&self) -> &ScalarGraph {
        &self.graph
    }

    pub fn bind<'a>(&'a self, pts: &'a CollocationSet) -> Result<ProblemSystem<'a>> {
        self.bind_cow(Cow::Borrowed(pts))
    }

    pub fn bind_owned(&self, pts: CollocationSet) -> Result<ProblemSystem<'_>> {
        self.bind_cow(Cow::Owned(pts))
    }

    fn bind_cow<'a>(&'a self, pts: Cow<'a, CollocationSet>) -> Result<ProblemSystem<'a>> {
        self.spec.check_layout(pts.layout())?;
        check_len("point dimension", self.spec.point_dim(), pts.dim())?;
        Ok(ProblemSystem { problem: self, pts })
    }

    /// `u_θ` at each row of `points`.
    pub fn predict(&self, theta: &[f64], points: ArrayView2<f64>) -> Result<Vec<f64>> {
        check_len("params", self.num_params(), theta.len())?;
        match (&self.dense, self.engine) {
            (Some(net), Engine::Dense) => {
                let n = points.nrows();
                let chunks = par::map_indexed(n.div_ceil(CHUNK), |c| {
                    let rows = points.slice(ndarray::s![c * CHUNK..((c + 1) * CHUNK).min(n), ..]);
                    net.forward(theta, rows, &[])
                        .map(|f| (0..f.batch()).map(|b| f.value(b, 0)).collect::<Vec<_>>())
                });
                Ok(chunks.into_iter().collect::<Result<Vec<_>>>()?.concat())
            }
            _ => points
                .rows()
                .into_iter()
                .map(|r| {
                    let x: Vec<f64> = r.iter().take(self.spec.input_dim()).copied().collect();
                    self.graph.evaluate(&x, theta)
                })
                .collect(),
        }
    }
}

/// A problem bound to one collocation set.
#[derive(Debug, Clone)]
pub struct ProblemSystem<'a> {
    problem: &'a Problem,
    pts: Cow<'a, CollocationSet>,
}

/// One batch of points from a single group.
#[derive(Debug, Clone, Copy)]
struct Task {
    group: usize,
    start: usize,
    end: usize,
    offset: usize,
}

impl<'a> ProblemSystem<'a> {
    pub fn points(&self) -> &CollocationSet {
        &self.pts
    }

    pub fn problem(&self) -> &Problem {
        self.problem
    }

    fn tasks(&self) -> Vec<Task> {
        let layout = self.pts.layout();
        let mut out = Vec::new();
        for (g, r) in layout.ranges().enumerate() {
            let mut s = 0;
            while s < r.len() {
                let e = (s + CHUNK).min(r.len());
                out.push(Task {
                    group: g,
                    start: s,
                    end: e,
                    offset: r.start + s,
                });
                s = e;
            }
        }
        out
    }

    fn dense_ready(&self) -> Option<&DenseMlp> {
        match self.problem.engine {
            Engine::Dense => self.problem.dense.as_ref(),
            Engine::Graph => None,
        }
    }

    fn closed_form(&self) -> bool {
        self.problem.engine == Engine::Dense
            && self.problem.spec.kind == ProblemKind::QuadraticRegression
    }

    fn target(&self, g: usize, x: &[f64]) -> f64 {
        self.problem.spec.target(g, x)
    }

    fn input<'b>(&self, row: &'b [f64]) -> &'b [f64] {
        &row[..self.problem.spec.input_dim()]
    }

    fn rows(&self, t: &Task) -> ArrayView2<'_, f64> {
        self.pts
            .group(t.group)
            .slice_move(ndarray::s![t.start..t.end, ..])
    }

    /// Row of the stacked dense output holding component `c` of point `b`.
    fn comp_row(c: Component, k: usize, batch: usize, b: usize) -> usize {
        let block = match c {
            Component::Value => 0,
            Component::D1(q) => 1 + q,
            Component::D2(q) => 1 + k + q,
        };
        block * batch + b
    }

    fn dense_task_residual(&self, net: &DenseMlp, theta: &[f64], t: &Task) -> Result<Vec<f64>> {
        let plan = &self.problem.plans[t.group];
        let rows = self.rows(t);
        let inputs = rows.slice(ndarray::s![.., ..self.problem.spec.input_dim()]);
        let f = net.forward(theta, inputs, &plan.dirs)?;
        let k = plan.dirs.len();
        Ok((0..rows.nrows())
            .map(|b| {
                let mut v = 0.0;
                for &(c, w) in &plan.comps {
                    v += w * f.output_row(Self::comp_row(c, k, f.batch(), b));
                }
                v - self.target(t.group, rows.row(b).as_slice().expect("standard layout"))
            })
            .collect())
    }

    /// Forward and backward over one task with per-point adjoint scales.
    fn dense_task_backward(
        &self,
        net: &DenseMlp,
        theta: &[f64],
        t: &Task,
        scale: &[f64],
    ) -> Result<(crate::model::JetForward, crate::model::JetAdjoints)> {
        let plan = &self.problem.plans[t.group];
        let rows = self.rows(t);
        let inputs = rows.slice(ndarray::s![.., ..self.problem.spec.input_dim()]);
        let f = net.forward(theta, inputs, &plan.dirs)?;
        let k = plan.dirs.len();
        let mut adj = Array2::zeros((f.components() * f.batch(), 1));
        for (b, s) in scale.iter().enumerate() {
            for &(c, w) in &plan.comps {
                adj[[Self::comp_row(c, k, f.batch(), b), 0]] += w * s;
            }
        }
        let a = net.backward(theta, &f, adj);
        Ok((f, a))
    }

    fn graph_functional(
        &self,
        theta: &[f64],
        g: usize,
        row: &[f64],
        grad: Option<(f64, &mut [f64])>,
        ws: &mut Workspace,
    ) -> Result<f64> {
        let terms = &self.problem.spec.group_schema()[g].terms;
        let v = self
            .problem
            .graph
            .functional(self.input(row), theta, 0, terms, grad, ws)?;
        Ok(v - self.target(g, row))
    }

    fn point(&self, i: usize) -> (usize, Vec<f64>) {
        let layout = self.pts.layout();
        let g = layout.group_of(i);
        let local = i - layout.range_of(g).start;
        (g, self.pts.group(g).row(local).to_vec())
    }
}

impl ResidualSystem for ProblemSystem<'_> {
    fn layout(&self) -> &GroupLayout {
        self.pts.layout()
    }

    fn num_params(&self) -> usize {
        self.problem.num_params()
    }

    fn residual(&self, theta: &[f64]) -> Result<Vec<f64>> {
        check_len("params", self.num_params(), theta.len())?;
        if self.closed_form() {
            let pts = self.pts.group(0);
            return Ok(pts
                .rows()
                .into_iter()
                .map(|r| {
                    let u = quadratic_features(r[0]);
                    (0..3).map(|j| theta[j] * theta[j] * u[j]).sum::<f64>() - r[1]
                })
                .collect());
        }
        if let Some(net) = self.dense_ready() {
            let tasks = self.tasks();
            let parts = par::map_indexed(tasks.len(), |i| {
                self.dense_task_residual(net, theta, &tasks[i])
            });
            return Ok(parts.into_iter().collect::<Result<Vec<_>>>()?.concat());
        }
        let n = self.layout().n();
        par::map_indexed(n, |i| {
            let (g, row) = self.point(i);
            self.graph_functional(theta, g, &row, None, &mut Workspace::new())
        })
        .into_iter()
        .collect()
    }

    fn jvp(&self, theta: &[f64], w: &[f64]) -> Result<Vec<f64>> {
        check_len("params", self.num_params(), theta.len())?;
        check_len("residual weights", self.layout().n(), w.len())?;
        let p = self.num_params();
        if self.closed_form() {
            let mut out = vec![0.0; 3];
            for (i, r) in self.pts.group(0).rows().into_iter().enumerate() {
                let u = quadratic_features(r[0]);
                for j in 0..3 {
                    out[j] += 2.0 * theta[j] * u[j] * w[i];
                }
            }
            return Ok(out);
        }
        if let Some(net) = self.dense_ready() {
            let tasks = self.tasks();
            let parts = par::map_indexed(tasks.len(), |i| {
                let t = &tasks[i];
                let scale = &w[t.offset..t.offset + (t.end - t.start)];
                let (f, a) = self.dense_task_backward(net, theta, t, scale)?;
                let mut g = vec![0.0; p];
                net.accumulate_gradient(&f, &a, &mut g);
                Ok(g)
            });
            return Ok(par::pairwise_sum_vecs(
                parts.into_iter().collect::<Result<Vec<_>>>()?,
            ));
        }
        let n = self.layout().n();
        let failed = std::sync::Mutex::new(None);
        let sum = par::chunked_vec_sum(n, 32, p, |i, acc| {
            let (g, row) = self.point(i);
            if let Err(e) =
                self.graph_functional(theta, g, &row, Some((w[i], acc)), &mut Workspace::new())
            {
                *failed.lock().unwrap() = Some(e);
            }
        });
        match failed.into_inner().unwrap() {
            Some(e) => Err(e),
            None => Ok(sum),
        }
    }

    fn jacobian(&self, theta: &[f64]) -> Result<Jacobian> {
        check_len("params", self.num_params(), theta.len())?;
        let n = self.layout().n();
        let p = self.num_params();
        if self.closed_form() {
            let mut cols = Array2::zeros((n, 3));
            for (i, r) in self.pts.group(0).rows().into_iter().enumerate() {
                let u = quadratic_features(r[0]);
                for j in 0..3 {
                    cols[[i, j]] = 2.0 * theta[j] * u[j];
                }
            }
            return Ok(Jacobian::from_columns(cols));
        }
        let mut cols = Array2::zeros((n, p));
        if let Some(net) = self.dense_ready() {
            let tasks = self.tasks();
            let parts = par::map_indexed(tasks.len(), |i| {
                let t = &tasks[i];
                let ones = vec![1.0; t.end - t.start];
                let (f, a) = self.dense_task_backward(net, theta, t, &ones)?;
                Ok::<_, Error>(net.per_point_gradients(&f, &a))
            });
            for (t, part) in tasks.iter().zip(parts) {
                let part = part?;
                cols.slice_mut(ndarray::s![t.offset..t.offset + part.nrows(), ..])
                    .assign(&part);
            }
            return Ok(Jacobian::from_columns(cols));
        }
        let rows = par::map_indexed(n, |i| {
            let (g, row) = self.point(i);
            let mut grad = vec![0.0; p];
            self.graph_functional(
                theta,
                g,
                &row,
                Some((1.0, &mut grad)),
                &mut Workspace::new(),
            )?;
            Ok::<_, Error>(grad)
        });
        for (i, r) in rows.into_iter().enumerate() {
            cols.row_mut(i).assign(&ndarray::ArrayView1::from(&r?[..]));
        }
        Ok(Jacobian::from_columns(cols))
    }
}

/// Collocation for a training run: fixed, or redrawn at every step.
#[derive(Debug, Clone)]
pub enum PointPlan {
    Fixed(CollocationSet),
    Resample {
        layout: GroupLayout,
        stream: StreamId,
    },
}

/// A problem with a point plan, usable as a [`ResidualSource`].
#[derive(Debug, Clone)]
pub struct ProblemSource<'a> {
    pub problem: &'a Problem,
    pub points: PointPlan,
}

impl ProblemSource<'_> {
    pub fn points_at(&self, step: usize) -> Result<Cow<'_, CollocationSet>> {
        match &self.points {
            PointPlan::Fixed(p) => Ok(Cow::Borrowed(p)),
            PointPlan::Resample { layout, stream } => Ok(Cow::Owned(sample_collocation(
                &self.problem.spec,
                layout,
                stream.child(step as u64),
            )?)),
        }
    }

    pub fn layout(&self) -> &GroupLayout {
        match &self.points {
            PointPlan::Fixed(p) => p.layout(),
            PointPlan::Resample { layout, .. } => layout,
        }
    }
}

impl ResidualSource for ProblemSource<'_> {
    type System<'b>
        = ProblemSystem<'b>
    where
        Self: 'b;

    fn at_step(&self, step: usize) -> Result<ProblemSystem<'_>> {
        let pts = self.points_at(step)?;
        self.problem.bind_cow(pts)
    }

    fn resamples(&self) -> bool {
        matches!(self.points, PointPlan::Resample { .. })
    }
}

pub fn assemble_residual(
    problem: &Problem,
    theta: &[f64],
    pts: &CollocationSet,
) -> Result<ResidualVector> {
    let sys = problem.bind(pts)?;
    ResidualVector::new(sys.residual(theta)?, pts.layout().clone())
}

pub fn residual_jacobian(
    problem: &Problem,
    theta: &[f64],
    pts: &CollocationSet,
) -> Result<Jacobian> {
    problem.bind(pts)?.jacobian(theta)
}

/// `√(Σ(a−b)² / Σb²)`.
pub fn relative_l2_error(approx: &[f64], exact: &[f64]) -> Result<f64> {
    if exact.is_empty() {
        return Err(Error::EmptyGrid);
    }
    check_len("grid values", exact.len(), approx.len())?;
    let num: f64 = approx
        .iter()
        .zip(exact)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    let den: f64 = exact.iter().map(|b| b * b).sum();
    Ok((num / den).sqrt())
}

/// Relative L² error of `u_θ` against the exact solution on `grid` rows.
pub fn exact_solution_error(
    problem: &Problem,
    theta: &[f64],
    grid: ArrayView2<f64>,
) -> Result<f64> {
    if grid.nrows() == 0 {
        return Err(Error::EmptyGrid);
    }
    let approx = match problem.spec.kind {
        ProblemKind::QuadraticRegression => grid
            .rows()
            .into_iter()
            .map(|r| {
                let u = quadratic_features(r[0]);
                (0..3).map(|j| theta[j] * theta[j] * u[j]).sum()
            })
            .collect(),
        _ => problem.predict(theta, grid)?,
    };
    let exact: Vec<f64> = grid
        .rows()
        .into_iter()
        .map(|r| problem.spec.exact(r.as_slice().expect("standard layout")))
        .collect();
    relative_l2_error(&approx, &exact)
}

/// Tensor grid with `per_dim` equispaced points per coordinate over the domain.
pub fn uniform_grid(spec: &ProblemSpec, per_dim: usize) -> Array2<f64> {
    let d = spec.input_dim();
    let total = per_dim.pow(d as u32);
    let mut grid = Array2::zeros((total, d));
    for idx in 0..total {
        let mut rem = idx;
        for k in (0..d).rev() {
            let i = rem % per_dim;
            rem /= per_dim;
            let frac = if per_dim == 1 {
                0.0
            } else {
                i as f64 / (per_dim - 1) as f64
            };
            grid[[idx, k]] = spec.lower[k] + frac * (spec.upper[k] - spec.lower[k]);
        }
    }
    grid
}

#[cfg(test)]
mod tests {
    use super::*;

    fn poisson() -> Problem {
        let cfg = MlpConfig::new(1, vec![100], 1).normalized_for_box(&[0.0], &[1.0]);
        Problem::new(ProblemSpec::poisson1d(), Some(cfg), Engine::Dense).unwrap()
    }

    #[test]
    fn layout_rejects_duplicates_and_empty() {
        assert!(GroupLayout::from_counts(&[("D", 1), ("D", 2)]).is_err());
        assert!(GroupLayout::from_counts(&[("D", 0)]).is_err());
        let l = GroupLayout::from_counts(&[("D", 2), ("B", 0), ("C", 3)]).unwrap();
        assert_eq!(l.n(), 5);
        assert_eq!(l.range("C").unwrap(), 2..5);
        assert_eq!(l.group_of(2), 2);
    }

    #[test]
    fn poisson_boundary_groups_are_endpoints() {
        let spec = ProblemSpec::poisson1d();
        let layout = spec.default_layout();
        let pts = sample_collocation(&spec, &layout, StreamId::new(0, 2)).unwrap();
        assert_eq!(pts.group_by_name("B1").unwrap()[[0, 0]], 0.0);
        assert_eq!(pts.group_by_name("B2").unwrap()[[0, 0]], 1.0);
        for &x in pts.group(0).iter() {
            assert!(x > 0.0 && x < 1.0);
        }
    }

    #[test]
    fn zero_count_group_is_empty() {
        let spec = ProblemSpec::poisson1d();
        let layout = GroupLayout::from_counts(&[("D", 3), ("B1", 0), ("B2", 1)]).unwrap();
        let pts = sample_collocation(&spec, &layout, StreamId::new(1, 2)).unwrap();
        assert_eq!(pts.group(1).nrows(), 0);
        assert_eq!(pts.layout().n(), 4);
    }

    #[test]
    fn wave_layout_has_900_points() {
        let spec = ProblemSpec::wave1d();
        let pts = sample_collocation(&spec, &spec.default_layout(), StreamId::new(0, 2)).unwrap();
        assert_eq!(pts.layout().n(), 900);
        assert!(pts
            .group_by_name("Bi")
            .unwrap()
            .column(1)
            .iter()
            .all(|&t| t == 0.0));
        assert!(pts
            .group_by_name("B2")
            .unwrap()
            .column(0)
            .iter()
            .all(|&x| x == 1.0));
    }

    #[test]
    fn unknown_group_is_a_schema_error() {
        let spec = ProblemSpec::poisson1d();
        let layout = GroupLayout::from_counts(&[("D", 1), ("Top", 1), ("B2", 1)]).unwrap();
        assert!(matches!(
            sample_collocation(&spec, &layout, StreamId::new(0, 2)),
            Err(Error::UnknownGroup(_))
        ));
    }

    #[test]
    fn zero_network_residual_is_minus_forcing() {
        let p = poisson();
        let theta = ParamVector::zeros(p.model().unwrap()).unwrap();
        let pts = poisson_points(&[0.2, 0.7]).unwrap();
        let r = assemble_residual(&p, theta.values(), &pts).unwrap();
        for (i, x) in [0.2f64, 0.7].iter().enumerate() {
            let expect = 16.0 * PI * PI * (4.0 * PI * x).sin();
            assert!((r.values()[i] - expect).abs() < 1e-12);
        }
        assert_eq!(&r.values()[2..], &[0.0, 0.0]);
    }

    #[test]
    fn quadratic_optimum_fits_noiseless_data() {
        let spec = ProblemSpec::quadratic_regression(50, 0.0, StreamId::new(0, 4)).unwrap();
        let p = Problem::new(spec.clone(), None, Engine::Dense).unwrap();
        let pts = regression_points(&spec).unwrap();
        let r = assemble_residual(&p, &quadratic_optimum(), &pts).unwrap();
        assert!(r.values().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn quadratic_jacobian_column() {
        let spec = ProblemSpec {
            data: vec![(2.0, 0.0)],
            ..ProblemSpec::quadratic_regression(1, 0.0, StreamId::new(0, 4)).unwrap()
        };
        let p = Problem::new(spec.clone(), None, Engine::Dense).unwrap();
        let pts = regression_points(&spec).unwrap();
        let j = residual_jacobian(&p, &[1.0, 1.0, 1.0], &pts).unwrap();
        assert_eq!(j.column(0).to_vec(), vec![2.0, 4.0, 8.0]);
        let z = residual_jacobian(&p, &[0.0; 3], &pts).unwrap();
        assert!(z.columns().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn exact_solution_values() {
        assert!((ProblemSpec::poisson1d().exact(&[0.125]) - 1.0).abs() < 1e-15);
        let w = ProblemSpec::wave1d().exact(&[0.25, 0.0]);
        assert!((w - 2f64.sqrt() / 2.0).abs() < 1e-15);
    }

    #[test]
    fn relative_error_limits() {
        let exact = [1.0, -2.0, 3.0];
        assert_eq!(relative_l2_error(&exact, &exact).unwrap(), 0.0);
        assert_eq!(relative_l2_error(&[0.0; 3], &exact).unwrap(), 1.0);
        assert!(matches!(relative_l2_error(&[], &[]), Err(Error::EmptyGrid)));
    }

    #[test]
    fn grid_covers_corners() {
        let g = uniform_grid(&ProblemSpec::wave1d(), 3);
        assert_eq!(g.nrows(), 9);
        assert_eq!(g.row(0).to_vec(), vec![0.0, 0.0]);
        assert_eq!(g.row(8).to_vec(), vec![1.0, 1.0]);
        assert_eq!(g.row(1).to_vec(), vec![0.0, 0.5]);
    }
}
