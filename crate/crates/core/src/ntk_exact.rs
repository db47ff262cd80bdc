//! Exact neural tangent kernel `K = JᵀJ`, its group blocks, trace-ratio
//! loss weights and a cyclic Jacobi eigensolver.

use std::fmt::Write as _;
use std::ops::Range;

use ndarray::{Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::problems::GroupLayout;

/// The p×n residual Jacobian `∇R`, stored column by column (row `i` of the
/// backing array is `∇R_i`).
#[derive(Debug, Clone, PartialEq)]
pub struct Jacobian {
    cols: Array2<f64>,
}

impl Jacobian {
    /// From an `n × p` array whose rows are the columns of `∇R`.
    pub fn from_columns(cols: Array2<f64>) -> Self {
        Self { cols }
    }

    /// From a `p × n` array laid out like `∇R`.
    pub fn from_pn(j: ArrayView2<f64>) -> Self {
        Self {
            cols: j.t().to_owned(),
        }
    }

    pub fn p(&self) -> usize {
        self.cols.ncols()
    }

    pub fn n(&self) -> usize {
        self.cols.nrows()
    }

    pub fn column(&self, i: usize) -> ArrayView1<'_, f64> {
        self.cols.row(i)
    }

    /// `n × p` view (transpose of `∇R`).
    pub fn columns(&self) -> ArrayView2<'_, f64> {
        self.cols.view()
    }

    /// `∇R · w` for `w ∈ ℝⁿ`.
    pub fn times(&self, w: &[f64]) -> Vec<f64> {
        self.cols.t().dot(&ArrayView1::from(w)).to_vec()
    }

    /// `∇Rᵀ · v` for `v ∈ ℝᵖ`.
    pub fn transpose_times(&self, v: &[f64]) -> Vec<f64> {
        self.cols.dot(&ArrayView1::from(v)).to_vec()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NtkMatrix {
    values: Array2<f64>,
    layout: GroupLayout,
}

impl NtkMatrix {
    pub fn new(values: Array2<f64>, layout: GroupLayout) -> Result<Self> {
        let n = layout.n();
        if values.nrows() != n || values.ncols() != n {
            return Err(Error::DimensionMismatch {
                binding: "kernel",
                expected: n,
                got: values.nrows(),
            });
        }
        Ok(Self { values, layout })
    }

    pub fn zeros(layout: GroupLayout) -> Self {
        let n = layout.n();
        Self {
            values: Array2::zeros((n, n)),
            layout,
        }
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut Array2<f64> {
        &mut self.values
    }

    pub fn layout(&self) -> &GroupLayout {
        &self.layout
    }

    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    pub fn trace(&self) -> f64 {
        self.values.diag().sum()
    }

    pub fn frobenius(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Block `K_{ab}` as a view.
    pub fn block(&self, a: &str, b: &str) -> Result<ArrayView2<'_, f64>> {
        let ra = self.layout.range(a)?;
        let rb = self.layout.range(b)?;
        Ok(self.values.slice(ndarray::s![ra, rb]))
    }

    /// `‖self − other‖_F`.
    pub fn distance(&self, other: &NtkMatrix) -> f64 {
        (&self.values - &other.values)
            .iter()
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// Row-major CSV with a header of group-qualified indices.
    pub fn to_csv(&self) -> String {
        let labels = self.layout.labels();
        let mut out = String::new();
        let _ = writeln!(out, "row,{}", labels.join(","));
        for (i, row) in self.values.rows().into_iter().enumerate() {
            out.push_str(&labels[i]);
            for v in row {
                let _ = write!(out, ",{v:e}");
            }
            out.push('\n');
        }
        out
    }
}

/// One positive weight per residual group (block-diagonal `Λ`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    names: Vec<String>,
    values: Vec<f64>,
}

impl LossWeights {
    pub fn new(layout: &GroupLayout, values: Vec<f64>) -> Result<Self> {
        if values.len() != layout.num_groups() {
            return Err(Error::DimensionMismatch {
                binding: "weights",
                expected: layout.num_groups(),
                got: values.len(),
            });
        }
        if values.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "loss weights must be positive and finite, got {values:?}"
            )));
        }
        Ok(Self {
            names: layout.names().map(str::to_owned).collect(),
            values,
        })
    }

    pub fn ones(layout: &GroupLayout) -> Self {
        Self {
            names: layout.names().map(str::to_owned).collect(),
            values: vec![1.0; layout.num_groups()],
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, name: &str) -> Result<f64> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.values[i])
            .ok_or_else(|| Error::UnknownGroup(name.to_owned()))
    }

    /// Whether the group names and order agree with `layout`.
    pub fn matches(&self, layout: &GroupLayout) -> bool {
        self.names.iter().map(String::as_str).eq(layout.names())
    }

    /// The diagonal of `Λ`, one entry per residual.
    pub fn per_residual(&self, layout: &GroupLayout) -> Result<Vec<f64>> {
        if !self.matches(layout) {
            return Err(Error::LayoutMismatch);
        }
        let mut out = Vec::with_capacity(layout.n());
        for (g, (_, count)) in layout.groups().enumerate() {
            out.extend(std::iter::repeat_n(self.values[g], count));
        }
        Ok(out)
    }

    /// `λ_max(self − other)` for diagonal weights.
    pub fn max_increase_over(&self, other: &LossWeights) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a - b)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Index of the largest weight (first on ties).
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, v) in self.values.iter().enumerate() {
            if *v > self.values[best] {
                best = i;
            }
        }
        best
    }
}

/// `K = JᵀJ`, symmetrized to remove round-off asymmetry.
pub fn ntk(j: &Jacobian, layout: &GroupLayout) -> Result<NtkMatrix> {
    if j.n() != layout.n() {
        return Err(Error::DimensionMismatch {
            binding: "jacobian columns",
            expected: layout.n(),
            got: j.n(),
        });
    }
    let c = j.columns();
    let k = c.dot(&c.t());
    let sym = (&k + &k.t()) * 0.5;
    NtkMatrix::new(sym, layout.clone())
}

pub fn block_trace(k: &NtkMatrix, group: &str) -> Result<f64> {
    let r: Range<usize> = k.layout.range(group)?;
    Ok(r.map(|i| k.values[[i, i]]).sum())
}

/// All block traces in layout order.
pub fn block_traces(k: &NtkMatrix) -> Vec<f64> {
    k.layout
        .ranges()
        .map(|r| r.map(|i| k.values[[i, i]]).sum())
        .collect()
}

/// `λ_g = Tr(K) / Tr(K_gg)` from per-group traces.
pub fn trace_ratio_weights(layout: &GroupLayout, traces: &[f64]) -> Result<LossWeights> {
    if let Some(g) = traces.iter().position(|t| !(*t > 0.0) || !t.is_finite()) {
        return Err(Error::DegenerateKernel {
            group: layout.name(g).to_owned(),
            trace: traces[g],
        });
    }
    let total: f64 = traces.iter().sum();
    LossWeights::new(layout, traces.iter().map(|t| total / t).collect())
}

pub fn ntk_weights(k: &NtkMatrix) -> Result<LossWeights> {
    trace_ratio_weights(&k.layout, &block_traces(k))
}

const MAX_SWEEPS: usize = 100;

/// Eigenvalues of a symmetric matrix in ascending order (cyclic Jacobi).
pub fn eigenvalues_symmetric(k: &NtkMatrix) -> Result<Vec<f64>> {
    eigenvalues_of(k.values.view())
}

pub fn eigenvalues_of(k: ArrayView2<f64>) -> Result<Vec<f64>> {
    let n = k.nrows();
    let mut a = k.to_owned();
    let norm = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let tol = 1e-12 * norm;
    let off = |a: &Array2<f64>| {
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += a[[i, j]] * a[[i, j]];
                }
            }
        }
        s.sqrt()
    };
    let mut sweeps = 0;
    while off(&a) > tol {
        if sweeps == MAX_SWEEPS {
            return Err(Error::NoConvergence { sweeps });
        }
        sweeps += 1;
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[[p, q]];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[[q, q]] - a[[p, p]]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for r in 0..n {
                    let arp = a[[r, p]];
                    let arq = a[[r, q]];
                    a[[r, p]] = c * arp - s * arq;
                    a[[r, q]] = s * arp + c * arq;
                }
                for r in 0..n {
                    let apr = a[[p, r]];
                    let aqr = a[[q, r]];
                    a[[p, r]] = c * apr - s * aqr;
                    a[[q, r]] = s * apr + c * aqr;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..n).map(|i| a[[i, i]]).collect();
    ev.sort_by(f64::total_cmp);
    Ok(ev)
}
