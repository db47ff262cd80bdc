//! Fully connected tanh networks.
//!
//! Parameters live in one flat [`ParamVector`]. Layer `l` stores its weight
//! matrix (`rows = fan_out`, `cols = fan_in`, row-major) followed by its bias.
//! A network can be compiled into [`ScalarGraph`]s for the general autodiff
//! engine, or evaluated through [`DenseMlp`], which pushes the same
//! second-order input jets through whole batches of points with one matrix
//! product per layer.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{GraphBuilder, NodeId, ScalarGraph};
use crate::error::{Error, Result};
use crate::rng::{purpose, StreamId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub output_dim: usize,
    pub input_mean: Vec<f64>,
    pub input_std: Vec<f64>,
}

impl MlpConfig {
    /// Identity input normalization.
    pub fn new(input_dim: usize, hidden: Vec<usize>, output_dim: usize) -> Self {
        Self {
            input_dim,
            hidden,
            output_dim,
            input_mean: vec![0.0; input_dim],
            input_std: vec![1.0; input_dim],
        }
    }

    pub fn with_normalization(mut self, mean: Vec<f64>, std: Vec<f64>) -> Self {
        self.input_mean = mean;
        self.input_std = std;
        self
    }

    /// Normalization matching the uniform law on the box `[lo, hi]`:
    /// mean `(lo+hi)/2`, standard deviation `(hi−lo)/√12`.
    pub fn normalized_for_box(self, lo: &[f64], hi: &[f64]) -> Self {
        let mean = lo.iter().zip(hi).map(|(a, b)| 0.5 * (a + b)).collect();
        let std = lo
            .iter()
            .zip(hi)
            .map(|(a, b)| (b - a) / 12f64.sqrt())
            .collect();
        self.with_normalization(mean, std)
    }

    pub fn activation(&self) -> &'static str {
        "tanh"
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden.is_empty() {
            return Err(Error::InvalidConfig(
                "network needs at least one hidden layer".into(),
            ));
        }
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden.contains(&0) {
            return Err(Error::InvalidConfig(
                "all layer widths must be at least 1".into(),
            ));
        }
        if self.input_mean.len() != self.input_dim || self.input_std.len() != self.input_dim {
            return Err(Error::InvalidConfig(
                "normalization needs one mean and one std per input".into(),
            ));
        }
        if self.input_std.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidConfig(
                "normalization std entries must be positive".into(),
            ));
        }
        if self.input_mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::InvalidConfig(
                "normalization mean must be finite".into(),
            ));
        }
        Ok(())
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_dim];
        w.extend(&self.hidden);
        w.push(self.output_dim);
        w
    }

    pub fn layout(&self) -> Result<Vec<LayerLayout>> {
        self.validate()?;
        let w = self.widths();
        let mut offset = 0;
        Ok(w.windows(2)
            .map(|pair| {
                let l = LayerLayout {
                    rows: pair[1],
                    cols: pair[0],
                    offset,
                    bias: true,
                };
                offset += l.len();
                l
            })
            .collect())
    }

    pub fn num_params(&self) -> Result<usize> {
        Ok(self.layout()?.iter().map(LayerLayout::len).sum())
    }
}

/// One layer's slice of the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerLayout {
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
    pub bias: bool,
}

impl LayerLayout {
    pub fn weight_len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn len(&self) -> usize {
        self.weight_len() + if self.bias { self.rows } else { 0 }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn weights<'a>(&self, theta: &'a [f64]) -> ArrayView2<'a, f64> {
        ArrayView2::from_shape(
            (self.rows, self.cols),
            &theta[self.offset..self.offset + self.weight_len()],
        )
        .expect("layout matches parameter vector")
    }

    pub fn bias_range(&self) -> std::ops::Range<usize> {
        let start = self.offset + self.weight_len();
        start..start + if self.bias { self.rows } else { 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
    layout: Vec<LayerLayout>,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    format: String,
    len: usize,
    layout: Vec<LayerLayout>,
}

impl ParamVector {
    pub fn new(layout: Vec<LayerLayout>, values: Vec<f64>) -> Result<Self> {
        let mut ranges: Vec<(usize, usize)> = layout
            .iter()
            .map(|l| (l.offset, l.offset + l.len()))
            .collect();
        ranges.sort_unstable();
        let mut next = 0;
        for (a, b) in ranges {
            if a != next {
                return Err(Error::InvalidConfig(
                    "layout offsets must be disjoint and cover the vector".into(),
                ));
            }
            next = b;
        }
        if next != values.len() {
            return Err(Error::DimensionMismatch {
                binding: "params",
                expected: next,
                got: values.len(),
            });
        }
        Ok(Self { values, layout })
    }

    /// A plain vector with a single record and no bias.
    pub fn flat(values: Vec<f64>) -> Self {
        let layout = vec![LayerLayout {
            rows: 1,
            cols: values.len(),
            offset: 0,
            bias: false,
        }];
        Self { values, layout }
    }

    pub fn zeros(config: &MlpConfig) -> Result<Self> {
        let layout = config.layout()?;
        let p = layout.iter().map(LayerLayout::len).sum();
        Self::new(layout, vec![0.0; p])
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn layout(&self) -> &[LayerLayout] {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Same layout, new values.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        Self::new(self.layout.clone(), values)
    }

    fn sidecar_path(path: &Path) -> PathBuf {
        let mut s = path.as_os_str().to_owned();
        s.push(".json");
        PathBuf::from(s)
    }

    /// Writes little-endian f64 values to `path` and the layout to `path.json`.
    pub fn write_checkpoint(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self.values.iter().flat_map(|v| v.to_le_bytes()).collect();
        fs::write(path, bytes)?;
        let sidecar = Sidecar {
            format: "f64-le".into(),
            len: self.values.len(),
            layout: self.layout.clone(),
        };
        let json =
            serde_json::to_string_pretty(&sidecar).map_err(|e| Error::Checkpoint(e.to_string()))?;
        fs::write(Self::sidecar_path(path), json)?;
        Ok(())
    }

    pub fn read_checkpoint(path: &Path) -> Result<Self> {
        let json = fs::read_to_string(Self::sidecar_path(path))?;
        let sidecar: Sidecar =
            serde_json::from_str(&json).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if sidecar.format != "f64-le" {
            return Err(Error::Checkpoint(format!(
                "unknown format {}",
                sidecar.format
            )));
        }
        let bytes = fs::read(path)?;
        if bytes.len() != 8 * sidecar.len {
            return Err(Error::Checkpoint(format!(
                "expected {} bytes, found {}",
                8 * sidecar.len,
                bytes.len()
            )));
        }
        let values = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::new(sidecar.layout, values).map_err(|e| Error::Checkpoint(e.to_string()))
    }
}

/// Uniform Xavier initialization with zero biases.
pub fn init_xavier(config: &MlpConfig, seed: u64) -> Result<ParamVector> {
    let mut theta = ParamVector::zeros(config)?;
    let mut rng = StreamId::new(seed, purpose::INIT).rng();
    let layout = theta.layout.clone();
    for l in &layout {
        let bound = (6.0 / (l.rows + l.cols) as f64).sqrt();
        for v in &mut theta.values[l.offset..l.offset + l.weight_len()] {
            *v = rng.random_range(-bound..=bound);
        }
    }
    Ok(theta)
}

/// One graph per output coordinate, each evaluating the full network.
pub fn compile(config: &MlpConfig) -> Result<Vec<ScalarGraph>> {
    let layout = config.layout()?;
    let p: usize = layout.iter().map(LayerLayout::len).sum();
    (0..config.output_dim)
        .map(|out| {
            let mut b = GraphBuilder::new(config.input_dim, p);
            let mut act: Vec<NodeId> = (0..config.input_dim)
                .map(|i| {
                    let x = b.input(i);
                    let m = b.constant(config.input_mean[i]);
                    let s = b.constant(config.input_std[i]);
                    let c = b.sub(x, m);
                    b.div(c, s)
                })
                .collect();
            let last = layout.len() - 1;
            for (li, l) in layout.iter().enumerate() {
                let rows: Vec<usize> = if li == last {
                    vec![out]
                } else {
                    (0..l.rows).collect()
                };
                let bias = l.bias_range().start;
                act = rows
                    .into_iter()
                    .map(|r| {
                        let mut acc = None;
                        for (c, &a) in act.iter().enumerate() {
                            let w = b.param(l.offset + r * l.cols + c);
                            let t = b.mul(w, a);
                            acc = Some(match acc {
                                None => t,
                                Some(prev) => b.add(prev, t),
                            });
                        }
                        let bb = b.param(bias + r);
                        let z = b.add(acc.expect("fan-in is at least 1"), bb);
                        if li == last {
                            z
                        } else {
                            b.tanh(z)
                        }
                    })
                    .collect();
            }
            b.output(act[0]);
            b.build()
        })
        .collect()
}

/// Batched evaluator for second-order input jets of a tanh MLP.
///
/// For `B` points and `K` input directions the layer inputs are stacked into a
/// `(1+2K)·B × width` matrix: the value block, then the first-order block of
/// each direction, then the second-order block of each direction.
#[derive(Debug, Clone)]
pub struct DenseMlp {
    config: MlpConfig,
    layout: Vec<LayerLayout>,
}

/// Cached forward pass of [`DenseMlp`].
#[derive(Debug, Clone)]
pub struct JetForward {
    k: usize,
    batch: usize,
    /// Stacked input of every layer.
    inputs: Vec<Array2<f64>>,
    /// Stacked pre-activations of the hidden layers.
    pre: Vec<Array2<f64>>,
    output: Array2<f64>,
}

impl JetForward {
    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn directions(&self) -> usize {
        self.k
    }

    pub fn value(&self, b: usize, out: usize) -> f64 {
        self.output[[b, out]]
    }

    pub fn d1(&self, q: usize, b: usize, out: usize) -> f64 {
        self.output[[(1 + q) * self.batch + b, out]]
    }

    pub fn d2(&self, q: usize, b: usize, out: usize) -> f64 {
        self.output[[(1 + self.k + q) * self.batch + b, out]]
    }

    /// Row of the stacked output for component `c` (0 = value, `1+q` = first
    /// order along direction `q`, `1+K+q` = second order) of point `b`.
    pub fn row(&self, c: usize, b: usize) -> usize {
        c * self.batch + b
    }

    /// First output of stacked row `r`.
    pub fn output_row(&self, r: usize) -> f64 {
        self.output[[r, 0]]
    }

    pub fn components(&self) -> usize {
        1 + 2 * self.k
    }
}

/// Adjoints of every layer's (pre-activation) output for one backward sweep.
#[derive(Debug, Clone)]
pub struct JetAdjoints {
    layers: Vec<Array2<f64>>,
}

#[inline]
fn tanh_derivs(z: f64) -> (f64, f64, f64, f64) {
    let y = z.tanh();
    let y1 = 1.0 - y * y;
    (y, y1, -2.0 * y * y1, (6.0 * y * y - 2.0) * y1)
}

impl DenseMlp {
    pub fn new(config: &MlpConfig) -> Result<Self> {
        Ok(Self {
            layout: config.layout()?,
            config: config.clone(),
        })
    }

    pub fn config(&self) -> &MlpConfig {
        &self.config
    }

    pub fn layout(&self) -> &[LayerLayout] {
        &self.layout
    }

    pub fn num_params(&self) -> usize {
        self.layout.iter().map(LayerLayout::len).sum()
    }

    /// Forward pass of `points` (B × input_dim) along input `dirs`.
    pub fn forward(
        &self,
        theta: &[f64],
        points: ArrayView2<f64>,
        dirs: &[Vec<f64>],
    ) -> Result<JetForward> {
        let d = self.config.input_dim;
        if theta.len() != self.num_params() {
            return Err(Error::DimensionMismatch {
                binding: "params",
                expected: self.num_params(),
                got: theta.len(),
            });
        }
        if points.ncols() != d {
            return Err(Error::DimensionMismatch {
                binding: "inputs",
                expected: d,
                got: points.ncols(),
            });
        }
        let batch = points.nrows();
        let k = dirs.len();
        let comps = 1 + 2 * k;
        let mut s0 = Array2::<f64>::zeros((comps * batch, d));
        for b in 0..batch {
            for i in 0..d {
                s0[[b, i]] =
                    (points[[b, i]] - self.config.input_mean[i]) / self.config.input_std[i];
            }
        }
        for (q, dir) in dirs.iter().enumerate() {
            if dir.len() != d {
                return Err(Error::DimensionMismatch {
                    binding: "direction",
                    expected: d,
                    got: dir.len(),
                });
            }
            for i in 0..d {
                let v = dir[i] / self.config.input_std[i];
                s0.slice_mut(s![(1 + q) * batch..(2 + q) * batch, i])
                    .fill(v);
            }
        }
        let mut inputs = Vec::with_capacity(self.layout.len());
        let mut pre = Vec::with_capacity(self.layout.len() - 1);
        let mut cur = s0;
        let last = self.layout.len() - 1;
        for (li, l) in self.layout.iter().enumerate() {
            let w = l.weights(theta);
            let mut z = cur.dot(&w.t());
            let bias = &theta[l.bias_range()];
            for mut row in z.slice_mut(s![0..batch, ..]).rows_mut() {
                row.iter_mut().zip(bias).for_each(|(a, b)| *a += b);
            }
            inputs.push(cur);
            if li == last {
                return Ok(JetForward {
                    k,
                    batch,
                    inputs,
                    pre,
                    output: z,
                });
            }
            let mut h = Array2::<f64>::zeros(z.raw_dim());
            for b in 0..batch {
                for j in 0..l.rows {
                    let zv = z[[b, j]];
                    let (y, y1, y2, _) = tanh_derivs(zv);
                    h[[b, j]] = y;
                    for q in 0..k {
                        let r1 = (1 + q) * batch + b;
                        let r2 = (1 + k + q) * batch + b;
                        let z1 = z[[r1, j]];
                        h[[r1, j]] = y1 * z1;
                        h[[r2, j]] = y2 * z1 * z1 + y1 * z[[r2, j]];
                    }
                }
            }
            pre.push(z);
            cur = h;
        }
        unreachable!("validated configs have an output layer")
    }

    /// Propagates an adjoint of the stacked output back through every layer.
    pub fn backward(
        &self,
        theta: &[f64],
        fwd: &JetForward,
        out_adjoint: Array2<f64>,
    ) -> JetAdjoints {
        let (batch, k) = (fwd.batch, fwd.k);
        let n_layers = self.layout.len();
        let mut layers = vec![Array2::zeros((0, 0)); n_layers];
        let mut cur = out_adjoint;
        for li in (0..n_layers).rev() {
            if li > 0 {
                let l = &self.layout[li];
                let mut hbar = cur.dot(&l.weights(theta));
                let z = &fwd.pre[li - 1];
                for b in 0..batch {
                    for j in 0..hbar.ncols() {
                        let (_, y1, y2, y3) = tanh_derivs(z[[b, j]]);
                        let mut gv = hbar[[b, j]] * y1;
                        for q in 0..k {
                            let r1 = (1 + q) * batch + b;
                            let r2 = (1 + k + q) * batch + b;
                            let (o1, o2) = (hbar[[r1, j]], hbar[[r2, j]]);
                            let (z1, z2) = (z[[r1, j]], z[[r2, j]]);
                            gv += o1 * y2 * z1 + o2 * (y3 * z1 * z1 + y2 * z2);
                            hbar[[r1, j]] = o1 * y1 + 2.0 * o2 * y2 * z1;
                            hbar[[r2, j]] = o2 * y1;
                        }
                        hbar[[b, j]] = gv;
                    }
                }
                layers[li] = std::mem::replace(&mut cur, hbar);
            } else {
                layers[0] = std::mem::replace(&mut cur, Array2::zeros((0, 0)));
            }
        }
        JetAdjoints { layers }
    }

    /// Adds the batch-summed parameter gradient into `grad`.
    pub fn accumulate_gradient(&self, fwd: &JetForward, adj: &JetAdjoints, grad: &mut [f64]) {
        for (li, l) in self.layout.iter().enumerate() {
            let a = &adj.layers[li];
            let gw = a.t().dot(&fwd.inputs[li]);
            let dst = &mut grad[l.offset..l.offset + l.weight_len()];
            dst.iter_mut().zip(gw.iter()).for_each(|(d, g)| *d += g);
            let gb = a.slice(s![0..fwd.batch, ..]).sum_axis(Axis(0));
            grad[l.bias_range()]
                .iter_mut()
                .zip(gb.iter())
                .for_each(|(d, g)| *d += g);
        }
    }

    /// Gradient of each point's adjoint-weighted output separately
    /// (row `b` of the result belongs to point `b`).
    pub fn per_point_gradients(&self, fwd: &JetForward, adj: &JetAdjoints) -> Array2<f64> {
        let batch = fwd.batch;
        let mut out = Array2::<f64>::zeros((batch, self.num_params()));
        for (li, l) in self.layout.iter().enumerate() {
            let a = &adj.layers[li];
            let x = &fwd.inputs[li];
            for b in 0..batch {
                let ab = a.slice(s![b..;batch, ..]);
                let xb = x.slice(s![b..;batch, ..]);
                let gw = ab.t().dot(&xb);
                let mut row = out.row_mut(b);
                row.slice_mut(s![l.offset..l.offset + l.weight_len()])
                    .iter_mut()
                    .zip(gw.iter())
                    .for_each(|(d, g)| *d += g);
                let br = l.bias_range();
                row.slice_mut(s![br.start..br.end])
                    .iter_mut()
                    .zip(a.row(b).iter())
                    .for_each(|(d, g)| *d += g);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn poisson_config() -> MlpConfig {
        MlpConfig::new(1, vec![100], 1).normalized_for_box(&[0.0], &[1.0])
    }

    #[test]
    fn poisson_network_has_301_parameters() {
        assert_eq!(poisson_config().num_params().unwrap(), 301);
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(MlpConfig::new(1, vec![], 1).validate().is_err());
        assert!(MlpConfig::new(1, vec![0], 1).validate().is_err());
        let c = MlpConfig::new(1, vec![3], 1).with_normalization(vec![0.0], vec![0.0]);
        assert!(c.validate().is_err());
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let c = poisson_config();
        let a = init_xavier(&c, 5).unwrap();
        assert_eq!(a, init_xavier(&c, 5).unwrap());
        assert_ne!(a, init_xavier(&c, 6).unwrap());
        for l in a.layout() {
            assert!(a.values()[l.bias_range()].iter().all(|&b| b == 0.0));
        }
    }

    #[test]
    fn layout_covers_vector() {
        let c = MlpConfig::new(2, vec![4, 3], 2);
        let l = c.layout().unwrap();
        assert_eq!(l[0].offset, 0);
        assert_eq!(l[1].offset, 12);
        assert_eq!(l[2].offset, 12 + 15);
        assert_eq!(c.num_params().unwrap(), 12 + 15 + 8);
        assert!(ParamVector::new(l.clone(), vec![0.0; 34]).is_err());
    }

    #[test]
    fn zero_parameters_give_zero_output() {
        let c = MlpConfig::new(2, vec![5, 4], 1);
        let g = compile(&c).unwrap();
        let theta = ParamVector::zeros(&c).unwrap();
        for x in [[0.3, -2.0], [10.0, 1.0]] {
            assert_eq!(g[0].evaluate(&x, theta.values()).unwrap(), 0.0);
        }
    }

    #[test]
    fn dense_matches_graph_jets() {
        use crate::autodiff::DerivativeRequest;
        let c = MlpConfig::new(2, vec![6, 5], 1).normalized_for_box(&[0.0, 0.0], &[1.0, 1.0]);
        let theta = init_xavier(&c, 1).unwrap();
        let g = &compile(&c).unwrap()[0];
        let net = DenseMlp::new(&c).unwrap();
        let pts = ndarray::arr2(&[[0.1, 0.7], [0.45, 0.2], [0.9, 0.95]]);
        let dirs = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let f = net.forward(theta.values(), pts.view(), &dirs).unwrap();
        for b in 0..3 {
            let x = [pts[[b, 0]], pts[[b, 1]]];
            let v = g.evaluate(&x, theta.values()).unwrap();
            assert!((v - f.value(b, 0)).abs() < 1e-14);
            for q in 0..2 {
                let d1 = g
                    .input_derivative(
                        &x,
                        theta.values(),
                        &DerivativeRequest::new(0, &[q]).unwrap(),
                    )
                    .unwrap();
                let d2 = g
                    .input_derivative(
                        &x,
                        theta.values(),
                        &DerivativeRequest::new(0, &[q, q]).unwrap(),
                    )
                    .unwrap();
                assert!((d1 - f.d1(q, b, 0)).abs() < 1e-12);
                assert!((d2 - f.d2(q, b, 0)).abs() < 1e-11);
            }
        }
    }

    #[test]
    fn dense_per_point_gradients_sum_to_batch_gradient() {
        let c = MlpConfig::new(1, vec![7], 1);
        let theta = init_xavier(&c, 3).unwrap();
        let net = DenseMlp::new(&c).unwrap();
        let pts = ndarray::arr2(&[[0.1], [0.5], [-0.3], [0.8]]);
        let dirs = vec![vec![1.0]];
        let f = net.forward(theta.values(), pts.view(), &dirs).unwrap();
        let mut adj = Array2::zeros((3 * 4, 1));
        for b in 0..4 {
            adj[[f.row(0, b), 0]] = 0.5 + b as f64;
            adj[[f.row(2, b), 0]] = 1.0 - 0.25 * b as f64;
        }
        let a = net.backward(theta.values(), &f, adj);
        let mut total = vec![0.0; net.num_params()];
        net.accumulate_gradient(&f, &a, &mut total);
        let per = net.per_point_gradients(&f, &a);
        let summed = per.sum_axis(Axis(0));
        for (x, y) in total.iter().zip(summed.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn checkpoint_roundtrip() {
        let c = MlpConfig::new(1, vec![3], 1);
        let theta = init_xavier(&c, 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("theta.bin");
        theta.write_checkpoint(&path).unwrap();
        assert_eq!(ParamVector::read_checkpoint(&path).unwrap(), theta);
        fs::write(&path, [0u8; 5]).unwrap();
        assert!(ParamVector::read_checkpoint(&path).is_err());
    }
}
