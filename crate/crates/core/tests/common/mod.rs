#![allow(dead_code)]

use adaptive_ntk::model::MlpConfig;
use adaptive_ntk::problems::{Engine, Problem, ProblemSpec};
use adaptive_ntk::rng::StreamId;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// The 1-100-1 tanh network on [0,1].
pub fn poisson(engine: Engine) -> Problem {
    let model = MlpConfig::new(1, vec![100], 1).normalized_for_box(&[0.0], &[1.0]);
    Problem::new(ProblemSpec::poisson1d(), Some(model), engine).unwrap()
}

pub fn small_wave(engine: Engine) -> Problem {
    let model = MlpConfig::new(2, vec![8, 8], 1).normalized_for_box(&[0.0, 0.0], &[1.0, 1.0]);
    Problem::new(ProblemSpec::wave1d(), Some(model), engine).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    StreamId::new(seed, 99).rng()
}

pub fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    rng.random_range(lo..hi)
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// `‖a − b‖ / ‖b‖`.
pub fn rel(a: &[f64], b: &[f64]) -> f64 {
    dist(a, b) / norm(b)
}

/// Central difference of a vector-valued map along coordinate `j`.
pub fn central<F: Fn(&[f64]) -> Vec<f64>>(f: F, at: &[f64], j: usize, h: f64) -> Vec<f64> {
    let mut p = at.to_vec();
    let mut m = at.to_vec();
    p[j] += h;
    m[j] -= h;
    f(&p)
        .iter()
        .zip(f(&m))
        .map(|(a, b)| (a - b) / (2.0 * h))
        .collect()
}

pub fn mean_and_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}
