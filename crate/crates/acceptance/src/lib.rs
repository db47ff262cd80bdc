//! Helpers shared by the acceptance suite in `tests/acceptance.rs`.

use std::fs;
use std::path::Path;

use adaptive_ntk_cli::{run, ExperimentConfig, Report};

/// Runs an experiment from config text, writing artifacts under `out`.
pub fn run_config(text: &str, out: &Path) -> Report {
    let cfg = ExperimentConfig::parse(text, None).expect("valid config");
    run(&cfg, out).expect("experiment runs")
}

/// `(file name, bytes)` of every CSV in `dir`, sorted by name.
pub fn csv_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .expect("artifact dir")
        .map(|e| e.expect("dir entry").path())
        .filter(|p| p.extension().is_some_and(|e| e == "csv"))
        .map(|p| {
            let bytes = fs::read(&p).expect("readable artifact");
            (p.file_name().unwrap().to_string_lossy().into_owned(), bytes)
        })
        .collect();
    v.sort();
    v
}

/// Sample mean and its standard error.
pub fn mean_and_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}
