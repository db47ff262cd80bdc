mod common;

use adaptive_ntk::ntk_exact::{
    block_trace, block_traces, eigenvalues_of, eigenvalues_symmetric, ntk, ntk_weights, Jacobian,
    NtkMatrix,
};
use adaptive_ntk::problems::{
    poisson_points, sample_collocation, Engine, GroupLayout, ResidualSystem,
};
use adaptive_ntk::rng::StreamId;
use common::{rng, uniform};
use ndarray::Array2;
use proptest::prelude::*;

fn random_matrix(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    let mut r = rng(seed);
    Array2::from_shape_fn((rows, cols), |_| uniform(&mut r, -1.0, 1.0))
}

fn random_spd(n: usize, seed: u64) -> Array2<f64> {
    let a = random_matrix(n, n + 2, seed);
    a.dot(&a.t())
}

#[test]
fn kernel_matches_triple_loop_product() {
    // p = 6 parameters, n = 4 residuals
    let j = random_matrix(6, 4, 1);
    let layout = GroupLayout::from_counts(&[("D", 2), ("B", 2)]).unwrap();
    let k = ntk(&Jacobian::from_pn(j.view()), &layout).unwrap();
    for a in 0..4 {
        for b in 0..4 {
            let mut s = 0.0;
            for p in 0..6 {
                s += j[[p, a]] * j[[p, b]];
            }
            assert!((k.values()[[a, b]] - s).abs() <= 1e-13);
        }
    }
}

#[test]
fn block_traces_match_filtered_diagonal() {
    let layout = GroupLayout::from_counts(&[("D", 3), ("B1", 2), ("B2", 4)]).unwrap();
    let k = NtkMatrix::new(random_spd(9, 2), layout.clone()).unwrap();
    let traces = block_traces(&k);
    for (g, name) in layout.names().enumerate() {
        let oracle: f64 = (0..9)
            .filter(|&i| layout.group_of(i) == g)
            .map(|i| k.values()[[i, i]])
            .sum();
        assert!((block_trace(&k, name).unwrap() - oracle).abs() <= 1e-13);
        assert_eq!(traces[g], block_trace(&k, name).unwrap());
    }
    assert!((traces.iter().sum::<f64>() - k.trace()).abs() <= 1e-12);
    let w = ntk_weights(&k).unwrap();
    for (g, name) in layout.names().enumerate() {
        assert!(
            (w.values()[g] * block_trace(&k, name).unwrap() - k.trace()).abs() <= 1e-12 * k.trace()
        );
    }
}

#[test]
fn eigenvalue_identities() {
    let a = random_matrix(8, 8, 3);
    let s = (&a + &a.t()) * 0.5;
    let eig = eigenvalues_of(s.view()).unwrap();
    let tr: f64 = (0..8).map(|i| s[[i, i]]).sum();
    let fro2: f64 = s.iter().map(|v| v * v).sum();
    assert!((eig.iter().sum::<f64>() - tr).abs() <= 1e-10);
    assert!((eig.iter().map(|v| v * v).sum::<f64>() - fro2).abs() <= 1e-10);
    assert!(eig.windows(2).all(|w| w[0] <= w[1]));
}

#[test]
fn poisson_kernel_is_symmetric_psd_with_transposed_blocks() {
    let p = common::poisson(Engine::Dense);
    let theta = p.init_params(0).unwrap().into_values();
    let pts = poisson_points(&[1.0 / 3.0, 2.0 / 3.0]).unwrap();
    let k = ntk(
        &p.bind(&pts).unwrap().jacobian(&theta).unwrap(),
        pts.layout(),
    )
    .unwrap();
    for (a, b) in [("D", "B1"), ("D", "B2"), ("B1", "B2")] {
        assert_eq!(k.block(a, b).unwrap(), k.block(b, a).unwrap().t());
    }
    let eig = eigenvalues_symmetric(&k).unwrap();
    assert!(eig[0] >= -1e-8 * k.frobenius());
}

#[test]
fn rank_is_bounded_by_parameter_count() {
    // p = 3 < n = 50: all but the three largest eigenvalues vanish
    let spec =
        adaptive_ntk::problems::ProblemSpec::quadratic_regression(50, 0.5, StreamId::new(0, 4))
            .unwrap();
    let p = adaptive_ntk::problems::Problem::new(spec.clone(), None, Engine::Dense).unwrap();
    let pts = adaptive_ntk::problems::regression_points(&spec).unwrap();
    let k = ntk(
        &p.bind(&pts).unwrap().jacobian(&[1.0, 0.5, 2.0]).unwrap(),
        pts.layout(),
    )
    .unwrap();
    let eig = eigenvalues_symmetric(&k).unwrap();
    let lmax = eig[eig.len() - 1];
    assert!(eig[eig.len() - 4].abs() <= 1e-8 * lmax);
    assert!(eig[eig.len() - 3] > 1e-8 * lmax);
}

#[test]
fn wave_kernel_blocks_are_transposes() {
    let p = common::small_wave(Engine::Dense);
    let layout =
        GroupLayout::from_counts(&[("D", 5), ("Di", 4), ("Bi", 3), ("B1", 2), ("B2", 2)]).unwrap();
    let pts = sample_collocation(p.spec(), &layout, StreamId::new(0, 2)).unwrap();
    let k = ntk(
        &p.bind(&pts)
            .unwrap()
            .jacobian(&p.init_params(0).unwrap().into_values())
            .unwrap(),
        &layout,
    )
    .unwrap();
    assert_eq!(k.values(), &k.values().t());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn weights_are_scale_invariant(seed in 0u64..10_000, c in 1e-6f64..1e6) {
        let layout = GroupLayout::from_counts(&[("D", 3), ("B", 2)]).unwrap();
        let base = random_spd(5, seed);
        let k = NtkMatrix::new(base.clone(), layout.clone()).unwrap();
        let kc = NtkMatrix::new(base * c, layout).unwrap();
        let w = ntk_weights(&k).unwrap();
        let wc = ntk_weights(&kc).unwrap();
        for (a, b) in w.values().iter().zip(wc.values()) {
            prop_assert!((a - b).abs() <= 1e-12 * a);
        }
    }

    #[test]
    fn kernel_is_symmetric_for_random_jacobians(seed in 0u64..10_000, p in 1usize..8, n in 2usize..8) {
        let layout = GroupLayout::from_counts(&[("D", n - 1), ("B", 1)]).unwrap();
        let k = ntk(&Jacobian::from_pn(random_matrix(p, n, seed).view()), &layout).unwrap();
        prop_assert_eq!(k.values(), &k.values().t());
        let eig = eigenvalues_symmetric(&k).unwrap();
        prop_assert!(eig[0] >= -1e-8 * k.frobenius().max(1e-300));
    }
}
