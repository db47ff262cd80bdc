mod common;

use adaptive_ntk::ntk_exact::{
    ntk, ntk_weights, trace_ratio_weights, Jacobian, LossWeights, NtkMatrix,
};
use adaptive_ntk::ntk_sketch::{draw_probe, AccumulatorMode, SketchConfig};
use adaptive_ntk::problems::{
    poisson_points, quadratic_features, regression_points, Engine, Fixed, GroupLayout,
    LinearResidual, PointPlan, Problem, ProblemSource, ProblemSpec, ResidualSystem, ResidualVector,
};
use adaptive_ntk::rng::{purpose, StreamId};
use adaptive_ntk::trainer::{
    descent_lemma_check, gd_step, objective_and_gradient, residual_average_certificate,
    spaced_increment, spaced_update, time_averaged_gradients, time_averaged_residuals, train,
    weight_stability, weighted_loss, EigCadence, SpacedConfig, SpacedUpdateState, StepRecord,
    TrainConfig, TrainingTrace, WeightMode,
};
use common::{rng, uniform};
use ndarray::{Array1, Array2};
use proptest::prelude::*;

fn poisson_source(p: &Problem) -> ProblemSource<'_> {
    ProblemSource {
        problem: p,
        points: PointPlan::Fixed(poisson_points(&[1.0 / 3.0, 2.0 / 3.0]).unwrap()),
    }
}

fn quadratic() -> (ProblemSpec, Problem) {
    let spec =
        ProblemSpec::quadratic_regression(50, 1.0 / 2f64.sqrt(), StreamId::new(0, purpose::NOISE))
            .unwrap();
    let p = Problem::new(spec.clone(), None, Engine::Dense).unwrap();
    (spec, p)
}

/// The Poisson residual frozen at its seed-0 initialization, three groups.
fn frozen_poisson() -> (LinearResidual, Vec<f64>) {
    let p = common::poisson(Engine::Dense);
    let pts = poisson_points(&[1.0 / 3.0, 2.0 / 3.0]).unwrap();
    let theta = p.init_params(0).unwrap().into_values();
    (
        LinearResidual::frozen_at(&p.bind(&pts).unwrap(), &theta).unwrap(),
        theta,
    )
}

#[test]
fn quadratic_step_matches_dense_computation() {
    let (spec, p) = quadratic();
    let pts = regression_points(&spec).unwrap();
    let sys = p.bind(&pts).unwrap();
    let theta = [1.0, 1.0, 1.0];
    let eta = 1e-3;
    let r = ResidualVector::new(sys.residual(&theta).unwrap(), sys.layout().clone()).unwrap();
    let w = LossWeights::ones(sys.layout());
    let step = gd_step(&theta, &sys.jacobian(&theta).unwrap(), &r, &w, eta).unwrap();
    // J[k][i] = 2θ_k u_k(x_i), R_i = Σθ_k²u_k(x_i) − y_i
    let n = spec.data.len();
    let mut jm = Array2::<f64>::zeros((3, n));
    let mut rv = Array1::<f64>::zeros(n);
    for (i, (x, y)) in spec.data.iter().enumerate() {
        let u = quadratic_features(*x);
        rv[i] = (0..3).map(|k| theta[k] * theta[k] * u[k]).sum::<f64>() - y;
        for k in 0..3 {
            jm[[k, i]] = 2.0 * theta[k] * u[k];
        }
    }
    let oracle = Array1::from(theta.to_vec()) - jm.dot(&rv) * eta;
    for k in 0..3 {
        assert!(
            (step[k] - oracle[k]).abs() <= 1e-13,
            "{} vs {}",
            step[k],
            oracle[k]
        );
    }
}

#[test]
fn unit_weights_give_the_plain_gradient_step() {
    let p = common::poisson(Engine::Dense);
    let pts = poisson_points(&[0.2, 0.6]).unwrap();
    let sys = p.bind(&pts).unwrap();
    let theta = p.init_params(3).unwrap().into_values();
    let r = ResidualVector::new(sys.residual(&theta).unwrap(), sys.layout().clone()).unwrap();
    let step = gd_step(
        &theta,
        &sys.jacobian(&theta).unwrap(),
        &r,
        &LossWeights::ones(sys.layout()),
        1e-4,
    )
    .unwrap();
    let (_, grad) = objective_and_gradient(&sys, &theta).unwrap();
    for ((s, t), g) in step.iter().zip(&theta).zip(&grad) {
        assert!((s - (t - 1e-4 * g)).abs() <= 1e-12 * t.abs().max(1.0));
    }
}

#[test]
fn fixed_weights_on_regression_never_increase_the_loss() {
    let (spec, p) = quadratic();
    let src = ProblemSource {
        problem: &p,
        points: PointPlan::Fixed(regression_points(&spec).unwrap()),
    };
    let trace = train(
        &src,
        &[1.0, 1.0, 1.0],
        &TrainConfig::new(1e-3, 100, WeightMode::Fixed(vec![1.0])),
    )
    .unwrap();
    assert_eq!(trace.len(), 101);
    for w in trace.losses().windows(2) {
        assert!(w[1] < w[0], "{} then {}", w[0], w[1]);
    }
}

#[test]
fn exact_weights_drive_poisson_loss_down_ten_orders() {
    let p = common::poisson(Engine::Dense);
    let src = poisson_source(&p);
    let theta = p.init_params(0).unwrap().into_values();
    let mut cfg = TrainConfig::new(1e-5, 500, WeightMode::ExactNtk { update_every: 1 });
    cfg.eig_cadence = EigCadence::Never;
    let trace = train(&src, &theta, &cfg).unwrap();
    let l = trace.losses();
    assert!(
        l[l.len() - 1] <= 1e-10 * l[0],
        "{} -> {}",
        l[0],
        l[l.len() - 1]
    );
    assert!(trace
        .records
        .iter()
        .all(|r| r.weights.iter().all(|w| w.is_finite() && *w > 0.0)));
}

#[test]
fn poisson_weights_settle() {
    let p = common::poisson(Engine::Dense);
    let src = poisson_source(&p);
    let theta = p.init_params(0).unwrap().into_values();
    let mut cfg = TrainConfig::new(1e-5, 2000, WeightMode::ExactNtk { update_every: 1 });
    cfg.eig_cadence = EigCadence::Never;
    let trace = train(&src, &theta, &cfg).unwrap();
    for ratio in weight_stability(&trace, 0.2) {
        assert!(ratio <= 1.1, "{ratio}");
    }
}

#[test]
fn recorded_gradient_norms_match_snapshots() {
    let p = common::poisson(Engine::Dense);
    let src = poisson_source(&p);
    let theta = p.init_params(0).unwrap().into_values();
    let mut cfg = TrainConfig::new(1e-5, 60, WeightMode::ExactNtk { update_every: 1 });
    cfg.snapshot_every = Some(7);
    let trace = train(&src, &theta, &cfg).unwrap();
    let sys = p
        .bind(match &src.points {
            PointPlan::Fixed(pts) => pts,
            _ => unreachable!(),
        })
        .unwrap();
    assert!(trace.snapshots.len() >= 9);
    for (t, th) in &trace.snapshots {
        let (f, g) = objective_and_gradient(&sys, th).unwrap();
        let rec = &trace.records[*t];
        let g2: f64 = g.iter().map(|v| v * v).sum();
        assert!(
            (g2 - rec.grad_f_norm_sq).abs() <= 1e-12 * rec.grad_f_norm_sq,
            "step {t}"
        );
        assert!((2.0 * f - rec.res_norm_sq).abs() <= 1e-12 * rec.res_norm_sq);
    }
    assert_eq!(trace.snapshot(60).unwrap(), &trace.final_theta[..]);
}

#[test]
fn exact_mode_equals_fixed_exact_weights_on_linear_residuals() {
    let (sys, theta) = frozen_poisson();
    let k = ntk(&sys.jacobian(&theta).unwrap(), sys.layout()).unwrap();
    let w = ntk_weights(&k).unwrap().values().to_vec();
    let src = Fixed(sys);
    let a = train(
        &src,
        &theta,
        &TrainConfig::new(1e-6, 40, WeightMode::ExactNtk { update_every: 1 }),
    )
    .unwrap();
    let b = train(
        &src,
        &theta,
        &TrainConfig::new(1e-6, 40, WeightMode::Fixed(w)),
    )
    .unwrap();
    assert_eq!(a.final_theta, b.final_theta);
    assert_eq!(a.losses(), b.losses());
}

#[test]
fn linear_sketch_mode_replays_exact_probe_weights() {
    let (sys, theta0) = frozen_poisson();
    let layout = sys.layout().clone();
    let k: NtkMatrix = ntk(&sys.jacobian(&theta0).unwrap(), &layout).unwrap();
    let seed = 5;
    let steps = 30;
    let eta = 1e-6;
    let mut cfg = TrainConfig::new(
        eta,
        steps,
        WeightMode::Sketch {
            sketch: SketchConfig::default(),
            alpha: 1.0,
            init_samples: 1,
            mode: AccumulatorMode::Full,
        },
    );
    cfg.seed = seed;
    let src = Fixed(sys.clone());
    let trace = train(&src, &theta0, &cfg).unwrap();

    let probes = StreamId::new(seed, purpose::PROBE);
    let mut theta = theta0.clone();
    let mut prev = LossWeights::ones(&layout);
    for t in 0..=steps {
        let r = sys.residual(&theta).unwrap();
        let stream = if t == 0 {
            probes.child(0).child(0)
        } else {
            probes.child(t as u64)
        };
        let mask: Vec<f64> = r
            .iter()
            .map(|v| if v.abs() > 1e-12 { 1.0 } else { 0.0 })
            .collect();
        let g: Vec<f64> = draw_probe(layout.n(), stream)
            .iter()
            .zip(&mask)
            .map(|(a, m)| a * m)
            .collect();
        let kg = k.values().dot(&Array1::from(g.clone()));
        let traces: Vec<f64> = layout
            .ranges()
            .map(|rg| rg.map(|i| kg[i] * g[i]).sum())
            .collect();
        let w = trace_ratio_weights(&layout, &traces).unwrap_or_else(|_| prev.clone());
        let rec = &trace.records[t];
        for (a, b) in rec.weights.iter().zip(w.values()) {
            assert!((a - b).abs() <= 1e-9 * b.abs(), "step {t}: {a} vs {b}");
        }
        if t == steps {
            break;
        }
        // continue the replay with the recorded weights so round-off in the
        // estimate does not compound
        let used = LossWeights::new(&layout, rec.weights.clone()).unwrap();
        let rv = ResidualVector::new(r, layout.clone()).unwrap();
        theta = gd_step(&theta, &sys.jacobian(&theta).unwrap(), &rv, &used, eta).unwrap();
        prev = used;
    }
    assert!(common::dist(&theta, &trace.final_theta) <= 1e-12 * common::norm(&theta));
}

#[test]
fn spaced_sum_never_decreases_in_training() {
    let p = common::poisson(Engine::Dense);
    let src = poisson_source(&p);
    let theta = p.init_params(0).unwrap().into_values();
    let mut cfg = TrainConfig::new(1e-5, 300, WeightMode::ExactNtk { update_every: 1 });
    cfg.spaced = Some(SpacedConfig::default());
    let trace = train(&src, &theta, &cfg).unwrap();
    assert_eq!(trace.spaced_sum.len(), 301);
    assert!(trace.spaced_sum.windows(2).all(|w| w[1] >= w[0]));
    assert!(trace.spaced_sum[0] >= 0.0);
}

#[test]
fn descent_lemma_is_tight_for_half_square() {
    let layout = GroupLayout::from_counts(&[("D", 1)]).unwrap();
    let sys =
        LinearResidual::new(Jacobian::from_columns(Array2::eye(1)), vec![0.0], layout).unwrap();
    let mut r = rng(8);
    let pairs: Vec<(Vec<f64>, Vec<f64>)> = (0..50)
        .map(|_| {
            (
                vec![uniform(&mut r, -3.0, 3.0)],
                vec![uniform(&mut r, -3.0, 3.0)],
            )
        })
        .collect();
    let rep = descent_lemma_check(&sys, &pairs, 1.0, 0.0).unwrap();
    assert_eq!(rep.violations, 0);
    assert!(rep.max_violation.abs() <= 1e-14);
    let same = descent_lemma_check(&sys, &[(vec![1.5], vec![1.5])], 1.0, 0.0).unwrap();
    assert_eq!(same.max_violation, 0.0);
}

fn synthetic_trace(res: &[f64], grads: &[f64]) -> TrainingTrace {
    let layout = GroupLayout::from_counts(&[("D", 1)]).unwrap();
    TrainingTrace {
        layout,
        records: res
            .iter()
            .zip(grads)
            .enumerate()
            .map(|(t, (r, g))| StepRecord {
                step: t,
                loss: 0.5 * r,
                res_norm_sq: *r,
                grad_g_norm_sq: *g,
                grad_f_norm_sq: *g,
                weights: vec![1.0],
                eigs: None,
                exact_weights: None,
                accepted: true,
                wall_ms: 0,
            })
            .collect(),
        snapshots: Vec::new(),
        final_theta: Vec::new(),
        spaced_sum: Vec::new(),
        initial_estimate: None,
        final_estimate: None,
    }
}

#[test]
fn certificate_holds_for_one_good_step() {
    let trace = synthetic_trace(&[1.0, 0.5], &[0.0, 0.0]);
    let rows = residual_average_certificate(&trace, 0.1, &[1]);
    assert!(rows[0].holds);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn weighted_loss_matches_quadratic_form(r in prop::collection::vec(-10.0f64..10.0, 5), w in prop::collection::vec(0.01f64..100.0, 3)) {
        let layout = GroupLayout::from_counts(&[("D", 2), ("B1", 2), ("B2", 1)]).unwrap();
        let rv = ResidualVector::new(r.clone(), layout.clone()).unwrap();
        let lw = LossWeights::new(&layout, w.clone()).unwrap();
        let lam = Array2::from_diag(&Array1::from(vec![w[0], w[0], w[1], w[1], w[2]]));
        let ra = Array1::from(r);
        let oracle = 0.5 * ra.dot(&lam.dot(&ra));
        let got = weighted_loss(&rv, &lw).unwrap();
        prop_assert!((got - oracle).abs() <= 1e-12 * oracle.max(1e-300));
    }

    #[test]
    fn step_is_invariant_under_kernel_scaling(seed in 0u64..10_000, c in 1e-3f64..1e3) {
        let (sys, theta) = frozen_poisson();
        let j = sys.jacobian(&theta).unwrap();
        let k = ntk(&j, sys.layout()).unwrap();
        let kc = NtkMatrix::new(k.values() * c, sys.layout().clone()).unwrap();
        let mut r = rng(seed);
        let res: Vec<f64> = (0..4).map(|_| uniform(&mut r, -1.0, 1.0)).collect();
        let rv = ResidualVector::new(res, sys.layout().clone()).unwrap();
        let a = gd_step(&theta, &j, &rv, &ntk_weights(&k).unwrap(), 1e-5).unwrap();
        let b = gd_step(&theta, &j, &rv, &ntk_weights(&kc).unwrap(), 1e-5).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= 1e-13 * x.abs().max(1.0));
        }
    }

    #[test]
    fn spaced_sum_replays_accepted_increments(
        cands in prop::collection::vec(prop::collection::vec(0.1f64..10.0, 2), 1..40),
        norms in prop::collection::vec(0.0f64..5.0, 40),
        c in 0.0f64..20.0,
    ) {
        let layout = GroupLayout::from_counts(&[("D", 1), ("B", 1)]).unwrap();
        let mut state = SpacedUpdateState { s: 0.0, weights: LossWeights::ones(&layout) };
        let mut replay = 0.0;
        for (t, (w, r2)) in cands.iter().zip(&norms).enumerate() {
            let cand = LossWeights::new(&layout, w.clone()).unwrap();
            let inc = spaced_increment(&state.weights, &cand, *r2);
            let h = c * (1.0 + t as f64).sqrt();
            let (next, accepted) = spaced_update(&state, &cand, *r2, h);
            prop_assert!(next.s >= state.s);
            if accepted {
                replay += inc;
                prop_assert_eq!(&next.weights, &cand);
            } else {
                prop_assert_eq!(&next, &state);
            }
            state = next;
        }
        prop_assert!((state.s - replay).abs() <= 1e-12 * replay.max(1.0));
    }

    #[test]
    fn time_averages_match_direct_loops(
        vals in prop::collection::vec((0.0f64..100.0, 0.0f64..100.0), 1..60),
        frac in 0.0f64..1.0,
    ) {
        let res: Vec<f64> = vals.iter().map(|v| v.0).collect();
        let grads: Vec<f64> = vals.iter().map(|v| v.1).collect();
        let trace = synthetic_trace(&res, &grads);
        let upto = 1 + ((vals.len() - 1) as f64 * frac) as usize;
        let mut sr = 0.0;
        let mut sg = 0.0;
        for t in 0..upto {
            sr += res[t];
            sg += grads[t];
        }
        prop_assert!((time_averaged_residuals(&trace, upto).unwrap() - sr / upto as f64).abs() <= 1e-12 * sr.max(1.0));
        prop_assert!((time_averaged_gradients(&trace, upto).unwrap() - sg / upto as f64).abs() <= 1e-12 * sg.max(1.0));
    }
}
