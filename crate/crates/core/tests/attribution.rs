// SPDX-License-Identifier: MIT OR Apache-2.0

mod common;

use common::{as_f64, fd_channel_grads, one_layer, rel_err, single_edge_deltas};
use eapgp::attribution::{
    build_gradpath, edge_scores, gradient_points, mean_loss_grads, saturation_profile,
    straight_line_path,
    toy::{LinearMap, ScalarFn},
    GradPoint, Method, PathMode, PathSpec, StepRule,
};
use eapgp::autodiff::Tensor;
use eapgp::model::{Model, ModelConfig};
use eapgp::tasks::{gen_induction, TaskBatch};
use eapgp::Error;

fn linear_model(seed: u64) -> (Model<f64>, TaskBatch) {
    let config = ModelConfig {
        linear: true,
        ..ModelConfig::induction_toy(16, 12, seed)
    };
    (
        Model::new(config).unwrap(),
        gen_induction(seed + 10, 8, 12, 16).unwrap(),
    )
}

fn scores(model: &Model<f64>, batch: &TaskBatch, method: Method, spec: &PathSpec) -> Vec<f64> {
    edge_scores(model, batch, method, spec).unwrap().scores
}

#[test]
fn eap_is_activation_difference_times_numeric_gradient() {
    let batch = gen_induction(2, 2, 6, 8).unwrap();
    let model = Model::<f64>::new(one_layer(8, 8, 6)).unwrap();
    let got = scores(&model, &batch, Method::Eap, &PathSpec::default());

    let grads = fd_channel_grads(&model, &batch, 1e-5);
    let (_, clean) = model.forward_with_cache(&batch.clean).unwrap();
    let (_, corrupted) = model.forward_with_cache(&batch.corrupted).unwrap();
    let graph = model.graph();
    let expected: Vec<f64> = graph
        .edges()
        .map(|e| {
            let diff = corrupted
                .get(e.src)
                .unwrap()
                .sub(clean.get(e.src).unwrap())
                .unwrap();
            diff.data()
                .iter()
                .zip(grads[e.channel].data())
                .map(|(d, g)| d * g)
                .sum()
        })
        .collect();
    assert!(
        rel_err(&got, &expected) < 1e-6,
        "{}",
        rel_err(&got, &expected)
    );
}

#[test]
fn one_step_gradpath_is_eap() {
    let batch = gen_induction(1, 16, 12, 16).unwrap();
    let model = Model::<f64>::new(ModelConfig::induction_toy(16, 12, 3)).unwrap();
    let eap = scores(&model, &batch, Method::Eap, &PathSpec::default());
    for rule in [StepRule::LiteralUnit, StepRule::EndpointBudget] {
        let spec = PathSpec {
            step_rule: rule,
            ..PathSpec::with_k(1)
        };
        let gp = scores(&model, &batch, Method::EapGp, &spec);
        let worst = gp
            .iter()
            .zip(&eap)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(worst <= 1e-6, "{rule:?}: {worst:e}");
    }
}

#[test]
fn corrupted_gradient_point_differs_on_a_nonlinear_model() {
    let batch = gen_induction(1, 8, 12, 16).unwrap();
    let model = Model::<f64>::new(ModelConfig::induction_toy(16, 12, 3)).unwrap();
    let clean = scores(&model, &batch, Method::Eap, &PathSpec::default());
    let spec = PathSpec {
        grad_point: GradPoint::Corrupted,
        ..PathSpec::default()
    };
    assert!(rel_err(&scores(&model, &batch, Method::Eap, &spec), &clean) > 1e-3);
}

#[test]
fn linear_surrogate_methods_agree() {
    for seed in [0, 1] {
        let (model, batch) = linear_model(seed);
        let eap = scores(&model, &batch, Method::Eap, &PathSpec::default());
        for k in [1, 2, 5, 10] {
            for mode in [PathMode::Shared, PathMode::PerNode] {
                let spec = PathSpec {
                    path_mode: mode,
                    ..PathSpec::with_k(k)
                };
                let ig = scores(&model, &batch, Method::EapIg, &spec);
                let gp = scores(&model, &batch, Method::EapGp, &spec);
                assert!(rel_err(&ig, &eap) <= 1e-6, "ig k={k} {mode:?}");
                assert!(rel_err(&gp, &eap) <= 1e-6, "gp k={k} {mode:?}");
            }
        }
    }
}

#[test]
fn linear_surrogate_scores_are_patching_deltas() {
    let (model, batch) = linear_model(4);
    let eap = scores(&model, &batch, Method::Eap, &PathSpec::default());
    let truth = single_edge_deltas(&model, &batch);
    assert!(rel_err(&eap, &truth) <= 1e-6, "{}", rel_err(&eap, &truth));
    assert!(truth.iter().any(|d| d.abs() > 1e-3));
}

#[test]
fn quadratic_completeness_gap_matches_riemann_sum() {
    let (x, x_prime) = (
        Tensor::<f64>::full(&[1, 1], 1.0),
        Tensor::full(&[1, 1], 0.0),
    );
    let f = ScalarFn::square();
    for k in [4, 16, 256] {
        let points =
            gradient_points(&f, Method::EapIg, &PathSpec::with_k(k), &x, &x_prime).unwrap();
        let g = mean_loss_grads(&f, &points).unwrap()[0].data()[0];
        let attribution = (0.0 - 1.0) * g;
        let gap = (attribution - (0.0 - 1.0_f64)).abs();
        assert!((gap - 1.0 / k as f64).abs() < 1e-12, "k={k}: {gap}");
    }
}

#[test]
fn steep_sigmoid_saturates_the_straight_line_but_not_gradpath() {
    let f = ScalarFn::sigmoid(20.0, 0.5);
    let (x, x_prime) = (
        Tensor::<f64>::full(&[1, 1], 1.0),
        Tensor::full(&[1, 1], 0.0),
    );
    let line = straight_line_path(&x, &x_prime, 10).unwrap();
    let line_profile = saturation_profile(&f, &line, 0.05).unwrap();
    // σ' relative to its peak at the points 0.1, 0.2, 0.8, 0.9, 1.0 is below 0.05.
    let expected = (1..=10)
        .filter(|j| {
            let s = 1.0 / (1.0 + (-20.0 * (*j as f64 / 10.0 - 0.5)).exp());
            let peak = (1..=10)
                .map(|i| {
                    let t = 1.0 / (1.0 + (-20.0 * (i as f64 / 10.0 - 0.5)).exp());
                    t * (1.0 - t)
                })
                .fold(0.0, f64::max);
            s * (1.0 - s) < 0.05 * peak
        })
        .count() as f64
        / 10.0;
    assert_eq!(line_profile.saturated_fraction, expected);
    assert!(line_profile.saturated_fraction >= 0.4);

    let gp = build_gradpath(&f, &x, &x_prime, 10, StepRule::LiteralUnit).unwrap();
    let gp_profile = saturation_profile(&f, &gp, 0.05).unwrap();
    assert!(gp_profile.saturated_fraction < line_profile.saturated_fraction);
}

#[test]
fn gradpath_under_a_rotation_walks_the_straight_line() {
    let (c, s) = (0.6, 0.8);
    let map = LinearMap {
        w: Tensor::from_f64(&[2, 2], &[c, -s, s, c]).unwrap(),
        a: Tensor::from_f64(&[2], &[1.0, -2.0]).unwrap(),
    };
    let x = Tensor::<f64>::from_f64(&[2, 2], &[3.0, 1.0, -1.0, 2.0]).unwrap();
    let x_prime = Tensor::from_f64(&[2, 2], &[0.5, 0.5, 1.0, 1.0]).unwrap();
    let path = build_gradpath(&map, &x, &x_prime, 6, StepRule::EndpointBudget).unwrap();
    for p in path.points.iter().chain([&path.endpoint]) {
        for e in 0..2 {
            let d: [f64; 2] = [
                x.data()[2 * e] - x_prime.data()[2 * e],
                x.data()[2 * e + 1] - x_prime.data()[2 * e + 1],
            ];
            let q = [
                p.data()[2 * e] - x_prime.data()[2 * e],
                p.data()[2 * e + 1] - x_prime.data()[2 * e + 1],
            ];
            assert!((d[0] * q[1] - d[1] * q[0]).abs() < 1e-12);
        }
    }
    // Equal-length steps along the line land on x' exactly.
    assert!(path.mean_endpoint_residual() < 1e-12);
}

#[test]
fn flat_objective_falls_back_to_the_straight_line() {
    let flat = ScalarFn::new(|_| 1.0, |_| 0.0);
    let x = Tensor::<f64>::from_f64(&[1, 2], &[2.0, -1.0]).unwrap();
    let x_prime = Tensor::from_f64(&[1, 2], &[0.0, 3.0]).unwrap();
    let path = build_gradpath(&flat, &x, &x_prime, 4, StepRule::LiteralUnit).unwrap();
    assert_eq!(path.degenerate_from, vec![Some(0)]);
    assert!(path.mean_endpoint_residual() < 1e-12);
    let line = straight_line_path(&x_prime, &x, 4).unwrap();
    assert!(rel_err(&as_f64(&path.points[1]), &as_f64(&line.points[0])) < 1e-12);
}

#[test]
fn non_finite_gradient_names_the_step() {
    let blowup = ScalarFn::new(|x| x, |x| if x < 0.5 { f64::NAN } else { 1.0 });
    let x = Tensor::<f64>::full(&[1, 1], 1.0);
    let err = build_gradpath(
        &blowup,
        &x,
        &Tensor::full(&[1, 1], -3.0),
        5,
        StepRule::LiteralUnit,
    )
    .unwrap_err();
    assert!(matches!(err, Error::NonFinitePath { step: 1 }), "{err}");
}

#[test]
fn scores_are_deterministic() {
    let batch = gen_induction(5, 8, 12, 16).unwrap();
    let model = Model::<f32>::new(ModelConfig::induction_toy(16, 12, 5)).unwrap();
    let a = edge_scores(&model, &batch, Method::EapGp, &PathSpec::default()).unwrap();
    let b = edge_scores(&model, &batch, Method::EapGp, &PathSpec::default()).unwrap();
    assert_eq!(a.scores, b.scores);
}
