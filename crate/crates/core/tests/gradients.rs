mod common;

use common::{finite_difference_sweep, kink_free_store, relative_error, uniform_tensor};
use hgsr_core::arch::{build_hgsrcnn, ModelConfig};
use hgsr_core::graph::{gradient_check, init_parameters, NodeKind};
use hgsr_core::Dims;

const H: f64 = 1e-5;

fn tiny(controller: u32) -> ModelConfig {
    let mut cfg = ModelConfig::tiny(8, 1, controller);
    cfg.controller = controller;
    cfg
}

fn min_relu_margin(cfg: &ModelConfig, seed: u64) -> f64 {
    let graph = build_hgsrcnn(cfg).unwrap();
    let store = kink_free_store(&graph, seed);
    let input = uniform_tensor(Dims::new(1, 3, 8, 8), 0.0, 1.0, seed + 1);
    let trace = graph.forward_scale(&store, &input, cfg.controller).unwrap();
    let mut margin = f64::INFINITY;
    for node in graph.nodes() {
        if node.kind == NodeKind::Relu && matches!(graph.node(node.inputs[0]).kind, NodeKind::Conv { .. }) {
            let pre = trace.value(node.inputs[0]).unwrap();
            margin = pre.data().iter().fold(margin, |m, v| m.min(v.abs()));
        }
    }
    margin
}

#[test]
fn kink_free_fixture_keeps_relu_inputs_away_from_zero() {
    for controller in [2, 3, 4] {
        let margin = min_relu_margin(&tiny(controller), 7);
        assert!(margin >= 0.05, "controller {controller}: margin {margin}");
    }
}

#[test]
fn every_parameter_gradient_matches_finite_differences() {
    for controller in [2, 3] {
        let cfg = tiny(controller);
        let graph = build_hgsrcnn(&cfg).unwrap();
        let mut store = kink_free_store(&graph, 7);
        let input = uniform_tensor(Dims::new(1, 3, 8, 8), 0.0, 1.0, 8);
        let s = controller as usize;
        let target = uniform_tensor(Dims::new(1, 3, 8 * s, 8 * s), 0.0, 1.0, 9);
        let entries = finite_difference_sweep(&graph, &mut store, &input, &target, controller, H, false);
        assert_eq!(entries.len(), store.param_count());
        let worst = entries
            .iter()
            .map(|e| (relative_error(e.analytic, e.numeric), e))
            .max_by(|a, b| a.0.total_cmp(&b.0))
            .unwrap();
        assert!(
            worst.0 < 1e-4,
            "x{controller}: {} [{}] analytic {} numeric {} rel {}",
            worst.1.param,
            worst.1.index,
            worst.1.analytic,
            worst.1.numeric,
            worst.0
        );
    }
}

#[test]
fn default_init_gradients_match_near_the_target() {
    let cfg = tiny(2);
    let graph = build_hgsrcnn(&cfg).unwrap();
    let mut store = init_parameters::<f64>(&graph, 1);
    let input = uniform_tensor(Dims::new(1, 3, 8, 8), 0.0, 1.0, 2);
    // A target near the prediction keeps the loss small, so cancellation in
    // the difference quotient stays far below the tolerance.
    let pred = graph.forward_scale(&store, &input, 2).unwrap().output(2).unwrap().clone();
    let mut target = pred;
    target.add_assign(&uniform_tensor(target.dims(), -0.01, 0.01, 3)).unwrap();
    let entries = finite_difference_sweep(&graph, &mut store, &input, &target, 2, H, true);
    let smooth: Vec<_> = entries.iter().filter(|e| !e.crossed).collect();
    assert!(smooth.len() * 10 >= entries.len() * 9, "{} of {} smooth", smooth.len(), entries.len());
    for e in smooth {
        let err = relative_error(e.analytic, e.numeric);
        assert!(err < 1e-4, "{} [{}] analytic {} numeric {} rel {err}", e.param, e.index, e.analytic, e.numeric);
    }
}

#[test]
fn library_checker_agrees_with_test_sweep() {
    let cfg = tiny(2);
    let graph = build_hgsrcnn(&cfg).unwrap();
    let mut store = kink_free_store(&graph, 11);
    let input = uniform_tensor(Dims::new(1, 3, 8, 8), 0.0, 1.0, 12);
    let target = uniform_tensor(Dims::new(1, 3, 16, 16), 0.0, 1.0, 13);
    let report = gradient_check(&graph, &mut store, &input, &target, 2, H).unwrap();
    let entries = finite_difference_sweep(&graph, &mut store, &input, &target, 2, H, false);
    let ours = entries.iter().map(|e| relative_error(e.analytic, e.numeric)).fold(0.0, f64::max);
    assert_eq!(report.checked, entries.len());
    assert!((report.max_relative_error - ours).abs() < 1e-9, "{} vs {ours}", report.max_relative_error);
}

