//! Test-side oracles shared by the integration suites.
#![allow(dead_code)]

use hgsr_core::graph::{Graph, NodeKind, ParamSlot, ParameterStore};
use hgsr_core::{Dims, Tensor4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Convs whose output feeds a ReLU.
pub fn relu_fed_params(graph: &Graph) -> Vec<String> {
    graph
        .convs()
        .filter(|(id, ..)| graph.consumers(*id).iter().any(|&c| graph.node(c).kind == NodeKind::Relu))
        .map(|(.., param)| param.to_string())
        .collect()
}

/// Parameters chosen so that every ReLU pre-activation stays at least 0.05
/// away from zero for inputs in [0,1]: even output channels see non-negative
/// weights and a positive bias, odd channels non-positive weights and a
/// negative bias. Convs not followed by a ReLU get signed uniform weights.
/// Finite differences are then taken on a smooth piece of the loss.
pub fn kink_free_store(graph: &Graph, seed: u64) -> ParameterStore<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gated = relu_fed_params(graph);
    let mut store = ParameterStore::new();
    for (param, spec) in graph.param_specs() {
        let fan_in = spec.fan_in() as f64;
        let wd = spec.weight_dims();
        let per_out = wd.len() / spec.out_channels;
        let mut weights = Vec::with_capacity(wd.len());
        let mut bias = Vec::with_capacity(spec.out_channels);
        if gated.contains(&param) {
            for o in 0..spec.out_channels {
                let sign = if o % 2 == 0 { 1.0 } else { -1.0 };
                for _ in 0..per_out {
                    weights.push(sign * rng.random_range(0.0..2.0 / fan_in));
                }
                bias.push(sign * rng.random_range(0.05..0.1));
            }
        } else {
            let bound = 1.0 / fan_in.sqrt();
            for _ in 0..wd.len() {
                weights.push(rng.random_range(-bound..bound));
            }
            for _ in 0..spec.out_channels {
                bias.push(rng.random_range(-bound..bound));
            }
        }
        store.insert(param, ParamSlot::new(Tensor4::from_vec(wd, weights).unwrap(), bias));
    }
    store
}

pub fn uniform_tensor(dims: Dims, lo: f64, hi: f64, seed: u64) -> Tensor4<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor4::from_fn(dims, |_, _, _, _| rng.random_range(lo..hi))
}

/// `sum((pred - target)^2) / (2N)`, written out independently of the crate.
pub fn half_mse(pred: &Tensor4<f64>, target: &Tensor4<f64>) -> f64 {
    let n = pred.dims().n as f64;
    pred.data().iter().zip(target.data()).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / (2.0 * n)
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

pub struct FdEntry {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    /// Some ReLU input differs in sign between the unperturbed and either
    /// perturbed evaluation.
    pub crossed: bool,
}

/// Central differences of the half-MSE loss for every parameter scalar, next
/// to the analytic gradient from the graph's reverse sweep.
pub fn finite_difference_sweep(
    graph: &Graph,
    store: &mut ParameterStore<f64>,
    input: &Tensor4<f64>,
    target: &Tensor4<f64>,
    scale: u32,
    h: f64,
    track_kinks: bool,
) -> Vec<FdEntry> {
    let loss = |s: &ParameterStore<f64>| {
        let trace = graph.forward_scale(s, input, scale).unwrap();
        half_mse(trace.output(scale).unwrap(), target)
    };
    let trace = graph.forward_scale(store, input, scale).unwrap();
    let pred = trace.output(scale).unwrap();
    let n = pred.dims().n as f64;
    let grad = Tensor4::from_vec(
        pred.dims(),
        pred.data().iter().zip(target.data()).map(|(p, t)| (p - t) / n).collect(),
    )
    .unwrap();
    graph.backward(store, &trace, &[(scale, grad)]).unwrap();

    let signs_center = track_kinks.then(|| relu_signs(graph, store, input, scale));
    let keys: Vec<String> = store.iter().map(|(k, _)| k.to_string()).collect();
    let mut out = Vec::new();
    for key in keys {
        let (n_w, n_b) = {
            let s = store.get(&key).unwrap();
            (s.weights.len(), s.bias.len())
        };
        for idx in 0..n_w + n_b {
            let slot = store.get(&key).unwrap();
            let (orig, analytic) = if idx < n_w {
                (slot.weights.data()[idx], slot.grad_weights.data()[idx])
            } else {
                (slot.bias[idx - n_w], slot.grad_bias[idx - n_w])
            };
            let set = |s: &mut ParameterStore<f64>, v: f64| {
                let slot = s.get_mut(&key).unwrap();
                if idx < n_w {
                    slot.weights.data_mut()[idx] = v;
                } else {
                    slot.bias[idx - n_w] = v;
                }
            };
            set(store, orig + h);
            let plus = loss(store);
            let signs_plus = track_kinks.then(|| relu_signs(graph, store, input, scale));
            set(store, orig - h);
            let minus = loss(store);
            let signs_minus = track_kinks.then(|| relu_signs(graph, store, input, scale));
            set(store, orig);
            out.push(FdEntry {
                param: key.clone(),
                index: idx,
                analytic,
                numeric: (plus - minus) / (2.0 * h),
                crossed: signs_plus != signs_center || signs_minus != signs_center,
            });
        }
    }
    out
}

/// Signs of every ReLU input under the current parameters.
pub fn relu_signs(graph: &Graph, store: &ParameterStore<f64>, input: &Tensor4<f64>, scale: u32) -> Vec<bool> {
    let trace = graph.forward_scale(store, input, scale).unwrap();
    let mut signs = Vec::new();
    for (id, node) in graph.nodes().iter().enumerate() {
        if node.kind == NodeKind::Relu {
            if let Some(pre) = trace.value(graph.node(id).inputs[0]) {
                signs.extend(pre.data().iter().map(|v| *v > 0.0));
            }
        }
    }
    signs
}

/// Naive quadruple-loop same-padded convolution.
pub fn naive_conv(input: &Tensor4<f64>, weights: &Tensor4<f64>, bias: &[f64]) -> Tensor4<f64> {
    let d = input.dims();
    let wd = weights.dims();
    let (k, p) = (wd.h, wd.h / 2);
    Tensor4::from_fn(Dims::new(d.n, wd.n, d.h, d.w), |n, o, y, x| {
        let mut acc = bias[o];
        for i in 0..d.c {
            for dy in 0..k {
                for dx in 0..k {
                    let (sy, sx) = (y as isize + dy as isize - p as isize, x as isize + dx as isize - p as isize);
                    if sy >= 0 && sx >= 0 && (sy as usize) < d.h && (sx as usize) < d.w {
                        acc += weights.at(o, i, dy, dx) * input.at(n, i, sy as usize, sx as usize);
                    }
                }
            }
        }
        acc
    })
}
