#![allow(dead_code)]

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tfmixer::data::{
    gen_synthetic, pre_align, window_split, AlignedSample, Component, EventSeries, SynthConfig,
};
use tfmixer::nn::ParamStore;
use tfmixer::{Graph, NodeId, Result, Tensor};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Gradients smaller than this are compared in absolute terms.
pub const FD_FLOOR: f64 = 1e-6;

/// `|a − n| / max(|a|, |n|, FD_FLOOR)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_FLOOR)
}

#[derive(Clone, Debug)]
pub struct FdReport {
    pub max_rel: f64,
    pub worst: String,
    pub checked: usize,
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
}

pub fn store_bindings(store: &ParamStore) -> BTreeMap<String, Tensor> {
    store.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
}

/// Compares reverse-mode gradients of a random projection of `build`'s
/// output against central differences, for every bound leaf that receives a
/// gradient.
pub fn check_gradients(
    bindings: &BTreeMap<String, Tensor>,
    seed: u64,
    build: impl FnOnce(&mut Graph) -> Result<NodeId>,
) -> Result<FdReport> {
    let mut g = Graph::new();
    let out = build(&mut g)?;
    check_graph(g, out, bindings, seed)
}

/// As [`check_gradients`] for an already built graph.
pub fn check_graph(mut g: Graph, out: NodeId, bindings: &BTreeMap<String, Tensor>, seed: u64) -> Result<FdReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = g.shape(out).to_vec();
    let scalar = if shape.is_empty() {
        out
    } else {
        let w = g.constant(random_tensor(&mut rng, &shape, 0.5, 1.5));
        let weighted = g.mul(out, w)?;
        g.sum(weighted)
    };
    g.forward(bindings, scalar)?;
    let grads = g.backward(scalar, &Tensor::scalar(1.0))?;
    let mut report = FdReport {
        max_rel: 0.0,
        worst: String::new(),
        checked: 0,
    };
    let mut probe = bindings.clone();
    for (name, grad) in grads.iter() {
        let base = bindings[name].clone();
        for i in 0..base.len() {
            let mut shifted = base.clone();
            shifted.data_mut()[i] = base.data()[i] + FD_STEP;
            probe.insert(name.to_string(), shifted.clone());
            let f_plus = g.forward(&probe, scalar)?.item();
            shifted.data_mut()[i] = base.data()[i] - FD_STEP;
            probe.insert(name.to_string(), shifted);
            let f_minus = g.forward(&probe, scalar)?.item();
            let numeric = (f_plus - f_minus) / (2.0 * FD_STEP);
            let err = rel_err(grad.data()[i], numeric);
            if report.checked == 0 || err > report.max_rel {
                report.max_rel = err;
                report.worst = format!("{name}[{i}]: analytic {:e}, numeric {numeric:e}", grad.data()[i]);
            }
            report.checked += 1;
        }
        probe.insert(name.to_string(), base);
    }
    Ok(report)
}

/// Synthetic periodic task: three variables whose components repeat an
/// integer number of times per lookback window of length `lookback`.
pub fn periodic_config(n_samples: usize, seed: u64) -> SynthConfig {
    let lookback = 0.8;
    let c = |cycles: f64, amplitude, phase| Component::new(cycles / lookback, amplitude, phase);
    SynthConfig {
        n_samples,
        n_variables: 3,
        rate: 20.0,
        span: 1.0,
        components: vec![
            vec![c(1.0, 1.0, 0.3), c(2.0, 0.5, 1.0)],
            vec![c(1.0, 0.8, 2.0), c(3.0, 0.6, 0.0)],
            vec![c(2.0, 0.6, 4.0), c(3.0, 0.9, 1.5)],
        ],
        noise_sd: 0.1,
        trend_slope: 0.0,
        start_jitter: 10.0,
        seed,
    }
}

/// Cuts each sample at `t_cut` keeping at most `max_targets` per variable.
pub fn cut_and_align(samples: &[EventSeries], t_cut: f64, max_targets: usize) -> Vec<AlignedSample> {
    samples
        .iter()
        .map(|s| pre_align(&window_split(s, t_cut, Some(max_targets)).expect("sample has history and targets")))
        .collect()
}

pub struct Splits {
    pub train: Vec<AlignedSample>,
    pub val: Vec<AlignedSample>,
    pub test: Vec<AlignedSample>,
}

/// The 200-sample periodic dataset, cut at 0.8, split 60/20/20.
pub fn periodic_splits(seed: u64) -> Splits {
    let ds = gen_synthetic(&periodic_config(200, seed)).unwrap();
    let mut all = cut_and_align(&ds.samples, 0.8, 3);
    let test = all.split_off(160);
    let val = all.split_off(120);
    Splits { train: all, val, test }
}

/// A handful of small two-variable samples with uneven lengths.
pub fn small_samples(count: usize, seed: u64) -> Vec<AlignedSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let mut s = EventSeries::empty(format!("s{i}"), 2);
            for n in 0..2 {
                let k = rng.random_range(2..7);
                let mut t = 0.0;
                for _ in 0..k {
                    t += rng.random_range(0.05..0.18);
                    s.events[n].push((t, rng.random_range(-2.0..2.0)));
                }
            }
            let q = rng.random_range(1..4);
            for n in 0..2 {
                let mut t = 1.0;
                for _ in 0..(q + n) % 3 + 1 {
                    t += rng.random_range(0.01..0.1);
                    s.queries[n].push(t);
                    s.targets[n].push(rng.random_range(-1.0..1.0));
                }
            }
            s.window = Some((0.0, 1.0));
            pre_align(&s)
        })
        .collect()
}
