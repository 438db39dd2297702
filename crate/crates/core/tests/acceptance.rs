//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line per
//! criterion and exits non-zero if any fails.

mod common;

use std::collections::BTreeMap;
use std::f64::consts::TAU;
use std::panic::{self, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::*;
use tfmixer::data::{make_batch, pre_align, AlignedSample, EventSeries};
use tfmixer::frequency::{inverse_nudft, nudft};
use tfmixer::local_time::{
    dual_mixing, encode_patches, positional_encoding, Aggregator, AggregationKind, MixBlock, QueryMixer, TimeEmbedding,
    Ttcn,
};
use tfmixer::model::{Ablation, Ablations, ModelConfig, ModelInput, TfMixer};
use tfmixer::nn::ParamStore;
use tfmixer::output::{fuse, Decoder};
use tfmixer::revin::{masked_denormalize, masked_normalize};
use tfmixer::training::{
    attach_losses, batch_gradients, evaluate, forecasting_loss, historical_mean, predict_samples, reconstruction_loss,
    train, Adam, TrainConfig,
};
use tfmixer::{Graph, NodeId, Result, Tensor};

type Outcome = std::result::Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn verdict(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn fail(e: impl std::fmt::Display) -> String {
    format!("error: {e}")
}

// ---------------------------------------------------------------- A1

struct OpSuite {
    rng: ChaCha8Rng,
    results: Vec<(String, FdReport)>,
}

impl OpSuite {
    /// Random leaves named by `inputs`, plus any fixed `params`.
    fn case(
        &mut self,
        name: &str,
        params: &ParamStore,
        inputs: &[(&str, &[usize], f64, f64)],
        build: impl FnOnce(&mut Graph, &[NodeId]) -> Result<NodeId>,
    ) -> Result<()> {
        let mut bindings = store_bindings(params);
        for (n, shape, lo, hi) in inputs {
            bindings.insert(n.to_string(), random_tensor(&mut self.rng, shape, *lo, *hi));
        }
        let seed = self.rng.random();
        let report = check_gradients(&bindings, seed, |g| {
            let ids = inputs
                .iter()
                .map(|(n, shape, ..)| g.leaf(n, shape, true))
                .collect::<Result<Vec<_>>>()?;
            build(g, &ids)
        })?;
        self.results.push((name.to_string(), report));
        Ok(())
    }

    fn plain(
        &mut self,
        name: &str,
        inputs: &[(&str, &[usize], f64, f64)],
        build: impl FnOnce(&mut Graph, &[NodeId]) -> Result<NodeId>,
    ) -> Result<()> {
        self.case(name, &ParamStore::new(), inputs, build)
    }
}

fn random_mask(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let mut m = Tensor::from_fn(shape.to_vec(), |_| if rng.random_bool(0.6) { 1.0 } else { 0.0 });
    m.data_mut()[0] = 1.0;
    m
}

fn op_suite() -> Result<Vec<(String, FdReport)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mask = random_mask(&mut rng, &[2, 3]);
    let nudft_mask = random_mask(&mut rng, &[2, 5, 3]);
    let nudft_times = random_tensor(&mut rng, &[2, 5], 0.0, 1.0);
    let query_times = random_tensor(&mut rng, &[2, 3, 6], 0.0, 1.3);
    let embed_t = random_tensor(&mut rng, &[4, 1], 0.0, 1.2);
    let decode_q = random_tensor(&mut rng, &[2, 3, 2], 1.0, 1.3);
    let loss_targets = random_tensor(&mut rng, &[2, 3, 4], -1.0, 1.0);
    let loss_mask = random_mask(&mut rng, &[2, 3, 4]);
    let mut s = OpSuite { rng, results: Vec::new() };

    let m = [2usize, 3];
    let x = ("a", &m[..], -1.0, 1.0);
    let y = ("b", &m[..], -1.0, 1.0);
    s.plain("add", &[x, ("b", &[3], -1.0, 1.0)], |g, v| g.add(v[0], v[1]))?;
    s.plain("sub", &[x, y], |g, v| g.sub(v[0], v[1]))?;
    s.plain("mul", &[x, ("b", &[2, 1], -1.0, 1.0)], |g, v| g.mul(v[0], v[1]))?;
    s.plain("div", &[x, ("b", &m, 0.5, 2.0)], |g, v| g.div(v[0], v[1]))?;
    s.plain("maximum", &[x, y], |g, v| g.maximum(v[0], v[1]))?;
    s.plain("neg", &[x], |g, v| Ok(g.neg(v[0])))?;
    s.plain("scale", &[x], |g, v| Ok(g.scale(v[0], -2.5)))?;
    s.plain("sin", &[x], |g, v| Ok(g.sin(v[0])))?;
    s.plain("cos", &[x], |g, v| Ok(g.cos(v[0])))?;
    s.plain("abs", &[("a", &m, 0.1, 1.0)], |g, v| {
        let n = g.neg(v[0]);
        Ok(g.abs(n))
    })?;
    s.plain("gelu", &[("a", &m, -3.0, 3.0)], |g, v| Ok(g.gelu(v[0])))?;
    s.plain("clamp", &[x], |g, v| Ok(g.clamp(v[0], -0.5, 0.5)))?;
    s.plain("softmax", &[("a", &[2, 4], -2.0, 2.0)], |g, v| Ok(g.softmax(v[0])))?;
    s.plain("matmul", &[("a", &[2, 3, 4], -1.0, 1.0), ("b", &[2, 4, 2], -1.0, 1.0)], |g, v| {
        g.matmul(v[0], v[1])
    })?;
    s.plain("matmul_shared", &[("a", &[2, 3, 4], -1.0, 1.0), ("b", &[4, 2], -1.0, 1.0)], |g, v| {
        g.matmul(v[0], v[1])
    })?;
    s.plain("permute", &[("a", &[2, 3, 4], -1.0, 1.0)], |g, v| g.permute(v[0], &[2, 0, 1]))?;
    s.plain("transpose", &[x], |g, v| g.transpose(v[0]))?;
    s.plain("reshape", &[x], |g, v| g.reshape(v[0], &[3, 2]))?;
    s.plain("broadcast_to", &[("a", &[1, 3], -1.0, 1.0)], |g, v| g.broadcast_to(v[0], &[4, 3]))?;
    s.plain("concat", &[x, ("b", &[2, 2], -1.0, 1.0)], |g, v| g.concat(&[v[0], v[1]], 1))?;
    s.plain("slice", &[("a", &[2, 5], -1.0, 1.0)], |g, v| g.slice(v[0], 1, 1, 4))?;
    s.plain("sum_axis", &[("a", &[2, 3, 4], -1.0, 1.0)], |g, v| g.sum_axis(v[0], 1, true))?;
    s.plain("sum", &[x], |g, v| Ok(g.sum(v[0])))?;
    let mk = mask.clone();
    s.plain("masked_sum", &[x], move |g, v| g.masked_sum(v[0], mk))?;
    s.plain("masked_mean", &[x], move |g, v| g.masked_mean(v[0], mask))?;
    s.plain(
        "layernorm",
        &[("a", &[2, 3, 4], -1.0, 1.0), ("gain", &[4], 0.5, 1.5), ("bias", &[4], -0.5, 0.5)],
        |g, v| g.layernorm(v[0], v[1], v[2]),
    )?;
    s.plain("segment_pool", &[("logits", &[6, 3], -2.0, 2.0), ("values", &[6, 3], -1.0, 1.0)], |g, v| {
        g.segment_pool(v[0], v[1], vec![vec![0, 3], vec![], vec![1, 2, 5], vec![4]])
    })?;

    s.plain("nudft", &[("values", &[2, 5, 3], -1.0, 1.0), ("omega", &[4], 0.5, 4.0)], |g, v| {
        let t = g.constant(nudft_times);
        let (re, im) = nudft(g, t, v[0], &nudft_mask, v[1])?;
        g.concat(&[re, im], 2)
    })?;
    s.plain(
        "inverse_nudft",
        &[("re", &[2, 3, 4], -1.0, 1.0), ("im", &[2, 3, 4], -1.0, 1.0), ("omega", &[4], 0.5, 4.0)],
        |g, v| {
            let t = g.constant(query_times);
            inverse_nudft(g, v[0], v[1], t, v[2])
        },
    )?;

    let mut prng = ChaCha8Rng::seed_from_u64(12);
    let mut store = ParamStore::new();
    let embed = TimeEmbedding::init(&mut store, 5)?;
    store.insert(&embed.alpha, random_tensor(&mut prng, &[5], -0.5, 0.5));
    let e = embed.clone();
    s.case("time_embed", &store, &[], |g, _| {
        let t = g.constant(embed_t);
        e.apply(g, &store, t)
    })?;

    let mut store = ParamStore::new();
    let ttcn = Ttcn::init(&mut store, 6, 8, 3, &mut prng);
    s.case("ttcn", &store, &[("z", &[7, 6], -1.0, 1.0)], |g, v| {
        ttcn.apply(g, &store, v[0], vec![vec![0, 4], vec![1], vec![], vec![2, 3, 5, 6]])
    })?;

    let mut store = ParamStore::new();
    let mixer = QueryMixer::init(&mut store, 3, 4, &mut prng);
    let pe = positional_encoding(5, 4);
    let (mx, pe2) = (mixer.clone(), pe.clone());
    s.case("query_mix_tokens", &store, &[("patches", &[2, 3, 5, 4], -1.0, 1.0)], |g, v| {
        Ok(mx.apply(g, &store, v[0], &pe2)?.0)
    })?;
    s.case("query_mix_attention", &store, &[("patches", &[2, 3, 5, 4], -1.0, 1.0)], |g, v| {
        Ok(mixer.apply(g, &store, v[0], &pe)?.1)
    })?;

    let mut store = ParamStore::new();
    let blocks: Vec<MixBlock> = (0..2).map(|i| MixBlock::init(&mut store, i, 3, 2, 4, &mut prng)).collect();
    s.case("dual_mixing", &store, &[("h", &[2, 2, 3, 4], -1.0, 1.0)], |g, v| {
        dual_mixing(g, &store, &blocks, v[0])
    })?;

    for kind in [AggregationKind::Linear, AggregationKind::Conv] {
        let mut store = ParamStore::new();
        let agg = Aggregator::init(&mut store, kind, 3, 4, &mut prng);
        s.case(&format!("aggregate_{kind:?}").to_lowercase(), &store, &[("h", &[2, 2, 3, 4], -1.0, 1.0)], |g, v| {
            agg.apply(g, &store, v[0])
        })?;
    }

    let mut store = ParamStore::new();
    let embed = TimeEmbedding::init(&mut store, 3)?;
    let decoder = Decoder::init(&mut store, 4, 3, &mut prng);
    s.case("decode", &store, &[("h_joint", &[2, 3, 4], -1.0, 1.0)], |g, v| {
        let q = g.constant(decode_q);
        decoder.apply(g, &store, &embed, v[0], q)
    })?;
    s.plain(
        "fuse",
        &[("h_time", &[2, 4], -1.0, 1.0), ("h_freq", &[2, 4], -1.0, 1.0), ("lambda", &[1], 0.5, 1.5)],
        |g, v| fuse(g, v[0], v[1], v[2]),
    )?;
    let (lt, lm) = (loss_targets.clone(), loss_mask.clone());
    s.plain("forecasting_loss", &[("pred", &[2, 3, 4], -1.0, 1.0)], move |g, v| {
        forecasting_loss(g, v[0], &lt, &lm)
    })?;
    s.plain("reconstruction_loss", &[("recon", &[2, 3, 4], -1.0, 1.0)], move |g, v| {
        reconstruction_loss(g, v[0], &loss_targets, &loss_mask)
    })?;
    Ok(s.results)
}

/// `N = 2`, `L = 6`, `K = 2`, `D = 4`, `W = 2`.
fn tiny_end_to_end() -> Result<FdReport> {
    let config = ModelConfig {
        n_variables: 2,
        d_model: 4,
        n_freqs: 2,
        n_queries: 2,
        n_patches: 3,
        time_dim: 3,
        mix_layers: 1,
        ..ModelConfig::new(2)
    };
    let mut model = TfMixer::new(config, 5)?;
    // Move the scalars and zero-initialized parameters off their starting
    // points so every gradient path is exercised.
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for name in model.params.names().map(str::to_string).collect::<Vec<_>>() {
        let t = model.params.get_mut(&name).expect("listed");
        for x in t.data_mut() {
            *x += rng.random_range(-0.2..0.2);
        }
    }
    let mut s = EventSeries::empty("tiny", 2);
    s.events[0] = vec![(0.05, 0.3), (0.2, -0.4), (0.45, 1.1), (0.9, 0.2)];
    s.events[1] = vec![(0.2, 2.0), (0.6, 1.0), (0.7, 3.5), (0.9, 2.5)];
    s.queries = vec![vec![1.1, 1.2], vec![1.15]];
    s.targets = vec![vec![0.5, -0.2], vec![2.8]];
    s.window = Some((0.0, 1.0));
    let a = pre_align(&s);
    assert_eq!(a.len(), 6);
    let input = ModelInput::from_batch(&make_batch(&[a]), &model.config)?;
    let mut pass = model.build(&input, &Ablations::none())?;
    let nodes = attach_losses(&mut pass, &input, 0.1, &Ablations::none())?;
    check_graph(pass.graph, nodes.total, &store_bindings(&model.params), 7)
}

fn a1() -> Outcome {
    let start = Instant::now();
    let ops = op_suite().map_err(fail)?;
    let e2e = tiny_end_to_end().map_err(fail)?;
    let elapsed = start.elapsed().as_secs_f64();
    let (worst_name, worst) = ops
        .iter()
        .max_by(|a, b| a.1.max_rel.total_cmp(&b.1.max_rel))
        .expect("non-empty");
    let failing: Vec<_> = ops.iter().filter(|(_, r)| r.max_rel >= 1e-4).map(|(n, r)| format!("{n} ({})", r.worst)).collect();
    let detail = format!(
        "{} ops, worst {worst_name} rel {:.2e} at {} (< 1e-4); tiny model {} params, rel {:.2e} (< 1e-3); {elapsed:.1}s",
        ops.len(),
        worst.max_rel,
        worst.worst,
        e2e.checked,
        e2e.max_rel
    );
    let ok = failing.is_empty() && e2e.max_rel < 1e-3 && elapsed < 60.0;
    verdict(
        ok,
        if ok {
            detail
        } else {
            format!("{detail}; failing: {failing:?}; e2e worst {}", e2e.worst)
        },
    )
}

// ---------------------------------------------------------------- A2

/// Textbook DFT `Σ x_j e^{sign·2πi k j / L}`, scaled by `1/L`.
fn brute_dft(x: &[f64], k: usize, sign: f64) -> (f64, f64) {
    let l = x.len() as f64;
    x.iter().enumerate().fold((0.0, 0.0), |(re, im), (j, &v)| {
        let a = sign * TAU * k as f64 * j as f64 / l;
        (re + v * a.cos() / l, im + v * a.sin() / l)
    })
}

fn a2() -> Outcome {
    let (l, k) = (64usize, 31usize);
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let x: Vec<f64> = (0..l).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut g = Graph::new();
    let t = g.constant(Tensor::from_fn([1, l], |j| j as f64 / l as f64));
    let v = g.constant(Tensor::new([1, l, 1], x.clone()).map_err(fail)?);
    let omega = g.constant(Tensor::from_fn([k], |i| (i + 1) as f64));
    let (re, im) = nudft(&mut g, t, v, &Tensor::ones([1, l, 1]), omega).map_err(fail)?;
    g.evaluate(&BTreeMap::new()).map_err(fail)?;
    let (re, im) = (g.value(re).unwrap().clone(), g.value(im).unwrap().clone());
    let (mut minus, mut plus) = (0.0f64, 0.0f64);
    for i in 0..k {
        let (r, s) = (re.data()[i], im.data()[i]);
        let (fr, fi) = brute_dft(&x, i + 1, -1.0);
        minus = minus.max((r - fr).abs()).max((s - fi).abs());
        let (fr, fi) = brute_dft(&x, i + 1, 1.0);
        plus = plus.max((r - fr).abs()).max((-s - fi).abs());
    }
    verdict(
        minus <= 1e-9 && plus <= 1e-9,
        format!(
            "64-point grid, k = 1..31: (R, I) vs e^(-i) DFT/L max err {minus:.1e}; (R, -I) vs e^(+i) DFT/L max err {plus:.1e} (<= 1e-9)"
        ),
    )
}

// ---------------------------------------------------------------- A3

fn a3() -> Outcome {
    let (l, k, freq, amp, phase) = (512usize, 16usize, 5.0, 2.5, 0.7);
    let times: Vec<f64> = (0..l).map(|j| j as f64 / l as f64).collect();
    let x: Vec<f64> = times.iter().map(|t| amp * (TAU * freq * t + phase).cos()).collect();
    // Independent oracle: direct sums over the same grid.
    let oracle: Vec<f64> = times
        .iter()
        .map(|&t| {
            (1..=k)
                .map(|w| {
                    let w = w as f64;
                    let (mut r, mut i) = (0.0, 0.0);
                    for (&tj, &xj) in times.iter().zip(&x) {
                        r += xj * (TAU * w * tj).cos() / l as f64;
                        i -= xj * (TAU * w * tj).sin() / l as f64;
                    }
                    r * (TAU * w * t).cos() - i * (TAU * w * t).sin()
                })
                .sum()
        })
        .collect();
    let mut g = Graph::new();
    let t = g.constant(Tensor::new([1, l], times.clone()).map_err(fail)?);
    let v = g.constant(Tensor::new([1, l, 1], x.clone()).map_err(fail)?);
    let omega = g.constant(Tensor::from_fn([k], |i| (i + 1) as f64));
    let (re, im) = nudft(&mut g, t, v, &Tensor::ones([1, l, 1]), omega).map_err(fail)?;
    let tq = g.constant(Tensor::new([1, 1, l], times.clone()).map_err(fail)?);
    let back = inverse_nudft(&mut g, re, im, tq, omega).map_err(fail)?;
    let back = g.forward(&BTreeMap::new(), back).map_err(fail)?;
    let mut err_half = 0.0f64;
    let mut err_oracle = 0.0f64;
    for (j, &y) in back.data().iter().enumerate() {
        err_half = err_half.max((y - x[j] / 2.0).abs());
        err_oracle = err_oracle.max((y - oracle[j]).abs());
    }
    verdict(
        err_half <= 0.02 * amp && err_oracle <= 1e-9,
        format!(
            "L = 512, A = {amp}: round trip vs (A/2)cos max err {:.2e} = {:.2e}·A (<= 2% of A); vs brute-force oracle {err_oracle:.1e}",
            err_half,
            err_half / amp
        ),
    )
}

// ---------------------------------------------------------------- A4

fn losses(model: &TfMixer, input: &ModelInput) -> Result<(Tensor, f64, f64)> {
    let mut pass = model.build(input, &Ablations::none())?;
    let nodes = attach_losses(&mut pass, input, 0.1, &Ablations::none())?;
    pass.graph.evaluate(&model.params)?;
    let fore = pass.graph.value(nodes.fore).expect("evaluated").item();
    let recon = pass.graph.value(nodes.recon.expect("full model")).expect("evaluated").item();
    Ok((pass.graph.value(pass.prediction).expect("evaluated").clone(), fore, recon))
}

fn a4() -> Outcome {
    let samples = small_samples(5, 41);
    let model = TfMixer::new(ModelConfig { d_model: 8, ..ModelConfig::new(2) }, 3).map_err(fail)?;
    let batch = make_batch(&samples);
    let mut garbage = batch.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let (mut masked, mut padded) = (0, 0);
    for i in 0..garbage.values.len() {
        if garbage.mask[i] == 0.0 {
            garbage.values[i] = if rng.random_bool(0.5) { f64::NAN } else { rng.random_range(-1e6..1e6) };
            masked += 1;
        }
    }
    for i in 0..garbage.times.len() {
        if garbage.row_mask[i] == 0.0 {
            garbage.times[i] += rng.random_range(-50.0..50.0);
        }
    }
    for i in 0..garbage.queries.len() {
        if garbage.query_mask[i] == 0.0 {
            garbage.queries[i] = rng.random_range(-1e3..1e3);
            garbage.targets[i] = rng.random_range(-1e6..1e6);
            padded += 1;
        }
    }
    let clean = ModelInput::from_batch(&batch, &model.config).map_err(fail)?;
    let dirty = ModelInput::from_batch(&garbage, &model.config).map_err(fail)?;
    let (p0, f0, r0) = losses(&model, &clean).map_err(fail)?;
    let (p1, f1, r1) = losses(&model, &dirty).map_err(fail)?;
    let mut identical = true;
    for i in 0..p0.len() {
        if batch.query_mask[i] != 0.0 && p0.data()[i].to_bits() != p1.data()[i].to_bits() {
            identical = false;
        }
    }
    let (df, dr) = ((f0 - f1).abs(), (r0 - r1).abs());
    verdict(
        identical && df <= 1e-12 && dr <= 1e-12 && masked > 0 && padded > 0,
        format!(
            "{masked} masked values and {padded} padded queries perturbed: predictions bit-identical = {identical}; |Δfore| {df:.1e}, |Δrecon| {dr:.1e} (<= 1e-12)"
        ),
    )
}

// ---------------------------------------------------------------- A5

fn a5() -> Outcome {
    let start = Instant::now();
    let splits = periodic_splits(2024);
    let base = historical_mean(&splits.test);
    let cfg = TrainConfig::default();
    let run = |ablations: Ablations| -> Result<(f64, usize)> {
        let mut model = TfMixer::new(ModelConfig::new(3), cfg.seed)?;
        let tc = TrainConfig {
            ablations: ablations.clone(),
            ..cfg.clone()
        };
        let out = train(&mut model, &splits.train, &splits.val, &tc, |_| {})?;
        Ok((evaluate(&model, &splits.test, &ablations, tc.batch_size)?.mse, out.history.len()))
    };
    let (full, e_full) = run(Ablations::none()).map_err(fail)?;
    let (no_freq, e_nf) = run(Ablations::only(Ablation::NoFreq)).map_err(fail)?;
    let elapsed = start.elapsed().as_secs_f64();
    verdict(
        full <= 0.5 * base.mse && full < no_freq && elapsed < 300.0,
        format!(
            "test MSE full {full:.4} ({e_full} epochs) vs historical mean {:.4}: ratio {:.3} (<= 0.5); no_freq {no_freq:.4} ({e_nf} epochs); {elapsed:.0}s",
            base.mse,
            full / base.mse
        ),
    )
}

// ---------------------------------------------------------------- A6

fn a6() -> Outcome {
    let (n_samples, n_obs, freq, steps, lr) = (32, 40, 3.0, 200, 1e-2);
    let mut rng = ChaCha8Rng::seed_from_u64(61);
    let samples: Vec<AlignedSample> = (0..n_samples)
        .map(|i| {
            let phase = rng.random_range(0.0..TAU);
            let mut s = EventSeries::empty(format!("c{i}"), 1);
            let mut times: Vec<f64> = (0..n_obs).map(|_| rng.random_range(0.0..1.0)).collect();
            times.sort_by(f64::total_cmp);
            s.events[0] = times.iter().map(|&t| (t, (TAU * freq * t + phase).cos())).collect();
            s.queries[0] = vec![1.05];
            s.targets[0] = vec![0.0];
            s.window = Some((0.0, 1.0));
            pre_align(&s)
        })
        .collect();
    let mut model = TfMixer::new(ModelConfig::new(1), 62).map_err(fail)?;
    let input = ModelInput::from_batch(&make_batch(&samples), &model.config).map_err(fail)?;
    let mut adam = Adam::new(lr);
    let mut step = |model: &mut TfMixer, update: bool| -> Result<f64> {
        let mut pass = model.build(&input, &Ablations::none())?;
        let recon = pass.reconstruction.expect("full model");
        let loss = reconstruction_loss(&mut pass.graph, recon, &input.values_by_variable, &input.mask_by_variable)?;
        let value = pass.graph.forward(&model.params, loss)?.item();
        if update {
            let grads = pass.graph.backward(loss, &Tensor::scalar(1.0))?;
            adam.update(&mut model.params, &grads);
        }
        Ok(value)
    };
    let initial = step(&mut model, false).map_err(fail)?;
    for _ in 0..steps {
        step(&mut model, true).map_err(fail)?;
    }
    let last = step(&mut model, false).map_err(fail)?;
    verdict(
        last < 0.1,
        format!("single cosine at ω = {freq}, {n_samples}×{n_obs} obs, Adam lr {lr}: recon MAE {initial:.3} -> {last:.4} after {steps} steps (< 0.1)"),
    )
}

// ---------------------------------------------------------------- A7

fn a7() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(71);
    let (mut round, mut mean_err, mut std_err, mut checked) = (0.0f64, 0.0f64, 0.0f64, 0);
    for _ in 0..500 {
        let (l, n) = (rng.random_range(1..30), rng.random_range(1..5));
        let scale = 10f64.powf(rng.random_range(-3.0..3.0));
        let offset = rng.random_range(-1e3..1e3);
        let x = Tensor::from_fn([l, n], |_| offset + scale * rng.random_range(-1.0..1.0));
        let m = Tensor::from_fn([l, n], |_| if rng.random_bool(0.7) { 1.0 } else { 0.0 });
        let (v, stats) = masked_normalize(&x, &m).map_err(fail)?;
        let back = masked_denormalize(&v, &stats).map_err(fail)?;
        for i in 0..x.len() {
            if m.data()[i] != 0.0 {
                round = round.max((back.data()[i] - x.data()[i]).abs() / scale);
            }
        }
        for j in 0..n {
            let obs: Vec<f64> = (0..l).filter(|&i| m.data()[i * n + j] != 0.0).map(|i| v.data()[i * n + j]).collect();
            let raw: Vec<f64> = (0..l).filter(|&i| m.data()[i * n + j] != 0.0).map(|i| x.data()[i * n + j]).collect();
            if raw.len() < 2 || raw.iter().all(|&r| r == raw[0]) {
                continue;
            }
            let mu = obs.iter().sum::<f64>() / obs.len() as f64;
            let sd = (obs.iter().map(|o| (o - mu).powi(2)).sum::<f64>() / obs.len() as f64).sqrt();
            mean_err = mean_err.max(mu.abs());
            std_err = std_err.max((sd - 1.0).abs());
            checked += 1;
        }
    }
    verdict(
        round <= 1e-10 && mean_err <= 1e-9 && std_err <= 1e-9,
        format!(
            "500 random masked matrices: round trip err {round:.1e} (<= 1e-10, relative to scale); {checked} columns with observed mean err {mean_err:.1e}, std err {std_err:.1e} (<= 1e-9)"
        ),
    )
}

// ---------------------------------------------------------------- A8

fn a8() -> Outcome {
    let samples = small_samples(6, 81);
    let config = ModelConfig { d_model: 8, ..ModelConfig::new(2) };
    let model = TfMixer::new(config.clone(), 8).map_err(fail)?;
    let none = Ablations::none();

    let input = ModelInput::from_batch(&make_batch(&samples), &config).map_err(fail)?;
    let pass = model.run(&input, &none).map_err(fail)?;
    let attn = pass.graph.value(pass.attention.expect("query mixing on")).expect("evaluated");
    let p = *attn.shape().last().expect("rank 4");
    let row_err = attn
        .data()
        .chunks(p)
        .map(|r| (r.iter().sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max);

    // Permute observation rows and the order inside each patch.
    let patches = &input.patches;
    let n_obs = patches.times.len();
    let mut rng = ChaCha8Rng::seed_from_u64(82);
    let mut perm: Vec<usize> = (0..n_obs).collect();
    rand::seq::SliceRandom::shuffle(&mut perm[..], &mut rng);
    let mut shuffled = patches.clone();
    for (old, &new) in perm.iter().enumerate() {
        shuffled.times.data_mut()[new] = patches.times.data()[old];
        shuffled.values.data_mut()[new] = patches.values.data()[old];
    }
    for group in shuffled.groups.iter_mut() {
        for idx in group.iter_mut() {
            *idx = perm[*idx];
        }
        group.reverse();
    }
    let encode = |inputs| -> Result<Tensor> {
        let mut store = ParamStore::new();
        let embed = TimeEmbedding::init(&mut store, config.time_dim)?;
        let ttcn = Ttcn::init(&mut store, config.time_dim + 1, 8, 7, &mut ChaCha8Rng::seed_from_u64(83));
        let mut g = Graph::new();
        let out = encode_patches(&mut g, &store, &embed, &ttcn, inputs)?;
        g.forward(&store, out)
    };
    let perm_err = encode(patches)
        .and_then(|a| Ok(a.max_abs_diff(&encode(&shuffled)?)))
        .map_err(fail)?;

    let together = predict_samples(&model, &samples, &none, samples.len()).map_err(fail)?;
    let alone = predict_samples(&model, &samples, &none, 1).map_err(fail)?;
    let batch_err = together
        .iter()
        .flatten()
        .flatten()
        .zip(alone.iter().flatten().flatten())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);

    let history = |seed| -> Result<(Vec<u64>, ParamStore)> {
        let mut m = TfMixer::new(config.clone(), seed)?;
        let tc = TrainConfig {
            epochs: 3,
            batch_size: 2,
            seed,
            ..TrainConfig::default()
        };
        let out = train(&mut m, &samples[..4], &samples[4..], &tc, |_| {})?;
        let bits = out
            .history
            .iter()
            .flat_map(|r| [r.train_total, r.val_mae, r.val_mse])
            .map(f64::to_bits)
            .collect();
        Ok((bits, m.params))
    };
    let (h1, p1) = history(5).map_err(fail)?;
    let (h2, p2) = history(5).map_err(fail)?;
    let params_equal = p1.iter().zip(p2.iter()).all(|((a, x), (b, y))| a == b && x == y);
    let deterministic = h1 == h2 && params_equal;

    verdict(
        row_err <= 1e-12 && perm_err <= 1e-10 && batch_err <= 1e-10 && deterministic,
        format!(
            "attention row-sum err {row_err:.1e} (<= 1e-12); TTCN permutation err {perm_err:.1e} (<= 1e-10); batched vs single err {batch_err:.1e} (<= 1e-10); same-seed history and parameters bit-identical = {deterministic}"
        ),
    )
}

// ---------------------------------------------------------------- A9

fn a9() -> Outcome {
    let splits = periodic_splits(2024);
    let probe = ModelInput::from_batch(&make_batch(&splits.train[..16]), &ModelConfig::new(3)).map_err(fail)?;
    let mut lines = Vec::new();
    let mut ok = true;
    for flag in Ablation::ALL {
        let ablations = Ablations::only(flag);
        let mut model = TfMixer::new(ModelConfig::new(3), 2024).map_err(fail)?;
        let before = model.params.clone();
        let tc = TrainConfig {
            epochs: 5,
            patience: 0,
            ablations: ablations.clone(),
            ..TrainConfig::default()
        };
        let out = train(&mut model, &splits.train, &splits.val, &tc, |_| {}).map_err(fail)?;
        let finite = out.history.len() == 5 && out.history.iter().all(|r| r.train_total.is_finite() && r.val_mse.is_finite());
        let (report, grads) = batch_gradients(&model, &probe, tc.gamma, &ablations).map_err(fail)?;
        let removed: Vec<&str> = model.params.names().filter(|n| !ablations.uses(n)).collect();
        let leaked = removed.iter().filter(|n| grads.get(n).is_some()).count();
        let untouched = removed.iter().all(|n| model.params.get(n) == before.get(n));
        let mut check = finite && leaked == 0 && untouched;
        let mut extra = String::new();
        if flag == Ablation::NoRecon {
            // Same total and gradients as the full objective with γ = 0.
            let (zero, zgrads) = batch_gradients(&model, &probe, 0.0, &Ablations::none()).map_err(fail)?;
            let max_diff = grads
                .iter()
                .map(|(n, g)| zgrads.get(n).map_or(f64::INFINITY, |z| z.max_abs_diff(g)))
                .fold(0.0, f64::max);
            check &= report.total == report.fore && (report.total - zero.total).abs() <= 1e-12 && max_diff <= 1e-12;
            extra = format!(", total = fore, grad diff vs γ=0 {max_diff:.1e}");
        } else {
            check &= !removed.is_empty();
        }
        ok &= check;
        lines.push(format!(
            "{}: {} removed params without gradient{}{extra}",
            flag.flag(),
            removed.len(),
            if check { "" } else { " [FAILED]" }
        ));
    }
    verdict(ok, format!("5 epochs each; {}", lines.join("; ")))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 9] = [
        ("A1", a1),
        ("A2", a2),
        ("A3", a3),
        ("A4", a4),
        ("A5", a5),
        ("A6", a6),
        ("A7", a7),
        ("A8", a8),
        ("A9", a9),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (id, run) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| f == id) {
            continue;
        }
        let outcome = panic::catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("{id} PASS  {detail}"),
            Err(detail) => {
                failed += 1;
                println!("{id} FAIL  {detail}");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
