//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use mhgnet::clusterer::ClusterAssignment;
use mhgnet::data::TimeIndex;
use mhgnet::decoupling::{decouple, embed_input, Decoupler, InputLift, TimestampEmbeddings};
use mhgnet::dstgg::{cluster_graph, spatial_graph, temporal_graph, ClusterGraphParams, GraphMode};
use mhgnet::model::{ForecastModel, ModelConfig};
use mhgnet::sie::{encode_sequence, normalized_adjacency, propagate, PropagationConfig, RecurrentEncoder};
use numcore::{check_gradient, named_rng, Graph, Init, ParamStore, Tensor, TensorError, Var};
use rand::Rng;

/// Central-difference step for the gradient suite.
pub const H: f64 = 1e-5;

pub fn random(shape: &[usize], seed: u64, name: &str) -> Tensor {
    let mut rng = named_rng(seed, name);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

pub fn random_time(batch: usize, steps: usize, spd: usize, seed: u64) -> TimeIndex {
    let mut rng = named_rng(seed, "time");
    TimeIndex {
        batch,
        steps,
        tod: (0..batch * steps).map(|_| rng.random_range(0..spd)).collect(),
        dow: (0..batch * steps).map(|_| rng.random_range(0..7)).collect(),
    }
}

/// Loop evaluation of the per-cluster spatial, temporal and fused graphs for one sample.
pub fn graph_oracle(
    store: &ParamStore,
    p: &ClusterGraphParams,
    ts: &TimestampEmbeddings,
    members: &[usize],
    time: &TimeIndex,
    sample: usize,
) -> Vec<Vec<f64>> {
    let n = members.len();
    let ds = store.value(p.w1).shape()[0];
    let m = |e: &Tensor, w: &Tensor| -> Vec<Vec<f64>> {
        members
            .iter()
            .map(|&node| {
                (0..ds)
                    .map(|c| {
                        let s: f64 = (0..ds).map(|q| e.at(&[node, q]) * w.at(&[q, c])).sum();
                        (p.alpha * s).tanh()
                    })
                    .collect()
            })
            .collect()
    };
    let m1 = m(store.value(p.e1), store.value(p.w1));
    let m2 = m(store.value(p.e2), store.value(p.w2));
    let mut a_s = vec![vec![0.0; n]; n];
    for a in 0..n {
        for b in 0..n {
            let s: f64 = (0..ds).map(|q| m1[a][q] * m2[b][q] - m2[a][q] * m1[b][q]).sum();
            a_s[a][b] = p.alpha * s;
        }
    }
    let (daily, weekly) = (store.value(ts.daily), store.value(ts.weekly));
    let mut mean = 0.0;
    for t in 0..time.steps {
        let k = sample * time.steps + t;
        mean += (0..ts.width)
            .map(|q| daily.at(&[time.tod[k], q]) * weekly.at(&[time.dow[k], q]))
            .sum::<f64>();
    }
    mean /= time.steps as f64;
    let at_entry = p.beta * mean.tanh().max(0.0);
    let a_t = vec![vec![at_entry; n]; n];
    let mut fused = vec![vec![0.0; n]; n];
    for a in 0..n {
        for b in 0..n {
            let s: f64 = (0..n).map(|c| a_s[a][c] * a_t[b][c]).sum();
            fused[a][b] = (p.beta * s).tanh().max(0.0);
        }
    }
    let k = p.k.min(n);
    for row in fused.iter_mut() {
        let keep: Vec<bool> = (0..n)
            .map(|j| {
                let above = (0..n)
                    .filter(|&q| row[q] > row[j] || (row[q] == row[j] && q < j))
                    .count();
                above < k
            })
            .collect();
        for (v, kept) in row.iter_mut().zip(keep) {
            if !kept {
                *v = 0.0;
            }
        }
    }
    fused
}

pub fn lift<T>(r: mhgnet::Result<T>) -> numcore::Result<T> {
    r.map_err(|e| TensorError::Eval(e.to_string()))
}

/// `Σ y ⊙ R` with a fixed random `R`, so every output entry carries a distinct weight.
pub fn project(g: &mut Graph, y: Var, seed: u64) -> numcore::Result<Var> {
    let r = random(g.shape(y), seed, "projection");
    let w = g.mul_const(y, r)?;
    Ok(g.sum_all(w))
}

/// Largest relative gradient error over the checked cases.
pub fn grad_input_lift() -> f64 {
    let mut worst = 0.0f64;
    for seed in 0..3 {
        let mut s = ParamStore::new(seed);
        let l = InputLift::register(&mut s, "lift", 4).unwrap();
        s.set_value(l.bias, random(&[4], seed, "b")).unwrap();
        let x = random(&[2, 3, 5, 1], seed, "x");
        let err = check_gradient(&mut s, H, |g, st| {
            let xv = g.constant(x.clone());
            let y = lift(embed_input(g, st, &l, xv))?;
            project(g, y, seed)
        })
        .unwrap();
        worst = worst.max(err);
    }
    worst
}

/// Largest relative gradient error over the checked cases.
pub fn grad_pattern_decoupling() -> f64 {
    let mut worst = 0.0f64;
    for (seed, p) in [(0, 2), (1, 3), (2, 4)] {
        let mut s = ParamStore::new(seed);
        let l = InputLift::register(&mut s, "lift", 3).unwrap();
        let ts = TimestampEmbeddings::register(&mut s, "ts", 6, 2).unwrap();
        let dec = Decoupler::register(&mut s, p, 4, 2, 2, 3).unwrap();
        let t = random_time(2, 3, 6, seed);
        let x = random(&[2, 3, 4, 1], seed, "x");
        let err = check_gradient(&mut s, H, |g, st| {
            let xv = g.constant(x.clone());
            let xhat = lift(embed_input(g, st, &l, xv))?;
            let ps = lift(decouple(g, st, xhat, &t, &ts, &dec))?;
            let mut total = None;
            for (j, &pat) in ps.patterns.iter().enumerate() {
                let term = project(g, pat, seed * 10 + j as u64)?;
                total = Some(match total {
                    None => term,
                    Some(acc) => g.add(acc, term)?,
                });
            }
            Ok(total.unwrap())
        })
        .unwrap();
        worst = worst.max(err);
    }
    worst
}

/// Largest relative gradient error over the checked cases.
pub fn grad_spatial_and_temporal_graphs() -> f64 {
    let mut worst = 0.0f64;
    for seed in 0..3 {
        let mut s = ParamStore::new(seed);
        let p = ClusterGraphParams::register(&mut s, 6, 3, 1.5, 0.5, 3).unwrap();
        let ts = TimestampEmbeddings::register(&mut s, "ts", 6, 3).unwrap();
        let members = [0, 2, 3, 5];
        let t = random_time(2, 3, 6, seed);
        let err = check_gradient(&mut s, H, |g, st| {
            let a_s = lift(spatial_graph(g, st, &p, &members))?;
            let a_t = lift(temporal_graph(g, st, &ts, members.len(), &t, p.beta))?;
            let l1 = project(g, a_s, seed)?;
            let l2 = project(g, a_t, seed + 100)?;
            g.add(l1, l2)
        })
        .unwrap();
        worst = worst.max(err);
    }
    worst
}

/// Largest relative gradient error over the checked cases.
pub fn grad_fused_sparsified_graph() -> f64 {
    let mut worst = 0.0f64;
    for (seed, mode) in [(0, GraphMode::Fused), (1, GraphMode::NoSpatial), (2, GraphMode::NoTemporal), (3, GraphMode::Fused)] {
        let mut s = ParamStore::new(seed);
        let p = ClusterGraphParams::register(&mut s, 5, 3, 1.0, 0.8, 2).unwrap();
        let ts = TimestampEmbeddings::register(&mut s, "ts", 6, 3).unwrap();
        let t = random_time(2, 3, 6, seed);
        let err = check_gradient(&mut s, H, |g, st| {
            let a = lift(cluster_graph(g, st, &p, &ts, &[0, 1, 2, 4], &t, mode))?;
            project(g, a, seed)
        })
        .unwrap();
        worst = worst.max(err);
    }
    worst
}

/// Largest relative gradient error over the checked cases.
pub fn grad_propagation_and_normalization() -> f64 {
    let mut worst = 0.0f64;
    for seed in 0..3 {
        let mut s = ParamStore::new(seed);
        let cfg = PropagationConfig::register(&mut s, 0.1, 3, 2).unwrap();
        let a = s.register("a", &[2, 4, 4], Init::Uniform { low: 0.1, high: 1.0 }).unwrap();
        let h = s.register("h", &[2, 3, 4, 2], Init::standard_normal()).unwrap();
        let err = check_gradient(&mut s, H, |g, st| {
            let av = g.param(st, a);
            let hv = g.param(st, h);
            let n = lift(normalized_adjacency(g, av))?;
            let l1 = project(g, n, seed)?;
            let y = lift(propagate(g, st, &cfg, hv, av))?;
            let l2 = project(g, y, seed + 1)?;
            g.add(l1, l2)
        })
        .unwrap();
        worst = worst.max(err);
    }
    worst
}

/// Largest relative gradient error over the checked cases.
pub fn grad_recurrent_encoder() -> f64 {
    let mut worst = 0.0f64;
    for seed in 0..3 {
        let mut s = ParamStore::new(seed);
        let enc = RecurrentEncoder::register(&mut s, 3, 4, 3).unwrap();
        for id in enc.b.iter().chain([&enc.conv1_bias, &enc.conv2_bias]) {
            let shape = s.value(*id).shape().to_vec();
            s.set_value(*id, random(&shape, seed, &format!("b{}", id.index()))).unwrap();
        }
        let x = s.register("x", &[2, 3, 2, 3], Init::standard_normal()).unwrap();
        let err = check_gradient(&mut s, H, |g, st| {
            let xv = g.param(st, x);
            let y = lift(encode_sequence(g, st, &enc, xv, None))?;
            project(g, y, seed)
        })
        .unwrap();
        worst = worst.max(err);
    }
    worst
}

/// Relative gradient error of the whole forward pass on a tiny model.
pub fn grad_end_to_end_tiny_model() -> f64 {
    let cfg = ModelConfig {
        nodes: 6,
        patterns: 2,
        width: 3,
        node_width: 2,
        time_width: 2,
        history: 4,
        horizon: 2,
        steps_per_day: 6,
        top_k: 2,
        hops: 2,
        seed: 5,
        ..ModelConfig::default()
    };
    let mut model = ForecastModel::new(cfg).unwrap();
    model
        .set_assignment(ClusterAssignment::from_types(vec![0, 1, 0, 0, 1, 1], 2).unwrap())
        .unwrap();
    let x = random(&[2, 4, 6, 1], 5, "x");
    let t = random_time(2, 4, 6, 5);
    let mut store = model.store.clone();
    // Zero-initialized biases would place ReLU inputs exactly on the kink.
    let zeros: Vec<_> = store.ids().filter(|&id| store.value(id).data().iter().all(|v| *v == 0.0)).collect();
    for id in zeros {
        let shape = store.value(id).shape().to_vec();
        store.set_value(id, random(&shape, id.index() as u64, "bias")).unwrap();
    }
    check_gradient(&mut store, H, |g, st| {
        let pass = lift(model.forward_with(st, g, &x, &t, None))?;
        project(g, pass.prediction, 5)
    })
    .unwrap()
}
