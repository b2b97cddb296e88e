//! Module outputs against direct loop evaluations of the defining formulas.

use mhgnet::clusterer::{build_feature_space, guard_denominator};
use mhgnet::decoupling::TimestampEmbeddings;
use mhgnet::dstgg::{cluster_graph, ClusterGraphParams, GraphMode};
use mhgnet::sie::{encode_sequence, propagate, reassemble, split_by_pools, PropagationConfig, RecurrentEncoder};
use mhgnet::train_eval::masked_metrics;
use mhgnet::clusterer::ClusterAssignment;
use numcore::{named_rng, sigmoid, Graph, ParamStore, Tensor};
use rand::Rng;

mod common;

use common::{graph_oracle, random, random_time};

#[test]
fn feature_space_matches_loop_evaluation() {
    for seed in 0..20 {
        let (b, t, n, d, p) = (2, 3, 3, 4, 2);
        let xhat = random(&[b, t, n, d], seed, "xhat");
        let patterns: Vec<Tensor> = (0..p).map(|j| random(&[b, t, n, d], seed, &format!("x{j}"))).collect();
        let ws: Vec<Tensor> = (0..p).map(|j| random(&[d, 1], seed, &format!("w{j}"))).collect();
        let w = random(&[d, 1], seed, "w");
        let refs: Vec<&Tensor> = ws.iter().collect();
        let fs = build_feature_space(&patterns, &xhat, &refs, &w).unwrap();

        for i in 0..n {
            for j in 0..p {
                let mut acc = 0.0;
                for bi in 0..b {
                    for ti in 0..t {
                        let (mut num, mut den) = (0.0, 0.0);
                        for k in 0..d {
                            num += patterns[j].at(&[bi, ti, i, k]) * ws[j].at(&[k, 0]);
                            den += xhat.at(&[bi, ti, i, k]) * w.at(&[k, 0]);
                        }
                        acc += num / guard_denominator(den);
                    }
                }
                let want = acc / (b * t) as f64;
                assert!((fs.r.at(&[i, j]) - want).abs() <= 1e-12 * want.abs().max(1.0), "seed {seed}");
            }
        }
        for j in 0..p {
            let col_max = (0..n).map(|i| fs.r.at(&[i, j])).fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(fs.c.data()[j], col_max);
        }
    }
}

#[test]
fn single_pattern_ratio_is_one_and_homogeneous() {
    let xhat = random(&[2, 3, 4, 5], 1, "xhat");
    let w = random(&[5, 1], 1, "w");
    let fs = build_feature_space(std::slice::from_ref(&xhat), &xhat, &[&w], &w).unwrap();
    assert!(fs.r.data().iter().all(|v| (v - 1.0).abs() < 1e-12));
    assert!((fs.c.data()[0] - 1.0).abs() < 1e-12);
    let half = xhat.map(|v| 0.5 * v);
    let fs2 = build_feature_space(&[half], &xhat, &[&w], &w).unwrap();
    for (a, b) in fs2.r.data().iter().zip(fs.r.data()) {
        assert!((a - 0.5 * b).abs() < 1e-12);
    }
}

#[test]
fn fused_graph_matches_loop_oracle() {
    for seed in 0..12 {
        let nodes = 8;
        let mut store = ParamStore::new(seed);
        let p = ClusterGraphParams::register(&mut store, nodes, 5, 3.0, 0.5, 2).unwrap();
        let ts = TimestampEmbeddings::register(&mut store, "ts", 24, 4).unwrap();
        let size = 3 + (seed as usize % 4);
        let members: Vec<usize> = (0..size).map(|i| (i * 3 + seed as usize) % nodes).collect();
        let mut sorted = members.clone();
        sorted.sort_unstable();
        sorted.dedup();
        let time = random_time(2, 4, 24, seed);
        let mut g = Graph::new();
        let a = cluster_graph(&mut g, &store, &p, &ts, &sorted, &time, GraphMode::Fused).unwrap();
        let got = g.value(a);
        for sample in 0..2 {
            let want = graph_oracle(&store, &p, &ts, &sorted, &time, sample);
            for (i, row) in want.iter().enumerate() {
                for (j, w) in row.iter().enumerate() {
                    let v = got.at(&[sample, i, j]);
                    assert!((v - w).abs() <= 1e-12, "seed {seed} sample {sample} ({i},{j}): {v} vs {w}");
                }
            }
        }
    }
}

#[test]
fn three_node_propagation_by_hand() {
    let mut store = ParamStore::new(0);
    let cfg = PropagationConfig::register(&mut store, 0.05, 2, 1).unwrap();
    store.set_value(cfg.out_proj, Tensor::ones(&[2, 1])).unwrap();
    let mut g = Graph::new();
    let a = g.constant(Tensor::from_rows(&[vec![0.0, 1.0, 0.0], vec![1.0, 0.0, 1.0], vec![0.0, 1.0, 0.0]]));
    let h = g.constant(Tensor::new(vec![3, 1], vec![1.0, 2.0, 3.0]).unwrap());
    let out = propagate(&mut g, &store, &cfg, h, a).unwrap();
    // P·H0 = [1.5, 2, 2.5]; H1 = 0.05·H0 + 0.95·P·H0; output H0 + H1
    let want = [2.475, 4.0, 5.525];
    for (v, w) in g.value(out).data().iter().zip(want) {
        assert!((v - w).abs() <= 1e-12, "{v} vs {w}");
    }
}

#[test]
fn propagation_preserves_constant_signals() {
    for seed in 0..10 {
        let (n, d) = (5, 3);
        let mut store = ParamStore::new(seed);
        let cfg = PropagationConfig::register(&mut store, 0.3, 3, d).unwrap();
        // select the last hop state
        let mut sel = Tensor::zeros(&[3 * d, d]);
        for q in 0..d {
            sel.data_mut()[(2 * d + q) * d + q] = 1.0;
        }
        store.set_value(cfg.out_proj, sel).unwrap();
        let a = random(&[n, n], seed, "a").map(f64::abs);
        let row: Vec<f64> = random(&[d], seed, "row").into_data();
        let h0 = Tensor::from_fn(&[n, d], |k| row[k % d]);
        let mut g = Graph::new();
        let (av, hv) = (g.constant(a), g.constant(h0.clone()));
        let out = propagate(&mut g, &store, &cfg, hv, av).unwrap();
        assert!(g.value(out).max_abs_diff(&h0) <= 1e-12);
    }
}

#[test]
fn split_then_reassemble_is_identity() {
    for seed in 0..20u64 {
        let n = 7;
        let mut rng = named_rng(seed, "types");
        let types: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
        let asg = ClusterAssignment::from_types(types, 3).unwrap();
        let x = random(&[2, 3, n, 2], seed, "x");
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let parts = split_by_pools(&mut g, xv, &asg, 2).unwrap();
        let back = reassemble(&mut g, &parts, &asg, 2).unwrap();
        assert_eq!(g.value(back), &x);
    }
}

/// Loop GRU plus redistribution, no dropout.
fn gru_oracle(store: &ParamStore, enc: &RecurrentEncoder, x: &Tensor) -> Tensor {
    let s = x.shape();
    let (b, t, n, d) = (s[0], s[1], s[2], s[3]);
    let h = enc.hidden;
    let v = |id| store.value(id);
    let mut out = Tensor::zeros(&[b, n, h]);
    for bi in 0..b {
        for ni in 0..n {
            let mut state = vec![0.0; h];
            let mut stacked = Vec::with_capacity(t * h);
            for ti in 0..t {
                let xin: Vec<f64> = (0..d).map(|q| x.at(&[bi, ti, ni, q])).collect();
                let affine = |w: &Tensor, u: &Tensor, bias: &Tensor, hv: &[f64], c: usize| -> f64 {
                    let a: f64 = (0..d).map(|q| xin[q] * w.at(&[q, c])).sum();
                    let r: f64 = (0..h).map(|q| hv[q] * u.at(&[q, c])).sum();
                    a + r + bias.data()[c]
                };
                let z: Vec<f64> = (0..h).map(|c| sigmoid(affine(v(enc.w[0]), v(enc.u[0]), v(enc.b[0]), &state, c))).collect();
                let r: Vec<f64> = (0..h).map(|c| sigmoid(affine(v(enc.w[1]), v(enc.u[1]), v(enc.b[1]), &state, c))).collect();
                let rh: Vec<f64> = (0..h).map(|c| r[c] * state[c]).collect();
                let cand: Vec<f64> = (0..h).map(|c| affine(v(enc.w[2]), v(enc.u[2]), v(enc.b[2]), &rh, c).tanh()).collect();
                state = (0..h).map(|c| (1.0 - z[c]) * cand[c] + z[c] * state[c]).collect();
                stacked.extend_from_slice(&state);
            }
            let c1 = v(enc.conv1);
            let mid: Vec<f64> = (0..h)
                .map(|c| {
                    let s: f64 = (0..t * h).map(|q| stacked[q] * c1.at(&[q, c])).sum();
                    (s + v(enc.conv1_bias).data()[c]).max(0.0)
                })
                .collect();
            let c2 = v(enc.conv2);
            for c in 0..h {
                let s: f64 = (0..h).map(|q| mid[q] * c2.at(&[q, c])).sum();
                let y = (s + v(enc.conv2_bias).data()[c]) * v(enc.gain).data()[c];
                out.data_mut()[(bi * n + ni) * h + c] = y;
            }
        }
    }
    out
}

#[test]
fn recurrent_encoder_matches_loop_gru() {
    for seed in 0..5 {
        let (b, t, n, d, h) = (2, 4, 3, 3, 5);
        let mut store = ParamStore::new(seed);
        let enc = RecurrentEncoder::register(&mut store, d, h, t).unwrap();
        for id in enc.b.iter().chain([&enc.conv1_bias, &enc.conv2_bias, &enc.gain]) {
            let shape = store.value(*id).shape().to_vec();
            store.set_value(*id, random(&shape, seed, &format!("bias{}", id.index()))).unwrap();
        }
        let x = random(&[b, t, n, d], seed, "x");
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = encode_sequence(&mut g, &store, &enc, xv, None).unwrap();
        let want = gru_oracle(&store, &enc, &x);
        assert!(g.value(y).max_abs_diff(&want) <= 1e-12, "seed {seed}");
    }
}

#[test]
fn metrics_match_naive_loops() {
    for seed in 0..20 {
        let shape = [3, 4, 5, 1];
        let pred = random(&shape, seed, "pred").map(|v| 50.0 + 20.0 * v);
        let mut target = random(&shape, seed, "target").map(|v| 50.0 + 20.0 * v);
        for k in (seed as usize % 7..target.numel()).step_by(7) {
            target.data_mut()[k] = 0.0;
        }
        let r = masked_metrics(&pred, &target).unwrap();
        let (mut abs, mut sq, mut ape, mut cnt) = (0.0, 0.0, 0.0, 0usize);
        for (p, t) in pred.data().iter().zip(target.data()) {
            if t.abs() > 1e-4 {
                abs += (p - t).abs();
                sq += (p - t) * (p - t);
                ape += (p - t).abs() / t.abs();
                cnt += 1;
            }
        }
        let n = cnt as f64;
        assert_eq!(r.average.mask_count, cnt);
        assert!((r.average.mae - abs / n).abs() <= 1e-12);
        assert!((r.average.rmse - (sq / n).sqrt()).abs() <= 1e-12);
        assert!((r.average.mape - 100.0 * ape / n).abs() <= 1e-12 * 100.0);
        assert!(r.average.rmse >= r.average.mae);
    }
}
