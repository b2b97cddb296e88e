//! Per-cluster graph generation: a learned antisymmetric spatial graph, a timestamp-driven
//! temporal graph, and their fused, row-wise top-k sparsified product.

use numcore::{Graph, Init, ParamId, ParamStore, Tensor, Var};

use crate::data::TimeIndex;
use crate::decoupling::TimestampEmbeddings;
use crate::error::{Error, Result};

/// Which graph factors enter the fusion. The ablations swap a factor for the identity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GraphMode {
    #[default]
    Fused,
    NoSpatial,
    NoTemporal,
}

#[derive(Debug, Clone)]
pub struct ClusterGraphParams {
    /// `[N, D_s]`, rows gathered per cluster.
    pub e1: ParamId,
    pub e2: ParamId,
    pub w1: ParamId,
    pub w2: ParamId,
    pub alpha: f64,
    pub beta: f64,
    pub k: usize,
}

impl ClusterGraphParams {
    pub fn register(
        store: &mut ParamStore,
        nodes: usize,
        width: usize,
        alpha: f64,
        beta: f64,
        k: usize,
    ) -> Result<Self> {
        if !(alpha > 0.0 && beta > 0.0) || k == 0 {
            return Err(Error::Config(format!(
                "graph generation needs alpha > 0, beta > 0, k ≥ 1 (got {alpha}, {beta}, {k})"
            )));
        }
        Ok(Self {
            e1: store.register("dstgg.e1", &[nodes, width], Init::standard_normal())?,
            e2: store.register("dstgg.e2", &[nodes, width], Init::standard_normal())?,
            w1: store.register("dstgg.w1", &[width, width], Init::fan_in(width))?,
            w2: store.register("dstgg.w2", &[width, width], Init::fan_in(width))?,
            alpha,
            beta,
            k,
        })
    }
}

/// `α(M₁M₂ᵀ − M₂M₁ᵀ)` with `M_i = tanh(α E_i[members] W_i)`; `[N_p, N_p]`, antisymmetric.
pub fn spatial_graph(g: &mut Graph, store: &ParamStore, p: &ClusterGraphParams, members: &[usize]) -> Result<Var> {
    if members.is_empty() {
        return Err(Error::Config("spatial graph of an empty cluster".into()));
    }
    let mut m = [None, None];
    for (slot, (e, w)) in m.iter_mut().zip([(p.e1, p.w1), (p.e2, p.w2)]) {
        let e = g.param(store, e);
        let e = g.gather(e, 0, members)?;
        let w = g.param(store, w);
        let h = g.matmul(e, w)?;
        let h = g.scale(h, p.alpha);
        *slot = Some(g.tanh(h));
    }
    let (m1, m2) = (m[0].unwrap(), m[1].unwrap());
    let m1t = g.transpose_last(m1)?;
    let m2t = g.transpose_last(m2)?;
    let a = g.matmul(m1, m2t)?;
    let b = g.matmul(m2, m1t)?;
    let d = g.sub(a, b)?;
    Ok(g.scale(d, p.alpha))
}

/// `β·relu(tanh(mean_t T̂^D_t (T̂^W_t)ᵀ))`, one `[N_p, N_p]` graph per sample: `[B, N_p, N_p]`.
///
/// The timestamp rows are shared by every node, so each entry of a sample's graph equals
/// `β·relu(tanh(mean_t ⟨T^D_t, T^W_t⟩))`; the dot product is taken once and broadcast.
pub fn temporal_graph(
    g: &mut Graph,
    store: &ParamStore,
    ts: &TimestampEmbeddings,
    cluster_size: usize,
    time: &TimeIndex,
    beta: f64,
) -> Result<Var> {
    if time.steps == 0 {
        return Err(Error::Config("temporal graph needs at least one step".into()));
    }
    let (daily, weekly) = ts.lookup_steps(g, store, time)?;
    let wt = g.transpose_last(weekly)?;
    let a = g.matmul(daily, wt)?;
    let a = g.mean_axis(a, 1, false)?;
    let a = g.tanh(a);
    let a = g.relu(a);
    let a = g.scale(a, beta);
    Ok(g.broadcast_to(a, &[time.batch, cluster_size, cluster_size])?)
}

/// `topk(relu(tanh(β A_s A_tᵀ)))`. `a_t` may carry a leading batch axis.
pub fn fuse_and_sparsify(g: &mut Graph, a_s: Var, a_t: Var, beta: f64, k: usize) -> Result<Var> {
    let att = g.transpose_last(a_t)?;
    let a = g.matmul(a_s, att)?;
    let a = g.scale(a, beta);
    let a = g.tanh(a);
    let a = g.relu(a);
    Ok(g.topk_row_mask(a, k)?)
}

/// Full per-cluster pipeline under `mode`; returns `[B, N_p, N_p]` (or `[N_p, N_p]` when the
/// temporal factor is ablated).
pub fn cluster_graph(
    g: &mut Graph,
    store: &ParamStore,
    p: &ClusterGraphParams,
    ts: &TimestampEmbeddings,
    members: &[usize],
    time: &TimeIndex,
    mode: GraphMode,
) -> Result<Var> {
    let n = members.len();
    let k = p.k.min(n);
    let (a_s, a_t) = match mode {
        GraphMode::Fused => (
            spatial_graph(g, store, p, members)?,
            temporal_graph(g, store, ts, n, time, p.beta)?,
        ),
        GraphMode::NoSpatial => (
            g.constant(Tensor::eye(n)),
            temporal_graph(g, store, ts, n, time, p.beta)?,
        ),
        GraphMode::NoTemporal => (spatial_graph(g, store, p, members)?, g.constant(Tensor::eye(n))),
    };
    fuse_and_sparsify(g, a_s, a_t, p.beta, k)
}

/// A materialized fused graph for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedSubgraph {
    pub a_hat: Tensor,
    pub members: Vec<usize>,
}

impl FusedSubgraph {
    /// `(row, col, weight)` for every nonzero entry, in node ids.
    pub fn triples(&self) -> Vec<(usize, usize, f64)> {
        let n = self.members.len();
        let mut out = Vec::new();
        for i in 0..n {
            for j in 0..n {
                let w = self.a_hat.data()[i * n + j];
                if w != 0.0 {
                    out.push((self.members[i], self.members[j], w));
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(nodes: usize, width: usize, seed: u64) -> (ParamStore, ClusterGraphParams, TimestampEmbeddings) {
        let mut s = ParamStore::new(seed);
        let p = ClusterGraphParams::register(&mut s, nodes, width, 3.0, 0.5, 2).unwrap();
        let ts = TimestampEmbeddings::register(&mut s, "ts", 6, 2).unwrap();
        (s, p, ts)
    }

    #[test]
    fn hand_evaluated_two_node_graph() {
        let mut s = ParamStore::new(0);
        let p = ClusterGraphParams::register(&mut s, 2, 1, 1.0, 1.0, 2).unwrap();
        s.set_value(p.e1, Tensor::new(vec![2, 1], vec![1.0, 0.0]).unwrap()).unwrap();
        s.set_value(p.e2, Tensor::new(vec![2, 1], vec![0.0, 1.0]).unwrap()).unwrap();
        s.set_value(p.w1, Tensor::ones(&[1, 1])).unwrap();
        s.set_value(p.w2, Tensor::ones(&[1, 1])).unwrap();
        let mut g = Graph::new();
        let a = spatial_graph(&mut g, &s, &p, &[0, 1]).unwrap();
        let t2 = 1f64.tanh().powi(2);
        let v = g.value(a);
        assert!((v.at(&[0, 1]) - t2).abs() < 1e-15);
        assert!((v.at(&[1, 0]) + t2).abs() < 1e-15);
        assert!((t2 - 0.5800).abs() < 1e-4);
    }

    #[test]
    fn identical_factors_give_zero_graph() {
        let (mut s, p, _) = params(5, 3, 9);
        let e1 = s.value(p.e1).clone();
        let w1 = s.value(p.w1).clone();
        s.set_value(p.e2, e1).unwrap();
        s.set_value(p.w2, w1).unwrap();
        let mut g = Graph::new();
        let a = spatial_graph(&mut g, &s, &p, &[4, 0, 2]).unwrap();
        assert_eq!(g.value(a), &Tensor::zeros(&[3, 3]));
    }

    #[test]
    fn temporal_graph_of_unit_tables() {
        let (mut s, _, ts) = params(3, 2, 1);
        let mut ts1 = ts.clone();
        ts1.width = 1;
        let mut s1 = ParamStore::new(0);
        ts1.daily = s1.register_with("d", Tensor::ones(&[6, 1]), Init::Ones).unwrap();
        ts1.weekly = s1.register_with("w", Tensor::ones(&[7, 1]), Init::Ones).unwrap();
        let time = TimeIndex::single(vec![0, 1, 2], vec![0, 0, 0]);
        let mut g = Graph::new();
        let a = temporal_graph(&mut g, &s1, &ts1, 3, &time, 1.0).unwrap();
        assert!(g.value(a).data().iter().all(|v| (v - 1f64.tanh()).abs() < 1e-15));

        s.set_value(ts.weekly, Tensor::zeros(&[7, 2])).unwrap();
        let mut g = Graph::new();
        let a = temporal_graph(&mut g, &s, &ts, 3, &time, 1.0).unwrap();
        assert_eq!(g.value(a), &Tensor::zeros(&[1, 3, 3]));
    }

    #[test]
    fn zero_temporal_factor_annihilates() {
        let (s, p, _) = params(4, 3, 2);
        let mut g = Graph::new();
        let a_s = spatial_graph(&mut g, &s, &p, &[0, 1, 2, 3]).unwrap();
        let a_t = g.constant(Tensor::zeros(&[4, 4]));
        let f = fuse_and_sparsify(&mut g, a_s, a_t, 0.5, 2).unwrap();
        assert_eq!(g.value(f), &Tensor::zeros(&[4, 4]));
    }

    #[test]
    fn singleton_cluster_is_zero() {
        let (s, p, ts) = params(4, 3, 2);
        let mut g = Graph::new();
        let time = TimeIndex::single(vec![0, 5], vec![2, 2]);
        let a = cluster_graph(&mut g, &s, &p, &ts, &[2], &time, GraphMode::Fused).unwrap();
        assert_eq!(g.value(a).data(), &[0.0]);
    }

    #[test]
    fn empty_cluster_rejected() {
        let (s, p, _) = params(4, 3, 2);
        let mut g = Graph::new();
        assert!(spatial_graph(&mut g, &s, &p, &[]).is_err());
    }
}
