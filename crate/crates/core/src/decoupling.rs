//! Traffic-pattern decoupling: lift the raw reading to `D` channels, then peel off `P`
//! pattern tensors with gates conditioned on timestamp and node embeddings.
//!
//! For `n < P` the gate `Ω_n = σ(relu([T^D ‖ T^W ‖ E] W₁ + b₁) W₂ + b₂)` takes a share of
//! the running residual, and the last pattern is whatever remains, so the patterns always
//! sum back to the lifted input.

use numcore::{Graph, Init, ParamId, ParamStore, Tensor, Var};

use crate::data::TimeIndex;
use crate::error::{Error, Result};

/// Affine channel lift `1 → D`.
#[derive(Debug, Clone)]
pub struct InputLift {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl InputLift {
    pub fn register(store: &mut ParamStore, prefix: &str, width: usize) -> Result<Self> {
        Ok(Self {
            weight: store.register(&format!("{prefix}.weight"), &[1, width], Init::fan_in(1))?,
            bias: store.register(&format!("{prefix}.bias"), &[width], Init::Zeros)?,
        })
    }
}

/// `x: [B, T, N, 1] → [B, T, N, D]`.
pub fn embed_input(g: &mut Graph, store: &ParamStore, lift: &InputLift, x: Var) -> Result<Var> {
    let w = g.param(store, lift.weight);
    let b = g.param(store, lift.bias);
    let h = g.matmul(x, w)?;
    Ok(g.add(h, b)?)
}

/// Learnable time-of-day and day-of-week tables.
#[derive(Debug, Clone)]
pub struct TimestampEmbeddings {
    pub daily: ParamId,
    pub weekly: ParamId,
    pub steps_per_day: usize,
    pub width: usize,
}

impl TimestampEmbeddings {
    pub fn register(store: &mut ParamStore, prefix: &str, steps_per_day: usize, width: usize) -> Result<Self> {
        Ok(Self {
            daily: store.register(&format!("{prefix}.daily"), &[steps_per_day, width], Init::standard_normal())?,
            weekly: store.register(&format!("{prefix}.weekly"), &[7, width], Init::standard_normal())?,
            steps_per_day,
            width,
        })
    }

    fn check(&self, time: &TimeIndex) -> Result<()> {
        if let Some(&t) = time.tod.iter().find(|&&t| t >= self.steps_per_day) {
            return Err(Error::Config(format!(
                "time-of-day index {t} outside table of {} rows",
                self.steps_per_day
            )));
        }
        if let Some(&d) = time.dow.iter().find(|&&d| d >= 7) {
            return Err(Error::Config(format!("day-of-week index {d} outside [0, 7)")));
        }
        Ok(())
    }

    /// `(T^D, T^W)` rows per step, `[B, T, 1, D_t]` each.
    pub fn lookup_steps(&self, g: &mut Graph, store: &ParamStore, time: &TimeIndex) -> Result<(Var, Var)> {
        self.check(time)?;
        let mut out = [None, None];
        for (slot, (table, idx)) in out.iter_mut().zip([(self.daily, &time.tod), (self.weekly, &time.dow)]) {
            let t = g.param(store, table);
            let rows = g.gather(t, 0, idx)?;
            *slot = Some(g.reshape(rows, &[time.batch, time.steps, 1, self.width])?);
        }
        Ok((out[0].unwrap(), out[1].unwrap()))
    }

    /// `(T^D, T^W)` broadcast over `nodes`: each `[B, T, nodes, D_t]`.
    pub fn lookup(&self, g: &mut Graph, store: &ParamStore, time: &TimeIndex, nodes: usize) -> Result<(Var, Var)> {
        let (daily, weekly) = self.lookup_steps(g, store, time)?;
        let shape = [time.batch, time.steps, nodes, self.width];
        Ok((g.broadcast_to(daily, &shape)?, g.broadcast_to(weekly, &shape)?))
    }
}

#[derive(Debug, Clone)]
pub struct NodeEmbedding {
    pub table: ParamId,
}

impl NodeEmbedding {
    pub fn register(store: &mut ParamStore, name: &str, nodes: usize, width: usize) -> Result<Self> {
        Ok(Self {
            table: store.register(name, &[nodes, width], Init::standard_normal())?,
        })
    }
}

/// Two-layer gate producing one `Ω_n`.
#[derive(Debug, Clone)]
pub struct GateParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl GateParams {
    pub fn register(store: &mut ParamStore, prefix: &str, input: usize, width: usize) -> Result<Self> {
        Ok(Self {
            w1: store.register(&format!("{prefix}.w1"), &[input, width], Init::fan_in(input))?,
            b1: store.register(&format!("{prefix}.b1"), &[width], Init::Zeros)?,
            w2: store.register(&format!("{prefix}.w2"), &[width, width], Init::fan_in(width))?,
            b2: store.register(&format!("{prefix}.b2"), &[width], Init::Zeros)?,
        })
    }
}

/// All decoupling parameters for `P` patterns.
#[derive(Debug, Clone)]
pub struct Decoupler {
    pub node_embedding: NodeEmbedding,
    pub gates: Vec<GateParams>,
}

impl Decoupler {
    pub fn register(
        store: &mut ParamStore,
        patterns: usize,
        nodes: usize,
        node_width: usize,
        time_width: usize,
        width: usize,
    ) -> Result<Self> {
        if patterns == 0 {
            return Err(Error::Config("number of patterns must be at least 1".into()));
        }
        let node_embedding = NodeEmbedding::register(store, "std.node_embedding", nodes, node_width)?;
        let input = 2 * time_width + node_width;
        let gates = (0..patterns - 1)
            .map(|n| GateParams::register(store, &format!("std.gate{n}"), input, width))
            .collect::<Result<_>>()?;
        Ok(Self {
            node_embedding,
            gates,
        })
    }

    pub fn patterns(&self) -> usize {
        self.gates.len() + 1
    }
}

#[derive(Debug, Clone)]
pub struct PatternSet {
    /// `P` tensors `[B, T, N, D]`; their sum is the lifted input.
    pub patterns: Vec<Var>,
    /// `P − 1` gate tensors in `(0, 1)`.
    pub gates: Vec<Var>,
}

/// Gate inputs kept unbroadcast: the per-step timestamp rows `[B, T, 1, D_t]` and the node
/// table `[N, D_s]`. Their concatenation along the feature axis is the gate's input.
#[derive(Debug, Clone, Copy)]
pub struct GateInputs {
    pub daily: Var,
    pub weekly: Var,
    pub nodes: Var,
}

impl GateInputs {
    pub fn new(
        g: &mut Graph,
        store: &ParamStore,
        ts: &TimestampEmbeddings,
        emb: &NodeEmbedding,
        time: &TimeIndex,
        nodes: usize,
    ) -> Result<Self> {
        let (daily, weekly) = ts.lookup_steps(g, store, time)?;
        let e = g.param(store, emb.table);
        if g.shape(e)[0] != nodes {
            return Err(Error::Config(format!(
                "node embedding has {} rows for {nodes} nodes",
                g.shape(e)[0]
            )));
        }
        Ok(Self { daily, weekly, nodes: e })
    }
}

/// `σ(relu([T^D ‖ T^W ‖ E] W₁ + b₁) W₂ + b₂)`, evaluated blockwise so the concatenated input is
/// never materialized; `[B, T, N, D]`.
pub fn gate(g: &mut Graph, store: &ParamStore, p: &GateParams, inputs: &GateInputs) -> Result<Var> {
    let w1 = g.param(store, p.w1);
    let b1 = g.param(store, p.b1);
    let w2 = g.param(store, p.w2);
    let b2 = g.param(store, p.b2);
    let dt = g.shape(inputs.daily)[3];
    let ds = g.shape(inputs.nodes)[1];
    let mut start = 0;
    let mut block = |g: &mut Graph, x: Var, len: usize| -> Result<Var> {
        let rows: Vec<usize> = (start..start + len).collect();
        start += len;
        let w = g.gather(w1, 0, &rows)?;
        Ok(g.matmul(x, w)?)
    };
    let hd = block(g, inputs.daily, dt)?;
    let hw = block(g, inputs.weekly, dt)?;
    let he = block(g, inputs.nodes, ds)?;
    let h = g.add(hd, hw)?;
    let h = g.add(h, he)?;
    let h = g.add(h, b1)?;
    let h = g.relu(h);
    let h = g.matmul(h, w2)?;
    let h = g.add(h, b2)?;
    Ok(g.sigmoid(h))
}

/// Splits `xhat: [B, T, N, D]` into `P` pattern tensors.
pub fn decouple(
    g: &mut Graph,
    store: &ParamStore,
    xhat: Var,
    time: &TimeIndex,
    ts: &TimestampEmbeddings,
    dec: &Decoupler,
) -> Result<PatternSet> {
    let shape = g.shape(xhat).to_vec();
    if shape.len() != 4 || shape[0] != time.batch || shape[1] != time.steps {
        return Err(Error::Config(format!(
            "input {shape:?} does not match time index [{}, {}]",
            time.batch, time.steps
        )));
    }
    if dec.gates.is_empty() {
        return Ok(PatternSet {
            patterns: vec![xhat],
            gates: vec![],
        });
    }
    let inputs = GateInputs::new(g, store, ts, &dec.node_embedding, time, shape[2])?;
    let mut remaining = xhat;
    let mut patterns = Vec::with_capacity(dec.patterns());
    let mut gates = Vec::with_capacity(dec.gates.len());
    for p in &dec.gates {
        let omega = gate(g, store, p, &inputs)?;
        let x_n = g.mul(remaining, omega)?;
        remaining = g.sub(remaining, x_n)?;
        patterns.push(x_n);
        gates.push(omega);
    }
    patterns.push(remaining);
    Ok(PatternSet { patterns, gates })
}

/// Value-level decoupling without gradient bookkeeping beyond the throwaway graph.
pub fn decouple_values(
    store: &ParamStore,
    lift: &InputLift,
    ts: &TimestampEmbeddings,
    dec: &Decoupler,
    x: &Tensor,
    time: &TimeIndex,
) -> Result<(Tensor, Vec<Tensor>)> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let xhat = embed_input(&mut g, store, lift, xv)?;
    let ps = decouple(&mut g, store, xhat, time, ts, dec)?;
    let patterns = ps.patterns.iter().map(|&p| g.value(p).clone()).collect();
    Ok((g.value(xhat).clone(), patterns))
}
