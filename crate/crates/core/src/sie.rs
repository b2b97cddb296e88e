//! Subgraph information extraction: gated multi-hop propagation on each fused subgraph,
//! repositioning of cluster outputs to node order, and recurrent encoding with weight
//! redistribution of the stacked hidden states.

use numcore::{Graph, Init, ParamId, ParamStore, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::clusterer::ClusterAssignment;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct PropagationConfig {
    pub gamma: f64,
    /// Number of hop states `H^(0) … H^(k−1)` fed to the projection.
    pub hops: usize,
    /// `[hops·D, D]`.
    pub out_proj: ParamId,
}

impl PropagationConfig {
    pub fn register(store: &mut ParamStore, gamma: f64, hops: usize, width: usize) -> Result<Self> {
        if !(0.0..=1.0).contains(&gamma) {
            return Err(Error::Config(format!("gamma {gamma} outside [0, 1]")));
        }
        if hops == 0 {
            return Err(Error::Config("hops must be at least 1".into()));
        }
        Ok(Self {
            gamma,
            hops,
            out_proj: store.register("sie.out_proj", &[hops * width, width], Init::fan_in(hops * width))?,
        })
    }
}

/// `D̃⁻¹(Â + I)`, row-stochastic.
pub fn normalized_adjacency(g: &mut Graph, a_hat: Var) -> Result<Var> {
    let shape = g.shape(a_hat).to_vec();
    let n = *shape.last().ok_or(Error::Config("adjacency must be a matrix".into()))?;
    let eye = g.constant(Tensor::eye(n));
    let tilde = g.add(a_hat, eye)?;
    let deg = g.sum_axis(tilde, shape.len() - 1, true)?;
    Ok(g.div(tilde, deg)?)
}

/// `h: [..., N_p, D]`; `a_hat: [..., N_p, N_p]` broadcastable over the leading axes (one fewer
/// axis than `h` is read as a per-sample graph shared by every step).
pub fn propagate(g: &mut Graph, store: &ParamStore, cfg: &PropagationConfig, h: Var, a_hat: Var) -> Result<Var> {
    let mut adj = normalized_adjacency(g, a_hat)?;
    let (hr, ar) = (g.shape(h).len(), g.shape(adj).len());
    if hr == ar + 1 && ar >= 3 {
        let mut s = g.shape(adj).to_vec();
        s.insert(ar - 2, 1);
        adj = g.reshape(adj, &s)?;
    }
    let mut states = vec![h];
    let mut prev = h;
    for _ in 1..cfg.hops {
        let mixed = g.matmul(adj, prev)?;
        let mixed = g.scale(mixed, 1.0 - cfg.gamma);
        let keep = g.scale(h, cfg.gamma);
        prev = g.add(keep, mixed)?;
        states.push(prev);
    }
    let last = g.shape(h).len() - 1;
    let cat = g.concat(&states, last)?;
    let w = g.param(store, cfg.out_proj);
    Ok(g.matmul(cat, w)?)
}

/// Per-pool slices of `x` along `axis`, skipping empty pools.
pub fn split_by_pools(g: &mut Graph, x: Var, asg: &ClusterAssignment, axis: usize) -> Result<Vec<Var>> {
    asg.non_empty_pools()
        .map(|pool| Ok(g.gather(x, axis, pool)?))
        .collect()
}

/// Concatenates cluster outputs in pool order and returns every node to its own position.
pub fn reassemble(g: &mut Graph, outputs: &[Var], asg: &ClusterAssignment, axis: usize) -> Result<Var> {
    let sizes: Vec<usize> = asg.non_empty_pools().map(Vec::len).collect();
    if outputs.len() != sizes.len() {
        return Err(Error::Assembly(format!(
            "{} cluster outputs for {} non-empty pools",
            outputs.len(),
            sizes.len()
        )));
    }
    for (i, (&o, &n)) in outputs.iter().zip(&sizes).enumerate() {
        let got = g.shape(o).get(axis).copied();
        if got != Some(n) {
            return Err(Error::Assembly(format!(
                "cluster {i} output has {got:?} nodes on axis {axis}, pool has {n}"
            )));
        }
    }
    let shuffled = g.concat(outputs, axis)?;
    Ok(g.gather(shuffled, axis, &asg.inverse_permutation)?)
}

/// GRU cell plus the redistribution head over stacked hidden states.
#[derive(Debug, Clone)]
pub struct RecurrentEncoder {
    pub input: usize,
    pub hidden: usize,
    pub steps: usize,
    pub w: [ParamId; 3],
    pub u: [ParamId; 3],
    pub b: [ParamId; 3],
    pub conv1: ParamId,
    pub conv1_bias: ParamId,
    pub conv2: ParamId,
    pub conv2_bias: ParamId,
    pub gain: ParamId,
}

impl RecurrentEncoder {
    pub fn register(store: &mut ParamStore, input: usize, hidden: usize, steps: usize) -> Result<Self> {
        if input == 0 || hidden == 0 || steps == 0 {
            return Err(Error::Config("recurrent encoder dimensions must be positive".into()));
        }
        let mut reg = |name: &str, shape: &[usize], init: Init| store.register(&format!("sie.gru.{name}"), shape, init);
        let w = [
            reg("w_update", &[input, hidden], Init::fan_in(hidden))?,
            reg("w_reset", &[input, hidden], Init::fan_in(hidden))?,
            reg("w_cand", &[input, hidden], Init::fan_in(hidden))?,
        ];
        let u = [
            reg("u_update", &[hidden, hidden], Init::fan_in(hidden))?,
            reg("u_reset", &[hidden, hidden], Init::fan_in(hidden))?,
            reg("u_cand", &[hidden, hidden], Init::fan_in(hidden))?,
        ];
        let b = [
            reg("b_update", &[hidden], Init::Zeros)?,
            reg("b_reset", &[hidden], Init::Zeros)?,
            reg("b_cand", &[hidden], Init::Zeros)?,
        ];
        let stacked = steps * hidden;
        Ok(Self {
            input,
            hidden,
            steps,
            w,
            u,
            b,
            conv1: store.register("sie.redist.conv1", &[stacked, hidden], Init::fan_in(stacked))?,
            conv1_bias: store.register("sie.redist.conv1_bias", &[hidden], Init::Zeros)?,
            conv2: store.register("sie.redist.conv2", &[hidden, hidden], Init::fan_in(hidden))?,
            conv2_bias: store.register("sie.redist.conv2_bias", &[hidden], Init::Zeros)?,
            gain: store.register("sie.redist.gain", &[hidden], Init::Ones)?,
        })
    }
}

/// Inverted dropout settings for training passes.
pub struct Dropout<'a> {
    pub rate: f64,
    pub rng: &'a mut ChaCha8Rng,
}

fn dropout_mask(shape: &[usize], d: &mut Dropout<'_>) -> Tensor {
    let keep = 1.0 - d.rate;
    Tensor::from_fn(shape, |_| if d.rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
}

/// Runs the GRU over `x: [B, T, N, D]` and redistributes the stacked states to `[B, N, H]`.
///
/// `z = σ(xW_z + hU_z + b_z)`, `r = σ(xW_r + hU_r + b_r)`, `n = tanh(xW_n + (r⊙h)U_n + b_n)`,
/// `h' = (1 − z)⊙n + z⊙h`, starting from `h = 0`.
pub fn encode_sequence(
    g: &mut Graph,
    store: &ParamStore,
    enc: &RecurrentEncoder,
    x: Var,
    dropout: Option<Dropout<'_>>,
) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    if shape.len() != 4 || shape[1] == 0 {
        return Err(Error::Config(format!("encoder input must be [B, T≥1, N, D], got {shape:?}")));
    }
    let (b, t, n, hdim) = (shape[0], shape[1], shape[2], enc.hidden);
    if t != enc.steps || shape[3] != enc.input {
        return Err(Error::Config(format!(
            "encoder built for {} steps of width {}, got {shape:?}",
            enc.steps, enc.input
        )));
    }
    let w: Vec<Var> = enc.w.iter().map(|&p| g.param(store, p)).collect();
    let bias: Vec<Var> = enc.b.iter().map(|&p| g.param(store, p)).collect();
    let u: Vec<Var> = enc.u.iter().map(|&p| g.param(store, p)).collect();
    let wx = g.concat(&w, 1)?;
    let bx = g.concat(&bias, 0)?;
    let proj = g.matmul(x, wx)?;
    let proj = g.add(proj, bx)?;

    let ranges: Vec<Vec<usize>> = (0..3).map(|q| (q * hdim..(q + 1) * hdim).collect()).collect();
    let mut h = g.constant(Tensor::zeros(&[b, n, hdim]));
    let mut states = Vec::with_capacity(t);
    for step in 0..t {
        let xt = g.gather(proj, 1, &[step])?;
        let xt = g.reshape(xt, &[b, n, 3 * hdim])?;
        let xz = g.gather(xt, 2, &ranges[0])?;
        let xr = g.gather(xt, 2, &ranges[1])?;
        let xn = g.gather(xt, 2, &ranges[2])?;
        let hz = g.matmul(h, u[0])?;
        let z = g.add(xz, hz)?;
        let z = g.sigmoid(z);
        let hr = g.matmul(h, u[1])?;
        let r = g.add(xr, hr)?;
        let r = g.sigmoid(r);
        let rh = g.mul(r, h)?;
        let hn = g.matmul(rh, u[2])?;
        let cand = g.add(xn, hn)?;
        let cand = g.tanh(cand);
        // (1 − z)⊙n + z⊙h = n + z⊙(h − n)
        let diff = g.sub(h, cand)?;
        let zd = g.mul(z, diff)?;
        h = g.add(cand, zd)?;
        states.push(h);
    }
    let mut stacked = g.concat(&states, 2)?;
    if let Some(mut d) = dropout {
        if d.rate > 0.0 {
            let mask = dropout_mask(g.shape(stacked), &mut d);
            stacked = g.mul_const(stacked, mask)?;
        }
    }
    let c1 = g.param(store, enc.conv1);
    let c1b = g.param(store, enc.conv1_bias);
    let c2 = g.param(store, enc.conv2);
    let c2b = g.param(store, enc.conv2_bias);
    let gain = g.param(store, enc.gain);
    let y = g.matmul(stacked, c1)?;
    let y = g.add(y, c1b)?;
    let y = g.relu(y);
    let y = g.matmul(y, c2)?;
    let y = g.add(y, c2b)?;
    Ok(g.mul(y, gain)?)
}
