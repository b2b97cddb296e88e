//! The assembled forecaster: decoupling → clustering → per-cluster graphs → propagation →
//! recurrent encoding → skip-connected regression head.

use std::fs;
use std::path::Path;

use numcore::{Graph, Init, ParamId, ParamStore, Tensor, Var};
use rand_chacha::ChaCha8Rng;

use crate::clusterer::{self, ClusterAssignment, FeatureSpace, RatioWeights};
use crate::data::{Scaler, TimeIndex, WindowedDataset};
use crate::decoupling::{self, Decoupler, InputLift, PatternSet, TimestampEmbeddings};
use crate::dstgg::{self, ClusterGraphParams, FusedSubgraph, GraphMode};
use crate::error::{Error, Result};
use crate::sie::{self, Dropout, PropagationConfig, RecurrentEncoder};

/// Number of leading training windows used to recompute the clustering.
pub const PROBE_WINDOWS: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ClusterRefresh {
    #[default]
    Epoch,
    /// Recluster on every training batch. Experimental: subgraph shapes change within an epoch.
    Batch,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub nodes: usize,
    pub patterns: usize,
    /// Hidden channel width `D`.
    pub width: usize,
    pub node_width: usize,
    pub time_width: usize,
    pub history: usize,
    pub horizon: usize,
    pub steps_per_day: usize,
    pub top_k: usize,
    pub hops: usize,
    pub gamma: f64,
    pub alpha: f64,
    pub beta: f64,
    pub rnn_width_multiplier: usize,
    pub dropout: f64,
    pub seed: u64,
    pub graph_mode: GraphMode,
    /// When false every node sits in one pool (single whole-graph convolution).
    pub clustering: bool,
    pub cluster_refresh: ClusterRefresh,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            nodes: 24,
            patterns: 2,
            width: 8,
            node_width: 10,
            time_width: 10,
            history: 12,
            horizon: 12,
            steps_per_day: 288,
            top_k: 10,
            hops: 2,
            gamma: 0.05,
            alpha: 3.0,
            beta: 0.5,
            rnn_width_multiplier: 1,
            dropout: 0.15,
            seed: 1,
            graph_mode: GraphMode::Fused,
            clustering: true,
            cluster_refresh: ClusterRefresh::Epoch,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("nodes", self.nodes),
            ("patterns", self.patterns),
            ("width", self.width),
            ("node_width", self.node_width),
            ("time_width", self.time_width),
            ("history", self.history),
            ("horizon", self.horizon),
            ("steps_per_day", self.steps_per_day),
            ("top_k", self.top_k),
            ("hops", self.hops),
            ("rnn_width_multiplier", self.rnn_width_multiplier),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("gamma {} outside [0, 1]", self.gamma)));
        }
        if !(self.alpha > 0.0 && self.beta > 0.0) {
            return Err(Error::Config("alpha and beta must be positive".into()));
        }
        Ok(())
    }

    pub fn hidden(&self) -> usize {
        self.width * self.rnn_width_multiplier
    }

    /// Width of the skip-connection tensor fed to the regression head.
    pub fn skip_width(&self) -> usize {
        self.hidden() + self.width * (1 + self.patterns) + 2 * self.time_width
    }
}

#[derive(Debug, Clone)]
pub struct RegressionHead {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub gain: ParamId,
}

impl RegressionHead {
    fn register(store: &mut ParamStore, input: usize, horizon: usize) -> Result<Self> {
        Ok(Self {
            w1: store.register("head.w1", &[input, input], Init::fan_in(input))?,
            b1: store.register("head.b1", &[input], Init::Zeros)?,
            w2: store.register("head.w2", &[input, horizon], Init::fan_in(input))?,
            b2: store.register("head.b2", &[horizon], Init::Zeros)?,
            gain: store.register("head.gain", &[horizon], Init::Ones)?,
        })
    }
}

pub struct ForwardPass {
    /// Scaled forecast `[B, T_f, N, 1]`.
    pub prediction: Var,
    pub xhat: Var,
    pub patterns: PatternSet,
    /// Number of fused subgraphs built in this pass.
    pub subgraphs: usize,
}

#[derive(Debug, Clone)]
pub struct ForecastModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub lift: InputLift,
    pub timestamps: TimestampEmbeddings,
    pub decoupler: Decoupler,
    pub ratio: RatioWeights,
    pub graphs: ClusterGraphParams,
    pub propagation: PropagationConfig,
    pub encoder: RecurrentEncoder,
    pub head: RegressionHead,
    assignment: ClusterAssignment,
    training: bool,
}

impl ForecastModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let mut store = ParamStore::new(c.seed);
        let lift = InputLift::register(&mut store, "std.lift", c.width)?;
        let timestamps = TimestampEmbeddings::register(&mut store, "std.time", c.steps_per_day, c.time_width)?;
        let decoupler = Decoupler::register(&mut store, c.patterns, c.nodes, c.node_width, c.time_width, c.width)?;
        let ratio = RatioWeights::register(&mut store, c.patterns, c.width)?;
        let graphs = ClusterGraphParams::register(&mut store, c.nodes, c.node_width, c.alpha, c.beta, c.top_k)?;
        let propagation = PropagationConfig::register(&mut store, c.gamma, c.hops, c.width)?;
        let encoder = RecurrentEncoder::register(&mut store, c.width, c.hidden(), c.history)?;
        let head = RegressionHead::register(&mut store, c.skip_width(), c.horizon)?;
        Ok(Self {
            assignment: ClusterAssignment::single(c.nodes),
            config,
            store,
            lift,
            timestamps,
            decoupler,
            ratio,
            graphs,
            propagation,
            encoder,
            head,
            training: false,
        })
    }

    pub fn assignment(&self) -> &ClusterAssignment {
        &self.assignment
    }

    pub fn set_assignment(&mut self, asg: ClusterAssignment) -> Result<()> {
        asg.validate(self.config.nodes)?;
        self.assignment = asg;
        Ok(())
    }

    pub fn set_training(&mut self, training: bool) {
        self.training = training;
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_scalars()
    }

    fn check_input(&self, x: &Tensor, time: &TimeIndex) -> Result<()> {
        let c = &self.config;
        let want = [time.batch, c.history, c.nodes, 1];
        if x.shape() != want || time.steps != c.history {
            return Err(Error::Config(format!(
                "input shape {:?} does not match expected {want:?}",
                x.shape()
            )));
        }
        self.assignment.validate(c.nodes)
    }

    /// Records a forward pass on `g`. Dropout applies only in training mode with an RNG.
    pub fn forward(
        &self,
        g: &mut Graph,
        x: &Tensor,
        time: &TimeIndex,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<ForwardPass> {
        self.forward_with(&self.store, g, x, time, rng)
    }

    /// [`ForecastModel::forward`] reading parameter values from `store`, which must share this
    /// model's layout (e.g. a perturbed clone of `self.store`).
    pub fn forward_with(
        &self,
        store: &ParamStore,
        g: &mut Graph,
        x: &Tensor,
        time: &TimeIndex,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<ForwardPass> {
        self.check_input(x, time)?;
        if store.len() != self.store.len() {
            return Err(Error::Config("parameter store does not match the model layout".into()));
        }
        let c = &self.config;
        let s = store;
        let (b, n) = (time.batch, c.nodes);

        let xv = g.constant(x.clone());
        let xhat = decoupling::embed_input(g, s, &self.lift, xv)?;
        let patterns = decoupling::decouple(g, s, xhat, time, &self.timestamps, &self.decoupler)?;

        // Each cluster propagates the sum of its nodes' patterns, which equals the lifted
        // input by conservation, so the lift is gathered directly.
        let mut outputs = Vec::new();
        for pool in self.assignment.non_empty_pools() {
            let h = g.gather(xhat, 2, pool)?;
            let a = dstgg::cluster_graph(g, s, &self.graphs, &self.timestamps, pool, time, c.graph_mode)?;
            outputs.push(sie::propagate(g, s, &self.propagation, h, a)?);
        }
        let subgraphs = outputs.len();
        let nodes_back = sie::reassemble(g, &outputs, &self.assignment, 2)?;

        let dropout = match (self.training && c.dropout > 0.0, rng) {
            (true, Some(rng)) => Some(Dropout { rate: c.dropout, rng }),
            _ => None,
        };
        let x_out = sie::encode_sequence(g, s, &self.encoder, nodes_back, dropout)?;

        let mut skip = vec![x_out, g.mean_axis(xhat, 1, false)?];
        for &p in &patterns.patterns {
            skip.push(g.mean_axis(p, 1, false)?);
        }
        let last = time.last_step();
        let (daily, weekly) = self.timestamps.lookup(g, s, &last, n)?;
        skip.push(g.reshape(daily, &[b, n, c.time_width])?);
        skip.push(g.reshape(weekly, &[b, n, c.time_width])?);
        let h = g.concat(&skip, 2)?;

        let hd = &self.head;
        let w1 = g.param(s, hd.w1);
        let b1 = g.param(s, hd.b1);
        let w2 = g.param(s, hd.w2);
        let b2 = g.param(s, hd.b2);
        let gain = g.param(s, hd.gain);
        let y = g.relu(h);
        let y = g.matmul(y, w1)?;
        let y = g.add(y, b1)?;
        let y = g.relu(y);
        let y = g.matmul(y, w2)?;
        let y = g.add(y, b2)?;
        let y = g.mul(y, gain)?;
        let y = g.permute(y, &[0, 2, 1])?;
        let prediction = g.reshape(y, &[b, c.horizon, n, 1])?;
        Ok(ForwardPass {
            prediction,
            xhat,
            patterns,
            subgraphs,
        })
    }

    /// Scaled forecast without dropout.
    pub fn predict(&self, x: &Tensor, time: &TimeIndex) -> Result<Tensor> {
        let mut g = Graph::new();
        let pass = self.forward(&mut g, x, time, None)?;
        Ok(g.value(pass.prediction).clone())
    }

    /// Pattern-ratio feature space of a probe batch under the current parameters.
    pub fn feature_space(&self, x: &Tensor, time: &TimeIndex) -> Result<FeatureSpace> {
        let (xhat, patterns) =
            decoupling::decouple_values(&self.store, &self.lift, &self.timestamps, &self.decoupler, x, time)?;
        let weights: Vec<&Tensor> = self.ratio.per_pattern.iter().map(|&p| self.store.value(p)).collect();
        clusterer::build_feature_space(&patterns, &xhat, &weights, self.store.value(self.ratio.total))
    }

    /// Reclusters from a scaled probe batch.
    pub fn recluster(&mut self, x: &Tensor, time: &TimeIndex) -> Result<&ClusterAssignment> {
        let asg = if self.config.clustering {
            clusterer::assign(&self.feature_space(x, time)?)
        } else {
            ClusterAssignment::single(self.config.nodes)
        };
        self.set_assignment(asg)?;
        Ok(&self.assignment)
    }

    /// Reclusters on the first [`PROBE_WINDOWS`] training windows.
    pub fn refresh_clusters(&mut self, train: &WindowedDataset, scaler: &Scaler) -> Result<&ClusterAssignment> {
        let probe: Vec<usize> = (0..train.len().min(PROBE_WINDOWS)).collect();
        if probe.is_empty() {
            return Err(Error::Config("cannot refresh clusters from an empty training split".into()));
        }
        let batch = train.batch(&probe, scaler);
        self.recluster(&batch.x, &batch.time)
    }

    /// Materialized fused graphs for a single sample's time index.
    pub fn subgraphs(&self, time: &TimeIndex) -> Result<Vec<FusedSubgraph>> {
        if time.batch != 1 {
            return Err(Error::Config("subgraph dump needs a single sample".into()));
        }
        let mut out = Vec::new();
        for pool in self.assignment.non_empty_pools() {
            let mut g = Graph::new();
            let a = dstgg::cluster_graph(
                &mut g,
                &self.store,
                &self.graphs,
                &self.timestamps,
                pool,
                time,
                self.config.graph_mode,
            )?;
            let n = pool.len();
            out.push(FusedSubgraph {
                a_hat: g.value(a).reshape(&[n, n])?,
                members: pool.clone(),
            });
        }
        Ok(out)
    }

    pub fn checkpoint_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.store.len() as u32).to_le_bytes());
        for (_, p) in self.store.iter() {
            let name = p.name.as_bytes();
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name);
            out.push(p.value.rank() as u8);
            for &d in p.value.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in p.value.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out.extend_from_slice(&(self.assignment.nodes() as u32).to_le_bytes());
        for &t in &self.assignment.types {
            out.extend_from_slice(&(t as u32).to_le_bytes());
        }
        out
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        fs::write(path, self.checkpoint_bytes()).map_err(|e| Error::io(path, e))
    }

    /// Loads parameter values and the assignment into a model built from the same config.
    pub fn load_checkpoint_bytes(&mut self, bytes: &[u8]) -> Result<()> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Format {
                offset: 0,
                msg: "bad checkpoint magic, expected \"MHGC\"".into(),
            });
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(r.error(4, format!("unsupported checkpoint version {version}")));
        }
        let count = r.u32()? as usize;
        if count != self.store.len() {
            return Err(r.error(
                8,
                format!("checkpoint has {count} parameters, model has {}", self.store.len()),
            ));
        }
        for _ in 0..count {
            let at = r.pos;
            let len = r.u16()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| r.error(at, "parameter name is not UTF-8".into()))?;
            let rank = r.take(1)?[0] as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let data = (0..numel).map(|_| r.f32().map(f64::from)).collect::<Result<Vec<_>>>()?;
            let id = self
                .store
                .id(&name)
                .map_err(|_| r.error(at, format!("unknown parameter `{name}`")))?;
            self.store
                .set_value(id, Tensor::new(shape, data)?)
                .map_err(|e| r.error(at, e.to_string()))?;
        }
        let n = r.u32()? as usize;
        let types = (0..n).map(|_| r.u32().map(|t| t as usize)).collect::<Result<Vec<_>>>()?;
        if r.pos != bytes.len() {
            return Err(r.error(r.pos, "trailing bytes after checkpoint".into()));
        }
        let pools = types.iter().max().map_or(1, |m| m + 1).max(self.config.patterns);
        self.set_assignment(ClusterAssignment::from_types(types, pools)?)?;
        Ok(())
    }

    pub fn load_checkpoint(&mut self, path: &Path) -> Result<()> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        self.load_checkpoint_bytes(&bytes)
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MHGC";
pub const CHECKPOINT_VERSION: u32 = 1;

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn error(&self, offset: usize, msg: String) -> Error {
        Error::Format {
            offset: offset as u64,
            msg,
        }
    }

    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(self.error(self.bytes.len(), "truncated checkpoint".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn time(batch: usize, steps: usize) -> TimeIndex {
        TimeIndex {
            batch,
            steps,
            tod: (0..batch * steps).map(|i| (i * 5) % 288).collect(),
            dow: (0..batch * steps).map(|i| i % 7).collect(),
        }
    }

    #[test]
    fn output_shape_contract() {
        let m = ForecastModel::new(ModelConfig::default()).unwrap();
        let x = Tensor::from_fn(&[4, 12, 24, 1], |i| (i as f64 * 0.01).sin());
        let y = m.predict(&x, &time(4, 12)).unwrap();
        assert_eq!(y.shape(), &[4, 12, 24, 1]);
    }

    #[test]
    fn zero_final_affine_gives_zero_forecast() {
        let mut m = ForecastModel::new(ModelConfig::default()).unwrap();
        for id in [m.head.w2, m.head.b2] {
            let shape = m.store.value(id).shape().to_vec();
            m.store.set_value(id, Tensor::zeros(&shape)).unwrap();
        }
        let x = Tensor::from_fn(&[2, 12, 24, 1], |i| i as f64 * 1e-3);
        let y = m.predict(&x, &time(2, 12)).unwrap();
        assert!(y.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn wrong_node_count_rejected() {
        let mut m = ForecastModel::new(ModelConfig::default()).unwrap();
        assert!(m.set_assignment(ClusterAssignment::single(23)).is_err());
        let x = Tensor::zeros(&[1, 12, 23, 1]);
        assert!(matches!(m.predict(&x, &time(1, 12)), Err(Error::Config(_))));
    }

    #[test]
    fn checkpoint_round_trip_and_corruption() {
        let mut m = ForecastModel::new(ModelConfig::default()).unwrap();
        m.set_assignment(ClusterAssignment::from_types((0..24).map(|i| i % 2).collect(), 2).unwrap())
            .unwrap();
        let bytes = m.checkpoint_bytes();
        let mut other = ForecastModel::new(ModelConfig {
            seed: 99,
            ..ModelConfig::default()
        })
        .unwrap();
        other.load_checkpoint_bytes(&bytes).unwrap();
        assert_eq!(other.assignment(), m.assignment());
        for ((_, a), (_, b)) in m.store.iter().zip(other.store.iter()) {
            let f32_round = a.value.map(|v| v as f32 as f64);
            assert_eq!(b.value, f32_round, "{}", a.name);
        }
        assert!(other.load_checkpoint_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(other.load_checkpoint_bytes(&bad), Err(Error::Format { offset: 0, .. })));
    }

    #[test]
    fn invalid_config_rejected() {
        for cfg in [
            ModelConfig { patterns: 0, ..ModelConfig::default() },
            ModelConfig { dropout: 1.0, ..ModelConfig::default() },
            ModelConfig { alpha: 0.0, ..ModelConfig::default() },
        ] {
            assert!(matches!(ForecastModel::new(cfg), Err(Error::Config(_))));
        }
    }
}
