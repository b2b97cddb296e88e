//! Named learnable parameters with reproducible, order-independent initialization.
//!
//! Every parameter draws from its own ChaCha8 stream: the store seed selects the key and a
//! hash of the parameter name selects the stream, so adding a parameter never perturbs the
//! values of the others.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Uniform { low: f64, high: f64 },
    Normal { mean: f64, std: f64 },
    Zeros,
    Ones,
}

impl Init {
    /// `uniform(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn fan_in(fan_in: usize) -> Self {
        let b = 1.0 / (fan_in.max(1) as f64).sqrt();
        Init::Uniform { low: -b, high: b }
    }

    pub fn standard_normal() -> Self {
        Init::Normal {
            mean: 0.0,
            std: 1.0,
        }
    }

    fn sample(&self, shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        match *self {
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::ones(shape),
            Init::Uniform { low, high } => {
                if low >= high {
                    return Tensor::full(shape, low);
                }
                let d = Uniform::new(low, high).expect("finite uniform bounds");
                Tensor::from_fn(shape, |_| d.sample(rng))
            }
            Init::Normal { mean, std } => {
                let d = Normal::new(mean, std).expect("finite normal parameters");
                Tensor::from_fn(shape, |_| d.sample(rng))
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub init: Init,
}

/// FNV-1a; stable across platforms and releases, unlike `DefaultHasher`.
pub fn stream_id(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Deterministic generator for the named stream under `seed`.
pub fn named_rng(seed: u64, name: &str) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream_id(name));
    rng
}

#[derive(Debug, Clone)]
pub struct ParamStore {
    seed: u64,
    params: Vec<Parameter>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn register(&mut self, name: &str, shape: &[usize], init: Init) -> Result<ParamId> {
        let value = init.sample(shape, &mut named_rng(self.seed, name));
        self.register_with(name, value, init)
    }

    /// Registers a parameter with an explicit starting value.
    pub fn register_with(&mut self, name: &str, value: Tensor, init: Init) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(TensorError::DuplicateParameter(name.to_string()));
        }
        let id = ParamId(self.params.len());
        self.params.push(Parameter {
            name: name.to_string(),
            value,
            init,
        });
        self.by_name.insert(name.to_string(), id);
        Ok(id)
    }

    /// Re-draws every parameter from its initializer under a new seed.
    pub fn reinitialize(&mut self, seed: u64) {
        self.seed = seed;
        for p in &mut self.params {
            let shape = p.value.shape().to_vec();
            p.value = p.init.sample(&shape, &mut named_rng(seed, &p.name));
        }
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.by_name
            .get(name)
            .copied()
            .ok_or_else(|| TensorError::UnknownParameter(name.to_string()))
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let cur = &mut self.params[id.0].value;
        if cur.shape() != value.shape() {
            return Err(TensorError::Dimension {
                op: "set_value",
                lhs: cur.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        *cur = value;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Total number of scalar values across all parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }
}
