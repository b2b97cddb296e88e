//! Single-pass node clustering against per-pattern limit points.
//!
//! Each node gets a `P`-vector of pattern ratios `R[i, j]`: the projected share of pattern
//! `j` relative to the projected total, averaged over batch and time. The limit point of
//! pattern `j` is the column maximum `C_j`, and a node joins the pattern whose limit point is
//! nearest in that coordinate, `argmin_j |R[i, j] − C_j|`. One pass over `N × P` entries.

use numcore::{Init, ParamId, ParamStore, Tensor};

use crate::error::{Error, Result};

pub const RATIO_EPS: f64 = 1e-8;

/// `sign(d)·max(|d|, ε)` with `sign(0) = +1`.
pub fn guard_denominator(d: f64) -> f64 {
    let m = d.abs().max(RATIO_EPS);
    if d < 0.0 {
        -m
    } else {
        m
    }
}

/// Projections `W_j ∈ R^{D×1}` per pattern and `W ∈ R^{D×1}` for the total.
///
/// Every `W_j` starts as a copy of `W`, so `R[i, j]` begins as pattern `j`'s share of the
/// projected total and each sample's shares sum to one.
#[derive(Debug, Clone)]
pub struct RatioWeights {
    pub per_pattern: Vec<ParamId>,
    pub total: ParamId,
}

impl RatioWeights {
    pub fn register(store: &mut ParamStore, patterns: usize, width: usize) -> Result<Self> {
        let init = Init::fan_in(width);
        let total = store.register("clusterer.ratio_total", &[width, 1], init)?;
        let value = store.value(total).clone();
        let per_pattern = (0..patterns)
            .map(|j| store.register_with(&format!("clusterer.ratio{j}"), value.clone(), init))
            .collect::<numcore::Result<_>>()?;
        Ok(Self { per_pattern, total })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSpace {
    /// `[N, P]`.
    pub r: Tensor,
    /// `[P]`, column maxima of `r`.
    pub c: Tensor,
}

/// Builds `R` and `C` from pattern tensors `[B, T, N, D]`, the lifted input and the
/// projection vectors (each `[D, 1]`).
pub fn build_feature_space(
    patterns: &[Tensor],
    xhat: &Tensor,
    pattern_weights: &[&Tensor],
    total_weight: &Tensor,
) -> Result<FeatureSpace> {
    let p = patterns.len();
    if p == 0 || pattern_weights.len() != p {
        return Err(Error::Config(format!(
            "{} patterns but {} ratio projections",
            p,
            pattern_weights.len()
        )));
    }
    let shape = xhat.shape();
    if shape.len() != 4 {
        return Err(Error::Config(format!("lifted input must be [B, T, N, D], got {shape:?}")));
    }
    let (bt, n) = (shape[0] * shape[1], shape[2]);
    let denom = xhat.matmul(total_weight)?;
    let mut r = Tensor::zeros(&[n, p]);
    for (j, (x, w)) in patterns.iter().zip(pattern_weights).enumerate() {
        if x.shape() != shape {
            return Err(Error::Config(format!(
                "pattern {j} has shape {:?}, expected {shape:?}",
                x.shape()
            )));
        }
        let num = x.matmul(w)?;
        for s in 0..bt {
            for i in 0..n {
                let k = s * n + i;
                r.data_mut()[i * p + j] += num.data()[k] / guard_denominator(denom.data()[k]);
            }
        }
    }
    for v in r.data_mut() {
        *v /= bt as f64;
    }
    Ok(FeatureSpace {
        c: limit_points(&r),
        r,
    })
}

/// Column maxima of `[N, P]`.
pub fn limit_points(r: &Tensor) -> Tensor {
    let p = r.shape()[1];
    let mut c = vec![f64::NEG_INFINITY; p];
    for row in r.data().chunks(p) {
        for (cj, &v) in c.iter_mut().zip(row) {
            if v > *cj {
                *cj = v;
            }
        }
    }
    Tensor::new(vec![p], c).expect("limit point shape")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterAssignment {
    pub types: Vec<usize>,
    /// Ascending node lists per pattern type; may be empty.
    pub pools: Vec<Vec<usize>>,
    /// Pools concatenated in pool order.
    pub permutation: Vec<usize>,
    /// `inverse_permutation[node]` is that node's position in `permutation`.
    pub inverse_permutation: Vec<usize>,
}

impl ClusterAssignment {
    pub fn from_types(types: Vec<usize>, patterns: usize) -> Result<Self> {
        let mut pools = vec![Vec::new(); patterns];
        for (i, &t) in types.iter().enumerate() {
            let pool = pools.get_mut(t).ok_or_else(|| {
                Error::Config(format!("node {i} has type {t} outside [0, {patterns})"))
            })?;
            pool.push(i);
        }
        let permutation: Vec<usize> = pools.concat();
        let mut inverse_permutation = vec![0; types.len()];
        for (pos, &node) in permutation.iter().enumerate() {
            inverse_permutation[node] = pos;
        }
        Ok(Self {
            types,
            pools,
            permutation,
            inverse_permutation,
        })
    }

    /// Every node in one pool.
    pub fn single(nodes: usize) -> Self {
        Self::from_types(vec![0; nodes], 1).expect("single pool")
    }

    pub fn nodes(&self) -> usize {
        self.types.len()
    }

    pub fn non_empty_pools(&self) -> impl Iterator<Item = &Vec<usize>> {
        self.pools.iter().filter(|p| !p.is_empty())
    }

    pub fn validate(&self, nodes: usize) -> Result<()> {
        if self.types.len() != nodes {
            return Err(Error::Config(format!(
                "assignment covers {} nodes, model has {nodes}",
                self.types.len()
            )));
        }
        let mut seen = vec![false; nodes];
        for &i in self.pools.iter().flatten() {
            if i >= nodes || std::mem::replace(&mut seen[i], true) {
                return Err(Error::Config(format!("node {i} repeated or out of range")));
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::Config("assignment pools do not cover every node".into()));
        }
        Ok(())
    }
}

/// Assigns every node and reports the number of distance comparisons performed.
pub fn assign_counted(fs: &FeatureSpace) -> (ClusterAssignment, usize) {
    let p = fs.c.numel();
    let c = fs.c.data();
    let mut comparisons = 0;
    let types: Vec<usize> = fs
        .r
        .data()
        .chunks(p)
        .map(|row| {
            let mut best = 0;
            let mut best_d = (row[0] - c[0]).abs();
            for j in 1..p {
                let d = (row[j] - c[j]).abs();
                comparisons += 1;
                if d < best_d {
                    best = j;
                    best_d = d;
                }
            }
            best
        })
        .collect();
    let asg = ClusterAssignment::from_types(types, p).expect("argmin stays in range");
    (asg, comparisons)
}

pub fn assign(fs: &FeatureSpace) -> ClusterAssignment {
    assign_counted(fs).0
}

/// `|R[i, j] − C_j|` as `[N, P]`.
pub fn distances(fs: &FeatureSpace) -> Tensor {
    let p = fs.c.numel();
    Tensor::from_fn(fs.r.shape(), |k| (fs.r.data()[k] - fs.c.data()[k % p]).abs())
}

/// Fraction of nodes whose type matches `planted` under the best relabeling of types.
pub fn agreement_up_to_permutation(types: &[usize], planted: &[usize], patterns: usize) -> f64 {
    assert_eq!(types.len(), planted.len());
    let mut best = 0;
    let mut perm: Vec<usize> = (0..patterns).collect();
    permute_all(&mut perm, 0, &mut |perm| {
        let hits = types.iter().zip(planted).filter(|(&t, &p)| t < patterns && perm[t] == p).count();
        best = best.max(hits);
    });
    best as f64 / types.len().max(1) as f64
}

fn permute_all(v: &mut Vec<usize>, k: usize, f: &mut impl FnMut(&[usize])) {
    if k == v.len() {
        f(v);
        return;
    }
    for i in k..v.len() {
        v.swap(k, i);
        permute_all(v, k + 1, f);
        v.swap(k, i);
    }
}
