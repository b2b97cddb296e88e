//! Dense row-major `f64` tensors and the value-level kernels the tape builds on.

use crate::error::{Result, TensorError};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Numpy-style broadcast of two shapes, aligned on the trailing axis.
pub fn broadcast_shapes(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(TensorError::Dimension {
                    op,
                    lhs: a.to_vec(),
                    rhs: b.to_vec(),
                })
            }
        };
    }
    Ok(out)
}

/// Strides of `src` viewed through `out`'s (broadcast) shape; broadcast axes get stride 0.
fn broadcast_strides(src: &[usize], out: &[usize]) -> Vec<usize> {
    let st = strides(src);
    let off = out.len() - src.len();
    (0..out.len())
        .map(|i| {
            if i < off || src[i - off] == 1 {
                0
            } else {
                st[i - off]
            }
        })
        .collect()
}

/// Calls `f(out_index, src_index)` for every element of `out`, where `src` broadcasts into it.
fn for_each_broadcast(src: &[usize], out: &[usize], mut f: impl FnMut(usize, usize)) {
    let total = numel(out);
    if total == 0 {
        return;
    }
    let n = numel(src);
    if src == out {
        (0..total).for_each(|i| f(i, i));
        return;
    }
    // trailing-suffix broadcast (e.g. a bias row): src repeats every n elements
    if src.len() <= out.len() && src == &out[out.len() - src.len()..] {
        (0..total).for_each(|i| f(i, i % n));
        return;
    }
    let bst = broadcast_strides(src, out);
    let rank = out.len();
    let mut idx = vec![0usize; rank];
    let mut si = 0usize;
    for oi in 0..total {
        f(oi, si);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            si += bst[ax];
            if idx[ax] < out[ax] {
                break;
            }
            si -= bst[ax] * out[ax];
            idx[ax] = 0;
        }
    }
}

/// Row-major `out[m×n] (+)= a[m×k] · b[k×n]`.
pub(crate) fn gemm(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    if k == 0 || n == 0 {
        return;
    }
    for (arow, orow) in a[..m * k].chunks_exact(k).zip(out.chunks_exact_mut(n)) {
        for (&av, brow) in arow.iter().zip(b.chunks_exact(n)) {
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// Row-major `out[k×n] += a[rows×k]ᵀ · g[rows×n]`.
pub(crate) fn gemm_tn(a: &[f64], g: &[f64], out: &mut [f64], rows: usize, k: usize, n: usize) {
    if k == 0 || n == 0 {
        return;
    }
    for (arow, grow) in a[..rows * k].chunks_exact(k).zip(g.chunks_exact(n)) {
        for (&av, orow) in arow.iter().zip(out.chunks_exact_mut(n)) {
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

/// Transpose of a row-major `rows×cols` block.
pub(crate) fn transpose_block(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; a.len()];
    for i in 0..rows {
        for j in 0..cols {
            t[j * rows + i] = a[i * cols + j];
        }
    }
    t
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected = numel(&shape);
        if expected != data.len() {
            return Err(TensorError::Size {
                shape,
                expected,
                actual: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel(shape)],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: (0..numel(shape)).map(&mut f).collect(),
        }
    }

    /// Builds a rank-2 tensor from rows; panics on ragged input.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        Self {
            shape: vec![rows.len(), cols],
            data: rows.concat(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn at(&self, index: &[usize]) -> f64 {
        debug_assert_eq!(index.len(), self.shape.len());
        let st = strides(&self.shape);
        self.data[index.iter().zip(&st).map(|(i, s)| i * s).sum::<usize>()]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn norm_l2(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Elementwise binary op with broadcasting.
    pub fn zip_broadcast(
        &self,
        other: &Tensor,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let shape = broadcast_shapes(op, &self.shape, &other.shape)?;
        let mut out = Tensor::zeros(&shape);
        if self.shape == shape {
            for_each_broadcast(&other.shape, &shape, |o, s| {
                out.data[o] = f(self.data[o], other.data[s]);
            });
        } else if other.shape == shape {
            for_each_broadcast(&self.shape, &shape, |o, s| {
                out.data[o] = f(self.data[s], other.data[o]);
            });
        } else {
            let mut ai = vec![0usize; out.data.len()];
            for_each_broadcast(&self.shape, &shape, |o, s| ai[o] = s);
            for_each_broadcast(&other.shape, &shape, |o, s| {
                out.data[o] = f(self.data[ai[o]], other.data[s]);
            });
        }
        Ok(out)
    }

    /// Expands to `shape` under broadcasting rules.
    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Tensor> {
        let b = broadcast_shapes("broadcast_to", &self.shape, shape)?;
        if b != shape {
            return Err(TensorError::Dimension {
                op: "broadcast_to",
                lhs: self.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        let mut out = Tensor::zeros(shape);
        for_each_broadcast(&self.shape, shape, |o, s| out.data[o] = self.data[s]);
        Ok(out)
    }

    /// Sums a broadcast-expanded tensor back down to `shape`.
    pub fn sum_to(&self, shape: &[usize]) -> Tensor {
        if self.shape == shape {
            return self.clone();
        }
        let mut out = Tensor::zeros(shape);
        for_each_broadcast(shape, &self.shape, |o, s| out.data[s] += self.data[o]);
        out
    }

    /// Batched matrix product `[..., m, k] × [..., k, n]` with broadcast batch axes.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let err = || TensorError::Dimension {
            op: "matmul",
            lhs: self.shape.clone(),
            rhs: other.shape.clone(),
        };
        if self.rank() < 2 || other.rank() < 2 {
            return Err(err());
        }
        let (ra, rb) = (self.rank(), other.rank());
        let (m, k) = (self.shape[ra - 2], self.shape[ra - 1]);
        let (k2, n) = (other.shape[rb - 2], other.shape[rb - 1]);
        if k != k2 {
            return Err(err());
        }
        // fast path: right operand is a plain matrix; fold batch axes into rows
        if rb == 2 {
            let rows = numel(&self.shape[..ra - 1]);
            let mut shape = self.shape.clone();
            shape[ra - 1] = n;
            let mut out = Tensor::zeros(&shape);
            gemm(&self.data, &other.data, &mut out.data, rows, k, n);
            return Ok(out);
        }
        let batch = broadcast_shapes("matmul", &self.shape[..ra - 2], &other.shape[..rb - 2])
            .map_err(|_| err())?;
        let mut shape = batch.clone();
        shape.extend([m, n]);
        let mut out = Tensor::zeros(&shape);
        let nb = numel(&batch);
        let mut a_off = vec![0usize; nb];
        let mut b_off = vec![0usize; nb];
        for_each_broadcast(&self.shape[..ra - 2], &batch, |o, s| a_off[o] = s * m * k);
        for_each_broadcast(&other.shape[..rb - 2], &batch, |o, s| b_off[o] = s * k * n);
        for bi in 0..nb {
            gemm(
                &self.data[a_off[bi]..a_off[bi] + m * k],
                &other.data[b_off[bi]..b_off[bi] + k * n],
                &mut out.data[bi * m * n..(bi + 1) * m * n],
                m,
                k,
                n,
            );
        }
        Ok(out)
    }

    /// Swaps the last two axes.
    pub fn transpose_last(&self) -> Result<Tensor> {
        let r = self.rank();
        if r < 2 {
            return Err(TensorError::Axis { axis: 1, rank: r });
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(&axes)
    }

    pub fn permute(&self, axes: &[usize]) -> Result<Tensor> {
        let r = self.rank();
        let mut seen = vec![false; r];
        if axes.len() != r {
            return Err(TensorError::Dimension {
                op: "permute",
                lhs: self.shape.clone(),
                rhs: axes.to_vec(),
            });
        }
        for &a in axes {
            if a >= r || seen[a] {
                return Err(TensorError::Axis { axis: a, rank: r });
            }
            seen[a] = true;
        }
        let src_st = strides(&self.shape);
        let shape: Vec<usize> = axes.iter().map(|&a| self.shape[a]).collect();
        let st: Vec<usize> = axes.iter().map(|&a| src_st[a]).collect();
        // fast path: last-two swap over contiguous blocks
        if r >= 2 && axes[..r - 2].iter().enumerate().all(|(i, &a)| i == a) && axes[r - 2] == r - 1
        {
            let (rows, cols) = (self.shape[r - 2], self.shape[r - 1]);
            let block = rows * cols;
            let mut data = Vec::with_capacity(self.numel());
            for chunk in self.data.chunks(block.max(1)) {
                data.extend(transpose_block(chunk, rows, cols));
            }
            return Tensor::new(shape, data);
        }
        let mut data = Vec::with_capacity(self.numel());
        let mut idx = vec![0usize; r];
        let mut si = 0usize;
        for _ in 0..self.numel() {
            data.push(self.data[si]);
            for ax in (0..r).rev() {
                idx[ax] += 1;
                si += st[ax];
                if idx[ax] < shape[ax] {
                    break;
                }
                si -= st[ax] * shape[ax];
                idx[ax] = 0;
            }
        }
        Tensor::new(shape, data)
    }

    fn split_axis(&self, axis: usize) -> Result<(usize, usize, usize)> {
        if axis >= self.rank() {
            return Err(TensorError::Axis {
                axis,
                rank: self.rank(),
            });
        }
        let outer = numel(&self.shape[..axis]);
        let inner = numel(&self.shape[axis + 1..]);
        Ok((outer, self.shape[axis], inner))
    }

    /// Sum over one axis; the axis is removed unless `keep` is set.
    pub fn sum_axis(&self, axis: usize, keep: bool) -> Result<Tensor> {
        let (outer, len, inner) = self.split_axis(axis)?;
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &self.data[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (d, s) in data[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut shape = self.shape.clone();
        if keep {
            shape[axis] = 1;
        } else {
            shape.remove(axis);
        }
        Tensor::new(shape, data)
    }

    pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        let first = parts.first().ok_or(TensorError::Eval("concat of nothing".into()))?;
        let r = first.rank();
        if axis >= r {
            return Err(TensorError::Axis { axis, rank: r });
        }
        let mut shape = first.shape.clone();
        shape[axis] = 0;
        for p in parts {
            let compatible = p.rank() == r
                && (0..r).all(|i| i == axis || p.shape[i] == first.shape[i]);
            if !compatible {
                return Err(TensorError::Dimension {
                    op: "concat",
                    lhs: first.shape.clone(),
                    rhs: p.shape.clone(),
                });
            }
            shape[axis] += p.shape[axis];
        }
        let outer = numel(&shape[..axis]);
        let inner = numel(&shape[axis + 1..]);
        let mut data = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for p in parts {
                let w = p.shape[axis] * inner;
                data.extend_from_slice(&p.data[o * w..(o + 1) * w]);
            }
        }
        Tensor::new(shape, data)
    }

    /// Selects `indices` along `axis` (repeats allowed).
    pub fn gather(&self, axis: usize, indices: &[usize]) -> Result<Tensor> {
        let (outer, len, inner) = self.split_axis(axis)?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= len) {
            return Err(TensorError::Index { index: bad, len });
        }
        let mut data = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &i in indices {
                let s = (o * len + i) * inner;
                data.extend_from_slice(&self.data[s..s + inner]);
            }
        }
        let mut shape = self.shape.clone();
        shape[axis] = indices.len();
        Tensor::new(shape, data)
    }

    /// Adjoint of [`Tensor::gather`]: scatter-adds rows back into an axis of length `len`.
    pub fn scatter_add(&self, axis: usize, indices: &[usize], len: usize) -> Result<Tensor> {
        let mut shape = self.shape.clone();
        if axis < shape.len() {
            shape[axis] = len;
        }
        let mut out = Tensor::zeros(&shape);
        self.scatter_add_into(axis, indices, &mut out)?;
        Ok(out)
    }

    /// In-place form of [`Tensor::scatter_add`] onto an existing `target`.
    pub fn scatter_add_into(&self, axis: usize, indices: &[usize], target: &mut Tensor) -> Result<()> {
        let (outer, k, inner) = self.split_axis(axis)?;
        let (t_outer, len, t_inner) = target.split_axis(axis)?;
        if k != indices.len() || outer != t_outer || inner != t_inner {
            return Err(TensorError::Dimension {
                op: "scatter_add",
                lhs: self.shape.clone(),
                rhs: target.shape.clone(),
            });
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= len) {
            return Err(TensorError::Index { index: bad, len });
        }
        for o in 0..outer {
            for (j, &i) in indices.iter().enumerate() {
                let s = (o * k + j) * inner;
                let d = (o * len + i) * inner;
                for (t, v) in target.data[d..d + inner].iter_mut().zip(&self.data[s..s + inner]) {
                    *t += v;
                }
            }
        }
        Ok(())
    }

    /// 0/1 mask of the `k` largest entries in each row of the last axis; ties favour the
    /// lower column index.
    pub fn topk_mask(&self, k: usize) -> Result<Tensor> {
        let r = self.rank();
        if r == 0 {
            return Err(TensorError::Axis { axis: 0, rank: 0 });
        }
        let n = self.shape[r - 1];
        let k = k.min(n);
        let mut mask = Tensor::zeros(&self.shape);
        if n == 0 {
            return Ok(mask);
        }
        let mut order: Vec<usize> = Vec::with_capacity(n);
        for (row, mrow) in self.data.chunks(n).zip(mask.data.chunks_mut(n)) {
            order.clear();
            order.extend(0..n);
            // stable sort keeps ascending column order among equal values
            order.sort_by(|&a, &b| row[b].total_cmp(&row[a]));
            for &j in &order[..k] {
                mrow[j] = 1.0;
            }
        }
        Ok(mask)
    }
}

/// Keeps the `k` largest entries of each row, zeroing the rest. `k` is clamped to the row length.
pub fn topk_row_mask(a: &Tensor, k: usize) -> Result<Tensor> {
    let mask = a.topk_mask(k)?;
    a.zip_broadcast(&mask, "topk_row_mask", |x, m| x * m)
}
