//! Reverse-mode autodiff over a dynamically recorded tape.
//!
//! The tape is eager: each op computes its output tensor immediately and records
//! enough context to run its backward rule later. Values are addressed by
//! [`ValueId`] (an index into the tape), parameters by [`ParamId`] (an index into
//! a [`ParamStore`]). A forward pass builds a fresh tape; [`Tape::backward`]
//! walks it once in reverse and accumulates `+=` into each parameter's `grad`.
//!
//! The op set is deliberately coarse — matmul, row softmax, layer norm, silu, a
//! masked cross entropy, gather/slice/concat plumbing, and two memory-layer
//! primitives — so backward rules stay hand-checkable. Loop orders inside every
//! kernel are fixed, which makes forward and backward bit-deterministic for a
//! given input; nothing here depends on pointer values or hash iteration order.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

use super::tensor::{Scalar, Tensor};

// ── Parameters ──────────────────────────────────────────────────────────────

/// Stable handle for a named parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct Parameter<F> {
    pub name: String,
    pub value: Tensor<F>,
    pub grad: Tensor<F>,
    /// Cleared for parameters frozen by a method (e.g. everything but memory
    /// values under sparse memory finetuning). The tape itself ignores this
    /// flag; optimizers and masking steps consult it.
    pub trainable: bool,
}

/// Registry of named parameters with stable registration order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<F> {
    params: Vec<Parameter<F>>,
    by_name: BTreeMap<String, usize>,
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            by_name: BTreeMap::new(),
        }
    }

    pub fn add(&mut self, name: &str, value: Tensor<F>) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name {name:?}")));
        }
        let id = self.params.len();
        let grad = Tensor::zeros(value.shape().to_vec());
        self.params.push(Parameter {
            name: name.to_string(),
            value,
            grad,
            trainable: true,
        });
        self.by_name.insert(name.to_string(), id);
        Ok(ParamId(id))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Parameter<F> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<F> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<F> {
        &self.params[id.0].value
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// All ids in registration order (the canonical serialization order).
    pub fn param_ids(&self) -> Vec<ParamId> {
        (0..self.params.len()).map(ParamId).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<F>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            for g in p.grad.data_mut() {
                *g = F::zero();
            }
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }
}

// ── Matmul kernels ──────────────────────────────────────────────────────────
// Accumulating variants (`out +=`) shared by forward and backward. Fixed loop
// orders: ikj for NN (row-major friendly), dot-product for NT, pkj for TN.

fn mm_nn_acc<F: Scalar>(out: &mut [F], a: &[F], b: &[F], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
}

fn mm_nt_acc<F: Scalar>(out: &mut [F], a: &[F], b: &[F], m: usize, k: usize, n: usize) {
    // out[m×n] += a[m×k] · b[n×k]ᵀ
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = F::zero();
            for p in 0..k {
                s += arow[p] * brow[p];
            }
            out[i * n + j] += s;
        }
    }
}

fn mm_tn_acc<F: Scalar>(out: &mut [F], a: &[F], b: &[F], m: usize, k: usize, n: usize) {
    // out[k×n] += a[m×k]ᵀ · b[m×n]
    for p in 0..m {
        let arow = &a[p * k..(p + 1) * k];
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..k {
            let av = arow[i];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
}

// ── Tape ────────────────────────────────────────────────────────────────────

/// Handle for a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValueId(usize);

#[derive(Debug)]
enum Op<F> {
    /// Entry point for a parameter (grads flow back into the store) or, with
    /// `param: None`, a plain input that wants no gradient.
    Leaf { param: Option<ParamId> },
    Matmul { a: ValueId, b: ValueId },
    /// y = a · bᵀ; used for attention scores and the tied output projection.
    MatmulNT { a: ValueId, b: ValueId },
    Add { a: ValueId, b: ValueId },
    Mul { a: ValueId, b: ValueId },
    Scale { a: ValueId, c: F },
    Silu { a: ValueId },
    SoftmaxRows { a: ValueId },
    LayerNorm { x: ValueId, gain: ValueId, bias: ValueId, inv_std: Vec<F>, mean: Vec<F> },
    GatherRows { table: ValueId, indices: Vec<usize> },
    SliceCols { a: ValueId, start: usize },
    ConcatCols { parts: Vec<(ValueId, usize)> },
    ConcatRows { parts: Vec<(ValueId, usize)> },
    SumAll { a: ValueId },
    CrossEntropyMasked { logits: ValueId, targets: Vec<u32>, mask: Vec<bool>, n_active: usize },
    /// Composite product-key scores for already-selected flat indices.
    /// y[t,j] = keys_a[i1]·q[t][..half] + keys_b[i2]·q[t][half..], flat = i1·√N + i2.
    MemoryScores { query: ValueId, keys_a: ValueId, keys_b: ValueId, flat: Vec<u32>, k: usize },
    /// y[t] = Σ_j weights[t,j] · values[flat[t·k + j]].
    MemoryMix { values: ValueId, weights: ValueId, flat: Vec<u32>, k: usize },
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
}

pub struct Tape<F> {
    nodes: Vec<Node<F>>,
    /// One leaf per parameter per tape, so gradient accumulation across reuse
    /// sites happens in a single buffer.
    param_leaves: BTreeMap<usize, ValueId>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            param_leaves: BTreeMap::new(),
        }
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>) -> ValueId {
        self.nodes.push(Node { value, op });
        ValueId(self.nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: ValueId) -> &Tensor<F> {
        &self.nodes[id.0].value
    }

    /// The value of a scalar node, in f64.
    pub fn scalar_value(&self, id: ValueId) -> Result<f64> {
        let t = self.value(id);
        if t.numel() != 1 {
            return Err(Error::NotScalar(t.shape().to_vec()));
        }
        Ok(t.data()[0].to_f64())
    }

    /// Leaf for a parameter's current value. Memoized per tape.
    pub fn param(&mut self, store: &ParamStore<F>, id: ParamId) -> ValueId {
        if let Some(&v) = self.param_leaves.get(&id.0) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Leaf { param: Some(id) });
        self.param_leaves.insert(id.0, v);
        v
    }

    /// Leaf with no gradient destination (inputs, masks).
    pub fn constant(&mut self, t: Tensor<F>) -> ValueId {
        self.push(t, Op::Leaf { param: None })
    }

    // ── forward ops ─────────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (m, ka) = self.value(a).dims2()?;
        let (kb, n) = self.value(b).dims2()?;
        if ka != kb {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let mut out = vec![F::zero(); m * n];
        mm_nn_acc(&mut out, self.value(a).data(), self.value(b).data(), m, ka, n);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::Matmul { a, b }))
    }

    pub fn matmul_nt(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (m, ka) = self.value(a).dims2()?;
        let (n, kb) = self.value(b).dims2()?;
        if ka != kb {
            return Err(Error::ShapeMismatch {
                op: "matmul_nt",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let mut out = vec![F::zero(); m * n];
        mm_nt_acc(&mut out, self.value(a).data(), self.value(b).data(), m, ka, n);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatmulNT { a, b }))
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::ShapeMismatch {
                op: "add",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(Tensor::new(shape, data)?, Op::Add { a, b }))
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::ShapeMismatch {
                op: "mul",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(Tensor::new(shape, data)?, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, a: ValueId, c: F) -> ValueId {
        let t = self.value(a);
        let data = t.data().iter().map(|&x| x * c).collect();
        let shape = t.shape().to_vec();
        self.push(Tensor::new(shape, data).expect("same shape"), Op::Scale { a, c })
    }

    pub fn silu(&mut self, a: ValueId) -> ValueId {
        let t = self.value(a);
        let data = t
            .data()
            .iter()
            .map(|&x| {
                let s = F::one() / (F::one() + (-x).exp());
                x * s
            })
            .collect();
        let shape = t.shape().to_vec();
        self.push(Tensor::new(shape, data).expect("same shape"), Op::Silu { a })
    }

    /// Row-wise softmax with max subtraction. Entries pushed to -1e9 by an
    /// additive mask underflow to exactly 0 probability.
    pub fn softmax_rows(&mut self, a: ValueId) -> Result<ValueId> {
        let (r, c) = self.value(a).dims2()?;
        let src = self.value(a).data();
        let mut out = vec![F::zero(); r * c];
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let mut mx = row[0];
            for &v in row {
                if v > mx {
                    mx = v;
                }
            }
            let mut sum = F::zero();
            let orow = &mut out[i * c..(i + 1) * c];
            for (o, &v) in orow.iter_mut().zip(row) {
                let e = (v - mx).exp();
                *o = e;
                sum += e;
            }
            for o in orow.iter_mut() {
                *o = *o / sum;
            }
        }
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::SoftmaxRows { a }))
    }

    /// Row-wise layer norm with learned gain and bias: y = (x-μ)/√(σ²+eps)·g + b.
    pub fn layer_norm(&mut self, x: ValueId, gain: ValueId, bias: ValueId, eps: f64) -> Result<ValueId> {
        let (r, c) = self.value(x).dims2()?;
        if self.value(gain).numel() != c || self.value(bias).numel() != c {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: self.value(x).shape().to_vec(),
                rhs: self.value(gain).shape().to_vec(),
            });
        }
        let eps = F::from_f64(eps);
        let ndat = self.value(x).data();
        let g = self.value(gain).data().to_vec();
        let b = self.value(bias).data().to_vec();
        let cn = F::from_f64(c as f64);
        let mut out = vec![F::zero(); r * c];
        let mut means = Vec::with_capacity(r);
        let mut inv_stds = Vec::with_capacity(r);
        for i in 0..r {
            let row = &ndat[i * c..(i + 1) * c];
            let mut mean = F::zero();
            for &v in row {
                mean += v;
            }
            mean = mean / cn;
            let mut var = F::zero();
            for &v in row {
                let d = v - mean;
                var += d * d;
            }
            var = var / cn;
            let inv_std = F::one() / (var + eps).sqrt();
            let orow = &mut out[i * c..(i + 1) * c];
            for j in 0..c {
                orow[j] = (row[j] - mean) * inv_std * g[j] + b[j];
            }
            means.push(mean);
            inv_stds.push(inv_std);
        }
        let shape = self.value(x).shape().to_vec();
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm { x, gain, bias, inv_std: inv_stds, mean: means },
        ))
    }

    /// y[r] = table[indices[r]]; backward scatter-adds into table rows.
    pub fn gather_rows(&mut self, table: ValueId, indices: &[usize]) -> Result<ValueId> {
        let (rows, c) = self.value(table).dims2()?;
        for &i in indices {
            if i >= rows {
                return Err(Error::ShapeMismatch {
                    op: "gather_rows",
                    lhs: vec![rows, c],
                    rhs: vec![i],
                });
            }
        }
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            out.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        Ok(self.push(
            Tensor::new(vec![indices.len(), c], out)?,
            Op::GatherRows { table, indices: indices.to_vec() },
        ))
    }

    pub fn slice_cols(&mut self, a: ValueId, start: usize, len: usize) -> Result<ValueId> {
        let (r, c) = self.value(a).dims2()?;
        if start + len > c {
            return Err(Error::ShapeMismatch {
                op: "slice_cols",
                lhs: vec![r, c],
                rhs: vec![start, len],
            });
        }
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        Ok(self.push(Tensor::new(vec![r, len], out)?, Op::SliceCols { a, start }))
    }

    pub fn concat_cols(&mut self, parts: &[ValueId]) -> Result<ValueId> {
        if parts.is_empty() {
            return Err(Error::Config("concat_cols of zero parts".into()));
        }
        let (r, _) = self.value(parts[0]).dims2()?;
        let mut widths = Vec::with_capacity(parts.len());
        let mut total = 0usize;
        for &p in parts {
            let (rp, cp) = self.value(p).dims2()?;
            if rp != r {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    lhs: vec![r],
                    rhs: vec![rp],
                });
            }
            widths.push(cp);
            total += cp;
        }
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                let src = self.value(p).data();
                out.extend_from_slice(&src[i * w..(i + 1) * w]);
            }
        }
        let parts_meta = parts.iter().zip(&widths).map(|(&p, &w)| (p, w)).collect();
        Ok(self.push(
            Tensor::new(vec![r, total], out)?,
            Op::ConcatCols { parts: parts_meta },
        ))
    }

    pub fn concat_rows(&mut self, parts: &[ValueId]) -> Result<ValueId> {
        if parts.is_empty() {
            return Err(Error::Config("concat_rows of zero parts".into()));
        }
        let (_, c) = self.value(parts[0]).dims2()?;
        let mut heights = Vec::with_capacity(parts.len());
        let mut total = 0usize;
        for &p in parts {
            let (rp, cp) = self.value(p).dims2()?;
            if cp != c {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    lhs: vec![c],
                    rhs: vec![cp],
                });
            }
            heights.push(rp);
            total += rp;
        }
        let mut out = Vec::with_capacity(total * c);
        for &p in parts {
            out.extend_from_slice(self.value(p).data());
        }
        let parts_meta = parts.iter().zip(&heights).map(|(&p, &h)| (p, h)).collect();
        Ok(self.push(
            Tensor::new(vec![total, c], out)?,
            Op::ConcatRows { parts: parts_meta },
        ))
    }

    pub fn sum_all(&mut self, a: ValueId) -> ValueId {
        let mut s = F::zero();
        for &v in self.value(a).data() {
            s += v;
        }
        self.push(Tensor::scalar(s), Op::SumAll { a })
    }

    /// Mean NLL of `targets` under row-wise softmax of `logits`, over rows where
    /// `mask` is true. Rows with `mask == false` contribute nothing — neither to
    /// the loss nor to any gradient.
    pub fn cross_entropy_masked(
        &mut self,
        logits: ValueId,
        targets: &[u32],
        mask: &[bool],
    ) -> Result<ValueId> {
        let (r, c) = self.value(logits).dims2()?;
        if targets.len() != r || mask.len() != r {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy_masked",
                lhs: vec![r, c],
                rhs: vec![targets.len(), mask.len()],
            });
        }
        for (i, &t) in targets.iter().enumerate() {
            if mask[i] && t as usize >= c {
                return Err(Error::TokenOutOfRange { id: t, vocab: c });
            }
        }
        let n_active = mask.iter().filter(|&&m| m).count();
        if n_active == 0 {
            return Err(Error::EmptyLoss);
        }
        let src = self.value(logits).data();
        let mut total = F::zero();
        for i in 0..r {
            if !mask[i] {
                continue;
            }
            let row = &src[i * c..(i + 1) * c];
            let mut mx = row[0];
            for &v in row {
                if v > mx {
                    mx = v;
                }
            }
            let mut sum = F::zero();
            for &v in row {
                sum += (v - mx).exp();
            }
            let lse = mx + sum.ln();
            total += lse - row[targets[i] as usize];
        }
        let loss = total / F::from_f64(n_active as f64);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropyMasked {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                n_active,
            },
        ))
    }

    /// Composite product-key scores for pre-selected flat indices.
    ///
    /// `query` is [T × d] with d even; `keys_a`/`keys_b` are the two half-key
    /// tables [√N × d/2]. `flat` lists k selected indices per row of `query`
    /// (`flat[t*k + j] = i1·√N + i2`). Output is [T × k]. Differentiable in the
    /// query and both key tables; the index selection itself is fixed.
    pub fn memory_scores(
        &mut self,
        query: ValueId,
        keys_a: ValueId,
        keys_b: ValueId,
        flat: &[u32],
        k: usize,
    ) -> Result<ValueId> {
        let (t_rows, d) = self.value(query).dims2()?;
        let (sn, half_a) = self.value(keys_a).dims2()?;
        let (sn_b, half_b) = self.value(keys_b).dims2()?;
        if d % 2 != 0 || half_a != d / 2 || half_b != d / 2 || sn != sn_b {
            return Err(Error::ShapeMismatch {
                op: "memory_scores",
                lhs: vec![t_rows, d],
                rhs: vec![sn, half_a, sn_b, half_b],
            });
        }
        if flat.len() != t_rows * k {
            return Err(Error::ShapeMismatch {
                op: "memory_scores",
                lhs: vec![t_rows, k],
                rhs: vec![flat.len()],
            });
        }
        let n_total = sn * sn;
        for &f in flat {
            if f as usize >= n_total {
                return Err(Error::ShapeMismatch {
                    op: "memory_scores",
                    lhs: vec![n_total],
                    rhs: vec![f as usize],
                });
            }
        }
        let half = d / 2;
        let q = self.value(query).data();
        let ka = self.value(keys_a).data();
        let kb = self.value(keys_b).data();
        let mut out = vec![F::zero(); t_rows * k];
        for t in 0..t_rows {
            let qrow = &q[t * d..(t + 1) * d];
            for j in 0..k {
                let f = flat[t * k + j] as usize;
                let (i1, i2) = (f / sn, f % sn);
                let arow = &ka[i1 * half..(i1 + 1) * half];
                let brow = &kb[i2 * half..(i2 + 1) * half];
                let mut s = F::zero();
                for p in 0..half {
                    s += arow[p] * qrow[p];
                }
                for p in 0..half {
                    s += brow[p] * qrow[half + p];
                }
                out[t * k + j] = s;
            }
        }
        Ok(self.push(
            Tensor::new(vec![t_rows, k], out)?,
            Op::MemoryScores { query, keys_a, keys_b, flat: flat.to_vec(), k },
        ))
    }

    /// Weighted gather of value rows: y[t] = Σ_j weights[t,j] · values[flat[t·k+j]].
    /// Differentiable in both the weights and the gathered value rows.
    pub fn memory_mix(
        &mut self,
        values: ValueId,
        weights: ValueId,
        flat: &[u32],
    ) -> Result<ValueId> {
        let (n_rows, dv) = self.value(values).dims2()?;
        let (t_rows, k) = self.value(weights).dims2()?;
        if flat.len() != t_rows * k {
            return Err(Error::ShapeMismatch {
                op: "memory_mix",
                lhs: vec![t_rows, k],
                rhs: vec![flat.len()],
            });
        }
        for &f in flat {
            if f as usize >= n_rows {
                return Err(Error::ShapeMismatch {
                    op: "memory_mix",
                    lhs: vec![n_rows],
                    rhs: vec![f as usize],
                });
            }
        }
        let vals = self.value(values).data();
        let w = self.value(weights).data();
        let mut out = vec![F::zero(); t_rows * dv];
        for t in 0..t_rows {
            let orow = &mut out[t * dv..(t + 1) * dv];
            for j in 0..k {
                let wv = w[t * k + j];
                let vrow = &vals[flat[t * k + j] as usize * dv..];
                for p in 0..dv {
                    orow[p] += wv * vrow[p];
                }
            }
        }
        Ok(self.push(
            Tensor::new(vec![t_rows, dv], out)?,
            Op::MemoryMix { values, weights, flat: flat.to_vec(), k },
        ))
    }

    // ── backward ────────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar `loss`. Accumulates (`+=`) into the `grad` of
    /// every parameter leaf reachable from `loss`; call `store.zero_grads()`
    /// first for fresh gradients.
    pub fn backward(&self, loss: ValueId, store: &mut ParamStore<F>) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::NotScalar(self.value(loss).shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![F::one()]);

        for i in (0..self.nodes.len()).rev() {
            let Some(g) = grads[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Leaf { param } => {
                    if let Some(pid) = param {
                        let dst = store.get_mut(*pid).grad.data_mut();
                        for (d, &gv) in dst.iter_mut().zip(&g) {
                            *d += gv;
                        }
                    }
                }
                Op::Matmul { a, b } => {
                    let (m, k) = self.value(*a).dims2().unwrap();
                    let (_, n) = self.value(*b).dims2().unwrap();
                    {
                        let buf = Self::buf(&mut grads, *a, m * k);
                        mm_nt_acc(buf, &g, self.value(*b).data(), m, n, k);
                    }
                    {
                        let buf = Self::buf(&mut grads, *b, k * n);
                        mm_tn_acc(buf, self.value(*a).data(), &g, m, k, n);
                    }
                }
                Op::MatmulNT { a, b } => {
                    // y[m×n] = a[m×k] · b[n×k]ᵀ
                    let (m, k) = self.value(*a).dims2().unwrap();
                    let (n, _) = self.value(*b).dims2().unwrap();
                    {
                        // da[m×k] += g[m×n] · b[n×k]
                        let buf = Self::buf(&mut grads, *a, m * k);
                        mm_nn_acc(buf, &g, self.value(*b).data(), m, n, k);
                    }
                    {
                        // db[n×k] += g[m×n]ᵀ · a[m×k]
                        let buf = Self::buf(&mut grads, *b, n * k);
                        mm_tn_acc(buf, &g, self.value(*a).data(), m, n, k);
                    }
                }
                Op::Add { a, b } => {
                    {
                        let buf = Self::buf(&mut grads, *a, g.len());
                        for (d, &gv) in buf.iter_mut().zip(&g) {
                            *d += gv;
                        }
                    }
                    {
                        let buf = Self::buf(&mut grads, *b, g.len());
                        for (d, &gv) in buf.iter_mut().zip(&g) {
                            *d += gv;
                        }
                    }
                }
                Op::Mul { a, b } => {
                    {
                        let bv = self.value(*b).data();
                        let buf = Self::buf(&mut grads, *a, g.len());
                        for j in 0..g.len() {
                            buf[j] += g[j] * bv[j];
                        }
                    }
                    {
                        let av = self.value(*a).data();
                        let buf = Self::buf(&mut grads, *b, g.len());
                        for j in 0..g.len() {
                            buf[j] += g[j] * av[j];
                        }
                    }
                }
                Op::Scale { a, c } => {
                    let buf = Self::buf(&mut grads, *a, g.len());
                    for (d, &gv) in buf.iter_mut().zip(&g) {
                        *d += gv * *c;
                    }
                }
                Op::Silu { a } => {
                    let x = self.value(*a).data();
                    let buf = Self::buf(&mut grads, *a, g.len());
                    for j in 0..g.len() {
                        let s = F::one() / (F::one() + (-x[j]).exp());
                        buf[j] += g[j] * (s + x[j] * s * (F::one() - s));
                    }
                }
                Op::SoftmaxRows { a } => {
                    let (r, c) = self.value(*a).dims2().unwrap();
                    let y = self.nodes[i].value.data();
                    let buf = Self::buf(&mut grads, *a, r * c);
                    for row in 0..r {
                        let yr = &y[row * c..(row + 1) * c];
                        let gr = &g[row * c..(row + 1) * c];
                        let mut dot = F::zero();
                        for j in 0..c {
                            dot += gr[j] * yr[j];
                        }
                        let br = &mut buf[row * c..(row + 1) * c];
                        for j in 0..c {
                            br[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
                Op::LayerNorm { x, gain, bias, inv_std, mean } => {
                    let (r, c) = self.value(*x).dims2().unwrap();
                    let xv = self.value(*x).data();
                    let gv = self.value(*gain).data();
                    let cn = F::from_f64(c as f64);
                    {
                        let buf = Self::buf(&mut grads, *x, r * c);
                        for row in 0..r {
                            let istd = inv_std[row];
                            let mu = mean[row];
                            let xr = &xv[row * c..(row + 1) * c];
                            let gr = &g[row * c..(row + 1) * c];
                            // dxhat = g ⊙ gain; two row means close the form.
                            let mut mean_dx = F::zero();
                            let mut mean_dxx = F::zero();
                            for j in 0..c {
                                let dxh = gr[j] * gv[j];
                                let xh = (xr[j] - mu) * istd;
                                mean_dx += dxh;
                                mean_dxx += dxh * xh;
                            }
                            mean_dx = mean_dx / cn;
                            mean_dxx = mean_dxx / cn;
                            let br = &mut buf[row * c..(row + 1) * c];
                            for j in 0..c {
                                let dxh = gr[j] * gv[j];
                                let xh = (xr[j] - mu) * istd;
                                br[j] += istd * (dxh - mean_dx - xh * mean_dxx);
                            }
                        }
                    }
                    {
                        let buf = Self::buf(&mut grads, *gain, c);
                        for row in 0..r {
                            let istd = inv_std[row];
                            let mu = mean[row];
                            for j in 0..c {
                                let xh = (xv[row * c + j] - mu) * istd;
                                buf[j] += g[row * c + j] * xh;
                            }
                        }
                    }
                    {
                        let buf = Self::buf(&mut grads, *bias, c);
                        for row in 0..r {
                            for j in 0..c {
                                buf[j] += g[row * c + j];
                            }
                        }
                    }
                }
                Op::GatherRows { table, indices } => {
                    let (rows, c) = self.value(*table).dims2().unwrap();
                    let buf = Self::buf(&mut grads, *table, rows * c);
                    for (r, &idx) in indices.iter().enumerate() {
                        let dst = &mut buf[idx * c..(idx + 1) * c];
                        let src = &g[r * c..(r + 1) * c];
                        for j in 0..c {
                            dst[j] += src[j];
                        }
                    }
                }
                Op::SliceCols { a, start } => {
                    let (r, c) = self.value(*a).dims2().unwrap();
                    let len = g.len() / r;
                    let buf = Self::buf(&mut grads, *a, r * c);
                    for row in 0..r {
                        for j in 0..len {
                            buf[row * c + start + j] += g[row * len + j];
                        }
                    }
                }
                Op::ConcatCols { parts } => {
                    let total: usize = parts.iter().map(|(_, w)| w).sum();
                    let r = g.len() / total;
                    let mut offset = 0usize;
                    for &(p, w) in parts {
                        let buf = Self::buf(&mut grads, p, r * w);
                        for row in 0..r {
                            for j in 0..w {
                                buf[row * w + j] += g[row * total + offset + j];
                            }
                        }
                        offset += w;
                    }
                }
                Op::ConcatRows { parts } => {
                    let total_rows: usize = parts.iter().map(|(_, h)| h).sum();
                    let c = g.len() / total_rows;
                    let mut offset = 0usize;
                    for &(p, h) in parts {
                        let buf = Self::buf(&mut grads, p, h * c);
                        for j in 0..h * c {
                            buf[j] += g[offset * c + j];
                        }
                        offset += h;
                    }
                }
                Op::SumAll { a } => {
                    let n = self.value(*a).numel();
                    let buf = Self::buf(&mut grads, *a, n);
                    for d in buf.iter_mut() {
                        *d += g[0];
                    }
                }
                Op::CrossEntropyMasked { logits, targets, mask, n_active } => {
                    let (r, c) = self.value(*logits).dims2().unwrap();
                    let lv = self.value(*logits).data();
                    let scale = g[0] / F::from_f64(*n_active as f64);
                    let buf = Self::buf(&mut grads, *logits, r * c);
                    for row in 0..r {
                        if !mask[row] {
                            continue;
                        }
                        let xr = &lv[row * c..(row + 1) * c];
                        let mut mx = xr[0];
                        for &v in xr {
                            if v > mx {
                                mx = v;
                            }
                        }
                        let mut sum = F::zero();
                        for &v in xr {
                            sum += (v - mx).exp();
                        }
                        let br = &mut buf[row * c..(row + 1) * c];
                        for j in 0..c {
                            let p = (xr[j] - mx).exp() / sum;
                            let ind = if j == targets[row] as usize { F::one() } else { F::zero() };
                            br[j] += (p - ind) * scale;
                        }
                    }
                }
                Op::MemoryScores { query, keys_a, keys_b, flat, k } => {
                    let (t_rows, d) = self.value(*query).dims2().unwrap();
                    let (sn, half) = self.value(*keys_a).dims2().unwrap();
                    let qv = self.value(*query).data();
                    let kav = self.value(*keys_a).data();
                    let kbv = self.value(*keys_b).data();
                    {
                        let buf = Self::buf(&mut grads, *query, t_rows * d);
                        for t in 0..t_rows {
                            for j in 0..*k {
                                let gv = g[t * k + j];
                                let f = flat[t * k + j] as usize;
                                let (i1, i2) = (f / sn, f % sn);
                                let qb = &mut buf[t * d..(t + 1) * d];
                                for p in 0..half {
                                    qb[p] += gv * kav[i1 * half + p];
                                    qb[half + p] += gv * kbv[i2 * half + p];
                                }
                            }
                        }
                    }
                    {
                        let buf = Self::buf(&mut grads, *keys_a, sn * half);
                        for t in 0..t_rows {
                            let qrow = &qv[t * d..(t + 1) * d];
                            for j in 0..*k {
                                let gv = g[t * k + j];
                                let i1 = flat[t * k + j] as usize / sn;
                                let dst = &mut buf[i1 * half..(i1 + 1) * half];
                                for p in 0..half {
                                    dst[p] += gv * qrow[p];
                                }
                            }
                        }
                    }
                    {
                        let buf = Self::buf(&mut grads, *keys_b, sn * half);
                        for t in 0..t_rows {
                            let qrow = &qv[t * d..(t + 1) * d];
                            for j in 0..*k {
                                let gv = g[t * k + j];
                                let i2 = flat[t * k + j] as usize % sn;
                                let dst = &mut buf[i2 * half..(i2 + 1) * half];
                                for p in 0..half {
                                    dst[p] += gv * qrow[half + p];
                                }
                            }
                        }
                    }
                }
                Op::MemoryMix { values, weights, flat, k } => {
                    let (n_rows, dv) = self.value(*values).dims2().unwrap();
                    let (t_rows, _) = self.value(*weights).dims2().unwrap();
                    let vv = self.value(*values).data();
                    let wv = self.value(*weights).data();
                    {
                        let buf = Self::buf(&mut grads, *weights, t_rows * k);
                        for t in 0..t_rows {
                            let grow = &g[t * dv..(t + 1) * dv];
                            for j in 0..*k {
                                let vrow = &vv[flat[t * k + j] as usize * dv..];
                                let mut s = F::zero();
                                for p in 0..dv {
                                    s += grow[p] * vrow[p];
                                }
                                buf[t * k + j] += s;
                            }
                        }
                    }
                    {
                        let buf = Self::buf(&mut grads, *values, n_rows * dv);
                        for t in 0..t_rows {
                            let grow = &g[t * dv..(t + 1) * dv];
                            for j in 0..*k {
                                let w = wv[t * k + j];
                                let dst = &mut buf[flat[t * k + j] as usize * dv..];
                                for p in 0..dv {
                                    dst[p] += w * grow[p];
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn buf(grads: &mut [Option<Vec<F>>], id: ValueId, numel: usize) -> &mut [F] {
        grads[id.0].get_or_insert_with(|| vec![F::zero(); numel]).as_mut_slice()
    }
}
