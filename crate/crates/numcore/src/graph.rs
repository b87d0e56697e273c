//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation of one forward pass as a node in
//! topological order. [`Graph::backward`] walks the tape in reverse and
//! returns a [`Gradients`] table holding the derivative of a scalar loss
//! with respect to every leaf and every parameter of the borrowed
//! [`ParamStore`]. Parameters are never mutated by the graph; optimizers
//! apply the gradients afterwards.

use std::collections::HashMap;

use crate::error::{shape_err, NumError, Result};
use crate::scalar::{gemm, Scalar};
use crate::tensor::Tensor;

/// LayerNorm variance guard.
pub const LAYER_NORM_EPS: f64 = 1e-5;
/// Guard for vector norms (cosine similarity, row normalization).
pub const NORM_EPS: f64 = 1e-8;
/// Floor applied to probabilities inside the KL divergence.
pub const PROB_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of learnable tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(NumError::DuplicateParam(name));
        }
        let id = self.values.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        Ok(ParamId(id))
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.index
            .get(name)
            .map(|&i| ParamId(i))
            .ok_or_else(|| NumError::UnknownParam(name.to_string()))
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Const,
    Leaf,
    Param(ParamId),
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    BatchMatMul { a: Var, b: Var, tb: bool },
    Add { a: Var, b: Var },
    AddRow { a: Var, row: Var },
    Mul { a: Var, b: Var },
    Affine { a: Var, scale: T },
    Relu { a: Var },
    Sin { a: Var },
    PeriodicTail { a: Var },
    Softmax { a: Var },
    LayerNorm { a: Var, gain: Var, bias: Var, xhat: Vec<T>, inv_std: Vec<T> },
    NormalizeRows { a: Var, norms: Vec<T> },
    RowDot { a: Var, b: Var },
    Transpose { a: Var },
    Reshape { a: Var },
    Permute0213 { a: Var },
    Concat { parts: Vec<Var> },
    GatherRows { a: Var, idx: Vec<usize> },
    Sum { a: Var },
    Mean { a: Var },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<T> },
    KlDiv { r: Tensor<T>, q: Var },
    BceLogits { a: Var, target: Tensor<T> },
    Mse { a: Var, target: Tensor<T> },
}

#[derive(Debug)]
struct Node<T> {
    value: Option<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Derivatives of a scalar loss, indexed by node and by parameter.
#[derive(Debug)]
pub struct Gradients<T> {
    nodes: Vec<Option<Tensor<T>>>,
    params: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to a leaf or parameter node. Nodes that did
    /// not participate in the loss report `None`.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes.get(v.0).and_then(Option::as_ref)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(id.0).and_then(Option::as_ref)
    }

    /// Gradient of a parameter, zeros when it did not participate.
    pub fn param_or_zeros(&self, id: ParamId, store: &ParamStore<T>) -> Tensor<T> {
        self.param(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(store.get(id).shape().to_vec()))
    }

    pub fn param_mut(&mut self, id: ParamId) -> Option<&mut Tensor<T>> {
        self.params.get_mut(id.0).and_then(Option::as_mut)
    }

    /// Global L2 norm over all parameter gradients.
    pub fn global_norm(&self) -> f64 {
        self.params
            .iter()
            .flatten()
            .flat_map(|g| g.data().iter())
            .map(|v| v.f() * v.f())
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales all parameter gradients so their global norm is at most
    /// `max_norm`. Returns the norm before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm.is_finite() {
            let s = T::c(max_norm / norm);
            for g in self.params.iter_mut().flatten() {
                g.scale_in_place(s);
            }
        }
        norm
    }
}

/// Recorded computation over a borrowed parameter store.
pub struct Graph<'p, T: Scalar> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return shape_err(op, format!("{a:?} vs {b:?}"));
    }
    Ok(())
}

impl<'p, T: Scalar> Graph<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Graph {
            params,
            nodes: Vec::with_capacity(256),
        }
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        let node = &self.nodes[v.0];
        match &node.op {
            Op::Param(id) => self.params.get(*id),
            _ => node.value.as_ref().expect("non-param node has a value"),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Const, false)
    }

    /// Differentiable input that is not a stored parameter.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, false, b, false)
    }

    /// `op(a) · op(b)` for rank-2 operands, where `op` transposes when
    /// the matching flag is set.
    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 {
            return shape_err("matmul", format!("rank-2 operands required, got {sa:?} and {sb:?}"));
        }
        let (m, k) = if ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (k2, n) = if tb { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != k2 {
            return shape_err("matmul", format!("inner dimensions {k} and {k2} differ ({sa:?} x {sb:?})"));
        }
        let mut out = vec![T::zero(); m * n];
        gemm(m, k, n, self.value(a).data(), ta, self.value(b).data(), tb, &mut out, false);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul { a, b, ta, tb }, rg))
    }

    /// Batched product `[B,m,k] · [B,k,n]`, or `[B,m,k] · [B,n,k]ᵀ` when `tb`.
    pub fn bmm(&mut self, a: Var, b: Var, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return shape_err("bmm", format!("{sa:?} x {sb:?}"));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let (k2, n) = if tb { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if k != k2 {
            return shape_err("bmm", format!("inner dimensions {k} and {k2} differ"));
        }
        let mut out = vec![T::zero(); batch * m * n];
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        for i in 0..batch {
            gemm(
                m,
                k,
                n,
                &av[i * m * k..(i + 1) * m * k],
                false,
                &bv[i * k * n..(i + 1) * k * n],
                tb,
                &mut out[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![batch, m, n], out)?, Op::BatchMatMul { a, b, tb }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.shape(a), self.shape(b))?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add { a, b }, rg))
    }

    /// Adds `row` (numel equal to the trailing dimension) to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let c = self.value(a).last_dim();
        if self.value(row).numel() != c {
            return shape_err(
                "add_row",
                format!("row of {} elements vs trailing dim {c}", self.value(row).numel()),
            );
        }
        let r = self.value(row).data();
        let data = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + r[i % c])
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(t, Op::AddRow { a, row }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.shape(a), self.shape(b))?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul { a, b }, rg))
    }

    /// `scale * a + shift`, elementwise.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let (s, c) = (T::c(scale), T::c(shift));
        let t = self.value(a).map(|x| s * x + c);
        let rg = self.rg(a);
        self.push(t, Op::Affine { a, scale: s }, rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.affine(a, s, 0.0)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        let rg = self.rg(a);
        self.push(t, Op::Relu { a }, rg)
    }

    pub fn sin(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x.sin());
        let rg = self.rg(a);
        self.push(t, Op::Sin { a }, rg)
    }

    /// Identity on column 0 of every row, `sin` on the remaining columns.
    pub fn periodic_tail(&mut self, a: Var) -> Var {
        let c = self.value(a).last_dim();
        let data = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| if i % c == 0 { x } else { x.sin() })
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data).expect("same shape");
        let rg = self.rg(a);
        self.push(t, Op::PeriodicTail { a }, rg)
    }

    /// Softmax over the trailing axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        self.softmax_impl(a, None).expect("no mask, no shape error")
    }

    /// Softmax over the trailing axis restricted to `allowed` entries
    /// (same element count as `a`). Disallowed entries get probability 0.
    /// Every row must allow at least one entry.
    pub fn masked_softmax(&mut self, a: Var, allowed: &[bool]) -> Result<Var> {
        if allowed.len() != self.value(a).numel() {
            return shape_err(
                "masked_softmax",
                format!("mask of {} entries for {:?}", allowed.len(), self.shape(a)),
            );
        }
        self.softmax_impl(a, Some(allowed))
    }

    fn softmax_impl(&mut self, a: Var, allowed: Option<&[bool]>) -> Result<Var> {
        let x = self.value(a);
        let c = x.last_dim();
        let mut out = vec![T::zero(); x.numel()];
        for r in 0..x.rows() {
            let row = x.row(r);
            let ok = |j: usize| allowed.is_none_or(|m| m[r * c + j]);
            let mut max = T::neg_infinity();
            for (j, &v) in row.iter().enumerate() {
                if ok(j) && v > max {
                    max = v;
                }
            }
            if !(0..c).any(ok) {
                return shape_err("masked_softmax", format!("row {r} has no allowed entries"));
            }
            let mut sum = T::zero();
            for (j, &v) in row.iter().enumerate() {
                if ok(j) {
                    let e = (v - max).exp();
                    out[r * c + j] = e;
                    sum = sum + e;
                }
            }
            for o in &mut out[r * c..(r + 1) * c] {
                *o = *o / sum;
            }
        }
        let t = Tensor::new(x.shape().to_vec(), out)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Softmax { a }, rg))
    }

    /// Per-row normalization over the trailing axis followed by an affine
    /// map with `gain` and `bias` (each of trailing-dimension size).
    pub fn layer_norm(&mut self, a: Var, gain: Var, bias: Var) -> Result<Var> {
        let x = self.value(a);
        let c = x.last_dim();
        if c < 2 {
            return shape_err("layer_norm", "normalized dimension must be at least 2");
        }
        if self.value(gain).numel() != c || self.value(bias).numel() != c {
            return shape_err("layer_norm", "gain/bias size must equal trailing dimension");
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let n = T::c(c as f64);
        let eps = T::c(LAYER_NORM_EPS);
        let rows = x.rows();
        let mut xhat = vec![T::zero(); x.numel()];
        let mut inv_std = vec![T::zero(); rows];
        let mut out = vec![T::zero(); x.numel()];
        for r in 0..rows {
            let row = x.row(r);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let inv = T::one() / (var + eps).sqrt();
            inv_std[r] = inv;
            for j in 0..c {
                let h = (row[j] - mean) * inv;
                xhat[r * c + j] = h;
                out[r * c + j] = h * g[j] + b[j];
            }
        }
        let t = Tensor::new(x.shape().to_vec(), out)?;
        let rg = self.rg(a) || self.rg(gain) || self.rg(bias);
        Ok(self.push(t, Op::LayerNorm { a, gain, bias, xhat, inv_std }, rg))
    }

    /// Scales every row to unit L2 norm (norms below the guard are
    /// replaced by the guard).
    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let c = x.last_dim();
        let eps = T::c(NORM_EPS);
        let mut norms = Vec::with_capacity(x.rows());
        let mut out = vec![T::zero(); x.numel()];
        for r in 0..x.rows() {
            let row = x.row(r);
            let mut n = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            if n < eps {
                log::debug!("normalize_rows: zero-norm row {r} guarded by epsilon");
                n = eps;
            }
            norms.push(n);
            for j in 0..c {
                out[r * c + j] = row[j] / n;
            }
        }
        let t = Tensor::new(x.shape().to_vec(), out).expect("same shape");
        let rg = self.rg(a);
        self.push(t, Op::NormalizeRows { a, norms }, rg)
    }

    /// Row-wise dot product of two equally shaped matrices; shape `[rows]`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("row_dot", self.shape(a), self.shape(b))?;
        let (x, y) = (self.value(a), self.value(b));
        let out: Vec<T> = (0..x.rows())
            .map(|r| x.row(r).iter().zip(y.row(r)).map(|(&p, &q)| p * q).sum())
            .collect();
        let t = Tensor::new(vec![out.len()], out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::RowDot { a, b }, rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.rank() != 2 {
            return shape_err("transpose", format!("rank-2 required, got {:?}", x.shape()));
        }
        let (r, c) = (x.shape()[0], x.shape()[1]);
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = x.data()[i * c + j];
            }
        }
        let t = Tensor::new(vec![c, r], out)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Transpose { a }, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape.to_vec())?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Reshape { a }, rg))
    }

    /// `[a,b,c,d] -> [a,c,b,d]`.
    pub fn permute_0213(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.rank() != 4 {
            return shape_err("permute_0213", format!("rank-4 required, got {:?}", x.shape()));
        }
        let s = x.shape();
        let out = permute_0213_data(x.data(), [s[0], s[1], s[2], s[3]]);
        let t = Tensor::new(vec![s[0], s[2], s[1], s[3]], out)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Permute0213 { a }, rg))
    }

    /// Concatenation along the trailing axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return shape_err("concat", "no inputs");
        };
        let lead = self.shape(first)[..self.shape(first).len().saturating_sub(1)].to_vec();
        let rows = self.value(first).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != lead.len() + 1 || s[..lead.len()] != lead[..] {
                return shape_err("concat", format!("leading dims {:?} vs {lead:?}", s));
            }
            widths.push(self.value(p).last_dim());
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let mut shape = lead;
        shape.push(total);
        let t = Tensor::new(shape, out)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(t, Op::Concat { parts: parts.to_vec() }, rg))
    }

    /// Selects rows of a rank-2 tensor; indices may repeat.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let x = self.value(a);
        if x.rank() != 2 {
            return shape_err("gather_rows", format!("rank-2 required, got {:?}", x.shape()));
        }
        let (r, c) = (x.shape()[0], x.shape()[1]);
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= r {
                return shape_err("gather_rows", format!("row {i} out of {r}"));
            }
            out.extend_from_slice(x.row(i));
        }
        let t = Tensor::new(vec![idx.len(), c], out)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::GatherRows { a, idx: idx.to_vec() }, rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let t = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(t, Op::Sum { a }, rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let t = Tensor::scalar(x.sum() / T::c(x.numel().max(1) as f64));
        let rg = self.rg(a);
        self.push(t, Op::Mean { a }, rg)
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let x = self.value(logits);
        if x.rank() != 2 || x.shape()[0] != targets.len() {
            return shape_err(
                "cross_entropy",
                format!("logits {:?} vs {} targets", x.shape(), targets.len()),
            );
        }
        let c = x.shape()[1];
        let mut probs = vec![T::zero(); x.numel()];
        let mut loss = T::zero();
        for (r, &t) in targets.iter().enumerate() {
            if t >= c {
                return shape_err("cross_entropy", format!("target {t} out of {c} classes"));
            }
            let row = x.row(r);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let sum: T = row.iter().map(|&v| (v - max).exp()).sum();
            let lse = max + sum.ln();
            loss = loss + lse - row[t];
            for j in 0..c {
                probs[r * c + j] = (row[j] - lse).exp();
            }
        }
        let n = T::c(targets.len().max(1) as f64);
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss / n),
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs },
            rg,
        ))
    }

    /// Mean over rows of `KL(r ‖ q) = Σ r (ln r − ln q)` with `0 ln 0 = 0`.
    /// `r` is a constant target; gradients flow to `q` only.
    pub fn kl_div(&mut self, r: Tensor<T>, q: Var) -> Result<Var> {
        same_shape("kl_div", r.shape(), self.shape(q))?;
        let qv = self.value(q);
        let eps = T::c(PROB_EPS);
        let mut total = T::zero();
        for (&rt, &qt) in r.data().iter().zip(qv.data()) {
            if rt > T::zero() {
                let qc = if qt < eps {
                    log::debug!("kl_div: probability {qt} clamped to {eps}");
                    eps
                } else {
                    qt
                };
                total = total + rt * (rt.ln() - qc.ln());
            }
        }
        let rows = T::c(r.rows().max(1) as f64);
        let rg = self.rg(q);
        Ok(self.push(Tensor::scalar(total / rows), Op::KlDiv { r, q }, rg))
    }

    /// Mean binary cross-entropy of logits `a` against 0/1 targets.
    pub fn bce_with_logits(&mut self, a: Var, target: Tensor<T>) -> Result<Var> {
        same_shape("bce_with_logits", self.shape(a), target.shape())?;
        let total: T = self
            .value(a)
            .data()
            .iter()
            .zip(target.data())
            .map(|(&x, &y)| x.max(T::zero()) - x * y + (T::one() + (-x.abs()).exp()).ln())
            .sum();
        let n = T::c(target.numel().max(1) as f64);
        let rg = self.rg(a);
        Ok(self.push(Tensor::scalar(total / n), Op::BceLogits { a, target }, rg))
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, a: Var, target: Tensor<T>) -> Result<Var> {
        same_shape("mse", self.shape(a), target.shape())?;
        let total: T = self
            .value(a)
            .data()
            .iter()
            .zip(target.data())
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum();
        let n = T::c(target.numel().max(1) as f64);
        let rg = self.rg(a);
        Ok(self.push(Tensor::scalar(total / n), Op::Mse { a, target }, rg))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(NumError::NotScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(lv.shape().to_vec()));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let is_leaf = matches!(self.nodes[i].op, Op::Leaf | Op::Param(_) | Op::Const);
            let g = if is_leaf {
                continue;
            } else {
                match grads[i].take() {
                    Some(g) => g,
                    None => continue,
                }
            };
            self.backprop(i, &g, &mut grads);
        }
        let mut params: Vec<Option<Tensor<T>>> = (0..self.params.len()).map(|_| None).collect();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Param(id) = node.op {
                if let Some(g) = &grads[i] {
                    match &mut params[id.0] {
                        Some(acc) => acc.add_assign(g),
                        slot @ None => *slot = Some(g.clone()),
                    }
                }
            }
        }
        Ok(Gradients { nodes: grads, params })
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn acc_data(&self, grads: &mut [Option<Tensor<T>>], v: Var, data: Vec<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let t = Tensor::new(self.shape(v).to_vec(), data).expect("gradient matches value shape");
        self.acc(grads, v, t);
    }

    fn backprop(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let out = self.nodes[i].value.as_ref().expect("op node has value");
        let gd = g.data();
        match &self.nodes[i].op {
            Op::Const | Op::Leaf | Op::Param(_) => {}
            Op::MatMul { a, b, ta, tb } => {
                let (a, b, ta, tb) = (*a, *b, *ta, *tb);
                let (av, bv) = (self.value(a), self.value(b));
                let (m, n) = (out.shape()[0], out.shape()[1]);
                let k = if ta { av.shape()[0] } else { av.shape()[1] };
                if self.rg(a) {
                    let mut da = vec![T::zero(); m * k];
                    if ta {
                        // stored k×m: op(B) · gᵀ
                        gemm(k, n, m, bv.data(), tb, gd, true, &mut da, false);
                    } else {
                        gemm(m, n, k, gd, false, bv.data(), !tb, &mut da, false);
                    }
                    self.acc_data(grads, a, da);
                }
                if self.rg(b) {
                    let mut db = vec![T::zero(); k * n];
                    if tb {
                        // stored n×k: gᵀ · op(A)
                        gemm(n, m, k, gd, true, av.data(), ta, &mut db, false);
                    } else {
                        gemm(k, m, n, av.data(), !ta, gd, false, &mut db, false);
                    }
                    self.acc_data(grads, b, db);
                }
            }
            Op::BatchMatMul { a, b, tb } => {
                let (a, b, tb) = (*a, *b, *tb);
                let (av, bv) = (self.value(a), self.value(b));
                let (batch, m, n) = (out.shape()[0], out.shape()[1], out.shape()[2]);
                let k = av.shape()[2];
                if self.rg(a) {
                    let mut da = vec![T::zero(); batch * m * k];
                    for s in 0..batch {
                        gemm(
                            m,
                            n,
                            k,
                            &gd[s * m * n..(s + 1) * m * n],
                            false,
                            &bv.data()[s * k * n..(s + 1) * k * n],
                            !tb,
                            &mut da[s * m * k..(s + 1) * m * k],
                            false,
                        );
                    }
                    self.acc_data(grads, a, da);
                }
                if self.rg(b) {
                    let mut db = vec![T::zero(); batch * k * n];
                    for s in 0..batch {
                        let gs = &gd[s * m * n..(s + 1) * m * n];
                        let as_ = &av.data()[s * m * k..(s + 1) * m * k];
                        let dbs = &mut db[s * k * n..(s + 1) * k * n];
                        if tb {
                            gemm(n, m, k, gs, true, as_, false, dbs, false);
                        } else {
                            gemm(k, m, n, as_, true, gs, false, dbs, false);
                        }
                    }
                    self.acc_data(grads, b, db);
                }
            }
            Op::Add { a, b } => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::AddRow { a, row } => {
                self.acc(grads, *a, g.clone());
                if self.rg(*row) {
                    let c = out.last_dim();
                    let mut dr = vec![T::zero(); c];
                    for (k, &v) in gd.iter().enumerate() {
                        dr[k % c] = dr[k % c] + v;
                    }
                    self.acc_data(grads, *row, dr);
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.rg(*a) {
                    let d = gd.iter().zip(bv).map(|(&x, &y)| x * y).collect();
                    self.acc_data(grads, *a, d);
                }
                if self.rg(*b) {
                    let d = gd.iter().zip(av).map(|(&x, &y)| x * y).collect();
                    self.acc_data(grads, *b, d);
                }
            }
            Op::Affine { a, scale } => {
                let d = gd.iter().map(|&x| x * *scale).collect();
                self.acc_data(grads, *a, d);
            }
            Op::Relu { a } => {
                let x = self.value(*a).data();
                let d = gd
                    .iter()
                    .zip(x)
                    .map(|(&gv, &xv)| if xv > T::zero() { gv } else { T::zero() })
                    .collect();
                self.acc_data(grads, *a, d);
            }
            Op::Sin { a } => {
                let x = self.value(*a).data();
                let d = gd.iter().zip(x).map(|(&gv, &xv)| gv * xv.cos()).collect();
                self.acc_data(grads, *a, d);
            }
            Op::PeriodicTail { a } => {
                let x = self.value(*a).data();
                let c = out.last_dim();
                let d = gd
                    .iter()
                    .zip(x)
                    .enumerate()
                    .map(|(k, (&gv, &xv))| if k % c == 0 { gv } else { gv * xv.cos() })
                    .collect();
                self.acc_data(grads, *a, d);
            }
            Op::Softmax { a } => {
                let c = out.last_dim();
                let y = out.data();
                let mut d = vec![T::zero(); y.len()];
                for r in 0..out.rows() {
                    let s = r * c;
                    let dot: T = (s..s + c).map(|j| y[j] * gd[j]).sum();
                    for j in s..s + c {
                        d[j] = y[j] * (gd[j] - dot);
                    }
                }
                self.acc_data(grads, *a, d);
            }
            Op::LayerNorm { a, gain, bias, xhat, inv_std } => {
                let c = out.last_dim();
                let gv = self.value(*gain).data();
                if self.rg(*gain) || self.rg(*bias) {
                    let mut dg = vec![T::zero(); c];
                    let mut db = vec![T::zero(); c];
                    for (k, &v) in gd.iter().enumerate() {
                        dg[k % c] = dg[k % c] + v * xhat[k];
                        db[k % c] = db[k % c] + v;
                    }
                    self.acc_data(grads, *gain, dg);
                    self.acc_data(grads, *bias, db);
                }
                if self.rg(*a) {
                    let n = T::c(c as f64);
                    let mut dx = vec![T::zero(); gd.len()];
                    for (r, &inv) in inv_std.iter().enumerate() {
                        let s = r * c;
                        let mut sum_dh = T::zero();
                        let mut sum_dh_h = T::zero();
                        for j in 0..c {
                            let dh = gd[s + j] * gv[j];
                            sum_dh = sum_dh + dh;
                            sum_dh_h = sum_dh_h + dh * xhat[s + j];
                        }
                        for j in 0..c {
                            let dh = gd[s + j] * gv[j];
                            dx[s + j] = inv / n * (n * dh - sum_dh - xhat[s + j] * sum_dh_h);
                        }
                    }
                    self.acc_data(grads, *a, dx);
                }
            }
            Op::NormalizeRows { a, norms } => {
                let c = out.last_dim();
                let y = out.data();
                let eps = T::c(NORM_EPS);
                let mut d = vec![T::zero(); y.len()];
                for (r, &n) in norms.iter().enumerate() {
                    let s = r * c;
                    if n > eps {
                        let dot: T = (s..s + c).map(|j| y[j] * gd[j]).sum();
                        for j in s..s + c {
                            d[j] = (gd[j] - y[j] * dot) / n;
                        }
                    } else {
                        for j in s..s + c {
                            d[j] = gd[j] / n;
                        }
                    }
                }
                self.acc_data(grads, *a, d);
            }
            Op::RowDot { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let c = av.last_dim();
                if self.rg(*a) {
                    let d = (0..av.numel()).map(|k| gd[k / c] * bv.data()[k]).collect();
                    self.acc_data(grads, *a, d);
                }
                if self.rg(*b) {
                    let d = (0..bv.numel()).map(|k| gd[k / c] * av.data()[k]).collect();
                    self.acc_data(grads, *b, d);
                }
            }
            Op::Transpose { a } => {
                let (r, c) = (out.shape()[0], out.shape()[1]);
                let mut d = vec![T::zero(); r * c];
                for i in 0..r {
                    for j in 0..c {
                        d[j * r + i] = gd[i * c + j];
                    }
                }
                self.acc_data(grads, *a, d);
            }
            Op::Reshape { a } => {
                self.acc_data(grads, *a, gd.to_vec());
            }
            Op::Permute0213 { a } => {
                let s = out.shape();
                let d = permute_0213_data(gd, [s[0], s[1], s[2], s[3]]);
                self.acc_data(grads, *a, d);
            }
            Op::Concat { parts } => {
                let total = out.last_dim();
                let rows = out.rows();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).last_dim();
                    if self.rg(p) {
                        let mut d = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            d.extend_from_slice(&gd[r * total + offset..r * total + offset + w]);
                        }
                        self.acc_data(grads, p, d);
                    }
                    offset += w;
                }
            }
            Op::GatherRows { a, idx } => {
                let c = out.last_dim();
                let mut d = vec![T::zero(); self.value(*a).numel()];
                for (k, &row) in idx.iter().enumerate() {
                    for j in 0..c {
                        d[row * c + j] = d[row * c + j] + gd[k * c + j];
                    }
                }
                self.acc_data(grads, *a, d);
            }
            Op::Sum { a } => {
                let d = vec![gd[0]; self.value(*a).numel()];
                self.acc_data(grads, *a, d);
            }
            Op::Mean { a } => {
                let n = self.value(*a).numel().max(1);
                let d = vec![gd[0] / T::c(n as f64); n];
                self.acc_data(grads, *a, d);
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let c = self.value(*logits).last_dim();
                let scale = gd[0] / T::c(targets.len().max(1) as f64);
                let mut d: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (r, &t) in targets.iter().enumerate() {
                    d[r * c + t] = d[r * c + t] - scale;
                }
                self.acc_data(grads, *logits, d);
            }
            Op::KlDiv { r, q } => {
                let eps = T::c(PROB_EPS);
                let scale = gd[0] / T::c(r.rows().max(1) as f64);
                let d = r
                    .data()
                    .iter()
                    .zip(self.value(*q).data())
                    .map(|(&rt, &qt)| {
                        if rt > T::zero() {
                            -rt / qt.max(eps) * scale
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                self.acc_data(grads, *q, d);
            }
            Op::BceLogits { a, target } => {
                let scale = gd[0] / T::c(target.numel().max(1) as f64);
                let d = self
                    .value(*a)
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(&x, &y)| (sigmoid(x) - y) * scale)
                    .collect();
                self.acc_data(grads, *a, d);
            }
            Op::Mse { a, target } => {
                let scale = T::c(2.0) * gd[0] / T::c(target.numel().max(1) as f64);
                let d = self
                    .value(*a)
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(&x, &y)| (x - y) * scale)
                    .collect();
                self.acc_data(grads, *a, d);
            }
        }
    }
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn permute_0213_data<T: Scalar>(x: &[T], [a, b, c, d]: [usize; 4]) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for i in 0..a {
        for j in 0..b {
            for k in 0..c {
                let src = ((i * b + j) * c + k) * d;
                let dst = ((i * c + k) * b + j) * d;
                out[dst..dst + d].copy_from_slice(&x[src..src + d]);
            }
        }
    }
    out
}

/// Cosine similarity of two vectors (norms guarded by [`NORM_EPS`]).
pub fn cosine_sim<T: Scalar>(g: &mut Graph<'_, T>, a: Var, b: Var) -> Result<Var> {
    let n = g.value(a).numel();
    if g.value(b).numel() != n {
        return shape_err("cosine_sim", format!("{} vs {} elements", n, g.value(b).numel()));
    }
    let a2 = g.reshape(a, &[1, n])?;
    let b2 = g.reshape(b, &[1, n])?;
    let an = g.normalize_rows(a2);
    let bn = g.normalize_rows(b2);
    let d = g.row_dot(an, bn)?;
    g.reshape(d, &[])
}
