//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] is a tape: every op appends a node holding its value and the
//! information its backward rule needs. Nodes only reference earlier nodes,
//! so tape order is a topological order and [`Graph::backward`] is a single
//! reverse sweep.
//!
//! Parameters are borrowed from a [`ParamSet`] rather than copied, which
//! keeps per-step graph construction cheap for large weight matrices.

use std::borrow::Cow;

use crate::error::{Error, Result};
use crate::params::{Grads, ParamId, ParamSet};
use crate::rng::Rng;
use crate::tensor::{
    axis_split, broadcast_index, check_perm, gemm_acc, gemm_nt_acc, gemm_tn_acc, numel,
    permute_data, DType, Tensor,
};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var },
    Add { a: Var, b: Var, map: Option<Vec<usize>> },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: f64 },
    Relu { x: Var },
    Softmax { x: Var, axis: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, axis: usize, xhat: Vec<f64>, rstd: Vec<f64> },
    Reshape { x: Var },
    Permute { x: Var, perm: Vec<usize> },
    Dropout { x: Var, mask: Vec<f64> },
    MaskedFill { x: Var, mask: Vec<bool> },
    Mean { x: Var },
    Sum { x: Var },
    Concat { parts: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
}

struct Node<'p> {
    value: Cow<'p, Tensor>,
    op: Op,
    param: Option<ParamId>,
}

pub struct Graph<'p> {
    params: Option<&'p ParamSet>,
    param_vars: Vec<Option<Var>>,
    nodes: Vec<Node<'p>>,
    grads: Vec<Option<Vec<f64>>>,
    dtype: DType,
    flops: u64,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl<'p> Graph<'p> {
    /// Graph without parameters (constants only).
    pub fn new(dtype: DType) -> Self {
        Graph {
            params: None,
            param_vars: Vec::new(),
            nodes: Vec::new(),
            grads: Vec::new(),
            dtype,
            flops: 0,
        }
    }

    pub fn with_params(params: &'p ParamSet, dtype: DType) -> Self {
        Graph {
            params: Some(params),
            param_vars: vec![None; params.len()],
            ..Graph::new(dtype)
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-accumulate operations performed by matmuls so far.
    pub fn flops(&self) -> u64 {
        self.flops
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn make(&self, shape: Vec<usize>, mut data: Vec<f64>) -> Tensor {
        self.dtype.round_slice(&mut data);
        Tensor::from_parts(shape, data, self.dtype)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        let t = if t.dtype() == self.dtype { t } else { t.to_dtype(self.dtype) };
        self.push(t, Op::Leaf)
    }

    /// Leaf for a parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let params = self.params.expect("graph has no parameter set");
        self.nodes.push(Node {
            value: Cow::Borrowed(params.get(id)),
            op: Op::Leaf,
            param: Some(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    /// Matrix product over the two trailing axes. `b` is either a plain
    /// `k×n` matrix shared across all leading axes of `a`, or carries the
    /// same leading (batch) axes as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape(format!("matmul needs rank>=2, got {sa:?} x {sb:?}")));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != kb {
            return Err(Error::shape(format!("matmul inner dims {sa:?} x {sb:?}")));
        }
        let mut out_shape = sa[..sa.len() - 1].to_vec();
        out_shape.push(n);
        let mut out = vec![0.0; numel(&out_shape)];
        let av = self.value(a).data();
        let bv = self.value(b).data();
        if sb.len() == 2 {
            let rows = av.len() / k;
            gemm_acc(av, bv, &mut out, rows, k, n);
            self.flops += (rows * k * n) as u64;
        } else {
            if sa[..sa.len() - 2] != sb[..sb.len() - 2] {
                return Err(Error::shape(format!("matmul batch dims {sa:?} x {sb:?}")));
            }
            let batch = numel(&sa[..sa.len() - 2]);
            for bi in 0..batch {
                gemm_acc(
                    &av[bi * m * k..(bi + 1) * m * k],
                    &bv[bi * k * n..(bi + 1) * k * n],
                    &mut out[bi * m * n..(bi + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
            self.flops += (batch * m * k * n) as u64;
        }
        let t = self.make(out_shape, out);
        Ok(self.push(t, Op::MatMul { a, b }))
    }

    /// `a + b` where `b` broadcasts onto `a` (right-aligned, dims equal or 1).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let (data, map) = if sa == sb {
            (av.iter().zip(bv).map(|(x, y)| x + y).collect(), None)
        } else if sa.ends_with(&sb) {
            let w = bv.len();
            let data = av.iter().enumerate().map(|(i, x)| x + bv[i % w]).collect();
            (data, Some((0..av.len()).map(|i| i % w).collect()))
        } else {
            let map = broadcast_index(&sa, &sb)?;
            let data = av.iter().zip(&map).map(|(x, &j)| x + bv[j]).collect();
            (data, Some(map))
        };
        let t = self.make(sa, data);
        Ok(self.push(t, Op::Add { a, b, map }))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let t = self.make(self.shape(a).to_vec(), data);
        Ok(self.push(t, Op::Sub { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let t = self.make(self.shape(a).to_vec(), data);
        Ok(self.push(t, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let data = self.value(x).data().iter().map(|v| v * c).collect();
        let t = self.make(self.shape(x).to_vec(), data);
        self.push(t, Op::Scale { x, c })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let data = self.value(x).data().iter().map(|&v| v.max(0.0)).collect();
        let t = self.make(self.shape(x).to_vec(), data);
        self.push(t, Op::Relu { x })
    }

    /// Softmax along `axis`, max-subtracted. Entries equal to `-inf` receive
    /// exactly zero weight.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape(format!("softmax axis {axis} for {shape:?}")));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let xv = self.value(x).data();
        let mut out = vec![0.0; xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut max = f64::NEG_INFINITY;
                for j in 0..len {
                    max = max.max(xv[base + j * inner]);
                }
                let mut sum = 0.0;
                for j in 0..len {
                    let e = (xv[base + j * inner] - max).exp();
                    out[base + j * inner] = e;
                    sum += e;
                }
                for j in 0..len {
                    out[base + j * inner] /= sum;
                }
            }
        }
        let t = self.make(shape, out);
        Ok(self.push(t, Op::Softmax { x, axis }))
    }

    /// Layer normalisation along `axis` with affine `gamma`/`beta` of length
    /// `shape[axis]`, using [`LAYER_NORM_EPS`].
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape(format!("layer_norm axis {axis} for {shape:?}")));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        if self.value(gamma).len() != len || self.value(beta).len() != len {
            return Err(Error::shape(format!(
                "layer_norm affine params {:?}/{:?} for axis length {len}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; outer * inner];
        let mut out = vec![0.0; xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mean = (0..len).map(|j| xv[base + j * inner]).sum::<f64>() / len as f64;
                let var = (0..len)
                    .map(|j| (xv[base + j * inner] - mean).powi(2))
                    .sum::<f64>()
                    / len as f64;
                let r = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                rstd[o * inner + i] = r;
                for j in 0..len {
                    let idx = base + j * inner;
                    let h = (xv[idx] - mean) * r;
                    xhat[idx] = h;
                    out[idx] = h * gv[j] + bv[j];
                }
            }
        }
        let t = self.make(shape, out);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                axis,
                xhat,
                rstd,
            },
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshape(shape)?;
        Ok(self.push(t, Op::Reshape { x }))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let t = self.value(x).permute(perm)?;
        Ok(self.push(t, Op::Permute { x, perm: perm.to_vec() }))
    }

    /// Swaps the two trailing axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(Error::shape("transpose needs rank >= 2"));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(x, &perm)
    }

    /// Inverted dropout. Identity (no node) when `rate == 0` or no RNG is
    /// supplied, which is how evaluation mode is expressed.
    pub fn dropout(&mut self, x: Var, rate: f64, rng: Option<&mut Rng>) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::config(format!("dropout rate {rate} outside [0,1)")));
        }
        let Some(rng) = rng else { return Ok(x) };
        if rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let n = self.value(x).len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.uniform() < rate { 0.0 } else { keep })
            .collect();
        let data = self
            .value(x)
            .data()
            .iter()
            .zip(&mask)
            .map(|(v, m)| v * m)
            .collect();
        let t = self.make(self.shape(x).to_vec(), data);
        Ok(self.push(t, Op::Dropout { x, mask }))
    }

    /// Replaces entries where `mask` is true by `value`. The mask is laid out
    /// as `mask_shape` and broadcast onto `x` like the second operand of
    /// [`Graph::add`].
    pub fn masked_fill(
        &mut self,
        x: Var,
        mask: &[bool],
        mask_shape: &[usize],
        value: f64,
    ) -> Result<Var> {
        if numel(mask_shape) != mask.len() {
            return Err(Error::shape("mask length does not match its shape"));
        }
        let shape = self.shape(x).to_vec();
        let map = broadcast_index(&shape, mask_shape)?;
        let full: Vec<bool> = map.iter().map(|&j| mask[j]).collect();
        if !full.iter().any(|&m| m) {
            return Ok(x);
        }
        let data = self
            .value(x)
            .data()
            .iter()
            .zip(&full)
            .map(|(&v, &m)| if m { value } else { v })
            .collect();
        let t = Tensor::from_parts(shape, data, self.dtype);
        Ok(self.push(t, Op::MaskedFill { x, mask: full }))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let m = v.data().iter().sum::<f64>() / v.len() as f64;
        let t = self.make(vec![1], vec![m]);
        self.push(t, Op::Mean { x })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum::<f64>();
        let t = self.make(vec![1], vec![s]);
        self.push(t, Op::Sum { x })
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::shape("concat of nothing"))?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape(format!("concat axis {axis} for {base:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != base.len()
                || s.iter().enumerate().any(|(i, &d)| i != axis && d != base[i])
            {
                return Err(Error::shape(format!("concat {s:?} with {base:?}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis];
                let d = self.value(p).data();
                out.extend_from_slice(&d[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let t = Tensor::from_parts(shape, out, self.dtype);
        Ok(self.push(
            t,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        ))
    }

    /// Entries `start..end` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start >= end || end > shape[axis] {
            return Err(Error::shape(format!(
                "slice {start}..{end} on axis {axis} of {shape:?}"
            )));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            out.extend_from_slice(&d[(o * len + start) * inner..(o * len + end) * inner]);
        }
        let mut new_shape = shape;
        new_shape[axis] = end - start;
        let t = Tensor::from_parts(new_shape, out, self.dtype);
        Ok(self.push(t, Op::Slice { x, axis, start }))
    }

    /// Back-propagates from the scalar `root`, adding into the gradients
    /// already held by the graph. Calling it twice without
    /// [`Graph::zero_grad`] therefore doubles every gradient.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).len() != 1 {
            return Err(Error::Contract(format!(
                "backward root must be scalar, has shape {:?}",
                self.shape(root)
            )));
        }
        if !self.value(root).is_finite() {
            return Err(Error::non_finite("backward root"));
        }
        let mut local: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        local[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(g) = local[i].take() else { continue };
            self.propagate(i, &g, &mut local);
            if self.grads.len() < self.nodes.len() {
                self.grads.resize(self.nodes.len(), None);
            }
            match &mut self.grads[i] {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grads.clear();
    }

    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::from_parts(self.shape(v).to_vec(), g.clone(), DType::F64))
    }

    /// Gradients of every parameter that took part in the graph; parameters
    /// never touched get `None`.
    pub fn param_grads(&self) -> Grads {
        let n = self.params.map_or(0, ParamSet::len);
        let mut slots: Vec<Option<Vec<f64>>> = vec![None; n];
        for (node_idx, node) in self.nodes.iter().enumerate() {
            if let Some(id) = node.param {
                let g = self
                    .grads
                    .get(node_idx)
                    .and_then(|g| g.clone())
                    .unwrap_or_else(|| vec![0.0; node.value.len()]);
                slots[id.0] = Some(g);
            }
        }
        Grads::from_slots(slots)
    }

    fn propagate(&self, i: usize, g: &[f64], local: &mut [Option<Vec<f64>>]) {
        fn slot<'a>(local: &'a mut [Option<Vec<f64>>], v: Var, len: usize) -> &'a mut Vec<f64> {
            local[v.0].get_or_insert_with(|| vec![0.0; len])
        }
        let node = &self.nodes[i];
        let val = |v: Var| self.nodes[v.0].value.data();
        let len = |v: Var| self.nodes[v.0].value.len();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let sa = self.shape(*a);
                let sb = self.shape(*b);
                let k = sa[sa.len() - 1];
                let m = sa[sa.len() - 2];
                let n = sb[sb.len() - 1];
                let (av, bv) = (val(*a), val(*b));
                if sb.len() == 2 {
                    let rows = av.len() / k;
                    gemm_nt_acc(g, bv, slot(local, *a, av.len()), rows, n, k);
                    gemm_tn_acc(av, g, slot(local, *b, bv.len()), rows, k, n);
                } else {
                    let batch = av.len() / (m * k);
                    {
                        let da = slot(local, *a, av.len());
                        for bi in 0..batch {
                            gemm_nt_acc(
                                &g[bi * m * n..(bi + 1) * m * n],
                                &bv[bi * k * n..(bi + 1) * k * n],
                                &mut da[bi * m * k..(bi + 1) * m * k],
                                m,
                                n,
                                k,
                            );
                        }
                    }
                    let db = slot(local, *b, bv.len());
                    for bi in 0..batch {
                        gemm_tn_acc(
                            &av[bi * m * k..(bi + 1) * m * k],
                            &g[bi * m * n..(bi + 1) * m * n],
                            &mut db[bi * k * n..(bi + 1) * k * n],
                            m,
                            k,
                            n,
                        );
                    }
                }
            }
            Op::Add { a, b, map } => {
                add_into(slot(local, *a, g.len()), g);
                let db = slot(local, *b, len(*b));
                match map {
                    None => add_into(db, g),
                    Some(map) => {
                        for (gi, &j) in g.iter().zip(map) {
                            db[j] += gi;
                        }
                    }
                }
            }
            Op::Sub { a, b } => {
                add_into(slot(local, *a, g.len()), g);
                let db = slot(local, *b, g.len());
                db.iter_mut().zip(g).for_each(|(d, gi)| *d -= gi);
            }
            Op::Mul { a, b } => {
                let (av, bv) = (val(*a), val(*b));
                let da = slot(local, *a, g.len());
                for ((d, gi), bi) in da.iter_mut().zip(g).zip(bv) {
                    *d += gi * bi;
                }
                let db = slot(local, *b, g.len());
                for ((d, gi), ai) in db.iter_mut().zip(g).zip(av) {
                    *d += gi * ai;
                }
            }
            Op::Scale { x, c } => {
                let dx = slot(local, *x, g.len());
                dx.iter_mut().zip(g).for_each(|(d, gi)| *d += c * gi);
            }
            Op::Relu { x } => {
                let xv = val(*x);
                let dx = slot(local, *x, g.len());
                for ((d, gi), xi) in dx.iter_mut().zip(g).zip(xv) {
                    if *xi > 0.0 {
                        *d += gi;
                    }
                }
            }
            Op::Softmax { x, axis } => {
                let y = node.value.data();
                let (outer, n, inner) = axis_split(node.value.shape(), *axis);
                let dx = slot(local, *x, g.len());
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * n * inner + i;
                        let dot: f64 = (0..n).map(|j| g[base + j * inner] * y[base + j * inner]).sum();
                        for j in 0..n {
                            let idx = base + j * inner;
                            dx[idx] += y[idx] * (g[idx] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                axis,
                xhat,
                rstd,
            } => {
                let (outer, n, inner) = axis_split(node.value.shape(), *axis);
                let gv = val(*gamma);
                {
                    let dgamma = slot(local, *gamma, n);
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * n * inner + i;
                            for j in 0..n {
                                dgamma[j] += g[base + j * inner] * xhat[base + j * inner];
                            }
                        }
                    }
                }
                {
                    let dbeta = slot(local, *beta, n);
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * n * inner + i;
                            for j in 0..n {
                                dbeta[j] += g[base + j * inner];
                            }
                        }
                    }
                }
                let dx = slot(local, *x, g.len());
                let nf = n as f64;
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * n * inner + i;
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for j in 0..n {
                            let idx = base + j * inner;
                            let d = g[idx] * gv[j];
                            mean_d += d;
                            mean_dx += d * xhat[idx];
                        }
                        mean_d /= nf;
                        mean_dx /= nf;
                        let r = rstd[o * inner + i];
                        for j in 0..n {
                            let idx = base + j * inner;
                            let d = g[idx] * gv[j];
                            dx[idx] += r * (d - mean_d - xhat[idx] * mean_dx);
                        }
                    }
                }
            }
            Op::Reshape { x } => add_into(slot(local, *x, g.len()), g),
            Op::Permute { x, perm } => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let (_, back) = permute_data(g, node.value.shape(), &inv);
                add_into(slot(local, *x, g.len()), &back);
            }
            Op::Dropout { x, mask } => {
                let dx = slot(local, *x, g.len());
                for ((d, gi), m) in dx.iter_mut().zip(g).zip(mask) {
                    *d += gi * m;
                }
            }
            Op::MaskedFill { x, mask } => {
                let dx = slot(local, *x, g.len());
                for ((d, gi), m) in dx.iter_mut().zip(g).zip(mask) {
                    if !m {
                        *d += gi;
                    }
                }
            }
            Op::Mean { x } => {
                let n = len(*x);
                let c = g[0] / n as f64;
                slot(local, *x, n).iter_mut().for_each(|d| *d += c);
            }
            Op::Sum { x } => {
                let n = len(*x);
                slot(local, *x, n).iter_mut().for_each(|d| *d += g[0]);
            }
            Op::Concat { parts, axis } => {
                let shape = node.value.shape();
                let (outer, total, inner) = axis_split(shape, *axis);
                let mut offset = 0;
                for &p in parts {
                    let plen = self.shape(p)[*axis];
                    let dp = slot(local, p, len(p));
                    for o in 0..outer {
                        let src = &g[(o * total + offset) * inner..(o * total + offset + plen) * inner];
                        add_into(&mut dp[o * plen * inner..(o + 1) * plen * inner], src);
                    }
                    offset += plen;
                }
            }
            Op::Slice { x, axis, start } => {
                let (outer, full, inner) = axis_split(self.shape(*x), *axis);
                let n = node.value.shape()[*axis];
                let dx = slot(local, *x, len(*x));
                for o in 0..outer {
                    let dst = &mut dx[(o * full + start) * inner..(o * full + start + n) * inner];
                    add_into(dst, &g[o * n * inner..(o + 1) * n * inner]);
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

/// Validates a permutation without building a node; used by callers that
/// assemble perms dynamically.
pub fn is_valid_permutation(perm: &[usize], rank: usize) -> bool {
    check_perm(perm, rank).is_ok()
}
