//! Reverse-mode automatic differentiation over a linear tape.
//!
//! A [`Graph`] records every operation of one forward pass. Parameters are
//! borrowed from a [`ParamStore`] rather than copied; their gradients come
//! back from [`Graph::backward`] as a [`Grads`] indexed like the store.

use std::collections::HashMap;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{gemm, invert_permutation, MatRef, Scalar, Tensor};
use crate::train::precision::ExecContext;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Value<T> {
    Owned(Tensor<T>),
    Param(usize),
}

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    Add { a: Var, b: Var },
    Scale { a: Var, factor: T },
    Gelu { a: Var },
    GeluTanh { a: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, mean: Vec<T>, rstd: Vec<T> },
    Softmax { a: Var },
    CrossEntropy { logits: Var, targets: Rc<[Option<usize>]>, count: usize },
    GatherRows { a: Var, idx: Rc<[usize]> },
    Reshape { a: Var },
    Permute { a: Var, perm: Vec<usize> },
    Narrow0 { a: Var, start: usize, len: usize },
    Concat0 { parts: Vec<Var> },
    Dropout { a: Var, mask: Vec<T> },
}

struct Node<T> {
    value: Value<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients for trainable parameters, indexed like the owning [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Grads<T> {
    slots: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn empty(n_params: usize) -> Self {
        Self {
            slots: vec![None; n_params],
        }
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.iter().all(Option::is_none)
    }

    pub fn get(&self, idx: usize) -> Option<&Tensor<T>> {
        self.slots.get(idx).and_then(Option::as_ref)
    }

    pub fn set(&mut self, idx: usize, g: Tensor<T>) {
        self.slots[idx] = Some(g);
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &Tensor<T>)> {
        self.slots
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (i, g)))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (usize, &mut Tensor<T>)> {
        self.slots
            .iter_mut()
            .enumerate()
            .filter_map(|(i, g)| g.as_mut().map(|g| (i, g)))
    }

    /// Element-wise accumulate `other` into `self`.
    pub fn accumulate(&mut self, other: &Grads<T>) {
        assert_eq!(self.slots.len(), other.slots.len());
        for (mine, theirs) in self.slots.iter_mut().zip(&other.slots) {
            match (mine.as_mut(), theirs) {
                (Some(m), Some(t)) => m.add_assign(t),
                (None, Some(t)) => *mine = Some(t.clone()),
                _ => {}
            }
        }
    }

    pub fn scale(&mut self, factor: T) {
        for (_, g) in self.iter_mut() {
            g.scale(factor);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.iter().map(|(_, g)| g.sum_squares()).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(|(_, g)| g.is_finite())
    }
}

pub struct Graph<'p, T: Scalar> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
    param_vars: HashMap<usize, Var>,
    exec: ExecContext,
    training: bool,
    rng: ChaCha8Rng,
}

impl<'p, T: Scalar> Graph<'p, T> {
    pub fn new(params: &'p ParamStore<T>, exec: ExecContext) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            exec,
            training: false,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    /// Enable training mode; dropout masks are drawn from `seed`.
    pub fn training(mut self, seed: u64) -> Self {
        self.training = true;
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn exec(&self) -> ExecContext {
        self.exec
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
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(idx) => self
                .params
                .by_index(*idx)
                .1
                .value
                .as_ref()
                .expect("param nodes always have storage"),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        let idx = self
            .params
            .index_of(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter `{name}`")))?;
        if let Some(&v) = self.param_vars.get(&idx) {
            return Ok(v);
        }
        let p = self.params.by_index(idx).1;
        if p.value.is_none() {
            return Err(Error::Config(format!(
                "parameter `{name}` has no storage; meta models cannot run forward"
            )));
        }
        self.nodes.push(Node {
            value: Value::Param(idx),
            op: Op::Leaf,
            needs_grad: p.trainable,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(idx, v);
        Ok(v)
    }

    fn mm(&self, m: usize, k: usize, n: usize, a: MatRef<'_, T>, b: MatRef<'_, T>, out: &mut [T], accumulate: bool) {
        let ops = self.exec.matmul_operands;
        if ops == crate::tensor::Rounding::None {
            gemm(m, k, n, a, b, out, accumulate);
        } else {
            let mut ar = a.data.to_vec();
            let mut br = b.data.to_vec();
            ops.apply_slice(&mut ar);
            ops.apply_slice(&mut br);
            let a2 = MatRef { data: &ar[..], transposed: a.transposed };
            let b2 = MatRef { data: &br[..], transposed: b.transposed };
            gemm(m, k, n, a2, b2, out, accumulate);
        }
        self.exec.matmul_output.apply_slice(out);
    }

    /// `a [.., K] · b`, where `b` is `[K, N]` or, with `trans_b`, `[N, K]`.
    pub fn matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sb.len() != 2 || sa.is_empty() {
            return Err(Error::Shape(format!("matmul {sa:?} x {sb:?}")));
        }
        let k = *sa.last().unwrap();
        let (kb, n) = if trans_b { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != kb {
            return Err(Error::Shape(format!("matmul inner dims {sa:?} x {sb:?} (trans_b={trans_b})")));
        }
        let rows = self.value(a).numel() / k.max(1);
        let mut out = vec![T::zero(); rows * n];
        let bref = if trans_b {
            MatRef::t(self.value(b).data())
        } else {
            MatRef::new(self.value(b).data())
        };
        self.mm(rows, k, n, MatRef::new(self.value(a).data()), bref, &mut out, false);
        let mut shape = sa.clone();
        *shape.last_mut().unwrap() = n;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::from_vec(&shape, out)?, Op::MatMul { a, b, trans_b }, needs))
    }

    /// Batched `[Bt, M, K] · [Bt, K, N]` (or `[Bt, N, K]` with `trans_b`).
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(Error::Shape(format!("bmm {sa:?} x {sb:?}")));
        }
        let (bt, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if k != kb {
            return Err(Error::Shape(format!("bmm inner dims {sa:?} x {sb:?}")));
        }
        let mut out = vec![T::zero(); bt * m * n];
        for i in 0..bt {
            let ad = &self.value(a).data()[i * m * k..(i + 1) * m * k];
            let bd = &self.value(b).data()[i * k * n..(i + 1) * k * n];
            let bref = if trans_b { MatRef::t(bd) } else { MatRef::new(bd) };
            self.mm(m, k, n, MatRef::new(ad), bref, &mut out[i * m * n..(i + 1) * m * n], false);
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::from_vec(&[bt, m, n], out)?, Op::BatchMatMul { a, b, trans_b }, needs))
    }

    /// `a + b` where `b`'s shape is a suffix of `a`'s (bias-style broadcast).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::Shape(format!("add {sa:?} + {sb:?}")));
        }
        let bv = self.value(b).data();
        let bn = bv.len();
        let mut out = self.value(a).clone();
        for chunk in out.data_mut().chunks_mut(bn) {
            for (x, &y) in chunk.iter_mut().zip(bv) {
                *x += y;
            }
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add { a, b }, needs))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let factor = T::from_f64(factor);
        let mut out = self.value(a).clone();
        out.scale(factor);
        let needs = self.needs(a);
        self.push(out, Op::Scale { a, factor }, needs)
    }

    /// Exact (erf) GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for v in out.data_mut() {
            let x = v.as_f64();
            *v = T::from_f64(0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2)));
        }
        let needs = self.needs(a);
        self.push(out, Op::Gelu { a }, needs)
    }

    /// Tanh-approximated GELU (the GPT-2 activation).
    pub fn gelu_tanh(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for v in out.data_mut() {
            let x = v.as_f64();
            *v = T::from_f64(0.5 * x * (1.0 + gelu_tanh_inner(x).tanh()));
        }
        let needs = self.needs(a);
        self.push(out, Op::GeluTanh { a }, needs)
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let c = self.value(x).last_dim();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::Shape(format!(
                "layer_norm over {:?} with gamma {:?}",
                self.shape(x),
                self.shape(gamma)
            )));
        }
        let xv = self.value(x);
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let rows = xv.numel() / c;
        let mut out = xv.clone();
        let mut mean = Vec::with_capacity(rows);
        let mut rstd = Vec::with_capacity(rows);
        let inv_c = T::from_f64(1.0 / c as f64);
        for row in out.data_mut().chunks_mut(c) {
            let mu = row.iter().copied().sum::<T>() * inv_c;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() * inv_c;
            let r = T::one() / (var + T::from_f64(eps)).sqrt();
            for (i, v) in row.iter_mut().enumerate() {
                *v = (*v - mu) * r * g[i] + b[i];
            }
            mean.push(mu);
            rstd.push(r);
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta, mean, rstd }, needs))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        let n = out.last_dim();
        for row in out.data_mut().chunks_mut(n) {
            softmax_row(row);
        }
        let needs = self.needs(a);
        self.push(out, Op::Softmax { a }, needs)
    }

    /// Mean token cross-entropy of `logits [R, V]` against per-row targets;
    /// `None` rows are ignored.
    pub fn cross_entropy(&mut self, logits: Var, targets: Rc<[Option<usize>]>) -> Result<Var> {
        let v = self.value(logits).last_dim();
        let rows = self.value(logits).numel() / v;
        if rows != targets.len() {
            return Err(Error::Shape(format!("cross_entropy: {rows} rows, {} targets", targets.len())));
        }
        let count = targets.iter().filter(|t| t.is_some()).count();
        if count == 0 {
            return Err(Error::Data("loss has no valid (non-ignored) target positions".into()));
        }
        let data = self.value(logits).data();
        let mut total = 0.0f64;
        for (r, t) in targets.iter().enumerate() {
            if let Some(t) = *t {
                if t >= v {
                    return Err(Error::Data(format!("target id {t} out of range for vocabulary {v}")));
                }
                let row = &data[r * v..(r + 1) * v];
                total += log_sum_exp(row) - row[t].as_f64();
            }
        }
        let loss = T::from_f64(total / count as f64);
        let needs = self.needs(logits);
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, targets, count }, needs))
    }

    /// Rows of `a` (viewed as `[R, C]` with `C` its last axis) selected by `idx`.
    pub fn gather_rows(&mut self, a: Var, idx: Rc<[usize]>) -> Result<Var> {
        let c = self.value(a).last_dim();
        let rows = self.value(a).numel() / c;
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx.iter() {
            if i >= rows {
                return Err(Error::Shape(format!("gather index {i} out of {rows} rows")));
            }
            out.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let needs = self.needs(a);
        Ok(self.push(Tensor::from_vec(&[idx.len(), c], out)?, Op::GatherRows { a, idx }, needs))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        let needs = self.needs(a);
        Ok(self.push(out, Op::Reshape { a }, needs))
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Var {
        let out = self.value(a).permute(perm);
        let needs = self.needs(a);
        self.push(out, Op::Permute { a, perm: perm.to_vec() }, needs)
    }

    /// Contiguous slice `start..start+len` along axis 0.
    pub fn narrow0(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.is_empty() || start + len > shape[0] {
            return Err(Error::Shape(format!("narrow {start}+{len} of {shape:?}")));
        }
        let inner: usize = shape[1..].iter().product();
        let data = self.value(a).data()[start * inner..(start + len) * inner].to_vec();
        let mut out_shape = shape;
        out_shape[0] = len;
        let needs = self.needs(a);
        Ok(self.push(Tensor::from_vec(&out_shape, data)?, Op::Narrow0 { a, start, len }, needs))
    }

    /// Concatenation along axis 0; trailing axes must agree.
    pub fn concat0(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::Shape("concat of nothing".into()))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[1..] != tail[..] {
                return Err(Error::Shape(format!("concat {:?} with trailing axes {tail:?}", s)));
            }
            rows += s[0];
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(&tail);
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(Tensor::from_vec(&shape, data)?, Op::Concat0 { parts: parts.to_vec() }, needs))
    }

    /// Inverted dropout; identity outside training mode or when `p == 0`.
    pub fn dropout(&mut self, a: Var, p: f64) -> Var {
        if !self.training || p <= 0.0 {
            return a;
        }
        let keep = T::from_f64(1.0 / (1.0 - p));
        let n = self.value(a).numel();
        let mask: Vec<T> = (0..n)
            .map(|_| if self.rng.gen::<f64>() < p { T::zero() } else { keep })
            .collect();
        let mut out = self.value(a).clone();
        for (v, &m) in out.data_mut().iter_mut().zip(&mask) {
            *v *= m;
        }
        let needs = self.needs(a);
        self.push(out, Op::Dropout { a, mask }, needs)
    }

    /// Backpropagate from the scalar `loss`, seeding its gradient with `seed`.
    pub fn backward(&self, loss: Var, seed: T) -> Grads<T> {
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut out = Grads::empty(self.params.len());
        if !self.needs(loss) {
            return out;
        }
        grads[loss.0] = Some(Tensor::full(self.shape(loss), seed));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    if let Value::Param(idx) = node.value {
                        match out.slots[idx].as_mut() {
                            Some(acc) => acc.add_assign(&g),
                            None => out.slots[idx] = Some(g),
                        }
                    }
                }
                Op::MatMul { a, b, trans_b } => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let k = av.last_dim();
                    let rows = av.numel() / k.max(1);
                    let n = g.last_dim();
                    if self.needs(*a) {
                        // dA = G · Bᵀ
                        let mut da = vec![T::zero(); rows * k];
                        let bref = if *trans_b { MatRef::new(bv.data()) } else { MatRef::t(bv.data()) };
                        self.mm(rows, n, k, MatRef::new(g.data()), bref, &mut da, false);
                        accum(&mut grads, *a, Tensor::from_vec(av.shape(), da).unwrap());
                    }
                    if self.needs(*b) {
                        let mut db = vec![T::zero(); k * n];
                        if *trans_b {
                            // dB [N, K] = Gᵀ · A
                            self.mm(n, rows, k, MatRef::t(g.data()), MatRef::new(av.data()), &mut db, false);
                        } else {
                            // dB [K, N] = Aᵀ · G
                            self.mm(k, rows, n, MatRef::t(av.data()), MatRef::new(g.data()), &mut db, false);
                        }
                        accum(&mut grads, *b, Tensor::from_vec(bv.shape(), db).unwrap());
                    }
                }
                Op::BatchMatMul { a, b, trans_b } => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (bt, m, k) = (av.dim(0), av.dim(1), av.dim(2));
                    let n = g.dim(2);
                    let gd = g.data();
                    if self.needs(*a) {
                        let mut da = vec![T::zero(); bt * m * k];
                        for i in 0..bt {
                            let gi = &gd[i * m * n..(i + 1) * m * n];
                            let bi = &bv.data()[i * k * n..(i + 1) * k * n];
                            let bref = if *trans_b { MatRef::new(bi) } else { MatRef::t(bi) };
                            self.mm(m, n, k, MatRef::new(gi), bref, &mut da[i * m * k..(i + 1) * m * k], false);
                        }
                        accum(&mut grads, *a, Tensor::from_vec(av.shape(), da).unwrap());
                    }
                    if self.needs(*b) {
                        let mut db = vec![T::zero(); bt * k * n];
                        for i in 0..bt {
                            let gi = &gd[i * m * n..(i + 1) * m * n];
                            let ai = &av.data()[i * m * k..(i + 1) * m * k];
                            let dst = &mut db[i * k * n..(i + 1) * k * n];
                            if *trans_b {
                                self.mm(n, m, k, MatRef::t(gi), MatRef::new(ai), dst, false);
                            } else {
                                self.mm(k, m, n, MatRef::t(ai), MatRef::new(gi), dst, false);
                            }
                        }
                        accum(&mut grads, *b, Tensor::from_vec(bv.shape(), db).unwrap());
                    }
                }
                Op::Add { a, b } => {
                    if self.needs(*b) {
                        let bshape = self.shape(*b);
                        let bn: usize = bshape.iter().product();
                        let mut db = vec![T::zero(); bn];
                        for chunk in g.data().chunks(bn) {
                            for (d, &v) in db.iter_mut().zip(chunk) {
                                *d += v;
                            }
                        }
                        accum(&mut grads, *b, Tensor::from_vec(bshape, db).unwrap());
                    }
                    if self.needs(*a) {
                        accum(&mut grads, *a, g);
                    }
                }
                Op::Scale { a, factor } => {
                    let mut ga = g;
                    ga.scale(*factor);
                    accum(&mut grads, *a, ga);
                }
                Op::Gelu { a } => {
                    let x = self.value(*a).data();
                    let mut ga = g;
                    for (d, &xv) in ga.data_mut().iter_mut().zip(x) {
                        let x = xv.as_f64();
                        let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
                        let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
                        *d *= T::from_f64(cdf + x * pdf);
                    }
                    accum(&mut grads, *a, ga);
                }
                Op::GeluTanh { a } => {
                    let x = self.value(*a).data();
                    let mut ga = g;
                    let c = (2.0 / std::f64::consts::PI).sqrt();
                    for (d, &xv) in ga.data_mut().iter_mut().zip(x) {
                        let x = xv.as_f64();
                        let t = gelu_tanh_inner(x).tanh();
                        let dudx = c * (1.0 + 3.0 * 0.044715 * x * x);
                        *d *= T::from_f64(0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dudx);
                    }
                    accum(&mut grads, *a, ga);
                }
                Op::LayerNorm { x, gamma, beta, mean, rstd } => {
                    let xv = self.value(*x);
                    let gam = self.value(*gamma).data();
                    let c = xv.last_dim();
                    let inv_c = T::from_f64(1.0 / c as f64);
                    let mut dx = vec![T::zero(); xv.numel()];
                    let mut dgamma = vec![T::zero(); c];
                    let mut dbeta = vec![T::zero(); c];
                    for (r, (xrow, grow)) in xv.data().chunks(c).zip(g.data().chunks(c)).enumerate() {
                        let (mu, rs) = (mean[r], rstd[r]);
                        let mut sum_dy = T::zero();
                        let mut sum_dy_xhat = T::zero();
                        for i in 0..c {
                            let xhat = (xrow[i] - mu) * rs;
                            let dy = grow[i] * gam[i];
                            sum_dy += dy;
                            sum_dy_xhat += dy * xhat;
                            dgamma[i] += grow[i] * xhat;
                            dbeta[i] += grow[i];
                        }
                        let m1 = sum_dy * inv_c;
                        let m2 = sum_dy_xhat * inv_c;
                        for i in 0..c {
                            let xhat = (xrow[i] - mu) * rs;
                            dx[r * c + i] = rs * (grow[i] * gam[i] - m1 - xhat * m2);
                        }
                    }
                    if self.needs(*x) {
                        accum(&mut grads, *x, Tensor::from_vec(xv.shape(), dx).unwrap());
                    }
                    if self.needs(*gamma) {
                        accum(&mut grads, *gamma, Tensor::from_vec(&[c], dgamma).unwrap());
                    }
                    if self.needs(*beta) {
                        accum(&mut grads, *beta, Tensor::from_vec(&[c], dbeta).unwrap());
                    }
                }
                Op::Softmax { a } => {
                    let y = self.value(Var(i));
                    let n = y.last_dim();
                    let mut ga = g;
                    for (grow, yrow) in ga.data_mut().chunks_mut(n).zip(y.data().chunks(n)) {
                        let dot: T = grow.iter().zip(yrow).map(|(&gv, &yv)| gv * yv).sum();
                        for (gv, &yv) in grow.iter_mut().zip(yrow) {
                            *gv = yv * (*gv - dot);
                        }
                    }
                    accum(&mut grads, *a, ga);
                }
                Op::CrossEntropy { logits, targets, count } => {
                    let lv = self.value(*logits);
                    let v = lv.last_dim();
                    let scale = g.item() / T::from_f64(*count as f64);
                    let mut dl = vec![T::zero(); lv.numel()];
                    for (r, t) in targets.iter().enumerate() {
                        if let Some(t) = *t {
                            let row = &mut dl[r * v..(r + 1) * v];
                            row.copy_from_slice(&lv.data()[r * v..(r + 1) * v]);
                            softmax_row(row);
                            row[t] -= T::one();
                            for d in row.iter_mut() {
                                *d *= scale;
                            }
                        }
                    }
                    accum(&mut grads, *logits, Tensor::from_vec(lv.shape(), dl).unwrap());
                }
                Op::GatherRows { a, idx } => {
                    let av = self.value(*a);
                    let c = av.last_dim();
                    let mut da = vec![T::zero(); av.numel()];
                    for (row, &src) in g.data().chunks(c).zip(idx.iter()) {
                        for (d, &v) in da[src * c..(src + 1) * c].iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    accum(&mut grads, *a, Tensor::from_vec(av.shape(), da).unwrap());
                }
                Op::Reshape { a } => {
                    let shape = self.shape(*a).to_vec();
                    accum(&mut grads, *a, g.reshape(&shape).unwrap());
                }
                Op::Permute { a, perm } => {
                    accum(&mut grads, *a, g.permute(&invert_permutation(perm)));
                }
                Op::Narrow0 { a, start, len } => {
                    let shape = self.shape(*a).to_vec();
                    let inner: usize = shape[1..].iter().product();
                    let mut da = Tensor::zeros(&shape);
                    da.data_mut()[start * inner..(start + len) * inner].copy_from_slice(g.data());
                    accum(&mut grads, *a, da);
                }
                Op::Concat0 { parts } => {
                    let mut offset = 0;
                    for &p in parts {
                        let shape = self.shape(p).to_vec();
                        let n: usize = shape.iter().product();
                        if self.needs(p) {
                            let part = Tensor::from_vec(&shape, g.data()[offset..offset + n].to_vec()).unwrap();
                            accum(&mut grads, p, part);
                        }
                        offset += n;
                    }
                }
                Op::Dropout { a, mask } => {
                    let mut ga = g;
                    for (d, &m) in ga.data_mut().iter_mut().zip(mask) {
                        *d *= m;
                    }
                    accum(&mut grads, *a, ga);
                }
            }
        }
        out
    }
}

fn accum<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match grads[v.0].as_mut() {
        Some(acc) => acc.add_assign(&g),
        None => grads[v.0] = Some(g),
    }
}

fn gelu_tanh_inner(x: f64) -> f64 {
    (2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x * x * x)
}

pub(crate) fn softmax_row<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = if *v == T::neg_infinity() { T::zero() } else { (*v - max).exp() };
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

pub(crate) fn log_sum_exp<T: Scalar>(row: &[T]) -> f64 {
    let max = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v.as_f64() - max).exp()).sum::<f64>().ln()
}
