//! Reverse-mode automatic differentiation over a dynamically recorded tape,
//! plus the finite-difference gradient checker used as the universal oracle.
//!
//! Forward code is written once against the [`Cx`] trait and runs in three
//! contexts: [`Tape`] (records backward rules), [`EvalCx`] (plain tensors, no
//! recording, temporaries freed as they go out of scope), and the cost
//! counter in `reparam`.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::{Arc, RwLock};

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use crate::error::{Error, Result};
use crate::ops::{self, Conv2dSpec};
use crate::tensor::{Element, Tensor};

/// A named learnable parameter. Cloning shares the underlying storage.
#[derive(Clone)]
pub struct Param<T: Element> {
    name: String,
    decay: bool,
    value: Arc<RwLock<Tensor<T>>>,
}

impl<T: Element> Param<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>, decay: bool) -> Self {
        Self { name: name.into(), decay, value: Arc::new(RwLock::new(value)) }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// Whether weight decay applies (false for norm parameters and biases).
    pub fn decay(&self) -> bool {
        self.decay
    }

    pub fn get(&self) -> Tensor<T> {
        self.value.read().unwrap().clone()
    }

    pub fn set(&self, t: Tensor<T>) {
        *self.value.write().unwrap() = t;
    }

    pub fn key(&self) -> usize {
        Arc::as_ptr(&self.value) as usize
    }
}

/// Execution context every forward pass is generic over.
pub trait Cx<T: Element> {
    type V: Clone;

    fn constant(&self, t: Tensor<T>) -> Result<Self::V>;
    fn param(&self, p: &Param<T>) -> Result<Self::V>;
    fn shape_of(&self, v: &Self::V) -> Vec<usize>;

    fn add(&self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn sub(&self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn mul(&self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn div(&self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn relu(&self, a: &Self::V) -> Result<Self::V>;
    fn sigmoid(&self, a: &Self::V) -> Result<Self::V>;
    fn gelu(&self, a: &Self::V) -> Result<Self::V>;
    fn exp(&self, a: &Self::V) -> Result<Self::V>;
    fn ln(&self, a: &Self::V) -> Result<Self::V>;
    fn scale(&self, a: &Self::V, s: f64) -> Result<Self::V>;
    fn add_scalar(&self, a: &Self::V, s: f64) -> Result<Self::V>;

    fn matmul(&self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn bmm(&self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn transpose_last(&self, a: &Self::V) -> Result<Self::V>;

    fn reshape(&self, a: &Self::V, shape: Vec<usize>) -> Result<Self::V>;
    fn permute(&self, a: &Self::V, axes: &[usize]) -> Result<Self::V>;
    fn concat(&self, parts: &[Self::V], axis: usize) -> Result<Self::V>;
    fn slice(&self, a: &Self::V, axis: usize, start: usize, len: usize) -> Result<Self::V>;
    fn gather_rows(&self, a: &Self::V, idx: Arc<Vec<usize>>) -> Result<Self::V>;

    /// Windowed attention over projected `q`, `k`, `v` of shape `[tokens, C]`
    /// with `idx[t*l..(t+1)*l]` listing each query's key/value rows and heads
    /// split contiguously along C. The default composes existing primitives
    /// (so it differentiates for free); contexts may substitute an equivalent
    /// kernel that skips the materialized neighborhoods.
    fn windowed_attention(
        &self,
        q: &Self::V,
        k: &Self::V,
        v: &Self::V,
        idx: Arc<Vec<usize>>,
        heads: usize,
        l: usize,
    ) -> Result<Self::V> {
        let shape = self.shape_of(q);
        let (tokens, c) = (shape[0], shape[1]);
        if heads == 0 || c % heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "channels {} not divisible by heads {}",
                c, heads
            )));
        }
        let d = c / heads;
        let gk = self.gather_rows(k, idx.clone())?; // [tokens*l, C]
        let gv = self.gather_rows(v, idx)?;
        // q: [tokens, M, 1, d]; keys: [tokens, M, d, l]; values: [tokens, M, l, d]
        let q = self.reshape(q, vec![tokens, heads, 1, d])?;
        let gk = self.permute(&self.reshape(&gk, vec![tokens, l, heads, d])?, &[0, 2, 3, 1])?;
        let gv = self.permute(&self.reshape(&gv, vec![tokens, l, heads, d])?, &[0, 2, 1, 3])?;
        let scores = self.scale(&self.bmm(&q, &gk)?, 1.0 / (d as f64).sqrt())?;
        let probs = self.softmax_last(&scores)?; // [tokens, M, 1, l]
        let att = self.bmm(&probs, &gv)?; // [tokens, M, 1, d]
        self.reshape(&att, vec![tokens, c])
    }

    fn conv2d(
        &self,
        x: &Self::V,
        w: &Self::V,
        b: Option<&Self::V>,
        spec: Conv2dSpec,
    ) -> Result<Self::V>;
    fn batch_norm_eval(
        &self,
        x: &Self::V,
        gamma: &Self::V,
        beta: &Self::V,
        mean: &Tensor<T>,
        var: &Tensor<T>,
        eps: f64,
    ) -> Result<Self::V>;
    /// Returns the output plus the biased batch mean and variance.
    fn batch_norm_train(
        &self,
        x: &Self::V,
        gamma: &Self::V,
        beta: &Self::V,
        eps: f64,
    ) -> Result<(Self::V, Tensor<T>, Tensor<T>)>;
    fn layer_norm(
        &self,
        x: &Self::V,
        gamma: &Self::V,
        beta: &Self::V,
        eps: f64,
    ) -> Result<Self::V>;
    fn softmax_last(&self, x: &Self::V) -> Result<Self::V>;
    fn max_pool2(&self, x: &Self::V) -> Result<Self::V>;
    fn bilinear_resize(&self, x: &Self::V, oh: usize, ow: usize) -> Result<Self::V>;
    fn global_avg_pool(&self, x: &Self::V) -> Result<Self::V>;
    fn mul_channel(&self, x: &Self::V, s: &Self::V) -> Result<Self::V>;
    fn add_row(&self, x: &Self::V, b: &Self::V) -> Result<Self::V>;

    fn sum_all(&self, x: &Self::V) -> Result<Self::V>;
    fn mean_all(&self, x: &Self::V) -> Result<Self::V> {
        let n: usize = self.shape_of(x).iter().product();
        let s = self.sum_all(x)?;
        self.scale(&s, 1.0 / n as f64)
    }
    fn wce_loss(
        &self,
        logits: &Self::V,
        labels: Arc<Vec<u32>>,
        weights: &Tensor<T>,
    ) -> Result<Self::V>;
}

/// Plain-tensor execution: no graph, no gradients.
pub struct EvalCx;

impl<T: Element> Cx<T> for EvalCx {
    type V = Tensor<T>;

    fn constant(&self, t: Tensor<T>) -> Result<Tensor<T>> {
        Ok(t)
    }
    fn param(&self, p: &Param<T>) -> Result<Tensor<T>> {
        Ok(p.get())
    }
    fn shape_of(&self, v: &Tensor<T>) -> Vec<usize> {
        v.shape().to_vec()
    }
    fn add(&self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        a.add(b)
    }
    fn sub(&self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        a.sub(b)
    }
    fn mul(&self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        a.mul(b)
    }
    fn div(&self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        a.div(b)
    }
    fn relu(&self, a: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(a.relu())
    }
    fn sigmoid(&self, a: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(a.sigmoid())
    }
    fn gelu(&self, a: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(ops::gelu(a))
    }
    fn exp(&self, a: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(a.exp())
    }
    fn ln(&self, a: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(a.ln())
    }
    fn scale(&self, a: &Tensor<T>, s: f64) -> Result<Tensor<T>> {
        Ok(a.scale(T::from_f64(s)))
    }
    fn add_scalar(&self, a: &Tensor<T>, s: f64) -> Result<Tensor<T>> {
        Ok(a.add_scalar(T::from_f64(s)))
    }
    fn matmul(&self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        a.matmul(b)
    }
    fn bmm(&self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        ops::bmm(a, b)
    }
    fn transpose_last(&self, a: &Tensor<T>) -> Result<Tensor<T>> {
        ops::transpose_last(a)
    }
    fn reshape(&self, a: &Tensor<T>, shape: Vec<usize>) -> Result<Tensor<T>> {
        a.reshape(shape)
    }
    fn permute(&self, a: &Tensor<T>, axes: &[usize]) -> Result<Tensor<T>> {
        a.permute(axes)
    }
    fn concat(&self, parts: &[Tensor<T>], axis: usize) -> Result<Tensor<T>> {
        let refs: Vec<&Tensor<T>> = parts.iter().collect();
        Tensor::concat(&refs, axis)
    }
    fn slice(&self, a: &Tensor<T>, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
        a.slice(axis, start, len)
    }
    fn gather_rows(&self, a: &Tensor<T>, idx: Arc<Vec<usize>>) -> Result<Tensor<T>> {
        ops::gather_rows(a, &idx)
    }
    fn windowed_attention(
        &self,
        q: &Tensor<T>,
        k: &Tensor<T>,
        v: &Tensor<T>,
        idx: Arc<Vec<usize>>,
        heads: usize,
        l: usize,
    ) -> Result<Tensor<T>> {
        ops::windowed_attention(q, k, v, &idx, heads, l)
    }
    fn conv2d(
        &self,
        x: &Tensor<T>,
        w: &Tensor<T>,
        b: Option<&Tensor<T>>,
        spec: Conv2dSpec,
    ) -> Result<Tensor<T>> {
        ops::conv2d(x, w, b, &spec)
    }
    fn batch_norm_eval(
        &self,
        x: &Tensor<T>,
        gamma: &Tensor<T>,
        beta: &Tensor<T>,
        mean: &Tensor<T>,
        var: &Tensor<T>,
        eps: f64,
    ) -> Result<Tensor<T>> {
        ops::batch_norm_eval(x, gamma, beta, mean, var, eps)
    }
    fn batch_norm_train(
        &self,
        x: &Tensor<T>,
        gamma: &Tensor<T>,
        beta: &Tensor<T>,
        eps: f64,
    ) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
        ops::batch_norm_train(x, gamma, beta, eps)
    }
    fn layer_norm(
        &self,
        x: &Tensor<T>,
        gamma: &Tensor<T>,
        beta: &Tensor<T>,
        eps: f64,
    ) -> Result<Tensor<T>> {
        ops::layer_norm(x, gamma, beta, eps)
    }
    fn softmax_last(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        ops::softmax_last(x)
    }
    fn max_pool2(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(ops::max_pool2(x)?.0)
    }
    fn bilinear_resize(&self, x: &Tensor<T>, oh: usize, ow: usize) -> Result<Tensor<T>> {
        ops::bilinear_resize(x, oh, ow)
    }
    fn global_avg_pool(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        ops::global_avg_pool(x)
    }
    fn mul_channel(&self, x: &Tensor<T>, s: &Tensor<T>) -> Result<Tensor<T>> {
        ops::mul_channel(x, s)
    }
    fn add_row(&self, x: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        ops::add_row(x, b)
    }
    fn sum_all(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(Tensor::scalar(x.sum()))
    }
    fn wce_loss(
        &self,
        logits: &Tensor<T>,
        labels: Arc<Vec<u32>>,
        weights: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let (loss, _) = ops::wce_loss(logits, &labels, weights)?;
        Ok(Tensor::scalar(loss))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

type BackFn<T> =
    Box<dyn Fn(&Tensor<T>, &[Tensor<T>], &Tensor<T>) -> Result<Vec<Tensor<T>>>>;

struct Node<T: Element> {
    value: Tensor<T>,
    parents: Vec<Var>,
    back: Option<BackFn<T>>,
}

/// Dynamically recorded operation graph. Single-threaded; independent tapes
/// may run on separate threads.
pub struct Tape<T: Element> {
    nodes: RefCell<Vec<Node<T>>>,
    grad_enabled: bool,
    bound: RefCell<Vec<(Param<T>, Var)>>,
    memo: RefCell<HashMap<usize, Var>>,
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self::with_grad(true)
    }

    /// A tape that evaluates forward values without recording backward rules.
    pub fn no_grad() -> Self {
        Self::with_grad(false)
    }

    fn with_grad(grad_enabled: bool) -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            grad_enabled,
            bound: RefCell::new(Vec::new()),
            memo: RefCell::new(HashMap::new()),
        }
    }

    pub fn leaf(&self, value: Tensor<T>) -> Var {
        self.push(value, vec![], None)
    }

    fn push(&self, value: Tensor<T>, parents: Vec<Var>, back: Option<BackFn<T>>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        if self.grad_enabled {
            nodes.push(Node { value, parents, back });
        } else {
            nodes.push(Node { value, parents: vec![], back: None });
        }
        Var(id)
    }

    pub fn value(&self, v: Var) -> Tensor<T> {
        self.nodes.borrow()[v.0].value.clone()
    }

    fn vals(&self, vars: &[Var]) -> Vec<Tensor<T>> {
        let nodes = self.nodes.borrow();
        vars.iter().map(|v| nodes[v.0].value.clone()).collect()
    }

    /// Parameters touched by forward passes on this tape, with their vars.
    pub fn bound_params(&self) -> Vec<(Param<T>, Var)> {
        self.bound.borrow().clone()
    }

    /// Reverse sweep from a scalar root. Returns one gradient slot per node.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        if !self.grad_enabled {
            return Err(Error::Autodiff(
                "backward on a no-grad tape: operation was not recorded for differentiation"
                    .into(),
            ));
        }
        let nodes = self.nodes.borrow();
        if nodes[root.0].value.numel() != 1 {
            return Err(Error::Autodiff(format!(
                "backward root must be scalar, got shape {:?}",
                nodes[root.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; nodes.len()];
        grads[root.0] = Some(Tensor::ones(nodes[root.0].value.shape().to_vec())?);
        for i in (0..=root.0).rev() {
            let Some(gy) = grads[i].clone() else { continue };
            let node = &nodes[i];
            let Some(back) = &node.back else { continue };
            let parent_vals: Vec<Tensor<T>> =
                node.parents.iter().map(|p| nodes[p.0].value.clone()).collect();
            let parent_grads = back(&gy, &parent_vals, &node.value)?;
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (p, g) in node.parents.iter().zip(parent_grads) {
                match &mut grads[p.0] {
                    Some(acc) => *acc = acc.add(&g)?,
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(Gradients { grads })
    }
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

pub struct Gradients<T: Element> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }
}

impl<T: Element> Cx<T> for Tape<T> {
    type V = Var;

    fn constant(&self, t: Tensor<T>) -> Result<Var> {
        Ok(self.leaf(t))
    }

    fn param(&self, p: &Param<T>) -> Result<Var> {
        let key = p.key();
        if let Some(&v) = self.memo.borrow().get(&key) {
            return Ok(v);
        }
        let v = self.leaf(p.get());
        self.memo.borrow_mut().insert(key, v);
        self.bound.borrow_mut().push((p.clone(), v));
        Ok(v)
    }

    fn shape_of(&self, v: &Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    fn add(&self, a: &Var, b: &Var) -> Result<Var> {
        let [va, vb] = &self.vals(&[*a, *b])[..] else { unreachable!() };
        let out = va.add(vb)?;
        Ok(self.push(
            out,
            vec![*a, *b],
            Some(Box::new(|gy, _, _| Ok(vec![gy.clone(), gy.clone()]))),
        ))
    }

    fn sub(&self, a: &Var, b: &Var) -> Result<Var> {
        let [va, vb] = &self.vals(&[*a, *b])[..] else { unreachable!() };
        let out = va.sub(vb)?;
        Ok(self.push(
            out,
            vec![*a, *b],
            Some(Box::new(|gy, _, _| Ok(vec![gy.clone(), gy.neg()]))),
        ))
    }

    fn mul(&self, a: &Var, b: &Var) -> Result<Var> {
        let [va, vb] = &self.vals(&[*a, *b])[..] else { unreachable!() };
        let out = va.mul(vb)?;
        Ok(self.push(
            out,
            vec![*a, *b],
            Some(Box::new(|gy, pv, _| Ok(vec![gy.mul(&pv[1])?, gy.mul(&pv[0])?]))),
        ))
    }

    fn div(&self, a: &Var, b: &Var) -> Result<Var> {
        let [va, vb] = &self.vals(&[*a, *b])[..] else { unreachable!() };
        let out = va.div(vb)?;
        Ok(self.push(
            out,
            vec![*a, *b],
            Some(Box::new(|gy, pv, _| {
                let da = gy.div(&pv[1])?;
                let db = gy.mul(&pv[0])?.div(&pv[1].mul(&pv[1])?)?.neg();
                Ok(vec![da, db])
            })),
        ))
    }

    fn relu(&self, a: &Var) -> Result<Var> {
        let va = self.value(*a);
        let out = va.relu();
        Ok(self.push(
            out,
            vec![*a],
            Some(Box::new(|gy, pv, _| {
                gy.zip(&pv[0], |g, x| if x > T::zero() { g } else { T::zero() })
                    .map(|t| vec![t])
            })),
        ))
    }

    fn sigmoid(&self, a: &Var) -> Result<Var> {
        let out = self.value(*a).sigmoid();
        Ok(self.push(
            out,
            vec![*a],
            Some(Box::new(|gy, _, out| {
                gy.zip(out, |g, s| g * s * (T::one() - s)).map(|t| vec![t])
            })),
        ))
    }

    fn gelu(&self, a: &Var) -> Result<Var> {
        let out = ops::gelu(&self.value(*a));
        Ok(self.push(
            out,
            vec![*a],
            Some(Box::new(|gy, pv, _| Ok(vec![ops::gelu_backward(&pv[0], gy)?]))),
        ))
    }

    fn exp(&self, a: &Var) -> Result<Var> {
        let out = self.value(*a).exp();
        Ok(self.push(
            out,
            vec![*a],
            Some(Box::new(|gy, _, out| gy.mul(out).map(|t| vec![t]))),
        ))
    }

    fn ln(&self, a: &Var) -> Result<Var> {
        let out = self.value(*a).ln();
        Ok(self.push(
            out,
            vec![*a],
            Some(Box::new(|gy, pv, _| gy.div(&pv[0]).map(|t| vec![t]))),
        ))
    }

    fn scale(&self, a: &Var, s: f64) -> Result<Var> {
        let out = self.value(*a).scale(T::from_f64(s));
        Ok(self.push(
            out,
            vec![*a],
            Some(Box::new(move |gy, _, _| Ok(vec![gy.scale(T::from_f64(s))]))),
        ))
    }

    fn add_scalar(&self, a: &Var, s: f64) -> Result<Var> {
        let out = self.value(*a).add_scalar(T::from_f64(s));
        Ok(self.push(out, vec![*a], Some(Box::new(|gy, _, _| Ok(vec![gy.clone()])))))
    }

    fn matmul(&self, a: &Var, b: &Var) -> Result<Var> {
        let [va, vb] = &self.vals(&[*a, *b])[..] else { unreachable!() };
        let out = va.matmul(vb)?;
        Ok(self.push(
            out,
            vec![*a, *b],
            Some(Box::new(|gy, pv, _| {
                let da = gy.matmul(&ops::transpose_last(&pv[1])?)?;
                let db = ops::transpose_last(&pv[0])?.matmul(gy)?;
                Ok(vec![da, db])
            })),
        ))
    }

    fn bmm(&self, a: &Var, b: &Var) -> Result<Var> {
        let [va, vb] = &self.vals(&[*a, *b])[..] else { unreachable!() };
        let out = ops::bmm(va, vb)?;
        Ok(self.push(
            out,
            vec![*a, *b],
            Some(Box::new(|gy, pv, _| {
                let da = ops::bmm(gy, &ops::transpose_last(&pv[1])?)?;
                let db = ops::bmm(&ops::transpose_last(&pv[0])?, gy)?;
                Ok(vec![da, db])
            })),
        ))
    }

    fn transpose_last(&self, a: &Var) -> Result<Var> {
        let out = ops::transpose_last(&self.value(*a))?;
        Ok(self.push(
            out,
            vec![*a],
            Some(Box::new(|gy, _, _| Ok(vec![ops::transpose_last(gy)?]))),
        ))
    }

    fn reshape(&self, a: &Var, shape: Vec<usize>) -> Result<Var> {
        let va = self.value(*a);
        let in_shape = va.shape().to_vec();
        let out = va.reshape(shape)?;
        Ok(self.push(
            out,
            vec![*a],
            Some(Box::new(move |gy, _, _| Ok(vec![gy.reshape(in_shape.clone())?]))),
        ))
    }

    fn permute(&self, a: &Var, axes: &[usize]) -> Result<Var> {
        let out = self.value(*a).permute(axes)?;
        let mut inverse = vec![0usize; axes.len()];
        for (i, &ax) in axes.iter().enumerate() {
            inverse[ax] = i;
        }
        Ok(self.push(
            out,
            vec![*a],
            Some(Box::new(move |gy, _, _| Ok(vec![gy.permute(&inverse)?]))),
        ))
    }

    fn concat(&self, parts: &[Var], axis: usize) -> Result<Var> {
        let vals = self.vals(parts);
        let refs: Vec<&Tensor<T>> = vals.iter().collect();
        let out = Tensor::concat(&refs, axis)?;
        let extents: Vec<usize> = vals.iter().map(|v| v.dim(axis)).collect();
        Ok(self.push(
            out,
            parts.to_vec(),
            Some(Box::new(move |gy, _, _| {
                let mut grads = Vec::with_capacity(extents.len());
                let mut start = 0;
                for &len in &extents {
                    grads.push(gy.slice(axis, start, len)?);
                    start += len;
                }
                Ok(grads)
            })),
        ))
    }

    fn slice(&self, a: &Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let va = self.value(*a);
        let full = va.dim(axis);
        let out = va.slice(axis, start, len)?;
        Ok(self.push(
            out,
            vec![*a],
            Some(Box::new(move |gy, _, _| {
                // pad the gradient back to the full axis extent
                let mut parts: Vec<Tensor<T>> = Vec::new();
                if start > 0 {
                    let mut s = gy.shape().to_vec();
                    s[axis] = start;
                    parts.push(Tensor::zeros(s)?);
                }
                parts.push(gy.clone());
                if start + len < full {
                    let mut s = gy.shape().to_vec();
                    s[axis] = full - start - len;
                    parts.push(Tensor::zeros(s)?);
                }
                let refs: Vec<&Tensor<T>> = parts.iter().collect();
                Ok(vec![Tensor::concat(&refs, axis)?])
            })),
        ))
    }

    fn gather_rows(&self, a: &Var, idx: Arc<Vec<usize>>) -> Result<Var> {
        let va = self.value(*a);
        let in_shape = va.shape().to_vec();
        let out = ops::gather_rows(&va, &idx)?;
        Ok(self.push(
            out,
            vec![*a],
            Some(Box::new(move |gy, _, _| {
                Ok(vec![ops::gather_rows_backward(&in_shape, &idx, gy)?])
            })),
        ))
    }

    fn conv2d(&self, x: &Var, w: &Var, b: Option<&Var>, spec: Conv2dSpec) -> Result<Var> {
        let has_bias = b.is_some();
        let mut parents = vec![*x, *w];
        if let Some(bv) = b {
            parents.push(*bv);
        }
        let vals = self.vals(&parents);
        let out = ops::conv2d(&vals[0], &vals[1], vals.get(2), &spec)?;
        Ok(self.push(
            out,
            parents,
            Some(Box::new(move |gy, pv, _| {
                let (dx, dw, db) = ops::conv2d_backward(&pv[0], &pv[1], &spec, gy)?;
                let mut grads = vec![dx, dw];
                if has_bias {
                    grads.push(db);
                }
                Ok(grads)
            })),
        ))
    }

    fn batch_norm_eval(
        &self,
        x: &Var,
        gamma: &Var,
        beta: &Var,
        mean: &Tensor<T>,
        var: &Tensor<T>,
        eps: f64,
    ) -> Result<Var> {
        let vals = self.vals(&[*x, *gamma, *beta]);
        let out = ops::batch_norm_eval(&vals[0], &vals[1], &vals[2], mean, var, eps)?;
        let (mean, var) = (mean.clone(), var.clone());
        Ok(self.push(
            out,
            vec![*x, *gamma, *beta],
            Some(Box::new(move |gy, pv, _| {
                let (dx, dg, db) =
                    ops::batch_norm_eval_backward(&pv[0], &pv[1], &mean, &var, eps, gy)?;
                Ok(vec![dx, dg, db])
            })),
        ))
    }

    fn batch_norm_train(
        &self,
        x: &Var,
        gamma: &Var,
        beta: &Var,
        eps: f64,
    ) -> Result<(Var, Tensor<T>, Tensor<T>)> {
        let vals = self.vals(&[*x, *gamma, *beta]);
        let (out, mean, var) = ops::batch_norm_train(&vals[0], &vals[1], &vals[2], eps)?;
        let (bm, bv) = (mean.clone(), var.clone());
        let v = self.push(
            out,
            vec![*x, *gamma, *beta],
            Some(Box::new(move |gy, pv, _| {
                let (dx, dg, db) =
                    ops::batch_norm_train_backward(&pv[0], &pv[1], &bm, &bv, eps, gy)?;
                Ok(vec![dx, dg, db])
            })),
        );
        Ok((v, mean, var))
    }

    fn layer_norm(&self, x: &Var, gamma: &Var, beta: &Var, eps: f64) -> Result<Var> {
        let vals = self.vals(&[*x, *gamma, *beta]);
        let out = ops::layer_norm(&vals[0], &vals[1], &vals[2], eps)?;
        Ok(self.push(
            out,
            vec![*x, *gamma, *beta],
            Some(Box::new(move |gy, pv, _| {
                let (dx, dg, db) = ops::layer_norm_backward(&pv[0], &pv[1], eps, gy)?;
                Ok(vec![dx, dg, db])
            })),
        ))
    }

    fn softmax_last(&self, x: &Var) -> Result<Var> {
        let out = ops::softmax_last(&self.value(*x))?;
        Ok(self.push(
            out,
            vec![*x],
            Some(Box::new(|gy, _, out| Ok(vec![ops::softmax_last_backward(out, gy)?]))),
        ))
    }

    fn max_pool2(&self, x: &Var) -> Result<Var> {
        let vx = self.value(*x);
        let in_shape = vx.shape().to_vec();
        let (out, argmax) = ops::max_pool2(&vx)?;
        Ok(self.push(
            out,
            vec![*x],
            Some(Box::new(move |gy, _, _| {
                Ok(vec![ops::max_pool2_backward(&in_shape, &argmax, gy)?])
            })),
        ))
    }

    fn bilinear_resize(&self, x: &Var, oh: usize, ow: usize) -> Result<Var> {
        let vx = self.value(*x);
        let in_shape = vx.shape().to_vec();
        let out = ops::bilinear_resize(&vx, oh, ow)?;
        Ok(self.push(
            out,
            vec![*x],
            Some(Box::new(move |gy, _, _| {
                Ok(vec![ops::bilinear_resize_backward(&in_shape, gy)?])
            })),
        ))
    }

    fn global_avg_pool(&self, x: &Var) -> Result<Var> {
        let vx = self.value(*x);
        let in_shape = vx.shape().to_vec();
        let out = ops::global_avg_pool(&vx)?;
        Ok(self.push(
            out,
            vec![*x],
            Some(Box::new(move |gy, _, _| {
                Ok(vec![ops::global_avg_pool_backward(&in_shape, gy)?])
            })),
        ))
    }

    fn mul_channel(&self, x: &Var, s: &Var) -> Result<Var> {
        let vals = self.vals(&[*x, *s]);
        let out = ops::mul_channel(&vals[0], &vals[1])?;
        Ok(self.push(
            out,
            vec![*x, *s],
            Some(Box::new(|gy, pv, _| {
                let (dx, ds) = ops::mul_channel_backward(&pv[0], &pv[1], gy)?;
                Ok(vec![dx, ds])
            })),
        ))
    }

    fn add_row(&self, x: &Var, b: &Var) -> Result<Var> {
        let vals = self.vals(&[*x, *b]);
        let k = vals[1].numel();
        let out = ops::add_row(&vals[0], &vals[1])?;
        Ok(self.push(
            out,
            vec![*x, *b],
            Some(Box::new(move |gy, _, _| {
                Ok(vec![gy.clone(), ops::add_row_backward(k, gy)?])
            })),
        ))
    }

    fn sum_all(&self, x: &Var) -> Result<Var> {
        let vx = self.value(*x);
        let in_shape = vx.shape().to_vec();
        let out = Tensor::scalar(vx.sum());
        Ok(self.push(
            out,
            vec![*x],
            Some(Box::new(move |gy, _, _| {
                Ok(vec![Tensor::full(in_shape.clone(), gy.data()[0])?])
            })),
        ))
    }

    fn wce_loss(&self, logits: &Var, labels: Arc<Vec<u32>>, weights: &Tensor<T>) -> Result<Var> {
        let vl = self.value(*logits);
        let (loss, probs) = ops::wce_loss(&vl, &labels, weights)?;
        let weights = weights.clone();
        Ok(self.push(
            Tensor::scalar(loss),
            vec![*logits],
            Some(Box::new(move |gy, _, _| {
                Ok(vec![ops::wce_loss_backward(&probs, &labels, &weights, gy.data()[0])?])
            })),
        ))
    }
}

#[derive(Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
}

fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Smallest gradient magnitude a central difference can resolve: the
/// perturbed function values agree only to roughly `|f|·ε_mach`, so after
/// dividing by `2·eps` anything below this is cancellation noise, not signal.
/// The safety factor absorbs rounding accumulated across the forward pass and
/// leaves headroom so noise-only coordinates (true gradient zero) stay well
/// inside a 1e-3 relative tolerance.
fn fd_resolution(loss_magnitude: f64, eps: f64) -> f64 {
    (loss_magnitude.max(1.0) * (f64::EPSILON / eps) * 3e4).max(1e-8)
}

/// Central finite-difference check of a scalar-valued function of explicit
/// tensor inputs. `f` must be deterministic (verified by a double forward
/// pass). Runs in f64 only. `max_per_input` caps how many scalar coordinates
/// are perturbed per input (sampled deterministically from `seed`).
pub fn grad_check<F>(
    f: F,
    inputs: &[Tensor<f64>],
    eps: f64,
    max_per_input: Option<usize>,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&dyn Fn(&Tensor<f64>) -> Var, &Tape<f64>) -> Result<Var>,
{
    // The closure receives a leaf-maker so it can bind the *current* inputs.
    let run = |inputs: &[Tensor<f64>]| -> Result<(Tape<f64>, Vec<Var>, Var)> {
        let tape = Tape::<f64>::new();
        let mut vars = Vec::new();
        let cursor = RefCell::new(0usize);
        let inputs = inputs.to_vec();
        let vars_cell = RefCell::new(Vec::new());
        let out = {
            let leaf = |_t: &Tensor<f64>| -> Var {
                let mut c = cursor.borrow_mut();
                let v = tape.leaf(inputs[*c].clone());
                *c += 1;
                vars_cell.borrow_mut().push(v);
                v
            };
            f(&leaf, &tape)?
        };
        vars.extend(vars_cell.into_inner());
        Ok((tape, vars, out))
    };

    let (tape, vars, out) = run(inputs)?;
    let out_val = tape.value(out);
    if out_val.numel() != 1 {
        return Err(Error::Autodiff("grad_check function must be scalar-valued".into()));
    }
    // determinism check
    let (tape2, _, out2) = run(inputs)?;
    if tape2.value(out2) != out_val {
        return Err(Error::Autodiff(
            "grad_check function is non-deterministic: two forward passes disagree".into(),
        ));
    }
    let grads = tape.backward(out)?;
    let floor = fd_resolution(out_val.data()[0].abs(), eps);

    let mut rng = StdRng::seed_from_u64(seed);
    let mut max_err = 0.0f64;
    let mut checked = 0usize;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[i])
            .cloned()
            .unwrap_or(Tensor::zeros(input.shape().to_vec())?);
        let n = input.numel();
        let coords: Vec<usize> = match max_per_input {
            Some(cap) if cap < n => {
                (0..cap).map(|_| rng.gen_range(0..n)).collect()
            }
            _ => (0..n).collect(),
        };
        for j in coords {
            let mut plus = input.to_vec();
            plus[j] += eps;
            let mut minus = input.to_vec();
            minus[j] -= eps;
            let mut in_plus = inputs.to_vec();
            in_plus[i] = Tensor::new(input.shape().to_vec(), plus)?;
            let mut in_minus = inputs.to_vec();
            in_minus[i] = Tensor::new(input.shape().to_vec(), minus)?;
            let (tp, _, op) = run(&in_plus)?;
            let (tm, _, om) = run(&in_minus)?;
            let numeric = (tp.value(op).data()[0] - tm.value(om).data()[0]) / (2.0 * eps);
            max_err = max_err.max(rel_err(analytic.data()[j], numeric, floor));
            checked += 1;
        }
    }
    Ok(GradCheckReport { max_rel_err: max_err, checked })
}

/// Finite-difference check against model parameters: analytic gradients come
/// from one tape pass of `loss`, numeric ones from re-evaluating `loss` with
/// each sampled parameter coordinate perturbed in place.
pub fn grad_check_params<F>(
    loss: F,
    params: &[Param<f64>],
    eps: f64,
    max_per_param: Option<usize>,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&Tape<f64>) -> Result<Var>,
{
    let tape = Tape::<f64>::new();
    let root = loss(&tape)?;
    let base = tape.value(root);
    if base.numel() != 1 {
        return Err(Error::Autodiff("loss must be scalar-valued".into()));
    }
    let tape2 = Tape::<f64>::new();
    if tape2.value(loss(&tape2)?) != base {
        return Err(Error::Autodiff(
            "loss is non-deterministic: two forward passes disagree".into(),
        ));
    }
    let grads = tape.backward(root)?;
    let by_key: HashMap<usize, Var> =
        tape.bound_params().into_iter().map(|(p, v)| (p.key(), v)).collect();

    let eval = || -> Result<f64> {
        let t = Tape::<f64>::no_grad();
        Ok(t.value(loss(&t)?).data()[0])
    };
    let floor = fd_resolution(base.data()[0].abs(), eps);

    let mut rng = StdRng::seed_from_u64(seed);
    let mut max_err = 0.0f64;
    let mut checked = 0usize;
    for p in params {
        let var = *by_key.get(&p.key()).ok_or_else(|| {
            Error::Autodiff(format!("parameter {} not used by the loss", p.name()))
        })?;
        let original = p.get();
        let analytic = grads
            .get(var)
            .cloned()
            .unwrap_or(Tensor::zeros(original.shape().to_vec())?);
        let n = original.numel();
        let coords: Vec<usize> = match max_per_param {
            Some(cap) if cap < n => (0..cap).map(|_| rng.gen_range(0..n)).collect(),
            _ => (0..n).collect(),
        };
        for j in coords {
            let mut plus = original.to_vec();
            plus[j] += eps;
            p.set(Tensor::new(original.shape().to_vec(), plus)?);
            let fp = eval()?;
            let mut minus = original.to_vec();
            minus[j] -= eps;
            p.set(Tensor::new(original.shape().to_vec(), minus)?);
            let fm = eval()?;
            p.set(original.clone());
            let numeric = (fp - fm) / (2.0 * eps);
            max_err = max_err.max(rel_err(analytic.data()[j], numeric, floor));
            checked += 1;
        }
    }
    Ok(GradCheckReport { max_rel_err: max_err, checked })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn rand_tensor(shape: Vec<usize>, rng: &mut StdRng) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn record_and_backward_basics() {
        let tape = Tape::<f64>::new();
        // linearity: z = x + y, dz/dx = dz/dy = 1
        let x = tape.leaf(Tensor::scalar(2.0));
        let y = tape.leaf(Tensor::scalar(3.0));
        let z = tape.add(&x, &y).unwrap();
        let g = tape.backward(z).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0]);
        assert_eq!(g.get(y).unwrap().data(), &[1.0]);

        // product rule: z = x*y at (2,3) -> dx=3, dy=2
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::scalar(2.0));
        let y = tape.leaf(Tensor::scalar(3.0));
        let z = tape.mul(&x, &y).unwrap();
        let g = tape.backward(z).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[3.0]);
        assert_eq!(g.get(y).unwrap().data(), &[2.0]);

        // dead unit: relu(-1) has zero gradient
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::scalar(-1.0));
        let y = tape.relu(&x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0]);
    }

    #[test]
    fn backward_quadratic_and_fanout() {
        // root = sum(x*x), x=[1,2] -> grad [2,4]
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let sq = tape.mul(&x, &x).unwrap();
        let s = tape.sum_all(&sq).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 4.0]);

        // fan-out: y = x + x -> dx = 2
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::scalar(5.0));
        let y = tape.add(&x, &x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_root_and_no_grad() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        assert!(tape.backward(x).is_err());
        let ng = Tape::<f64>::no_grad();
        let y = ng.leaf(Tensor::scalar(1.0));
        assert!(ng.backward(y).is_err());
    }

    #[test]
    fn backward_is_linear_in_the_loss() {
        let mut rng = StdRng::seed_from_u64(3);
        let x0 = rand_tensor(vec![4], &mut rng);
        let (a, b) = (1.3, -0.7);
        let grads_of = |wa: f64, wb: f64| -> Vec<f64> {
            let tape = Tape::<f64>::new();
            let x = tape.leaf(x0.clone());
            let l1 = tape.sum_all(&tape.mul(&x, &x).unwrap()).unwrap();
            let sig = tape.sigmoid(&x).unwrap();
            let l2 = tape.sum_all(&sig).unwrap();
            let l = tape
                .add(&tape.scale(&l1, wa).unwrap(), &tape.scale(&l2, wb).unwrap())
                .unwrap();
            tape.backward(l).unwrap().get(x).unwrap().to_vec()
        };
        let g1 = grads_of(1.0, 0.0);
        let g2 = grads_of(0.0, 1.0);
        let gab = grads_of(a, b);
        for i in 0..4 {
            assert!((gab[i] - (a * g1[i] + b * g2[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn grad_check_simple_square() {
        // f(x) = x^2 at x = 3: analytic 6
        let report = grad_check(
            |leaf, tape| {
                let x = leaf(&Tensor::scalar(0.0));
                tape.mul(&x, &x)
            },
            &[Tensor::scalar(3.0)],
            1e-5,
            None,
            0,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "{:?}", report);
    }

    #[test]
    fn grad_check_detects_nondeterminism() {
        use std::sync::atomic::{AtomicUsize, Ordering};
        let counter = AtomicUsize::new(0);
        let r = grad_check(
            |leaf, tape| {
                let x = leaf(&Tensor::scalar(0.0));
                let n = counter.fetch_add(1, Ordering::SeqCst) as f64;
                let noise = tape.constant(Tensor::scalar(n))?;
                let y = tape.mul(&x, &x)?;
                tape.add(&y, &noise)
            },
            &[Tensor::scalar(1.0)],
            1e-5,
            None,
            0,
        );
        assert!(r.is_err());
    }

    /// All differentiable primitives pass finite differences (tol 1e-4,
    /// eps 1e-5) on random f64 inputs in [-1, 1].
    #[test]
    fn grad_check_every_primitive() {
        let mut rng = StdRng::seed_from_u64(42);
        let tol = 1e-4;
        let eps = 1e-5;
        type Build =
            Box<dyn Fn(&dyn Fn(&Tensor<f64>) -> Var, &Tape<f64>) -> Result<Var>>;
        let x44 = rand_tensor(vec![1, 2, 4, 4], &mut rng);
        let cases: Vec<(&str, Vec<Tensor<f64>>, Build)> = vec![
            (
                "add",
                vec![rand_tensor(vec![3], &mut rng), rand_tensor(vec![3], &mut rng)],
                Box::new(|leaf, t| {
                    let (a, b) = (leaf(&Tensor::scalar(0.)), leaf(&Tensor::scalar(0.)));
                    t.sum_all(&t.add(&a, &b)?)
                }),
            ),
            (
                "sub_mul_div",
                vec![
                    rand_tensor(vec![3], &mut rng),
                    rand_tensor(vec![3], &mut rng).map(|v| v + 2.0),
                ],
                Box::new(|leaf, t| {
                    let (a, b) = (leaf(&Tensor::scalar(0.)), leaf(&Tensor::scalar(0.)));
                    let s = t.sub(&a, &b)?;
                    let m = t.mul(&s, &a)?;
                    t.sum_all(&t.div(&m, &b)?)
                }),
            ),
            (
                "relu",
                vec![rand_tensor(vec![8], &mut rng)],
                Box::new(|leaf, t| {
                    let a = leaf(&Tensor::scalar(0.));
                    t.sum_all(&t.relu(&a)?)
                }),
            ),
            (
                "sigmoid_exp_ln_gelu",
                vec![rand_tensor(vec![6], &mut rng).map(|v| v.abs() + 0.5)],
                Box::new(|leaf, t| {
                    let a = leaf(&Tensor::scalar(0.));
                    let s = t.sigmoid(&a)?;
                    let e = t.exp(&s)?;
                    let l = t.ln(&e)?;
                    t.sum_all(&t.gelu(&l)?)
                }),
            ),
            (
                "matmul",
                vec![rand_tensor(vec![3, 4], &mut rng), rand_tensor(vec![4, 2], &mut rng)],
                Box::new(|leaf, t| {
                    let (a, b) = (leaf(&Tensor::scalar(0.)), leaf(&Tensor::scalar(0.)));
                    t.sum_all(&t.matmul(&a, &b)?)
                }),
            ),
            (
                "bmm",
                vec![
                    rand_tensor(vec![2, 3, 4], &mut rng),
                    rand_tensor(vec![2, 4, 2], &mut rng),
                ],
                Box::new(|leaf, t| {
                    let (a, b) = (leaf(&Tensor::scalar(0.)), leaf(&Tensor::scalar(0.)));
                    t.sum_all(&t.bmm(&a, &b)?)
                }),
            ),
            (
                "reshape_permute_concat_slice",
                vec![rand_tensor(vec![2, 6], &mut rng), rand_tensor(vec![2, 6], &mut rng)],
                Box::new(|leaf, t| {
                    let (a, b) = (leaf(&Tensor::scalar(0.)), leaf(&Tensor::scalar(0.)));
                    let ar = t.reshape(&a, vec![3, 4])?;
                    let ap = t.permute(&ar, &[1, 0])?; // [4,3]
                    let br = t.reshape(&b, vec![4, 3])?;
                    let c = t.concat(&[ap, br], 0)?; // [8,3]
                    let s = t.slice(&c, 0, 2, 5)?;
                    t.sum_all(&s)
                }),
            ),
            (
                "gather_rows",
                vec![rand_tensor(vec![4, 3], &mut rng)],
                Box::new(|leaf, t| {
                    let a = leaf(&Tensor::scalar(0.));
                    let g = t.gather_rows(&a, Arc::new(vec![0, 2, 2, 3]))?;
                    t.sum_all(&g)
                }),
            ),
            (
                "conv2d",
                vec![
                    rand_tensor(vec![1, 2, 5, 5], &mut rng),
                    rand_tensor(vec![3, 2, 3, 3], &mut rng),
                    rand_tensor(vec![3], &mut rng),
                ],
                Box::new(|leaf, t| {
                    let x = leaf(&Tensor::scalar(0.));
                    let w = leaf(&Tensor::scalar(0.));
                    let b = leaf(&Tensor::scalar(0.));
                    let y = t.conv2d(&x, &w, Some(&b), Conv2dSpec::same(3, 3))?;
                    t.sum_all(&y)
                }),
            ),
            (
                "conv2d_depthwise_strided",
                vec![
                    rand_tensor(vec![1, 4, 6, 6], &mut rng),
                    rand_tensor(vec![4, 1, 3, 3], &mut rng),
                ],
                Box::new(|leaf, t| {
                    let x = leaf(&Tensor::scalar(0.));
                    let w = leaf(&Tensor::scalar(0.));
                    let spec = Conv2dSpec { stride: (2, 2), padding: (1, 1), groups: 4 };
                    let y = t.conv2d(&x, &w, None, spec)?;
                    t.sum_all(&y)
                }),
            ),
            (
                "batch_norm_eval",
                vec![
                    x44.clone(),
                    rand_tensor(vec![2], &mut rng),
                    rand_tensor(vec![2], &mut rng),
                ],
                Box::new(|leaf, t| {
                    let x = leaf(&Tensor::scalar(0.));
                    let g = leaf(&Tensor::scalar(0.));
                    let b = leaf(&Tensor::scalar(0.));
                    let mean = Tensor::new(vec![2], vec![0.1, -0.2]).unwrap();
                    let var = Tensor::new(vec![2], vec![0.9, 1.3]).unwrap();
                    let y = t.batch_norm_eval(&x, &g, &b, &mean, &var, 1e-5)?;
                    t.sum_all(&t.mul(&y, &y)?)
                }),
            ),
            (
                "batch_norm_train",
                vec![
                    rand_tensor(vec![2, 2, 3, 3], &mut rng),
                    rand_tensor(vec![2], &mut rng),
                    rand_tensor(vec![2], &mut rng),
                ],
                Box::new(|leaf, t| {
                    let x = leaf(&Tensor::scalar(0.));
                    let g = leaf(&Tensor::scalar(0.));
                    let b = leaf(&Tensor::scalar(0.));
                    // Weight the output by a fixed non-uniform tensor: for a
                    // quadratic loss in the normalized activations, the exact
                    // input gradient collapses to O(eps) and finite
                    // differences cannot resolve it.
                    let mut wr = StdRng::seed_from_u64(77);
                    let wt = rand_tensor(vec![2, 2, 3, 3], &mut wr);
                    let y = t.batch_norm_train(&x, &g, &b, 1e-5)?.0;
                    let w = t.constant(wt)?;
                    t.sum_all(&t.mul(&y, &w)?)
                }),
            ),
            (
                "layer_norm",
                vec![
                    rand_tensor(vec![3, 5], &mut rng),
                    rand_tensor(vec![5], &mut rng),
                    rand_tensor(vec![5], &mut rng),
                ],
                Box::new(|leaf, t| {
                    let x = leaf(&Tensor::scalar(0.));
                    let g = leaf(&Tensor::scalar(0.));
                    let b = leaf(&Tensor::scalar(0.));
                    let y = t.layer_norm(&x, &g, &b, 1e-5)?;
                    t.sum_all(&t.mul(&y, &y)?)
                }),
            ),
            (
                "softmax",
                vec![rand_tensor(vec![3, 4], &mut rng)],
                Box::new(|leaf, t| {
                    let x = leaf(&Tensor::scalar(0.));
                    let y = t.softmax_last(&x)?;
                    t.sum_all(&t.mul(&y, &y)?)
                }),
            ),
            (
                "max_pool2",
                vec![x44.clone()],
                Box::new(|leaf, t| {
                    let x = leaf(&Tensor::scalar(0.));
                    t.sum_all(&t.max_pool2(&x)?)
                }),
            ),
            (
                "bilinear_resize",
                vec![x44.clone()],
                Box::new(|leaf, t| {
                    let x = leaf(&Tensor::scalar(0.));
                    let y = t.bilinear_resize(&x, 7, 3)?;
                    t.sum_all(&t.mul(&y, &y)?)
                }),
            ),
            (
                "global_avg_pool_mul_channel",
                vec![x44.clone()],
                Box::new(|leaf, t| {
                    let x = leaf(&Tensor::scalar(0.));
                    let s = t.global_avg_pool(&x)?;
                    let y = t.mul_channel(&x, &s)?;
                    t.sum_all(&y)
                }),
            ),
            (
                "add_row",
                vec![rand_tensor(vec![3, 4], &mut rng), rand_tensor(vec![4], &mut rng)],
                Box::new(|leaf, t| {
                    let (x, b) = (leaf(&Tensor::scalar(0.)), leaf(&Tensor::scalar(0.)));
                    let y = t.add_row(&x, &b)?;
                    t.sum_all(&t.mul(&y, &y)?)
                }),
            ),
            (
                "wce_loss",
                vec![rand_tensor(vec![1, 3, 2, 2], &mut rng)],
                Box::new(|leaf, t| {
                    let x = leaf(&Tensor::scalar(0.));
                    let w = Tensor::new(vec![3], vec![0.5, 1.0, 1.5]).unwrap();
                    t.wce_loss(&x, Arc::new(vec![0, 2, 1, 1]), &w)
                }),
            ),
        ];
        for (name, inputs, build) in cases {
            let report = grad_check(|leaf, t| build(leaf, t), &inputs, eps, None, 7).unwrap();
            assert!(
                report.max_rel_err < tol,
                "primitive {}: max rel err {} over {} coords",
                name,
                report.max_rel_err,
                report.checked
            );
        }
    }

    #[test]
    fn softmax_cross_entropy_grad_is_tight() {
        let mut rng = StdRng::seed_from_u64(99);
        let logits = rand_tensor(vec![1, 4, 3, 3], &mut rng);
        let labels: Vec<u32> = (0..9).map(|_| rng.gen_range(0..4)).collect();
        let report = grad_check(
            move |leaf, t| {
                let x = leaf(&Tensor::scalar(0.));
                let w = Tensor::<f64>::ones(vec![4]).unwrap();
                t.wce_loss(&x, Arc::new(labels.clone()), &w)
            },
            &[logits],
            1e-5,
            None,
            0,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "{:?}", report);
    }

    #[test]
    fn conv2d_grad_check_on_5x5_input() {
        let mut rng = StdRng::seed_from_u64(5);
        let x = rand_tensor(vec![1, 2, 5, 5], &mut rng);
        let w = rand_tensor(vec![2, 2, 3, 3], &mut rng);
        let report = grad_check(
            |leaf, t| {
                let x = leaf(&Tensor::scalar(0.));
                let w = leaf(&Tensor::scalar(0.));
                let y = t.conv2d(&x, &w, None, Conv2dSpec::same(3, 3))?;
                t.sum_all(&t.mul(&y, &y)?)
            },
            &[x, w],
            1e-5,
            None,
            0,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-5, "{:?}", report);
    }
}
