//! Reverse-mode differentiation over an append-only tape.
//!
//! Every operation evaluates eagerly and appends a node holding its value and
//! whatever the backward pass needs. Append order is a topological order, so
//! [`Graph::backward`] simply walks the nodes in reverse.

use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;

use crate::error::{invalid, Result, TensorError};
use crate::ops::{self, Activation, BinaryOp, BnCache, ConvSpec, Reduce};
use crate::real::Real;
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for an operation defined outside this crate.
pub trait CustomOp<T: Real> {
    fn name(&self) -> &'static str;

    /// Gradient for each input (in order), or `None` where not needed.
    fn backward(&self, inputs: &[&Tensor<T>], output: &Tensor<T>, grad_out: &Tensor<T>) -> Vec<Option<Tensor<T>>>;
}

enum Op<T: Real> {
    Leaf,
    Binary(BinaryOp, Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Unary(Activation, Var),
    Conv { x: Var, w: Var, b: Option<Var>, spec: ConvSpec },
    BatchNorm { x: Var, gamma: Var, beta: Var, cache: BnCache<T>, train: bool },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T> },
    PixelShuffle(Var, usize),
    Bilinear(Var, usize),
    Reduce { x: Var, kind: Reduce, argmax: Vec<usize> },
    Concat { inputs: Vec<Var>, axis: usize },
    Linear { x: Var, w: Var, b: Option<Var> },
    MatMul(Var, Var),
    Softmax(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Roll(Var, Vec<isize>),
    Gather { x: Var, index: Rc<Vec<usize>> },
    Sum(Var),
    Custom { inputs: Vec<Var>, op: Box<dyn CustomOp<T>> },
}

impl<T: Real> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Binary(..) => "binary",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Unary(..) => "activation",
            Op::Conv { .. } => "conv2d",
            Op::BatchNorm { .. } => "batch_norm",
            Op::LayerNorm { .. } => "layer_norm",
            Op::PixelShuffle(..) => "pixel_shuffle",
            Op::Bilinear(..) => "bilinear_upsample",
            Op::Reduce { .. } => "reduce",
            Op::Concat { .. } => "concat",
            Op::Linear { .. } => "linear",
            Op::MatMul(..) => "matmul",
            Op::Softmax(..) => "softmax",
            Op::Reshape(..) => "reshape",
            Op::Permute(..) => "permute",
            Op::Roll(..) => "roll",
            Op::Gather { .. } => "gather",
            Op::Sum(..) => "sum",
            Op::Custom { op, .. } => op.name(),
        }
    }
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Tape of recorded operations.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    params: HashMap<String, Var>,
    param_order: Vec<String>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> fmt::Debug for Graph<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Graph").field("nodes", &self.nodes.len()).field("params", &self.param_order.len()).finish()
    }
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(String, Var)>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of a named parameter leaf (see [`Graph::param`]).
    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.iter().find(|(n, _)| n == name).and_then(|(_, v)| self.get(*v))
    }

    /// `(name, gradient)` for every named parameter on the tape that received one.
    pub fn params(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params.iter().filter_map(|(n, v)| self.get(*v).map(|g| (n.as_str(), g)))
    }

    /// Removes and returns every parameter gradient.
    pub fn into_params(mut self) -> Vec<(String, Tensor<T>)> {
        let params = std::mem::take(&mut self.params);
        params.into_iter().filter_map(|(n, v)| self.grads[v.0].take().map(|g| (n, g))).collect()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: HashMap::new(), param_order: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Name of the operation that produced `v`.
    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Differentiable leaf.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Named differentiable leaf. Repeated calls with the same name return
    /// the same node, so a parameter used twice gets one gradient buffer.
    pub fn param(&mut self, name: &str, value: impl FnOnce() -> Tensor<T>) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let v = self.input(value());
        self.params.insert(name.to_string(), v);
        self.param_order.push(name.to_string());
        v
    }

    pub fn param_var(&self, name: &str) -> Option<Var> {
        self.params.get(name).copied()
    }

    pub fn param_names(&self) -> &[String] {
        &self.param_order
    }

    fn binary(&mut self, a: Var, b: Var, op: BinaryOp) -> Result<Var> {
        let value = ops::binary(self.value(a), self.value(b), op)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Binary(op, a, b), rg))
    }

    /// Elementwise sum with same-rank broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryOp::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryOp::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryOp::Mul)
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let value = self.value(x).scale(s);
        let rg = self.rg(&[x]);
        self.push(value, Op::Scale(x, s), rg)
    }

    pub fn add_scalar(&mut self, x: Var, s: T) -> Var {
        let value = self.value(x).map(|v| v + s);
        let rg = self.rg(&[x]);
        self.push(value, Op::AddScalar(x), rg)
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let value = ops::activation(self.value(x), kind);
        let rg = self.rg(&[x]);
        self.push(value, Op::Unary(kind, x), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Relu)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Gelu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Sigmoid)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Exp)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let value = ops::conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), &spec)?;
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        Ok(self.push(value, Op::Conv { x, w, b, spec }, rg))
    }

    /// Batch norm with batch statistics; returns the output and the
    /// per-channel `(mean, biased variance)` used.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<(Var, Vec<T>, Vec<T>)> {
        let (value, cache) = ops::batch_norm_forward(self.value(x), self.value(gamma), self.value(beta), None, eps)?;
        let (mean, var) = (cache.mean.clone(), cache.var.clone());
        let rg = self.rg(&[x, gamma, beta]);
        let v = self.push(value, Op::BatchNorm { x, gamma, beta, cache, train: true }, rg);
        Ok((v, mean, var))
    }

    /// Batch norm with fixed statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &Tensor<T>,
        running_var: &Tensor<T>,
        eps: T,
    ) -> Result<Var> {
        let (value, cache) = ops::batch_norm_forward(
            self.value(x),
            self.value(gamma),
            self.value(beta),
            Some((running_mean, running_var)),
            eps,
        )?;
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(value, Op::BatchNorm { x, gamma, beta, cache, train: false }, rg))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let (value, xhat, inv_std) = ops::layer_norm_forward(self.value(x), self.value(gamma), self.value(beta), eps)?;
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(value, Op::LayerNorm { x, gamma, beta, xhat, inv_std }, rg))
    }

    pub fn pixel_shuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        let value = ops::pixel_shuffle(self.value(x), r)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::PixelShuffle(x, r), rg))
    }

    pub fn bilinear_upsample(&mut self, x: Var, factor: usize) -> Result<Var> {
        let value = ops::bilinear_upsample(self.value(x), factor)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Bilinear(x, factor), rg))
    }

    pub fn reduce(&mut self, x: Var, kind: Reduce) -> Result<Var> {
        let (value, argmax) = ops::reduce_with_argmax(self.value(x), kind)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Reduce { x, kind, argmax }, rg))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let values: Vec<&Tensor<T>> = inputs.iter().map(|&v| self.value(v)).collect();
        let value = ops::concat(&values, axis)?;
        let rg = self.rg(inputs);
        Ok(self.push(value, Op::Concat { inputs: inputs.to_vec(), axis }, rg))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let value = ops::linear(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        Ok(self.push(value, Op::Linear { x, w, b }, rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = ops::matmul(self.value(a), self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let value = ops::softmax_lastdim(self.value(x));
        let rg = self.rg(&[x]);
        self.push(value, Op::Softmax(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape.to_vec())?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let value = ops::permute(self.value(x), perm)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Permute(x, perm.to_vec()), rg))
    }

    pub fn roll(&mut self, x: Var, shifts: &[isize]) -> Result<Var> {
        let value = ops::roll(self.value(x), shifts)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Roll(x, shifts.to_vec()), rg))
    }

    /// `out.flat[i] = x.flat[index[i]]`.
    pub fn gather(&mut self, x: Var, index: Rc<Vec<usize>>, shape: &[usize]) -> Result<Var> {
        let value = ops::gather(self.value(x), &index, shape.to_vec())?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Gather { x, index }, rg))
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push(value, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel();
        let s = self.sum(x);
        self.scale(s, T::one() / T::lit(n as f64))
    }

    /// Records an externally computed operation with its own backward rule.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor<T>, op: Box<dyn CustomOp<T>>) -> Var {
        let rg = self.rg(inputs);
        self.push(value, Op::Custom { inputs: inputs.to_vec(), op }, rg)
    }

    /// Gradients of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(lv.shape().to_vec()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let contributions = self.node_backward(node, &g)?;
            for (v, dv) in contributions {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&dv)?,
                    slot @ None => *slot = Some(dv),
                }
            }
            grads[i] = Some(g);
        }
        let params = self.param_order.iter().map(|n| (n.clone(), self.params[n])).collect();
        Ok(Gradients { grads, params })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn node_backward(&self, node: &Node<T>, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let val = |v: Var| &self.nodes[v.0].value;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Binary(op, a, b) => {
                let (sa, sb) = (val(*a).shape(), val(*b).shape());
                match op {
                    BinaryOp::Add => {
                        out.push((*a, ops::sum_to(g, sa)));
                        out.push((*b, ops::sum_to(g, sb)));
                    }
                    BinaryOp::Sub => {
                        out.push((*a, ops::sum_to(g, sa)));
                        out.push((*b, ops::sum_to(&g.scale(-T::one()), sb)));
                    }
                    BinaryOp::Mul => {
                        if self.needs(*a) {
                            let bb = ops::broadcast_to(val(*b), g.shape());
                            out.push((*a, ops::sum_to(&g.zip_map(&bb, |x, y| x * y)?, sa)));
                        }
                        if self.needs(*b) {
                            let ab = ops::broadcast_to(val(*a), g.shape());
                            out.push((*b, ops::sum_to(&g.zip_map(&ab, |x, y| x * y)?, sb)));
                        }
                    }
                }
            }
            Op::Scale(x, s) => out.push((*x, g.scale(*s))),
            Op::AddScalar(x) => out.push((*x, g.clone())),
            Op::Unary(kind, x) => {
                let xs = val(*x).data();
                let ys = node.value.data();
                let d = g.data().iter().zip(xs.iter().zip(ys)).map(|(&gv, (&xv, &yv))| gv * kind.derivative(xv, yv));
                out.push((*x, Tensor::from_parts(g.shape().to_vec(), d.collect())));
            }
            Op::Conv { x, w, b, spec } => {
                let need = [self.needs(*x), self.needs(*w), b.is_some_and(|b| self.needs(b))];
                let grads = ops::conv2d_backward(val(*x), val(*w), b.is_some(), spec, g, need)?;
                out.extend(grads.input.map(|t| (*x, t)));
                out.extend(grads.weight.map(|t| (*w, t)));
                if let (Some(b), Some(t)) = (b, grads.bias) {
                    out.push((*b, t));
                }
            }
            Op::BatchNorm { x, gamma, beta, cache, train } => {
                let (dx, dg, db) = ops::batch_norm_backward(g, val(*gamma), cache, *train);
                out.push((*x, dx));
                out.push((*gamma, dg));
                out.push((*beta, db));
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let (dx, dg, db) = ops::layer_norm_backward(g, val(*gamma), xhat, inv_std);
                out.push((*x, dx));
                out.push((*gamma, dg));
                out.push((*beta, db));
            }
            Op::PixelShuffle(x, r) => out.push((*x, ops::pixel_unshuffle(g, *r)?)),
            Op::Bilinear(x, f) => {
                let (_, h, w) = val(*x).dims3("bilinear_upsample")?;
                out.push((*x, ops::bilinear_upsample_backward(g, h, w, *f)));
            }
            Op::Reduce { x, kind, argmax } => {
                out.push((*x, ops::reduce_backward(val(*x).shape(), *kind, argmax, g)));
            }
            Op::Concat { inputs, axis } => {
                let sizes: Vec<usize> = inputs.iter().map(|v| val(*v).shape()[*axis]).collect();
                out.extend(inputs.iter().copied().zip(ops::split(g, *axis, &sizes)));
            }
            Op::Linear { x, w, b } => {
                let xv = val(*x);
                let d = *xv.shape().last().unwrap();
                let e = *g.shape().last().unwrap();
                let rows = xv.numel() / d;
                let x2 = xv.clone().reshape(vec![1, rows, d])?;
                let w2 = val(*w).clone().reshape(vec![1, d, e])?;
                let g2 = g.clone().reshape(vec![1, rows, e])?;
                let (dx, dw) = ops::matmul_backward(&x2, &w2, &g2, [self.needs(*x), self.needs(*w)]);
                out.extend(dx.map(|t| (*x, t.reshape(xv.shape().to_vec()).unwrap())));
                out.extend(dw.map(|t| (*w, t.reshape(vec![d, e]).unwrap())));
                if let Some(b) = b {
                    let gb = ops::sum_to(&g2.reshape(vec![rows, e])?, &[1, e]);
                    out.push((*b, gb.reshape(vec![e])?));
                }
            }
            Op::MatMul(a, b) => {
                let (da, db) = ops::matmul_backward(val(*a), val(*b), g, [self.needs(*a), self.needs(*b)]);
                out.extend(da.map(|t| (*a, t)));
                out.extend(db.map(|t| (*b, t)));
            }
            Op::Softmax(x) => out.push((*x, ops::softmax_backward(&node.value, g))),
            Op::Reshape(x) => out.push((*x, g.clone().reshape(val(*x).shape().to_vec())?)),
            Op::Permute(x, perm) => out.push((*x, ops::permute(g, &ops::inverse_permutation(perm))?)),
            Op::Roll(x, shifts) => {
                let back: Vec<isize> = shifts.iter().map(|s| -s).collect();
                out.push((*x, ops::roll(g, &back)?));
            }
            Op::Gather { x, index } => {
                let xv = val(*x);
                let mut d = vec![T::zero(); xv.numel()];
                for (&i, &gv) in index.iter().zip(g.data()) {
                    d[i] += gv;
                }
                out.push((*x, Tensor::from_parts(xv.shape().to_vec(), d)));
            }
            Op::Sum(x) => {
                let gv = g.item();
                out.push((*x, Tensor::full(val(*x).shape().to_vec(), gv)));
            }
            Op::Custom { inputs, op } => {
                let ins: Vec<&Tensor<T>> = inputs.iter().map(|v| val(*v)).collect();
                let gs = op.backward(&ins, &node.value, g);
                if gs.len() != inputs.len() {
                    return Err(invalid(op.name(), "backward returned the wrong number of gradients"));
                }
                for (v, gi) in inputs.iter().zip(gs) {
                    if let Some(gi) = gi {
                        if gi.shape() != val(*v).shape() {
                            return Err(TensorError::ShapeMismatch {
                                op: op.name(),
                                lhs: val(*v).shape().to_vec(),
                                rhs: gi.shape().to_vec(),
                            });
                        }
                        out.push((*v, gi));
                    }
                }
            }
        }
        Ok(out)
    }
}
