//! Tape-based reverse-mode autodiff.
//!
//! Nodes are appended to an arena in creation order, so walking the arena
//! backwards from the loss is a valid reverse topological order. Gradient
//! accumulation into each node follows that fixed order.

use std::borrow::Cow;
use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};

use super::kernels::{self, AttnDims, Exec};
use super::{Float, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    MatMul { a: usize, b: usize, m: usize, k: usize, n: usize },
    Transpose { a: usize, rows: usize, cols: usize },
    Add { a: usize, b: usize },
    AddBias { x: usize, bias: usize },
    Mul { a: usize, b: usize },
    Scale { a: usize, factor: T },
    Gelu { a: usize },
    LayerNorm { x: usize, gain: usize, bias: usize, mean: Vec<T>, rstd: Vec<T> },
    Embedding { table: usize, ids: Vec<u32> },
    Attention { q: usize, k: usize, v: usize, dims: AttnDims, probs: Vec<T> },
    SliceCols { a: usize, start: usize, cols: usize },
    CrossEntropy { logits: usize, targets: Vec<u32>, probs: Vec<T> },
    Sum { a: usize },
    SampleMse { a: usize, b: usize, samples: usize },
}

struct Node<'a, T: Float> {
    shape: Vec<usize>,
    value: Cow<'a, [T]>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
    op: Op<T>,
}

/// A single forward/backward computation.
///
/// Parameters are registered by reference with [`Graph::param`]; registering
/// the same tensor twice yields the same node, so tied weights accumulate one
/// gradient.
pub struct Graph<'a, T: Float> {
    nodes: RefCell<Vec<Node<'a, T>>>,
    params: RefCell<HashMap<usize, usize>>,
    exec: Exec,
}

impl<T: Float> Default for Graph<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

fn last_dim(shape: &[usize]) -> usize {
    *shape.last().unwrap_or(&1)
}

fn add_into<T: Float>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl<'a, T: Float> Graph<'a, T> {
    pub fn new() -> Self {
        Self::with_exec(Exec::default())
    }

    pub fn with_exec(exec: Exec) -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            params: RefCell::new(HashMap::new()),
            exec,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, shape: Vec<usize>, value: Cow<'a, [T]>, requires_grad: bool, op: Op<T>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            value,
            requires_grad,
            grad: None,
            op,
        });
        Var(nodes.len() - 1)
    }

    /// Registers a model parameter without copying it.
    pub fn param(&self, t: &'a Tensor<T>) -> Var {
        let key = t as *const Tensor<T> as usize;
        if let Some(&id) = self.params.borrow().get(&key) {
            return Var(id);
        }
        let v = self.push(
            t.shape().to_vec(),
            Cow::Borrowed(t.data()),
            t.requires_grad(),
            Op::Leaf,
        );
        self.params.borrow_mut().insert(key, v.0);
        v
    }

    /// Adds an owned leaf; it requires grad iff the tensor is flagged so.
    pub fn input(&self, t: Tensor<T>) -> Var {
        let rg = t.requires_grad();
        let shape = t.shape().to_vec();
        self.push(shape, Cow::Owned(t.into_data()), rg, Op::Leaf)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].shape.clone()
    }

    pub fn value(&self, v: Var) -> Tensor<T> {
        let nodes = self.nodes.borrow();
        let n = &nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.to_vec()).expect("node shape is consistent")
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let nodes = self.nodes.borrow();
        let n = &nodes[v.0];
        n.grad
            .as_ref()
            .map(|g| Tensor::new(n.shape.clone(), g.clone()).expect("grad shape matches node"))
    }

    /// Gradient of a registered parameter, if it received one.
    pub fn param_grad(&self, t: &Tensor<T>) -> Option<Tensor<T>> {
        let key = t as *const Tensor<T> as usize;
        let id = *self.params.borrow().get(&key)?;
        self.grad(Var(id))
    }

    pub fn zero_grad(&self) {
        for n in self.nodes.borrow_mut().iter_mut() {
            n.grad = None;
        }
    }

    fn rg(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    /// `[..., k] · [k, n] -> [..., n]`; leading dimensions of `a` are rows.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (value, shape, m, k, n) = {
            let nodes = self.nodes.borrow();
            let (na, nb) = (&nodes[a.0], &nodes[b.0]);
            let k = last_dim(&na.shape);
            if nb.shape.len() != 2 || nb.shape[0] != k {
                return Err(Error::Dimension {
                    op: "matmul",
                    lhs: na.shape.clone(),
                    rhs: nb.shape.clone(),
                });
            }
            let n = nb.shape[1];
            let m = na.value.len() / k;
            let mut shape = na.shape.clone();
            *shape.last_mut().unwrap() = n;
            (kernels::matmul_with(self.exec, &na.value, &nb.value, m, k, n), shape, m, k, n)
        };
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(shape, Cow::Owned(value), rg, Op::MatMul { a: a.0, b: b.0, m, k, n }))
    }

    pub fn transpose(&self, a: Var) -> Result<Var> {
        let (value, rows, cols) = {
            let nodes = self.nodes.borrow();
            let na = &nodes[a.0];
            if na.shape.len() != 2 {
                return Err(Error::contract(format!("transpose needs a matrix, got {:?}", na.shape)));
            }
            let (rows, cols) = (na.shape[0], na.shape[1]);
            (kernels::transpose(&na.value, rows, cols), rows, cols)
        };
        let rg = self.rg(&[a.0]);
        Ok(self.push(vec![cols, rows], Cow::Owned(value), rg, Op::Transpose { a: a.0, rows, cols }))
    }

    fn binary(&self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<(Vec<T>, Vec<usize>)> {
        let nodes = self.nodes.borrow();
        let (na, nb) = (&nodes[a.0], &nodes[b.0]);
        if na.shape != nb.shape {
            return Err(Error::Dimension {
                op,
                lhs: na.shape.clone(),
                rhs: nb.shape.clone(),
            });
        }
        let v = na.value.iter().zip(nb.value.iter()).map(|(&x, &y)| f(x, y)).collect();
        Ok((v, na.shape.clone()))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let (v, shape) = self.binary("add", a, b, |x, y| x + y)?;
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(shape, Cow::Owned(v), rg, Op::Add { a: a.0, b: b.0 }))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let (v, shape) = self.binary("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(shape, Cow::Owned(v), rg, Op::Mul { a: a.0, b: b.0 }))
    }

    /// Adds a `[n]` vector to every row of `[..., n]`.
    pub fn add_bias(&self, x: Var, bias: Var) -> Result<Var> {
        let (v, shape) = {
            let nodes = self.nodes.borrow();
            let (nx, nb) = (&nodes[x.0], &nodes[bias.0]);
            let n = last_dim(&nx.shape);
            if nb.value.len() != n || nb.shape.len() != 1 {
                return Err(Error::Dimension {
                    op: "add_bias",
                    lhs: nx.shape.clone(),
                    rhs: nb.shape.clone(),
                });
            }
            let mut v = nx.value.to_vec();
            for row in v.chunks_mut(n) {
                add_into(row, &nb.value);
            }
            (v, nx.shape.clone())
        };
        let rg = self.rg(&[x.0, bias.0]);
        Ok(self.push(shape, Cow::Owned(v), rg, Op::AddBias { x: x.0, bias: bias.0 }))
    }

    pub fn scale(&self, a: Var, factor: T) -> Var {
        let (v, shape) = {
            let nodes = self.nodes.borrow();
            let na = &nodes[a.0];
            (na.value.iter().map(|&x| x * factor).collect::<Vec<_>>(), na.shape.clone())
        };
        let rg = self.rg(&[a.0]);
        self.push(shape, Cow::Owned(v), rg, Op::Scale { a: a.0, factor })
    }

    pub fn gelu(&self, a: Var) -> Var {
        let (v, shape) = {
            let nodes = self.nodes.borrow();
            let na = &nodes[a.0];
            (na.value.iter().map(|&x| kernels::gelu(x)).collect::<Vec<_>>(), na.shape.clone())
        };
        let rg = self.rg(&[a.0]);
        self.push(shape, Cow::Owned(v), rg, Op::Gelu { a: a.0 })
    }

    pub fn layer_norm(&self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if !(eps >= 0.0) {
            return Err(Error::contract(format!("layer norm eps must be non-negative, got {eps}")));
        }
        let (y, mean, rstd, shape) = {
            let nodes = self.nodes.borrow();
            let (nx, ng, nb) = (&nodes[x.0], &nodes[gain.0], &nodes[bias.0]);
            let d = last_dim(&nx.shape);
            if ng.value.len() != d || nb.value.len() != d {
                return Err(Error::Dimension {
                    op: "layer_norm",
                    lhs: nx.shape.clone(),
                    rhs: ng.shape.clone(),
                });
            }
            let (y, mean, rstd) = kernels::layer_norm(&nx.value, &ng.value, &nb.value, d, T::of(eps));
            (y, mean, rstd, nx.shape.clone())
        };
        let rg = self.rg(&[x.0, gain.0, bias.0]);
        Ok(self.push(
            shape,
            Cow::Owned(y),
            rg,
            Op::LayerNorm {
                x: x.0,
                gain: gain.0,
                bias: bias.0,
                mean,
                rstd,
            },
        ))
    }

    /// Row gather from a `[vocab × d]` table.
    pub fn embedding(&self, table: Var, ids: &[u32]) -> Result<Var> {
        let (v, d) = {
            let nodes = self.nodes.borrow();
            let nt = &nodes[table.0];
            if nt.shape.len() != 2 {
                return Err(Error::contract("embedding table must be a matrix"));
            }
            let (vocab, d) = (nt.shape[0], nt.shape[1]);
            let mut v = Vec::with_capacity(ids.len() * d);
            for &id in ids {
                let id = id as usize;
                if id >= vocab {
                    return Err(Error::Index {
                        what: "embedding id",
                        index: id,
                        bound: vocab,
                    });
                }
                v.extend_from_slice(&nt.value[id * d..(id + 1) * d]);
            }
            (v, d)
        };
        let rg = self.rg(&[table.0]);
        Ok(self.push(
            vec![ids.len(), d],
            Cow::Owned(v),
            rg,
            Op::Embedding {
                table: table.0,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Causal multi-head self-attention over `[batch·seq × d]` inputs.
    pub fn attention(&self, q: Var, k: Var, v: Var, batch: usize, seq: usize, heads: usize) -> Result<Var> {
        let (out, probs, dims, shape) = {
            let nodes = self.nodes.borrow();
            let (nq, nk, nv) = (&nodes[q.0], &nodes[k.0], &nodes[v.0]);
            if nq.shape != nk.shape || nq.shape != nv.shape {
                return Err(Error::Dimension {
                    op: "attention",
                    lhs: nq.shape.clone(),
                    rhs: nk.shape.clone(),
                });
            }
            let d = last_dim(&nq.shape);
            if heads == 0 || d % heads != 0 || nq.value.len() != batch * seq * d {
                return Err(Error::Dimension {
                    op: "attention",
                    lhs: nq.shape.clone(),
                    rhs: vec![batch, seq, heads],
                });
            }
            let dims = AttnDims { batch, seq, heads, d };
            let (out, probs) = kernels::attention(self.exec, &nq.value, &nk.value, &nv.value, dims);
            (out, probs, dims, nq.shape.clone())
        };
        let rg = self.rg(&[q.0, k.0, v.0]);
        Ok(self.push(
            shape,
            Cow::Owned(out),
            rg,
            Op::Attention {
                q: q.0,
                k: k.0,
                v: v.0,
                dims,
                probs,
            },
        ))
    }

    /// Columns `start..start+width` of a `[rows × cols]` matrix.
    pub fn slice_cols(&self, a: Var, start: usize, width: usize) -> Result<Var> {
        let (v, rows, cols) = {
            let nodes = self.nodes.borrow();
            let na = &nodes[a.0];
            let cols = last_dim(&na.shape);
            if start + width > cols || width == 0 {
                return Err(Error::Index {
                    what: "column slice end",
                    index: start + width,
                    bound: cols,
                });
            }
            let rows = na.value.len() / cols;
            let mut v = Vec::with_capacity(rows * width);
            for r in 0..rows {
                v.extend_from_slice(&na.value[r * cols + start..r * cols + start + width]);
            }
            (v, rows, cols)
        };
        let rg = self.rg(&[a.0]);
        Ok(self.push(vec![rows, width], Cow::Owned(v), rg, Op::SliceCols { a: a.0, start, cols }))
    }

    /// Mean negative log-likelihood of `targets` under row-softmax of `logits`.
    pub fn cross_entropy(&self, logits: Var, targets: &[u32]) -> Result<Var> {
        let (loss, probs) = {
            let nodes = self.nodes.borrow();
            let nl = &nodes[logits.0];
            let vocab = last_dim(&nl.shape);
            let rows = nl.value.len() / vocab;
            if rows != targets.len() {
                return Err(Error::Dimension {
                    op: "cross_entropy",
                    lhs: nl.shape.clone(),
                    rhs: vec![targets.len()],
                });
            }
            if let Some(&bad) = targets.iter().find(|&&t| t as usize >= vocab) {
                return Err(Error::Index {
                    what: "target id",
                    index: bad as usize,
                    bound: vocab,
                });
            }
            let (nll, probs) = kernels::softmax_xent(&nl.value, targets, vocab);
            let mut total = 0.0f64;
            for l in &nll {
                total += l;
            }
            (T::of(total / rows as f64), probs)
        };
        let rg = self.rg(&[logits.0]);
        Ok(self.push(
            vec![1],
            Cow::Owned(vec![loss]),
            rg,
            Op::CrossEntropy {
                logits: logits.0,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    pub fn sum(&self, a: Var) -> Var {
        let s = {
            let nodes = self.nodes.borrow();
            let mut s = T::zero();
            for &v in nodes[a.0].value.iter() {
                s += v;
            }
            s
        };
        let rg = self.rg(&[a.0]);
        self.push(vec![1], Cow::Owned(vec![s]), rg, Op::Sum { a: a.0 })
    }

    /// `(1/N) Σ_i ‖a_i − b_i‖²` where `i` ranges over the leading dimension.
    pub fn sample_mse(&self, a: Var, b: Var) -> Result<Var> {
        let (loss, samples) = {
            let nodes = self.nodes.borrow();
            let (na, nb) = (&nodes[a.0], &nodes[b.0]);
            if na.shape != nb.shape {
                return Err(Error::Dimension {
                    op: "sample_mse",
                    lhs: na.shape.clone(),
                    rhs: nb.shape.clone(),
                });
            }
            let samples = na.shape[0];
            let mut s = T::zero();
            for (&x, &y) in na.value.iter().zip(nb.value.iter()) {
                s += (x - y) * (x - y);
            }
            (s / T::of(samples as f64), samples)
        };
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(vec![1], Cow::Owned(vec![loss]), rg, Op::SampleMse { a: a.0, b: b.0, samples }))
    }

    /// Reshapes without copying semantics (a fresh node with the same data).
    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = {
            let nodes = self.nodes.borrow();
            let na = &nodes[a.0];
            if shape.iter().product::<usize>() != na.value.len() {
                return Err(Error::Dimension {
                    op: "reshape",
                    lhs: na.shape.clone(),
                    rhs: shape.to_vec(),
                });
            }
            na.value.to_vec()
        };
        let rg = self.rg(&[a.0]);
        // Identity op: reuse Scale by one so backward is a copy.
        Ok(self.push(shape.to_vec(), Cow::Owned(v), rg, Op::Scale { a: a.0, factor: T::one() }))
    }

    /// Populates gradients of every requires-grad node reachable from `loss`.
    /// Repeated calls accumulate.
    pub fn backward(&self, loss: Var) -> Result<()> {
        let mut nodes = self.nodes.borrow_mut();
        if nodes[loss.0].value.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.0].shape
            )));
        }
        if !nodes[loss.0].requires_grad {
            return Err(Error::contract("loss does not depend on any trainable tensor"));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            let Some(gout) = grads[id].take() else {
                continue;
            };
            let node = &nodes[id];
            let mut contrib: Vec<(usize, Vec<T>)> = Vec::new();
            let want = |p: usize| nodes[p].requires_grad;
            match &node.op {
                Op::Leaf => {}
                &Op::MatMul { a, b, m, k, n } => {
                    if want(a) {
                        let bt = kernels::transpose(&nodes[b].value, k, n);
                        contrib.push((a, kernels::matmul_with(self.exec, &gout, &bt, m, n, k)));
                    }
                    if want(b) {
                        let at = kernels::transpose(&nodes[a].value, m, k);
                        contrib.push((b, kernels::matmul_with(self.exec, &at, &gout, k, m, n)));
                    }
                }
                &Op::Transpose { a, rows, cols } => {
                    contrib.push((a, kernels::transpose(&gout, cols, rows)));
                }
                &Op::Add { a, b } => {
                    if want(a) {
                        contrib.push((a, gout.clone()));
                    }
                    if want(b) {
                        contrib.push((b, gout.clone()));
                    }
                }
                &Op::AddBias { x, bias } => {
                    if want(bias) {
                        let n = nodes[bias].value.len();
                        let mut gb = vec![T::zero(); n];
                        for row in gout.chunks(n) {
                            add_into(&mut gb, row);
                        }
                        contrib.push((bias, gb));
                    }
                    if want(x) {
                        contrib.push((x, gout.clone()));
                    }
                }
                &Op::Mul { a, b } => {
                    if want(a) {
                        let g = gout.iter().zip(nodes[b].value.iter()).map(|(&g, &y)| g * y).collect();
                        contrib.push((a, g));
                    }
                    if want(b) {
                        let g = gout.iter().zip(nodes[a].value.iter()).map(|(&g, &x)| g * x).collect();
                        contrib.push((b, g));
                    }
                }
                &Op::Scale { a, factor } => {
                    contrib.push((a, gout.iter().map(|&g| g * factor).collect()));
                }
                &Op::Gelu { a } => {
                    let g = gout
                        .iter()
                        .zip(nodes[a].value.iter())
                        .map(|(&g, &x)| g * kernels::gelu_grad(x))
                        .collect();
                    contrib.push((a, g));
                }
                Op::LayerNorm { x, gain, bias, mean, rstd } => {
                    let d = nodes[*gain].value.len();
                    let (dx, dg, db) =
                        kernels::layer_norm_backward(&nodes[*x].value, &nodes[*gain].value, mean, rstd, &gout, d);
                    if want(*x) {
                        contrib.push((*x, dx));
                    }
                    if want(*gain) {
                        contrib.push((*gain, dg));
                    }
                    if want(*bias) {
                        contrib.push((*bias, db));
                    }
                }
                Op::Embedding { table, ids } => {
                    let t = &nodes[*table];
                    let d = t.shape[1];
                    let mut gt = vec![T::zero(); t.value.len()];
                    for (r, &id) in ids.iter().enumerate() {
                        let id = id as usize;
                        add_into(&mut gt[id * d..(id + 1) * d], &gout[r * d..(r + 1) * d]);
                    }
                    contrib.push((*table, gt));
                }
                Op::Attention { q, k, v, dims, probs } => {
                    let (dq, dk, dv) = kernels::attention_backward(
                        self.exec,
                        &nodes[*q].value,
                        &nodes[*k].value,
                        &nodes[*v].value,
                        probs,
                        &gout,
                        *dims,
                    );
                    for (p, g) in [(*q, dq), (*k, dk), (*v, dv)] {
                        if want(p) {
                            contrib.push((p, g));
                        }
                    }
                }
                &Op::SliceCols { a, start, cols } => {
                    let width = last_dim(&node.shape);
                    let rows = gout.len() / width;
                    let mut ga = vec![T::zero(); rows * cols];
                    for r in 0..rows {
                        ga[r * cols + start..r * cols + start + width]
                            .copy_from_slice(&gout[r * width..(r + 1) * width]);
                    }
                    contrib.push((a, ga));
                }
                Op::CrossEntropy { logits, targets, probs } => {
                    let vocab = last_dim(&nodes[*logits].shape);
                    let scale = gout[0] / T::of(targets.len() as f64);
                    let mut g = probs.clone();
                    for (r, &t) in targets.iter().enumerate() {
                        g[r * vocab + t as usize] -= T::one();
                    }
                    for x in g.iter_mut() {
                        *x *= scale;
                    }
                    contrib.push((*logits, g));
                }
                &Op::Sum { a } => {
                    contrib.push((a, vec![gout[0]; nodes[a].value.len()]));
                }
                &Op::SampleMse { a, b, samples } => {
                    let c = gout[0] * T::of(2.0 / samples as f64);
                    let diff: Vec<T> = nodes[a]
                        .value
                        .iter()
                        .zip(nodes[b].value.iter())
                        .map(|(&x, &y)| (x - y) * c)
                        .collect();
                    if want(b) {
                        contrib.push((b, diff.iter().map(|&x| -x).collect()));
                    }
                    if want(a) {
                        contrib.push((a, diff));
                    }
                }
            }
            // Persist this node's gradient (accumulating across backward calls).
            let node = &mut nodes[id];
            match &mut node.grad {
                Some(g) => add_into(g, &gout),
                slot @ None => *slot = Some(gout),
            }
            for (p, g) in contrib {
                if !nodes[p].requires_grad {
                    continue;
                }
                match &mut grads[p] {
                    Some(acc) => add_into(acc, &g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(())
    }
}

/// Gradients keyed by parameter name, detached from any graph.
#[derive(Clone, Debug, Default)]
pub struct Gradients<T> {
    pub by_name: BTreeMap<String, Tensor<T>>,
}

impl<T: Float> Gradients<T> {
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.by_name.get(name)
    }

    pub fn len(&self) -> usize {
        self.by_name.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_name.is_empty()
    }

    /// Collects gradients for every trainable tensor in `params` from `graph`.
    pub fn collect<'t>(graph: &Graph<'_, T>, params: impl IntoIterator<Item = (String, &'t Tensor<T>)>) -> Self {
        let mut by_name = BTreeMap::new();
        for (name, t) in params {
            if !t.requires_grad() {
                continue;
            }
            if let Some(g) = graph.param_grad(t) {
                by_name.insert(name, g);
            }
        }
        Self { by_name }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{check_fn, GradCheckConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        t(shape, &v).with_requires_grad(true)
    }

    fn cfg(seed: u64) -> GradCheckConfig {
        GradCheckConfig {
            seed,
            ..GradCheckConfig::default()
        }
    }

    #[test]
    fn matmul_identity_and_hand_product() {
        let g = Graph::<f64>::new();
        let i2 = g.input(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let a = g.input(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        assert_eq!(g.value(g.matmul(i2, a).unwrap()).to_f64_vec(), vec![1.0, 2.0, 3.0, 4.0]);
        let b = g.input(t(&[2, 1], &[5.0, 6.0]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.shape(c), vec![2, 1]);
        assert_eq!(g.value(c).to_f64_vec(), vec![17.0, 39.0]);
    }

    #[test]
    fn matmul_shape_mismatch_reports_both_shapes() {
        let g = Graph::<f64>::new();
        let a = g.input(Tensor::zeros(&[2, 3]));
        let b = g.input(Tensor::zeros(&[2, 3]));
        match g.matmul(a, b) {
            Err(Error::Dimension { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("expected dimension error, got {other:?}"),
        }
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_t(&mut rng, &[3, 3]);
        let b = rand_t(&mut rng, &[3, 3]).with_requires_grad(false);
        let r = check_fn(&[a, b], |g, v| Ok(g.sum(g.matmul(v[0], v[1])?)), cfg(1)).unwrap();
        assert!(r.passes(1e-4), "{r:?}");
    }

    #[test]
    fn layer_norm_examples() {
        let g = Graph::<f64>::new();
        let gain = g.input(Tensor::ones(&[4]));
        let bias = g.input(Tensor::zeros(&[4]));
        let x = g.input(t(&[1, 4], &[1.0, 1.0, 1.0, 1.0]));
        let y = g.layer_norm(x, gain, bias, 1e-5).unwrap();
        assert_eq!(g.value(y).to_f64_vec(), vec![0.0; 4]);

        let gain = g.input(Tensor::ones(&[2]));
        let bias = g.input(Tensor::zeros(&[2]));
        let x = g.input(t(&[1, 2], &[1.0, 3.0]));
        let y = g.layer_norm(x, gain, bias, 0.0).unwrap();
        assert_eq!(g.value(y).to_f64_vec(), vec![-1.0, 1.0]);

        let wrong = g.input(Tensor::ones(&[3]));
        assert!(matches!(g.layer_norm(x, wrong, bias, 1e-5), Err(Error::Dimension { .. })));
    }

    #[test]
    fn layer_norm_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_t(&mut rng, &[2, 8]);
        let gain = rand_t(&mut rng, &[8]);
        let bias = rand_t(&mut rng, &[8]);
        let w = rand_t(&mut rng, &[2, 8]).with_requires_grad(false);
        let r = check_fn(
            &[x, gain, bias, w],
            |g, v| {
                let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
                Ok(g.sum(g.mul(y, v[3])?))
            },
            cfg(2),
        )
        .unwrap();
        assert!(r.passes(1e-4), "{r:?}");
    }

    #[test]
    fn cross_entropy_examples() {
        let g = Graph::<f64>::new();
        let uniform = g.input(Tensor::zeros(&[1, 4]));
        let l = g.cross_entropy(uniform, &[3]).unwrap();
        assert!((g.value(l).data()[0] - 4f64.ln()).abs() < 1e-12);

        let z = g.input(t(&[1, 2], &[10.0, -10.0]));
        let l = g.value(g.cross_entropy(z, &[0]).unwrap()).data()[0];
        let expected = (1.0 + (-20f64).exp()).ln();
        assert!((l - expected).abs() < 1e-18);
        assert!((l - 2.06e-9).abs() < 1e-11);

        assert!(matches!(g.cross_entropy(z, &[2]), Err(Error::Index { index: 2, bound: 2, .. })));
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_onehot() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z = rand_t(&mut rng, &[2, 5]);
        let r = check_fn(&[z.clone()], |g, v| g.cross_entropy(v[0], &[1, 4]), cfg(3)).unwrap();
        assert!(r.passes(1e-4), "{r:?}");

        let g = Graph::new();
        let v = g.param(&z);
        let loss = g.cross_entropy(v, &[1, 4]).unwrap();
        g.backward(loss).unwrap();
        let grad = g.grad(v).unwrap();
        for r in 0..2 {
            let row = &z.data()[r * 5..(r + 1) * 5];
            let total: f64 = row.iter().map(|x| x.exp()).sum();
            for c in 0..5 {
                let onehot = if c == [1, 4][r] { 1.0 } else { 0.0 };
                let want = (row[c].exp() / total - onehot) / 2.0;
                assert!((grad.data()[r * 5 + c] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn backward_examples() {
        let x = t(&[3], &[1.0, 2.0, 3.0]).with_requires_grad(true);
        let g = Graph::new();
        let v = g.param(&x);
        g.backward(g.sum(v)).unwrap();
        assert_eq!(g.grad(v).unwrap().to_f64_vec(), vec![1.0; 3]);

        let g = Graph::new();
        let v = g.param(&x);
        let loss = g.sum(g.mul(v, v).unwrap());
        g.backward(loss).unwrap();
        assert_eq!(g.grad(v).unwrap().to_f64_vec(), vec![2.0, 4.0, 6.0]);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(v).unwrap().to_f64_vec(), vec![4.0, 8.0, 12.0]);
        g.zero_grad();
        assert!(g.grad(v).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let x = t(&[3], &[1.0, 2.0, 3.0]).with_requires_grad(true);
        let g = Graph::new();
        let v = g.param(&x);
        assert!(matches!(g.backward(v), Err(Error::Contract(_))));
    }

    #[test]
    fn frozen_leaves_receive_no_gradient() {
        let w = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let x = t(&[1, 2], &[1.0, 1.0]).with_requires_grad(true);
        let g = Graph::new();
        let (wv, xv) = (g.param(&w), g.param(&x));
        g.backward(g.sum(g.matmul(xv, wv).unwrap())).unwrap();
        assert!(g.grad(wv).is_none());
        assert_eq!(g.grad(xv).unwrap().to_f64_vec(), vec![3.0, 7.0]);
    }

    #[test]
    fn tied_parameter_registers_once() {
        let w = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]).with_requires_grad(true);
        let g = Graph::new();
        let a = g.param(&w);
        let b = g.param(&w);
        assert_eq!(a, b);
        let loss = g.sum(g.add(a, b).unwrap());
        g.backward(loss).unwrap();
        assert_eq!(g.param_grad(&w).unwrap().to_f64_vec(), vec![2.0; 4]);
    }

    #[test]
    fn remaining_primitives_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_t(&mut rng, &[3, 4]);
        let bias = rand_t(&mut rng, &[4]);
        let w = rand_t(&mut rng, &[3, 4]).with_requires_grad(false);
        let weighted = |g: &Graph<'_, f64>, y: Var, w: Var| -> Result<Var> { Ok(g.sum(g.mul(y, w)?)) };

        let r = check_fn(&[x.clone(), bias.clone(), w.clone()], |g, v| weighted(g, g.add_bias(v[0], v[1])?, v[2]), cfg(5)).unwrap();
        assert!(r.passes(1e-4), "add_bias {r:?}");
        let r = check_fn(&[x.clone(), w.clone()], |g, v| weighted(g, g.gelu(v[0]), v[1]), cfg(6)).unwrap();
        assert!(r.passes(1e-4), "gelu {r:?}");
        let r = check_fn(&[x.clone(), w.clone()], |g, v| weighted(g, g.scale(v[0], 0.7), v[1]), cfg(7)).unwrap();
        assert!(r.passes(1e-4), "scale {r:?}");
        let wt = rand_t(&mut rng, &[4, 3]).with_requires_grad(false);
        let r = check_fn(&[x.clone(), wt], |g, v| weighted(g, g.transpose(v[0])?, v[1]), cfg(8)).unwrap();
        assert!(r.passes(1e-4), "transpose {r:?}");
        let ws = rand_t(&mut rng, &[3, 2]).with_requires_grad(false);
        let r = check_fn(&[x.clone(), ws], |g, v| weighted(g, g.slice_cols(v[0], 1, 2)?, v[1]), cfg(9)).unwrap();
        assert!(r.passes(1e-4), "slice {r:?}");
        let table = rand_t(&mut rng, &[5, 3]);
        let we = rand_t(&mut rng, &[4, 3]).with_requires_grad(false);
        let r = check_fn(&[table, we], |g, v| weighted(g, g.embedding(v[0], &[4, 0, 4, 2])?, v[1]), cfg(10)).unwrap();
        assert!(r.passes(1e-4), "embedding {r:?}");
        let y = rand_t(&mut rng, &[3, 4]);
        let r = check_fn(&[x.clone(), y], |g, v| g.sample_mse(v[0], v[1]), cfg(11)).unwrap();
        assert!(r.passes(1e-4), "mse {r:?}");
    }

    #[test]
    fn attention_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let (batch, seq, d) = (2, 3, 4);
        let q = rand_t(&mut rng, &[batch * seq, d]);
        let k = rand_t(&mut rng, &[batch * seq, d]);
        let v = rand_t(&mut rng, &[batch * seq, d]);
        let w = rand_t(&mut rng, &[batch * seq, d]).with_requires_grad(false);
        let r = check_fn(
            &[q, k, v, w],
            |g, x| {
                let a = g.attention(x[0], x[1], x[2], batch, seq, 2)?;
                Ok(g.sum(g.mul(a, x[3])?))
            },
            cfg(13),
        )
        .unwrap();
        assert!(r.passes(1e-4), "{r:?}");
    }

    #[test]
    fn attention_is_causal() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let q = rand_t(&mut rng, &[4, 2]);
        let k = rand_t(&mut rng, &[4, 2]);
        let v = rand_t(&mut rng, &[4, 2]);
        let run = |k: &Tensor<f64>, v: &Tensor<f64>| {
            let g = Graph::new();
            let out = g.attention(g.param(&q), g.param(k), g.param(v), 1, 4, 1).unwrap();
            g.value(out)
        };
        let base = run(&k, &v);
        let (mut k2, mut v2) = (k.clone(), v.clone());
        k2.data_mut()[6] = 9.0;
        v2.data_mut()[7] = -9.0;
        let changed = run(&k2, &v2);
        assert_eq!(&base.data()[..6], &changed.data()[..6]);
        assert_ne!(&base.data()[6..], &changed.data()[6..]);
    }

    #[test]
    fn sample_mse_examples() {
        let g = Graph::<f64>::new();
        let a = g.input(t(&[1, 2], &[1.0, 2.0]));
        let b = g.input(t(&[1, 2], &[0.0, 0.0]));
        assert_eq!(g.value(g.sample_mse(a, b).unwrap()).data()[0], 5.0);
        let a = g.input(Tensor::ones(&[2, 4]));
        let b = g.input(Tensor::zeros(&[2, 4]));
        assert_eq!(g.value(g.sample_mse(a, b).unwrap()).data()[0], 4.0);
        assert_eq!(g.value(g.sample_mse(a, a).unwrap()).data()[0], 0.0);
        let c = g.input(Tensor::zeros(&[4, 2]));
        assert!(g.sample_mse(a, c).is_err());
    }
}
