//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] is built fresh for every forward pass. Nodes are appended in
//! execution order, so the node vector is already topologically sorted and
//! [`Graph::backward`] simply walks it in reverse. Parameter values are
//! copied into the tape when first referenced; gradients are accumulated
//! back into the [`ParamStore`] for trainable parameters only.
//!
//! All kernels compute each output row independently with a fixed
//! summation order, so the value of a row never depends on which other rows
//! share its batch.

use std::collections::HashMap;

use crate::autodiff::param::{ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation kinds recorded on the tape.
#[derive(Clone, Debug)]
pub enum Op {
    Input,
    Param(ParamId),
    Dense {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    /// `a · bᵀ`
    MatMulT {
        a: Var,
        b: Var,
    },
    Relu(Var),
    Sigmoid(Var),
    Softmax(Var),
    Mul {
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        factor: f64,
    },
    WeightedSum {
        weights: Var,
        inputs: Vec<Var>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    Concat(Vec<Var>),
    Bce {
        pred: Var,
        targets: Vec<f64>,
    },
    Nll {
        probs: Var,
        targets: Vec<usize>,
    },
    GradReverse {
        x: Var,
        lambda: f64,
    },
    Mean(Var),
    Sum(Var),
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param(_) => "param",
            Op::Dense { .. } => "dense",
            Op::MatMulT { .. } => "matmul_t",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Softmax(_) => "softmax",
            Op::Mul { .. } => "elementwise_mul",
            Op::Add { .. } => "add",
            Op::Scale { .. } => "scale",
            Op::WeightedSum { .. } => "weighted_sum",
            Op::Gather { .. } => "gather",
            Op::Concat(_) => "concat",
            Op::Bce { .. } => "bce_loss",
            Op::Nll { .. } => "nll_loss",
            Op::GradReverse { .. } => "grad_reverse",
            Op::Mean(_) => "mean",
            Op::Sum(_) => "sum",
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Probabilities are clamped away from 0 and 1 inside the log losses.
pub const LOG_CLAMP: f64 = 1e-12;

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, Var>,
}

/// Per-node gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }
}

fn ensure_matrix(op: &'static str, t: &Tensor) -> Result<()> {
    if t.is_matrix() {
        Ok(())
    } else {
        Err(Error::shape(
            op,
            format!("expected a matrix, got {:?}", t.shape()),
        ))
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn op(&self, v: Var) -> &Op {
        &self.nodes[v.0].op
    }

    pub fn ops(&self) -> impl Iterator<Item = (Var, &Op)> {
        self.nodes.iter().enumerate().map(|(i, n)| (Var(i), &n.op))
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Constant leaf; gradients are not tracked.
    pub fn input(&mut self, t: Tensor) -> Result<Var> {
        ensure_matrix("input", &t)?;
        self.push(Op::Input, t, false)
    }

    /// Leaf whose gradient is reported by [`Graph::backward`]. Used for
    /// checking gradients with respect to inputs.
    pub fn input_with_grad(&mut self, t: Tensor) -> Result<Var> {
        ensure_matrix("input", &t)?;
        self.push(Op::Input, t, true)
    }

    /// References a parameter. Repeated references share one node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var> {
        if let Some(&v) = self.param_nodes.get(&id) {
            return Ok(v);
        }
        let value = store.value(id).clone();
        ensure_matrix("param", &value)?;
        let v = self.push(Op::Param(id), value, store.is_trainable(id))?;
        self.param_nodes.insert(id, v);
        Ok(v)
    }

    pub fn dense(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let (n, k) = (xv.rows(), xv.cols());
        if wv.rows() != k {
            return Err(Error::shape(
                "dense",
                format!("input {:?} · weight {:?}", xv.shape(), wv.shape()),
            ));
        }
        let m = wv.cols();
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.shape() != [1, m] {
                return Err(Error::shape(
                    "dense",
                    format!("bias {:?} for output width {}", bv.shape(), m),
                ));
            }
        }
        let mut out = vec![0.0; n * m];
        matmul_into(xv.data(), wv.data(), &mut out, n, k, m);
        if let Some(b) = b {
            let bd = self.value(b).data();
            for row in out.chunks_mut(m) {
                for (o, bb) in row.iter_mut().zip(bd) {
                    *o += bb;
                }
            }
        }
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        self.push(Op::Dense { x, w, b }, Tensor::matrix(n, m, out)?, rg)
    }

    /// `a · bᵀ` for `a: [n, h]`, `b: [m, h]`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.cols() {
            return Err(Error::shape(
                "matmul_t",
                format!("{:?} · {:?}ᵀ", av.shape(), bv.shape()),
            ));
        }
        let (n, h, m) = (av.rows(), av.cols(), bv.rows());
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let ar = &av.data()[i * h..(i + 1) * h];
            for j in 0..m {
                let br = &bv.data()[j * h..(j + 1) * h];
                out[i * m + j] = dot(ar, br);
            }
        }
        let rg = self.rg(&[a, b]);
        self.push(Op::MatMulT { a, b }, Tensor::matrix(n, m, out)?, rg)
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| f(v)).collect();
        let t = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        self.push(op, t, rg)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Relu(x), |v| v.max(0.0))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Sigmoid(x), sigmoid)
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(c) {
            softmax_in_place(row);
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(&[x]);
        self.push(Op::Softmax(x), t, rg)
    }

    fn broadcast_check(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb || (sb[0] == 1 && sa[1] == sb[1]) {
            Ok(())
        } else {
            Err(Error::shape(op, format!("{:?} with {:?}", sa, sb)))
        }
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.broadcast_check(op.name(), a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let c = av.cols();
        let bcast = bv.rows() == 1 && av.rows() != 1;
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let y = if bcast {
                    bv.data()[i % c]
                } else {
                    bv.data()[i]
                };
                f(x, y)
            })
            .collect();
        let t = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        self.push(op, t, rg)
    }

    /// Elementwise product; `b` may be a `[1, cols]` row broadcast over `a`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul { a, b }, |x, y| x * y)
    }

    /// Elementwise sum; `b` may be a `[1, cols]` row broadcast over `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add { a, b }, |x, y| x + y)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        self.unary(x, Op::Scale { x, factor }, |v| v * factor)
    }

    /// `out[i] = Σ_c weights[i, c] · inputs[c][i]`. A single weight row is
    /// broadcast over the batch.
    pub fn weighted_sum(&mut self, weights: Var, inputs: &[Var]) -> Result<Var> {
        let wv = self.value(weights);
        if inputs.is_empty() || wv.cols() != inputs.len() {
            return Err(Error::shape(
                "weighted_sum",
                format!("weights {:?} for {} inputs", wv.shape(), inputs.len()),
            ));
        }
        let shape = self.shape(inputs[0]).to_vec();
        let (n, h) = (shape[0], shape[1]);
        if wv.rows() != n && wv.rows() != 1 {
            return Err(Error::shape(
                "weighted_sum",
                format!("weights {:?} for batch {}", wv.shape(), n),
            ));
        }
        for &v in inputs {
            if self.shape(v) != shape.as_slice() {
                return Err(Error::shape(
                    "weighted_sum",
                    format!("{:?} vs {:?}", self.shape(v), shape),
                ));
            }
        }
        let c = inputs.len();
        let mut out = vec![0.0; n * h];
        for i in 0..n {
            let wr = if wv.rows() == 1 { 0 } else { i };
            let orow = &mut out[i * h..(i + 1) * h];
            for (ci, &v) in inputs.iter().enumerate() {
                let w = wv.data()[wr * c + ci];
                let xr = &self.nodes[v.0].value.data()[i * h..(i + 1) * h];
                for (o, x) in orow.iter_mut().zip(xr) {
                    *o += w * x;
                }
            }
        }
        let mut deps = vec![weights];
        deps.extend_from_slice(inputs);
        let rg = self.rg(&deps);
        self.push(
            Op::WeightedSum {
                weights,
                inputs: inputs.to_vec(),
            },
            Tensor::matrix(n, h, out)?,
            rg,
        )
    }

    /// Embedding lookup: row `ids[i]` of `table` becomes output row `i`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let (rows, d) = (tv.rows(), tv.cols());
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::shape(
                "gather",
                format!("id {} out of range for table {:?}", bad, tv.shape()),
            ));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&tv.data()[i * d..(i + 1) * d]);
        }
        let rg = self.rg(&[table]);
        self.push(
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            Tensor::matrix(ids.len(), d, out)?,
            rg,
        )
    }

    /// Column-wise concatenation of matrices with equal row counts.
    pub fn concat(&mut self, inputs: &[Var]) -> Result<Var> {
        if inputs.is_empty() {
            return Err(Error::shape("concat", "no inputs"));
        }
        let n = self.shape(inputs[0])[0];
        if let Some(v) = inputs.iter().find(|v| self.shape(**v)[0] != n) {
            return Err(Error::shape(
                "concat",
                format!("{:?} has a different row count than {}", self.shape(*v), n),
            ));
        }
        let total: usize = inputs.iter().map(|v| self.shape(*v)[1]).sum();
        let mut out = Vec::with_capacity(n * total);
        for i in 0..n {
            for &v in inputs {
                out.extend_from_slice(self.value(v).row_slice(i));
            }
        }
        let rg = self.rg(inputs);
        self.push(
            Op::Concat(inputs.to_vec()),
            Tensor::matrix(n, total, out)?,
            rg,
        )
    }

    /// Mean binary cross-entropy of `[n, 1]` probabilities against targets.
    pub fn bce_loss(&mut self, pred: Var, targets: &[f64]) -> Result<Var> {
        let pv = self.value(pred);
        if pv.cols() != 1 || pv.rows() != targets.len() || targets.is_empty() {
            return Err(Error::shape(
                "bce_loss",
                format!("prediction {:?} for {} targets", pv.shape(), targets.len()),
            ));
        }
        if targets.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(Error::Invalid("bce_loss targets must lie in [0, 1]".into()));
        }
        let n = targets.len() as f64;
        let loss = pv
            .data()
            .iter()
            .zip(targets)
            .map(|(&p, &y)| {
                let p = p.clamp(LOG_CLAMP, 1.0 - LOG_CLAMP);
                -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
            })
            .sum::<f64>()
            / n;
        let rg = self.rg(&[pred]);
        self.push(
            Op::Bce {
                pred,
                targets: targets.to_vec(),
            },
            Tensor::scalar(loss),
            rg,
        )
    }

    /// Mean negative log-likelihood of row-stochastic `probs` at `targets`.
    pub fn nll_loss(&mut self, probs: Var, targets: &[usize]) -> Result<Var> {
        let pv = self.value(probs);
        if pv.rows() != targets.len() || targets.is_empty() {
            return Err(Error::shape(
                "nll_loss",
                format!(
                    "probabilities {:?} for {} targets",
                    pv.shape(),
                    targets.len()
                ),
            ));
        }
        let c = pv.cols();
        if let Some(&t) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::shape(
                "nll_loss",
                format!("target class {} with {} classes", t, c),
            ));
        }
        let n = targets.len() as f64;
        let loss = targets
            .iter()
            .enumerate()
            .map(|(i, &t)| -pv.data()[i * c + t].max(LOG_CLAMP).ln())
            .sum::<f64>()
            / n;
        let rg = self.rg(&[probs]);
        self.push(
            Op::Nll {
                probs,
                targets: targets.to_vec(),
            },
            Tensor::scalar(loss),
            rg,
        )
    }

    /// Identity in the forward pass; multiplies the incoming gradient by
    /// `-lambda` in the backward pass.
    pub fn grad_reverse(&mut self, x: Var, lambda: f64) -> Result<Var> {
        if !(lambda > 0.0) {
            return Err(Error::Invalid(format!(
                "grad_reverse lambda must be > 0, got {lambda}"
            )));
        }
        let t = self.value(x).clone();
        let rg = self.rg(&[x]);
        self.push(Op::GradReverse { x, lambda }, t, rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.is_empty() {
            return Err(Error::shape("mean", "empty input"));
        }
        let m = xv.data().iter().sum::<f64>() / xv.len() as f64;
        let rg = self.rg(&[x]);
        self.push(Op::Mean(x), Tensor::scalar(m), rg)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum::<f64>();
        let rg = self.rg(&[x]);
        self.push(Op::Sum(x), Tensor::scalar(s), rg)
    }

    /// Adds scalars or equal-shape tensors left to right.
    pub fn add_all(&mut self, vars: &[Var]) -> Result<Var> {
        let (&first, rest) = vars
            .split_first()
            .ok_or_else(|| Error::shape("add", "no inputs"))?;
        rest.iter().try_fold(first, |acc, &v| self.add(acc, v))
    }

    /// Reverse pass from a scalar `loss`.
    ///
    /// Gradients of trainable parameters are *added* to their buffers in
    /// `store`; callers zero the buffers at the start of each step.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss {
                shape: lv.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::filled(lv.rows(), lv.cols(), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads, store);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, delta: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, d) in existing.data_mut().iter_mut().zip(delta.data()) {
                    *e += d;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(
        &self,
        idx: usize,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
        store: &mut ParamStore,
    ) {
        let node = &self.nodes[idx];
        let out = &node.value;
        match &node.op {
            Op::Input => {}
            Op::Param(id) => {
                if store.is_trainable(*id) {
                    let p = store.get_mut(*id);
                    for (pg, d) in p.grad.data_mut().iter_mut().zip(g.data()) {
                        *pg += d;
                    }
                }
            }
            Op::Dense { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (n, k, m) = (xv.rows(), xv.cols(), wv.cols());
                if self.requires_grad(*x) {
                    // dx = g · wᵀ
                    let mut dx = vec![0.0; n * k];
                    for i in 0..n {
                        let gr = &g.data()[i * m..(i + 1) * m];
                        for kk in 0..k {
                            dx[i * k + kk] = dot(gr, &wv.data()[kk * m..(kk + 1) * m]);
                        }
                    }
                    self.accumulate(grads, *x, Tensor::matrix(n, k, dx).unwrap());
                }
                if self.requires_grad(*w) {
                    // dw = xᵀ · g
                    let mut dw = vec![0.0; k * m];
                    for i in 0..n {
                        let gr = &g.data()[i * m..(i + 1) * m];
                        let xr = &xv.data()[i * k..(i + 1) * k];
                        for (kk, &a) in xr.iter().enumerate() {
                            if a == 0.0 {
                                continue;
                            }
                            axpy(a, gr, &mut dw[kk * m..(kk + 1) * m]);
                        }
                    }
                    self.accumulate(grads, *w, Tensor::matrix(k, m, dw).unwrap());
                }
                if let Some(b) = b {
                    if self.requires_grad(*b) {
                        self.accumulate(grads, *b, column_sums(g));
                    }
                }
            }
            Op::MatMulT { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (n, h, m) = (av.rows(), av.cols(), bv.rows());
                if self.requires_grad(*a) {
                    let mut da = vec![0.0; n * h];
                    for i in 0..n {
                        for j in 0..m {
                            let gij = g.data()[i * m + j];
                            axpy(
                                gij,
                                &bv.data()[j * h..(j + 1) * h],
                                &mut da[i * h..(i + 1) * h],
                            );
                        }
                    }
                    self.accumulate(grads, *a, Tensor::matrix(n, h, da).unwrap());
                }
                if self.requires_grad(*b) {
                    let mut db = vec![0.0; m * h];
                    for i in 0..n {
                        for j in 0..m {
                            let gij = g.data()[i * m + j];
                            axpy(
                                gij,
                                &av.data()[i * h..(i + 1) * h],
                                &mut db[j * h..(j + 1) * h],
                            );
                        }
                    }
                    self.accumulate(grads, *b, Tensor::matrix(m, h, db).unwrap());
                }
            }
            Op::Relu(x) => {
                let d = g
                    .data()
                    .iter()
                    .zip(out.data())
                    .map(|(&gi, &o)| if o > 0.0 { gi } else { 0.0 })
                    .collect();
                self.accumulate(grads, *x, Tensor::new(out.shape().to_vec(), d).unwrap());
            }
            Op::Sigmoid(x) => {
                let d = g
                    .data()
                    .iter()
                    .zip(out.data())
                    .map(|(&gi, &o)| gi * o * (1.0 - o))
                    .collect();
                self.accumulate(grads, *x, Tensor::new(out.shape().to_vec(), d).unwrap());
            }
            Op::Softmax(x) => {
                let c = out.cols();
                let mut d = vec![0.0; out.len()];
                for ((drow, yrow), grow) in d
                    .chunks_mut(c)
                    .zip(out.data().chunks(c))
                    .zip(g.data().chunks(c))
                {
                    let s = dot(grow, yrow);
                    for ((di, &yi), &gi) in drow.iter_mut().zip(yrow).zip(grow) {
                        *di = yi * (gi - s);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(out.shape().to_vec(), d).unwrap());
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let c = av.cols();
                let bcast = bv.rows() == 1 && av.rows() != 1;
                if self.requires_grad(*a) {
                    let d = g
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(i, &gi)| {
                            gi * if bcast {
                                bv.data()[i % c]
                            } else {
                                bv.data()[i]
                            }
                        })
                        .collect();
                    self.accumulate(grads, *a, Tensor::new(av.shape().to_vec(), d).unwrap());
                }
                if self.requires_grad(*b) {
                    let prod: Vec<f64> = g
                        .data()
                        .iter()
                        .zip(av.data())
                        .map(|(gi, ai)| gi * ai)
                        .collect();
                    let prod = Tensor::new(av.shape().to_vec(), prod).unwrap();
                    let d = if bcast { column_sums(&prod) } else { prod };
                    self.accumulate(grads, *b, d);
                }
            }
            Op::Add { a, b } => {
                let bcast = self.value(*b).rows() == 1 && self.value(*a).rows() != 1;
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, g.clone());
                }
                if self.requires_grad(*b) {
                    let d = if bcast { column_sums(g) } else { g.clone() };
                    self.accumulate(grads, *b, d);
                }
            }
            Op::Scale { x, factor } => {
                let d = g.data().iter().map(|v| v * factor).collect();
                self.accumulate(grads, *x, Tensor::new(g.shape().to_vec(), d).unwrap());
            }
            Op::WeightedSum { weights, inputs } => {
                let wv = self.value(*weights);
                let (n, h) = (out.rows(), out.cols());
                let c = inputs.len();
                let wrow = |i: usize| if wv.rows() == 1 { 0 } else { i };
                for (ci, &v) in inputs.iter().enumerate() {
                    if !self.requires_grad(v) {
                        continue;
                    }
                    let mut d = vec![0.0; n * h];
                    for i in 0..n {
                        let w = wv.data()[wrow(i) * c + ci];
                        let gr = &g.data()[i * h..(i + 1) * h];
                        for (di, gi) in d[i * h..(i + 1) * h].iter_mut().zip(gr) {
                            *di = w * gi;
                        }
                    }
                    self.accumulate(grads, v, Tensor::matrix(n, h, d).unwrap());
                }
                if self.requires_grad(*weights) {
                    let mut dw = vec![0.0; wv.len()];
                    for i in 0..n {
                        let gr = &g.data()[i * h..(i + 1) * h];
                        for (ci, &v) in inputs.iter().enumerate() {
                            let xr = &self.value(v).data()[i * h..(i + 1) * h];
                            dw[wrow(i) * c + ci] += dot(gr, xr);
                        }
                    }
                    self.accumulate(
                        grads,
                        *weights,
                        Tensor::new(wv.shape().to_vec(), dw).unwrap(),
                    );
                }
            }
            Op::Gather { table, ids } => {
                let tv = self.value(*table);
                let d = tv.cols();
                let mut dt = vec![0.0; tv.len()];
                for (i, &id) in ids.iter().enumerate() {
                    axpy(
                        1.0,
                        &g.data()[i * d..(i + 1) * d],
                        &mut dt[id * d..(id + 1) * d],
                    );
                }
                self.accumulate(grads, *table, Tensor::new(tv.shape().to_vec(), dt).unwrap());
            }
            Op::Concat(inputs) => {
                let n = out.rows();
                let total = out.cols();
                let mut offset = 0;
                for &v in inputs {
                    let w = self.shape(v)[1];
                    if self.requires_grad(v) {
                        let mut d = Vec::with_capacity(n * w);
                        for i in 0..n {
                            d.extend_from_slice(
                                &g.data()[i * total + offset..i * total + offset + w],
                            );
                        }
                        self.accumulate(grads, v, Tensor::matrix(n, w, d).unwrap());
                    }
                    offset += w;
                }
            }
            Op::Bce { pred, targets } => {
                let pv = self.value(*pred);
                let n = targets.len() as f64;
                let scale = g.item() / n;
                let d = pv
                    .data()
                    .iter()
                    .zip(targets)
                    .map(|(&p, &y)| {
                        let p = p.clamp(LOG_CLAMP, 1.0 - LOG_CLAMP);
                        scale * (p - y) / (p * (1.0 - p))
                    })
                    .collect();
                self.accumulate(grads, *pred, Tensor::new(pv.shape().to_vec(), d).unwrap());
            }
            Op::Nll { probs, targets } => {
                let pv = self.value(*probs);
                let c = pv.cols();
                let n = targets.len() as f64;
                let mut d = vec![0.0; pv.len()];
                for (i, &t) in targets.iter().enumerate() {
                    let p = pv.data()[i * c + t].max(LOG_CLAMP);
                    d[i * c + t] = -g.item() / (n * p);
                }
                self.accumulate(grads, *probs, Tensor::new(pv.shape().to_vec(), d).unwrap());
            }
            Op::GradReverse { x, lambda } => {
                let d = g.data().iter().map(|v| -lambda * v).collect();
                self.accumulate(grads, *x, Tensor::new(g.shape().to_vec(), d).unwrap());
            }
            Op::Mean(x) => {
                let xv = self.value(*x);
                let v = g.item() / xv.len() as f64;
                self.accumulate(grads, *x, Tensor::filled(xv.rows(), xv.cols(), v));
            }
            Op::Sum(x) => {
                let xv = self.value(*x);
                self.accumulate(grads, *x, Tensor::filled(xv.rows(), xv.cols(), g.item()));
            }
        }
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// `out[n, m] = x[n, k] · w[k, m]`, one output row at a time.
fn matmul_into(x: &[f64], w: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for kk in 0..k {
            let a = x[i * k + kk];
            if a == 0.0 {
                continue;
            }
            axpy(a, &w[kk * m..(kk + 1) * m], orow);
        }
    }
}

fn column_sums(t: &Tensor) -> Tensor {
    let c = t.cols();
    let mut s = vec![0.0; c];
    for row in t.data().chunks(c) {
        for (si, v) in s.iter_mut().zip(row) {
            *si += v;
        }
    }
    Tensor::row(s)
}
