//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation of one forward pass as a node that
//! owns its output value. Nodes are appended in evaluation order, so the
//! node list is already a topological order and [`Graph::backward`] only has
//! to walk it in reverse, visiting each node once. Parameters enter the graph
//! through [`Graph::param`] under a stable name; asking for the same name
//! twice returns the same node, so gradients from every use of a parameter
//! are summed.
//!
//! Loss kernels (SoftCLIP, MSE) are fused nodes with hand-written backward
//! rules rather than compositions of elementwise primitives.

use std::collections::{BTreeMap, HashMap};

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::numerics::aggregate::adaptive_max_pool;
use crate::numerics::rng::Rng;
use crate::numerics::tensor::gemm_into;
use crate::numerics::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Affine {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    },
    Add(NodeId, NodeId),
    Sum(NodeId),
    Reshape(NodeId),
    Gelu(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Dropout {
        x: NodeId,
        mask: Vec<T>,
    },
    MaxPool {
        x: NodeId,
        argmax: Vec<usize>,
    },
    L2Normalize {
        x: NodeId,
        norms: Vec<T>,
    },
    SoftClip {
        p: NodeId,
        targets: Tensor<T>,
        inv_tau: T,
        /// softmax(p·tᵀ/τ) minus softmax(t·tᵀ/τ), row-major N×N.
        residual: Vec<T>,
    },
    Mse(NodeId, NodeId),
    WeightedSum(Vec<(NodeId, T)>),
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Affine { .. } => "affine",
            Op::Add(..) => "add",
            Op::Sum(_) => "sum",
            Op::Reshape(_) => "reshape",
            Op::Gelu(_) => "gelu",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Dropout { .. } => "dropout",
            Op::MaxPool { .. } => "adaptive_max_pool",
            Op::L2Normalize { .. } => "l2_normalize",
            Op::SoftClip { .. } => "soft_clip",
            Op::Mse(..) => "mse",
            Op::WeightedSum(_) => "weighted_sum",
        }
    }

    fn parents(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf => vec![],
            Op::Affine { x, w, b } => [Some(*x), Some(*w), *b].into_iter().flatten().collect(),
            Op::Add(a, b) | Op::Mse(a, b) => vec![*a, *b],
            Op::Sum(x) | Op::Reshape(x) | Op::Gelu(x) => vec![*x],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Dropout { x, .. } | Op::MaxPool { x, .. } | Op::L2Normalize { x, .. } => vec![*x],
            Op::SoftClip { p, .. } => vec![*p],
            Op::WeightedSum(terms) => terms.iter().map(|(id, _)| *id).collect(),
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// One forward pass worth of recorded operations.
#[derive(Debug)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<String, NodeId>,
    dropout_rng: Option<Rng>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    /// Inference graph: dropout is the identity.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            dropout_rng: None,
        }
    }

    /// Training graph: dropout draws its masks from `rng`.
    pub fn training(rng: Rng) -> Self {
        Self {
            dropout_rng: Some(rng),
            ..Self::new()
        }
    }

    pub fn is_training(&self) -> bool {
        self.dropout_rng.is_some()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: NodeId) -> T {
        self.nodes[id.0].value.data()[0]
    }

    pub fn op_name(&self, id: NodeId) -> &'static str {
        self.nodes[id.0].op.name()
    }

    pub fn parents(&self, id: NodeId) -> Vec<NodeId> {
        self.nodes[id.0].op.parents()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Result<NodeId> {
        if !value.all_finite() {
            return Err(Error::numerical(format!(
                "{} produced a non-finite value",
                op.name()
            )));
        }
        let requires_grad = op.parents().iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Input that gradients never flow into.
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.leaf(value, false)
    }

    /// Anonymous differentiable leaf.
    pub fn variable(&mut self, value: Tensor<T>) -> NodeId {
        self.leaf(value, true)
    }

    /// Named parameter leaf. Repeated requests for one name share a node.
    pub fn param(&mut self, name: &str, value: &Tensor<T>) -> NodeId {
        if let Some(&id) = self.params.get(name) {
            return id;
        }
        let id = self.leaf(value.clone(), true);
        self.params.insert(name.to_owned(), id);
        id
    }

    /// Copy of `x` that blocks gradient flow.
    pub fn detach(&mut self, x: NodeId) -> NodeId {
        let value = self.nodes[x.0].value.clone();
        self.constant(value)
    }

    /// `x·w + b` for `x: [n, k]`, `w: [k, m]`, `b: [m]`.
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let (xv, wv) = (self.value(x), self.value(w));
        if xv.shape().len() != 2 || wv.shape().len() != 2 || xv.shape()[1] != wv.shape()[0] {
            return Err(Error::dim(format!(
                "affine input {:?} against weight {:?}",
                xv.shape(),
                wv.shape()
            )));
        }
        let (n, k, m) = (xv.shape()[0], xv.shape()[1], wv.shape()[1]);
        let mut out = match b {
            Some(b) => {
                let bv = self.value(b);
                if bv.len() != m {
                    return Err(Error::dim(format!(
                        "affine bias of {} values for output width {m}",
                        bv.len()
                    )));
                }
                let mut out = Tensor::zeros(vec![n, m]);
                for i in 0..n {
                    out.row_mut(i).copy_from_slice(bv.data());
                }
                out
            }
            None => Tensor::zeros(vec![n, m]),
        };
        gemm_into(n, k, m, xv.data(), false, wv.data(), false, out.data_mut(), b.is_some());
        self.push(out, Op::Affine { x, w, b })
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.affine(a, b, None)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::dim(format!(
                "add {:?} + {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let mut out = av.clone();
        out.add_assign(bv);
        self.push(out, Op::Add(a, b))
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let out = self.value(x).clone().reshape(shape.to_vec())?;
        self.push(out, Op::Reshape(x))
    }

    /// Exact GELU, `x·Φ(x)` with Φ the standard normal CDF.
    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId> {
        let out = self.value(x).map(gelu);
        self.push(out, Op::Gelu(x))
    }

    /// Per-row normalization over the trailing axis with biased variance.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        let xv = self.value(x);
        let d = xv.row_len();
        let (gv, bv) = (self.value(gamma), self.value(beta));
        if d == 0 || gv.len() != d || bv.len() != d {
            return Err(Error::dim(format!(
                "layer_norm over width {d} with gamma {:?} and beta {:?}",
                gv.shape(),
                bv.shape()
            )));
        }
        let n = xv.rows();
        let eps = T::lit(eps);
        let inv_d = T::lit(1.0 / d as f64);
        let mut xhat = vec![T::zero(); n * d];
        let mut rstd = vec![T::zero(); n];
        let mut out = Tensor::zeros(xv.shape().to_vec());
        for i in 0..n {
            let row = xv.row(i);
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let r = (var + eps).sqrt().recip();
            rstd[i] = r;
            let xh = &mut xhat[i * d..(i + 1) * d];
            let o = out.row_mut(i);
            for j in 0..d {
                xh[j] = (row[j] - mean) * r;
                o[j] = xh[j] * gv.data()[j] + bv.data()[j];
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        )
    }

    /// Inverted dropout: survivors are scaled by `1/(1-p)`. Identity on an
    /// inference graph or when `p == 0`.
    pub fn dropout(&mut self, x: NodeId, p: f64) -> Result<NodeId> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::param(format!("dropout probability {p} outside [0, 1)")));
        }
        let rng = match self.dropout_rng.as_mut() {
            Some(rng) if p > 0.0 => rng,
            _ => return Ok(x),
        };
        let keep = T::lit(1.0 / (1.0 - p));
        let xv = &self.nodes[x.0].value;
        let mask: Vec<T> = (0..xv.len())
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        let mut out = xv.clone();
        for (o, &m) in out.data_mut().iter_mut().zip(&mask) {
            *o *= m;
        }
        self.push(out, Op::Dropout { x, mask })
    }

    /// Row-wise adaptive max pooling of `x: [n, L]` to `[n, m]`.
    pub fn adaptive_max_pool(&mut self, x: NodeId, m: usize) -> Result<NodeId> {
        let xv = self.value(x);
        let (n, l) = (xv.rows(), xv.row_len());
        let mut data = Vec::with_capacity(n * m);
        let mut argmax = Vec::with_capacity(n * m);
        for i in 0..n {
            let (vals, idx) = adaptive_max_pool(xv.row(i), m)?;
            data.extend(vals);
            argmax.extend(idx.into_iter().map(|j| i * l + j));
        }
        let out = Tensor::new(vec![n, m], data)?;
        self.push(out, Op::MaxPool { x, argmax })
    }

    /// Scales each row of a 2-D tensor to unit L2 norm.
    pub fn l2_normalize_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let mut out = xv.clone();
        let mut norms = Vec::with_capacity(xv.rows());
        for i in 0..xv.rows() {
            let row = out.row_mut(i);
            let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            if norm == T::zero() {
                return Err(Error::numerical(format!(
                    "cannot normalize row {i}: zero norm"
                )));
            }
            row.iter_mut().for_each(|v| *v /= norm);
            norms.push(norm);
        }
        self.push(out, Op::L2Normalize { x, norms })
    }

    /// SoftCLIP cross-entropy between prediction rows `p` and constant
    /// target rows `t`, both `[N, D]`:
    ///
    /// `-Σ_i Σ_j softmax_j(t_i·t/τ) · log softmax_j(p_i·t/τ)`
    ///
    /// summed (not averaged) over the batch.
    pub fn soft_clip(&mut self, p: NodeId, targets: &Tensor<T>, tau: f64) -> Result<NodeId> {
        if tau.is_nan() || tau <= 0.0 {
            return Err(Error::param(format!("temperature must be positive, got {tau}")));
        }
        let pv = self.value(p);
        if pv.shape().len() != 2 || pv.shape() != targets.shape() {
            return Err(Error::dim(format!(
                "soft_clip prediction {:?} against targets {:?}",
                pv.shape(),
                targets.shape()
            )));
        }
        let (n, d) = (pv.shape()[0], pv.shape()[1]);
        if n == 0 {
            return Err(Error::dim("soft_clip needs at least one row"));
        }
        let inv_tau = T::lit(1.0 / tau);
        let mut pred_logits = vec![T::zero(); n * n];
        let mut label_logits = vec![T::zero(); n * n];
        gemm_into(n, d, n, pv.data(), false, targets.data(), true, &mut pred_logits, false);
        gemm_into(n, d, n, targets.data(), false, targets.data(), true, &mut label_logits, false);
        let mut loss = T::zero();
        let mut residual = vec![T::zero(); n * n];
        for i in 0..n {
            let pl = &mut pred_logits[i * n..(i + 1) * n];
            let ll = &mut label_logits[i * n..(i + 1) * n];
            pl.iter_mut().for_each(|v| *v *= inv_tau);
            ll.iter_mut().for_each(|v| *v *= inv_tau);
            let log_z_pred = log_sum_exp(pl);
            let log_z_label = log_sum_exp(ll);
            let res = &mut residual[i * n..(i + 1) * n];
            for j in 0..n {
                let log_s = pl[j] - log_z_pred;
                let q = (ll[j] - log_z_label).exp();
                loss -= q * log_s;
                res[j] = log_s.exp() - q;
            }
        }
        let targets = targets.clone();
        self.push(
            Tensor::scalar(loss),
            Op::SoftClip {
                p,
                targets,
                inv_tau,
                residual,
            },
        )
    }

    /// Mean of squared differences over all elements.
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::dim(format!(
                "mse {:?} vs {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        if av.is_empty() {
            return Err(Error::dim("mse of empty tensors"));
        }
        let s: T = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum();
        let out = Tensor::scalar(s / T::lit(av.len() as f64));
        self.push(out, Op::Mse(a, b))
    }

    /// `Σ w_k · x_k` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(NodeId, f64)]) -> Result<NodeId> {
        let mut total = T::zero();
        let mut stored = Vec::with_capacity(terms.len());
        for &(id, w) in terms {
            let v = self.value(id);
            if v.len() != 1 {
                return Err(Error::dim(format!(
                    "weighted_sum term has shape {:?}",
                    v.shape()
                )));
            }
            let w = T::lit(w);
            total += w * v.data()[0];
            stored.push((id, w));
        }
        self.push(Tensor::scalar(total), Op::WeightedSum(stored))
    }

    /// Propagates `∂loss/∂node` to every node that requires a gradient.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::full(lv.shape().to_vec(), T::one()));
        }
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if !g.all_finite() {
                    return Err(Error::numerical(format!(
                        "non-finite gradient at {} node {i}",
                        self.nodes[i].op.name()
                    )));
                }
            }
        }
        let params = self
            .params
            .iter()
            .map(|(name, &id)| (name.clone(), id))
            .collect();
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            params,
        })
    }

    fn backprop_node(&self, idx: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let wants = |id: NodeId| self.nodes[id.0].requires_grad;
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Affine { x, w, b } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (n, k, m) = (xv.shape()[0], xv.shape()[1], wv.shape()[1]);
                if wants(*x) {
                    let dx = slot(grads, *x, xv.shape());
                    gemm_into(n, m, k, g.data(), false, wv.data(), true, dx.data_mut(), true);
                }
                if wants(*w) {
                    let dw = slot(grads, *w, wv.shape());
                    gemm_into(k, n, m, xv.data(), true, g.data(), false, dw.data_mut(), true);
                }
                if let Some(b) = b.filter(|b| wants(*b)) {
                    let db = slot(grads, b, self.value(b).shape());
                    for i in 0..n {
                        for (acc, &gv) in db.data_mut().iter_mut().zip(g.row(i)) {
                            *acc += gv;
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for id in [*a, *b] {
                    if wants(id) {
                        slot(grads, id, g.shape()).add_assign(g);
                    }
                }
            }
            Op::Sum(x) => {
                if wants(*x) {
                    let gs = g.data()[0];
                    let dx = slot(grads, *x, self.value(*x).shape());
                    dx.data_mut().iter_mut().for_each(|v| *v += gs);
                }
            }
            Op::Reshape(x) => {
                if wants(*x) {
                    let shape = self.value(*x).shape();
                    let dx = slot(grads, *x, shape);
                    for (acc, &gv) in dx.data_mut().iter_mut().zip(g.data()) {
                        *acc += gv;
                    }
                }
            }
            Op::Gelu(x) => {
                if wants(*x) {
                    let xv = self.value(*x);
                    let dx = slot(grads, *x, xv.shape());
                    for ((acc, &gv), &xi) in dx.data_mut().iter_mut().zip(g.data()).zip(xv.data()) {
                        *acc += gv * gelu_grad(xi);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let xv = self.value(*x);
                let (n, d) = (xv.rows(), xv.row_len());
                let gam = self.value(*gamma).data();
                if wants(*gamma) {
                    let dg = slot(grads, *gamma, self.value(*gamma).shape());
                    for i in 0..n {
                        let (gr, xh) = (g.row(i), &xhat[i * d..(i + 1) * d]);
                        for j in 0..d {
                            dg.data_mut()[j] += gr[j] * xh[j];
                        }
                    }
                }
                if wants(*beta) {
                    let db = slot(grads, *beta, self.value(*beta).shape());
                    for i in 0..n {
                        for (acc, &gv) in db.data_mut().iter_mut().zip(g.row(i)) {
                            *acc += gv;
                        }
                    }
                }
                if wants(*x) {
                    let inv_d = T::lit(1.0 / d as f64);
                    let dx = slot(grads, *x, xv.shape());
                    let mut dxhat = vec![T::zero(); d];
                    for i in 0..n {
                        let (gr, xh) = (g.row(i), &xhat[i * d..(i + 1) * d]);
                        let mut sum_dxhat = T::zero();
                        let mut sum_dxhat_xhat = T::zero();
                        for j in 0..d {
                            dxhat[j] = gr[j] * gam[j];
                            sum_dxhat += dxhat[j];
                            sum_dxhat_xhat += dxhat[j] * xh[j];
                        }
                        let out = dx.row_mut(i);
                        for j in 0..d {
                            out[j] += rstd[i]
                                * (dxhat[j] - inv_d * sum_dxhat - xh[j] * inv_d * sum_dxhat_xhat);
                        }
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if wants(*x) {
                    let dx = slot(grads, *x, g.shape());
                    for ((acc, &gv), &m) in dx.data_mut().iter_mut().zip(g.data()).zip(mask) {
                        *acc += gv * m;
                    }
                }
            }
            Op::MaxPool { x, argmax } => {
                if wants(*x) {
                    let dx = slot(grads, *x, self.value(*x).shape());
                    for (&j, &gv) in argmax.iter().zip(g.data()) {
                        dx.data_mut()[j] += gv;
                    }
                }
            }
            Op::L2Normalize { x, norms } => {
                if wants(*x) {
                    let y = &self.nodes[idx].value;
                    let dx = slot(grads, *x, y.shape());
                    for (i, &norm) in norms.iter().enumerate() {
                        let (yr, gr) = (y.row(i), g.row(i));
                        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for (j, acc) in dx.row_mut(i).iter_mut().enumerate() {
                            *acc += (gr[j] - yr[j] * dot) / norm;
                        }
                    }
                }
            }
            Op::SoftClip {
                p,
                targets,
                inv_tau,
                residual,
            } => {
                if wants(*p) {
                    let (n, d) = (targets.shape()[0], targets.shape()[1]);
                    let scale = g.data()[0] * *inv_tau;
                    let scaled: Vec<T> = residual.iter().map(|&r| r * scale).collect();
                    let dp = slot(grads, *p, targets.shape());
                    gemm_into(n, n, d, &scaled, false, targets.data(), false, dp.data_mut(), true);
                }
            }
            Op::Mse(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let scale = g.data()[0] * T::lit(2.0 / av.len() as f64);
                if wants(*a) {
                    let da = slot(grads, *a, av.shape());
                    for ((acc, &x), &y) in da.data_mut().iter_mut().zip(av.data()).zip(bv.data()) {
                        *acc += scale * (x - y);
                    }
                }
                if wants(*b) {
                    let db = slot(grads, *b, bv.shape());
                    for ((acc, &x), &y) in db.data_mut().iter_mut().zip(av.data()).zip(bv.data()) {
                        *acc -= scale * (x - y);
                    }
                }
            }
            Op::WeightedSum(terms) => {
                let gs = g.data()[0];
                for &(id, w) in terms {
                    if wants(id) {
                        slot(grads, id, &[1]).data_mut()[0] += gs * w;
                    }
                }
            }
        }
    }
}

fn slot<'a, T: Real>(
    grads: &'a mut [Option<Tensor<T>>],
    id: NodeId,
    shape: &[usize],
) -> &'a mut Tensor<T> {
    grads[id.0].get_or_insert_with(|| Tensor::zeros(shape.to_vec()))
}

fn log_sum_exp<T: Real>(xs: &[T]) -> T {
    let max = xs.iter().copied().fold(T::neg_infinity(), T::max);
    max + xs.iter().map(|&x| (x - max).exp()).sum::<T>().ln()
}

/// Standard normal CDF.
pub fn normal_cdf<T: Real>(x: T) -> T {
    T::lit(0.5) * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

pub fn gelu<T: Real>(x: T) -> T {
    x * normal_cdf(x)
}

pub fn gelu_grad<T: Real>(x: T) -> T {
    let pdf = (-(x * x) * T::lit(0.5)).exp() * T::lit(0.398_942_280_401_432_7);
    normal_cdf(x) + x * pdf
}

/// Result of [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
    params: BTreeMap<String, NodeId>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of the loss with respect to `id`; zeros when the loss does
    /// not depend on it.
    pub fn wrt(&self, id: NodeId) -> Tensor<T> {
        self.grads[id.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(self.shapes[id.0].clone()))
    }

    pub fn param(&self, name: &str) -> Option<Tensor<T>> {
        self.params.get(name).map(|&id| self.wrt(id))
    }

    /// Gradients of every named parameter registered in the graph.
    pub fn into_params(mut self) -> BTreeMap<String, Tensor<T>> {
        let params = std::mem::take(&mut self.params);
        params
            .into_iter()
            .map(|(name, id)| {
                let g = self.grads[id.0]
                    .take()
                    .unwrap_or_else(|| Tensor::zeros(self.shapes[id.0].clone()));
                (name, g)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::{stream_rng, Stream};

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn affine_hand_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let w = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = g.constant(t(&[2], &[0.0, 0.0]));
        let y = g.affine(x, w, Some(b)).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 0.0, 0.0, 1.0]);

        let x = g.constant(t(&[1, 2], &[1.0, 2.0]));
        let w = g.constant(t(&[2, 1], &[1.0, 1.0]));
        let b = g.constant(t(&[1], &[3.0]));
        let y = g.affine(x, w, Some(b)).unwrap();
        assert_eq!(g.value(y).data(), &[6.0]);
    }

    #[test]
    fn affine_rejects_mismatch() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(vec![2, 3]));
        let w = g.constant(Tensor::zeros(vec![2, 3]));
        assert!(matches!(g.affine(x, w, None), Err(Error::Dimension(_))));
    }

    #[test]
    fn linear_sum_gradient_is_replicated_input() {
        // loss = Σ (x·W)  ⇒  ∂/∂W[k, j] = Σ_i x[i, k]
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[2, 3], &[1.0, 2.0, 3.0, -1.0, 0.5, 2.0]));
        let w = g.param("w", &Tensor::zeros(vec![3, 2]));
        let y = g.matmul(x, w).unwrap();
        let loss = g.sum(y).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.param("w").unwrap().data(), &[0.0, 0.0, 2.5, 2.5, 5.0, 5.0]);
    }

    #[test]
    fn unused_parameter_gets_zero_gradient() {
        let mut g = Graph::<f64>::new();
        let a = g.param("a", &t(&[2], &[1.0, 2.0]));
        let _unused = g.param("b", &t(&[3], &[1.0, 2.0, 3.0]));
        let loss = g.sum(a).unwrap();
        let grads = g.param_grads(loss);
        assert_eq!(grads["b"].data(), &[0.0, 0.0, 0.0]);
        assert_eq!(grads["a"].data(), &[1.0, 1.0]);
    }

    impl Graph<f64> {
        fn param_grads(&self, loss: NodeId) -> BTreeMap<String, Tensor<f64>> {
            self.backward(loss).unwrap().into_params()
        }
    }

    #[test]
    fn non_scalar_loss_is_a_usage_error() {
        let mut g = Graph::<f64>::new();
        let a = g.variable(t(&[2], &[1.0, 2.0]));
        assert!(matches!(g.backward(a), Err(Error::Usage(_))));
    }

    #[test]
    fn shared_parameter_accumulates_over_paths() {
        // loss = Σ a + Σ a  ⇒  gradient 2
        let mut g = Graph::<f64>::new();
        let a = g.param("a", &t(&[2], &[1.0, -1.0]));
        let a2 = g.param("a", &t(&[2], &[9.0, 9.0]));
        assert_eq!(a, a2);
        let s = g.add(a, a2).unwrap();
        let loss = g.sum(s).unwrap();
        assert_eq!(g.backward(loss).unwrap().wrt(a).data(), &[2.0, 2.0]);
    }

    #[test]
    fn gelu_values() {
        assert_eq!(gelu(0.0f64), 0.0);
        assert!((gelu(1.0f64) - 0.841_344_746_068_542_9).abs() < 1e-12);
        assert!((gelu(10.0f64) - 10.0).abs() < 1e-6);
    }

    #[test]
    fn layer_norm_hand_examples() {
        let mut g = Graph::<f64>::new();
        let gamma = g.constant(t(&[2], &[1.0, 1.0]));
        let beta = g.constant(t(&[2], &[0.0, 0.0]));
        let x = g.constant(t(&[2, 2], &[4.0, 4.0, 1.0, 3.0]));
        let y = g.layer_norm(x, gamma, beta, 1e-12).unwrap();
        let out = g.value(y).data();
        assert_eq!(&out[..2], &[0.0, 0.0]);
        assert!((out[2] + 1.0).abs() < 1e-9 && (out[3] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn dropout_identity_cases() {
        let x = Tensor::<f64>::from_fn(vec![4, 5], |i| i as f64 + 1.0);
        let mut inference = Graph::<f64>::new();
        let xi = inference.constant(x.clone());
        let yi = inference.dropout(xi, 0.5).unwrap();
        assert_eq!(inference.value(yi), &x);

        let mut train = Graph::<f64>::training(stream_rng(1, Stream::Dropout, &[]));
        let xt = train.constant(x.clone());
        let yt = train.dropout(xt, 0.0).unwrap();
        assert_eq!(train.value(yt), &x);
        assert!(train.dropout(xt, 1.0).is_err());
    }

    #[test]
    fn dropout_masks_reproduce_with_seed() {
        let x = Tensor::<f32>::full(vec![64, 64], 1.0);
        let run = |seed| {
            let mut g = Graph::<f32>::training(stream_rng(seed, Stream::Dropout, &[]));
            let xi = g.constant(x.clone());
            let y = g.dropout(xi, 0.3).unwrap();
            g.value(y).clone()
        };
        assert_eq!(run(5), run(5));
        assert_ne!(run(5), run(6));
    }

    #[test]
    fn soft_clip_single_row_is_zero() {
        let mut g = Graph::<f64>::new();
        let p = g.constant(t(&[1, 3], &[0.3, -0.2, 0.9]));
        let l = g.soft_clip(p, &t(&[1, 3], &[1.0, 0.0, 0.0]), 0.125).unwrap();
        assert!(g.scalar(l).abs() < 1e-12);
    }

    #[test]
    fn soft_clip_rejects_bad_temperature() {
        let mut g = Graph::<f64>::new();
        let p = g.constant(t(&[1, 1], &[1.0]));
        assert!(matches!(
            g.soft_clip(p, &t(&[1, 1], &[1.0]), 0.0),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn max_pool_gradient_routes_to_argmax() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(t(&[1, 6], &[1.0, 3.0, 2.0, 5.0, 4.0, 6.0]));
        let y = g.adaptive_max_pool(x, 3).unwrap();
        let loss = g.sum(y).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.wrt(x).data(), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }
}
