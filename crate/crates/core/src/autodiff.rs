//! Reverse-mode differentiation over a fixed operator set.
//!
//! A [`Tape`] records every operation in execution order together with its
//! value; [`Tape::backward`] walks the records in exact reverse order and
//! accumulates gradients additively into every input, so a parameter used in
//! several places (a dictionary used both as a convolution and as its
//! transpose) receives the sum of all its contributions.

use std::collections::{BTreeMap, HashMap};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_xoshiro::SplitMix64;

use crate::error::{Error, Result};
use crate::loss;
use crate::tensor::{self, ConvGeom, Mode, RunningStats, Scalar, Tensor};

/// Handle of a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Index of a parameter inside a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

/// A deliberately wrong backward rule, used to show that the gradient
/// checks detect broken derivatives.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// ReLU backward passes gradient through the inactive units instead of the active ones.
    NegateReluMask,
}

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub trainable: bool,
}

/// Named, ordered parameter collection.
#[derive(Clone, Debug, Default)]
pub struct ParamSet<T> {
    params: Vec<Param<T>>,
    by_name: HashMap<String, usize>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    /// Registers a trainable parameter. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = self.params.len();
        self.by_name.insert(name.clone(), id);
        let grad = Tensor::zeros(value.shape());
        self.params.push(Param {
            name,
            value,
            grad,
            trainable: true,
        });
        ParamId(id)
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(T::zero());
        }
    }
}

enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        geom: ConvGeom,
    },
    ConvTranspose2d {
        y: Var,
        w: Var,
        geom: ConvGeom,
    },
    Relu(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    ScaleBy {
        x: Var,
        c: Var,
    },
    AddChannelBias {
        x: Var,
        b: Var,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mode: Mode,
        xhat: Tensor<T>,
        inv_std: Vec<T>,
    },
    Upsample2x(Var),
    AvgPool2x(Var),
    Concat(Var, Var),
    Sum(Var),
    Dot(Var, Var),
    CrossEntropy {
        logits: Var,
        probs: Tensor<T>,
        target: Vec<u8>,
    },
    Dice {
        logits: Var,
        probs: Tensor<T>,
        target: Vec<u8>,
        eps: f64,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Execution record of one forward pass.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    bound: HashMap<ParamId, Var>,
    fault: Option<Fault>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            bound: HashMap::new(),
            fault: None,
        }
    }

    pub fn with_fault(fault: Option<Fault>) -> Self {
        Self {
            fault,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Leaf holding the current value of a parameter; repeated calls for the
    /// same parameter return the same handle.
    pub fn param(&mut self, params: &ParamSet<T>, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let v = self.leaf(params.value(id).clone());
        self.bound.insert(id, v);
        v
    }

    /// Activation pattern of every recorded ReLU, one bit per input element.
    /// Two forward passes with equal patterns lie on the same linear piece of
    /// every ReLU.
    pub fn relu_pattern(&self) -> Vec<u64> {
        let mut bits = Vec::new();
        let mut word = 0u64;
        let mut n = 0;
        for node in &self.nodes {
            if let Op::Relu(x) = node.op {
                for &v in self.value(x).data() {
                    word = (word << 1) | u64::from(v > T::zero());
                    n += 1;
                    if n == 64 {
                        bits.push(word);
                        (word, n) = (0, 0);
                    }
                }
            }
        }
        bits.push(word);
        bits.push(n as u64);
        bits
    }

    /// Handle of a parameter already bound with [`Tape::param`].
    pub fn bound_var(&self, id: ParamId) -> Option<Var> {
        self.bound.get(&id).copied()
    }

    pub fn conv2d(&mut self, x: Var, w: Var, geom: ConvGeom) -> Result<Var> {
        let value = tensor::conv2d(self.value(x), self.value(w), geom)?;
        Ok(self.push(value, Op::Conv2d { x, w, geom }))
    }

    /// Adjoint convolution producing spatial size `out_hw`.
    pub fn conv_transpose2d(
        &mut self,
        y: Var,
        w: Var,
        geom: ConvGeom,
        out_hw: (usize, usize),
    ) -> Result<Var> {
        let value = tensor::conv_transpose2d_to(self.value(y), self.value(w), geom, out_hw)?;
        Ok(self.push(value, Op::ConvTranspose2d { y, w, geom }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = tensor::relu(self.value(x));
        self.push(value, Op::Relu(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        Ok(self.push(value, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).mul(self.value(b))?;
        Ok(self.push(value, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let value = self.value(x).scale(s);
        self.push(value, Op::Scale(x, s))
    }

    /// Multiplies by a learnable single-element tensor.
    pub fn scale_by(&mut self, x: Var, c: Var) -> Result<Var> {
        let cv = self.value(c);
        if cv.numel() != 1 {
            return Err(Error::shape(
                "scale_by",
                &self.value(x).shape(),
                &cv.shape(),
                "scale must hold one element",
            ));
        }
        let value = self.value(x).scale(cv.data()[0]);
        Ok(self.push(value, Op::ScaleBy { x, c }))
    }

    /// Adds a per-channel bias of `c` elements.
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let value = self.value(x).add_channel_bias(self.value(b).data())?;
        Ok(self.push(value, Op::AddChannelBias { x, b }))
    }

    /// Batch norm with learnable `gamma`/`beta` vars; `running` is updated in train mode.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: &mut RunningStats<T>,
        mode: Mode,
    ) -> Result<Var> {
        let out = tensor::batch_norm_forward(
            self.value(x),
            self.value(gamma).data(),
            self.value(beta).data(),
            running,
            mode,
        )?;
        Ok(self.push(
            out.y,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mode,
                xhat: out.xhat,
                inv_std: out.inv_std,
            },
        ))
    }

    pub fn upsample2x(&mut self, x: Var) -> Var {
        let value = tensor::upsample2x(self.value(x));
        self.push(value, Op::Upsample2x(x))
    }

    pub fn avg_pool2x(&mut self, x: Var) -> Result<Var> {
        let value = tensor::avg_pool2x(self.value(x))?;
        Ok(self.push(value, Op::AvgPool2x(x)))
    }

    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = tensor::concat_channels(self.value(a), self.value(b))?;
        Ok(self.push(value, Op::Concat(a, b)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let s = self.value(a).dot(self.value(b))?;
        Ok(self.push(Tensor::scalar(s), Op::Dot(a, b)))
    }

    pub fn cross_entropy(&mut self, logits: Var, target: &[u8]) -> Result<Var> {
        let (v, probs) = loss::cross_entropy_forward(self.value(logits), target)?;
        Ok(self.push(
            Tensor::scalar(v),
            Op::CrossEntropy {
                logits,
                probs,
                target: target.to_vec(),
            },
        ))
    }

    pub fn dice_loss(
        &mut self,
        logits: Var,
        target: &[u8],
        n_classes: usize,
        eps: f64,
    ) -> Result<Var> {
        let (v, probs) = loss::dice_forward(self.value(logits), target, n_classes, eps)?;
        Ok(self.push(
            Tensor::scalar(v),
            Op::Dice {
                logits,
                probs,
                target: target.to_vec(),
                eps,
            },
        ))
    }

    /// Gradients of the scalar `loss` with respect to every leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::Usage(format!(
                "backward on value {} but the tape holds {} records; run the forward pass first",
                loss.0,
                self.nodes.len()
            )));
        }
        let lv = &self.nodes[loss.0].value;
        if lv.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, g, &mut grads)?;
        }
        Ok(Gradients {
            grads,
            bound: self.bound.iter().map(|(&id, &v)| (id, v)).collect(),
        })
    }

    fn backward_node(
        &self,
        node: &Node<T>,
        g: Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, geom } => {
                let wv = val(*w);
                let (h, wd) = (val(*x).h(), val(*x).w());
                accumulate(
                    grads,
                    *x,
                    tensor::conv_transpose2d_to(&g, wv, *geom, (h, wd))?,
                )?;
                accumulate(
                    grads,
                    *w,
                    tensor::conv2d_kernel_grad(val(*x), &g, wv.shape(), *geom)?,
                )?;
            }
            Op::ConvTranspose2d { y, w, geom } => {
                let wv = val(*w);
                accumulate(grads, *y, tensor::conv2d(&g, wv, *geom)?)?;
                accumulate(
                    grads,
                    *w,
                    tensor::conv2d_kernel_grad(&g, val(*y), wv.shape(), *geom)?,
                )?;
            }
            Op::Relu(x) => {
                let dx = match self.fault {
                    Some(Fault::NegateReluMask) => {
                        val(*x).zip_map(&g, "relu_backward", |v, d| {
                            if v > T::zero() {
                                T::zero()
                            } else {
                                d
                            }
                        })?
                    }
                    None => tensor::relu_backward(val(*x), &g)?,
                };
                accumulate(grads, *x, dx)?;
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone())?;
                accumulate(grads, *b, g)?;
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g.clone())?;
                accumulate(grads, *b, g.scale(-T::one()))?;
            }
            Op::Mul(a, b) => {
                accumulate(grads, *a, g.mul(val(*b))?)?;
                accumulate(grads, *b, g.mul(val(*a))?)?;
            }
            Op::Scale(x, s) => accumulate(grads, *x, g.scale(*s))?,
            Op::ScaleBy { x, c } => {
                let cv = val(*c);
                let dc = g.dot(val(*x))?;
                accumulate(grads, *x, g.scale(cv.data()[0]))?;
                accumulate(grads, *c, Tensor::full(cv.shape(), dc))?;
            }
            Op::AddChannelBias { x, b } => {
                let bv = val(*b);
                let db = Tensor::new(bv.shape(), g.channel_sums())?;
                accumulate(grads, *x, g)?;
                accumulate(grads, *b, db)?;
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mode,
                xhat,
                inv_std,
            } => {
                let gv = val(*gamma);
                let (dx, dgamma, dbeta) =
                    tensor::batch_norm_backward(&g, xhat, inv_std, gv.data(), *mode)?;
                accumulate(grads, *x, dx)?;
                accumulate(grads, *gamma, Tensor::new(gv.shape(), dgamma)?)?;
                accumulate(grads, *beta, Tensor::new(val(*beta).shape(), dbeta)?)?;
            }
            Op::Upsample2x(x) => accumulate(grads, *x, tensor::upsample2x_adjoint(&g)?)?,
            Op::AvgPool2x(x) => accumulate(grads, *x, tensor::avg_pool2x_adjoint(&g))?,
            Op::Concat(a, b) => {
                let (ga, gb) = tensor::split_channels(&g, val(*a).c())?;
                accumulate(grads, *a, ga)?;
                accumulate(grads, *b, gb)?;
            }
            Op::Sum(x) => {
                let s = g.data()[0];
                accumulate(grads, *x, Tensor::full(val(*x).shape(), s))?;
            }
            Op::Dot(a, b) => {
                let s = g.data()[0];
                accumulate(grads, *a, val(*b).scale(s))?;
                accumulate(grads, *b, val(*a).scale(s))?;
            }
            Op::CrossEntropy {
                logits,
                probs,
                target,
            } => {
                let s = g.data()[0];
                accumulate(
                    grads,
                    *logits,
                    loss::cross_entropy_grad(probs, target).scale(s),
                )?;
            }
            Op::Dice {
                logits,
                probs,
                target,
                eps,
            } => {
                let s = g.data()[0];
                accumulate(
                    grads,
                    *logits,
                    loss::dice_grad(probs, target, *eps).scale(s),
                )?;
            }
        }
        Ok(())
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) -> Result<()> {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    bound: Vec<(ParamId, Var)>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a leaf; `None` when the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for a parameter that was bound on the tape.
    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.bound
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|&(_, v)| self.get(v))
    }

    /// Adds the gradients of all bound parameters into `params[..].grad`.
    pub fn accumulate_into(&self, params: &mut ParamSet<T>) -> Result<()> {
        let mut bound = self.bound.clone();
        bound.sort();
        for (id, v) in bound {
            if let Some(g) = self.get(v) {
                params.get_mut(id).grad.add_assign(g)?;
            }
        }
        Ok(())
    }
}

/// Something with parameters and a scalar objective that can be recorded on a tape.
pub trait Objective {
    fn params(&self) -> &ParamSet<f64>;
    fn params_mut(&mut self) -> &mut ParamSet<f64>;
    /// Records the forward pass and returns the scalar loss.
    fn loss(&mut self, tape: &mut Tape<f64>) -> Result<Var>;
}

/// Options of [`finite_diff_check`].
#[derive(Clone, Copy, Debug)]
pub struct FdOptions {
    pub step: f64,
    pub samples_per_param: usize,
    pub fault: Option<Fault>,
}

impl Default for FdOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            samples_per_param: 32,
            fault: None,
        }
    }
}

/// Largest relative error between analytic and central-difference
/// gradients, per parameter, using `|a - n| / max(|a|, |n|, floor)`.
///
/// `floor` is `1e-6` times the largest analytic gradient entry of the whole
/// objective (and at least `1e-8`). Coordinates whose true gradient is zero,
/// such as a bias feeding straight into batch norm, would otherwise compare
/// pure rounding noise against zero.
#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct FdReport {
    pub max_rel_err: BTreeMap<String, f64>,
    /// Coordinates passed over because `x +- step` switched some ReLU, where
    /// a central difference does not measure the derivative.
    pub kink_skips: usize,
}

impl FdReport {
    pub fn worst(&self) -> f64 {
        self.max_rel_err.values().copied().fold(0.0, f64::max)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err.values().all(|&e| e <= tol)
    }
}

/// Compares analytic gradients of every trainable parameter against central
/// differences on a random subsample of its coordinates.
///
/// Candidates whose perturbed forward passes change the ReLU activation
/// pattern are skipped and replaced by further random coordinates.
pub fn finite_diff_check(net: &mut dyn Objective, seed: u64, opts: FdOptions) -> Result<FdReport> {
    let mut tape = Tape::with_fault(opts.fault);
    let loss = net.loss(&mut tape)?;
    let grads = tape.backward(loss)?;
    let base_pattern = tape.relu_pattern();
    let analytic: Vec<Option<Tensor<f64>>> = net
        .params()
        .ids()
        .map(|id| grads.param(id).cloned())
        .collect();
    drop(tape);
    let scale = analytic
        .iter()
        .flatten()
        .map(|g| g.max_abs())
        .fold(0.0, f64::max);
    let floor = (1e-6 * scale).max(1e-8);

    let mut rng = SplitMix64::seed_from_u64(seed);
    let mut report = BTreeMap::new();
    let mut kink_skips = 0;
    let ids: Vec<ParamId> = net.params().ids().collect();
    for (id, a) in ids.into_iter().zip(analytic) {
        let p = net.params().get(id);
        if !p.trainable {
            continue;
        }
        let name = p.name.clone();
        let numel = p.value.numel();
        let candidates =
            sample(&mut rng, numel, (4 * opts.samples_per_param).min(numel)).into_vec();
        let mut worst = 0.0f64;
        let mut used = 0;
        for i in candidates {
            if used == opts.samples_per_param {
                break;
            }
            let orig = net.params().get(id).value.data()[i];
            net.params_mut().get_mut(id).value.data_mut()[i] = orig + opts.step;
            let (plus, pat_plus) = eval(net)?;
            net.params_mut().get_mut(id).value.data_mut()[i] = orig - opts.step;
            let (minus, pat_minus) = eval(net)?;
            net.params_mut().get_mut(id).value.data_mut()[i] = orig;
            if pat_plus != base_pattern || pat_minus != base_pattern {
                kink_skips += 1;
                continue;
            }
            used += 1;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let an = a.as_ref().map_or(0.0, |g| g.data()[i]);
            let rel = (an - numeric).abs() / an.abs().max(numeric.abs()).max(floor);
            worst = worst.max(rel);
        }
        report.insert(name, worst);
    }
    Ok(FdReport {
        max_rel_err: report,
        kink_skips,
    })
}

fn eval(net: &mut dyn Objective) -> Result<(f64, Vec<u64>)> {
    let mut tape = Tape::new();
    let l = net.loss(&mut tape)?;
    Ok((tape.value(l).data()[0], tape.relu_pattern()))
}

/// An [`Objective`] built from a closure over the tape vars of its parameters.
pub struct FnObjective<F> {
    pub params: ParamSet<f64>,
    f: F,
}

impl<F> FnObjective<F>
where
    F: FnMut(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    pub fn new(params: ParamSet<f64>, f: F) -> Self {
        Self { params, f }
    }
}

impl<F> Objective for FnObjective<F>
where
    F: FnMut(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    fn params(&self) -> &ParamSet<f64> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet<f64> {
        &mut self.params
    }

    fn loss(&mut self, tape: &mut Tape<f64>) -> Result<Var> {
        let vars: Vec<Var> = self
            .params
            .ids()
            .map(|id| tape.param(&self.params, id))
            .collect();
        (self.f)(tape, &vars)
    }
}
