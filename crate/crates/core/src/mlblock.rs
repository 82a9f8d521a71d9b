//! Multi-layer convolutional sparse coding block.
//!
//! A two-layer encoding pass
//!
//! ```text
//! gamma1 = ReLU(BN(c1 * conv(x, W1) + b1))
//! gamma2 = ReLU(BN(c2 * conv(gamma1, W2) + b2))
//! ```
//!
//! followed by `T` refinement iterations, each a thresholded gradient step on
//! the two reconstruction residuals:
//!
//! ```text
//! g1     = convT(gamma2, W2)
//! t1     = convT(g1, W1) - x
//! t2     = conv(t1, W1)
//! g1     = ReLU(g1 - c1 * t2 + b1)
//! t3     = convT(gamma2, W2) - g1
//! t4     = conv(t3, W2)
//! gamma2 = ReLU(gamma2 - c2 * t4 + b2)
//! ```
//!
//! Batch norm only appears in the encoding pass. Every convolution in the
//! loop uses the block's stride; with stride 1 that coincides with a literal
//! stride-1 correction step.
//!
//! [`ml_encode`], [`ml_refine`] and [`ml_forward`] evaluate the block directly
//! on tensors; [`MlBlock`] records the identical computation on a [`Tape`] so
//! its parameters can be trained.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_xoshiro::SplitMix64;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamSet, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{
    batch_norm_forward, conv2d, conv_out_size, conv_transpose2d_to, relu, BnState, ConvGeom, Mode,
    RunningStats, Scalar, Tensor,
};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlBlockConfig {
    pub in_channels: usize,
    pub d1: usize,
    pub d2: usize,
    pub kernel_size: usize,
    pub stride: usize,
    pub padding: usize,
    /// Refinement iteration count `T`.
    pub iterations: usize,
    /// Batch norm in the encoding pass. Disabling it is only meant for
    /// verification against closed-form oracles.
    #[serde(default = "yes")]
    pub batch_norm: bool,
}

fn yes() -> bool {
    true
}

impl MlBlockConfig {
    /// Same-size block: stride 1, `padding = kernel_size / 2`.
    pub fn same(in_channels: usize, width: usize, kernel_size: usize, iterations: usize) -> Self {
        Self {
            in_channels,
            d1: width,
            d2: width,
            kernel_size,
            stride: 1,
            padding: kernel_size / 2,
            iterations,
            batch_norm: true,
        }
    }

    pub fn geom(&self) -> ConvGeom {
        ConvGeom::new(self.stride, self.padding)
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0
            || self.d1 == 0
            || self.d2 == 0
            || self.kernel_size == 0
            || self.stride == 0
        {
            return Err(Error::Config(format!(
                "ML-block dimensions must be positive: {self:?}"
            )));
        }
        Ok(())
    }

    /// Spatial sizes of `gamma1` and `gamma2` for an input of size `hw`.
    pub fn code_sizes(&self, hw: (usize, usize)) -> Result<((usize, usize), (usize, usize))> {
        let k = self.kernel_size;
        let step = |n: usize| conv_out_size(n, k, self.stride, self.padding);
        let g1 = step(hw.0).zip(step(hw.1));
        let g2 = g1.and_then(|(h, w)| step(h).zip(step(w)));
        match (g1, g2) {
            (Some(a), Some(b)) => Ok((a, b)),
            _ => Err(Error::shape(
                "ml_block",
                &[hw.0, hw.1],
                &[k, self.stride, self.padding],
                "input too small for the block geometry",
            )),
        }
    }
}

/// The learned quantities of one block, held as plain tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct MlBlockParams<T> {
    pub w1: Tensor<T>,
    pub w2: Tensor<T>,
    pub c1: T,
    pub c2: T,
    pub b1: Vec<T>,
    pub b2: Vec<T>,
    pub bn1: BnState<T>,
    pub bn2: BnState<T>,
    pub stride: usize,
    pub padding: usize,
    pub iterations: usize,
    pub batch_norm: bool,
}

/// Kaiming-uniform (fan-in, ReLU gain) kernel.
pub fn kaiming_uniform<T: Scalar, R: Rng + ?Sized>(shape: [usize; 4], rng: &mut R) -> Tensor<T> {
    let fan_in = (shape[1] * shape[2] * shape[3]).max(1);
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::uniform(shape, -bound, bound, rng)
}

/// Spatial size of the probe used to estimate a kernel's operator norm.
const NORM_PROBE: usize = 16;
const POWER_ITERATIONS: usize = 30;

/// Estimates `||W||^2`, the largest eigenvalue of `conv^T conv` for kernel `w`
/// on a `NORM_PROBE`-sized input, by power iteration from a fixed start.
pub fn conv_operator_norm_sq<T: Scalar>(w: &Tensor<T>, geom: ConvGeom) -> Result<f64> {
    let [_, c_in, kh, kw] = w.shape();
    let side = NORM_PROBE.max(kh).max(kw);
    let mut v = Tensor::<f64>::randn(
        [1, c_in, side, side],
        &mut SplitMix64::seed_from_u64(0x5eed),
    );
    let w = w.cast::<f64>();
    let mut lambda = 0.0;
    for _ in 0..POWER_ITERATIONS {
        let norm = v.norm();
        if norm == 0.0 {
            return Ok(0.0);
        }
        v = v.scale(1.0 / norm);
        let wv = conv2d(&v, &w, geom)?;
        lambda = wv.dot(&wv)?;
        v = conv_transpose2d_to(&wv, &w, geom, (side, side))?;
    }
    Ok(lambda)
}

/// Rescales `w` to unit operator norm, so that a unit step on the
/// reconstruction residual is non-expansive.
fn unit_norm<T: Scalar>(w: Tensor<T>, geom: ConvGeom) -> Result<Tensor<T>> {
    let l = conv_operator_norm_sq(&w, geom)?;
    Ok(if l > 0.0 {
        w.scale(T::lit(1.0 / l.sqrt()))
    } else {
        w
    })
}

impl<T: Scalar> MlBlockParams<T> {
    /// Initialization: Kaiming-uniform kernels rescaled to unit operator
    /// norm, `c1 = c2 = 1`, zero biases, batch norm `gamma = 1`, `beta = 0`.
    pub fn init<R: Rng + ?Sized>(cfg: &MlBlockConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let k = cfg.kernel_size;
        let w1 = unit_norm(
            kaiming_uniform([cfg.d1, cfg.in_channels, k, k], rng),
            cfg.geom(),
        )?;
        let w2 = unit_norm(kaiming_uniform([cfg.d2, cfg.d1, k, k], rng), cfg.geom())?;
        Ok(Self {
            w1,
            w2,
            c1: T::one(),
            c2: T::one(),
            b1: vec![T::zero(); cfg.d1],
            b2: vec![T::zero(); cfg.d2],
            bn1: BnState::new(cfg.d1),
            bn2: BnState::new(cfg.d2),
            stride: cfg.stride,
            padding: cfg.padding,
            iterations: cfg.iterations,
            batch_norm: cfg.batch_norm,
        })
    }

    pub fn geom(&self) -> ConvGeom {
        ConvGeom::new(self.stride, self.padding)
    }

    fn check(&self) -> Result<()> {
        let (s1, s2) = (self.w1.shape(), self.w2.shape());
        if s2[1] != s1[0] {
            return Err(Error::shape(
                "ml_block",
                &s1,
                &s2,
                "W2 input channels must equal W1 output channels",
            ));
        }
        if self.b1.len() != s1[0] || self.b2.len() != s2[0] {
            return Err(Error::shape(
                "ml_block",
                &[s1[0], s2[0]],
                &[self.b1.len(), self.b2.len()],
                "bias lengths must equal layer widths",
            ));
        }
        Ok(())
    }

    fn code_sizes(&self, x: &Tensor<T>) -> Result<((usize, usize), (usize, usize))> {
        let cfg = MlBlockConfig {
            in_channels: self.w1.c(),
            d1: self.w1.n(),
            d2: self.w2.n(),
            kernel_size: self.w1.h(),
            stride: self.stride,
            padding: self.padding,
            iterations: self.iterations,
            batch_norm: self.batch_norm,
        };
        let (a, _) = cfg.code_sizes((x.h(), x.w()))?;
        let k2 = (self.w2.h(), self.w2.w());
        let g2 = conv_out_size(a.0, k2.0, self.stride, self.padding)
            .zip(conv_out_size(a.1, k2.1, self.stride, self.padding))
            .ok_or_else(|| {
                Error::shape(
                    "ml_block",
                    &[a.0, a.1],
                    &[k2.0, k2.1],
                    "gamma1 too small for W2",
                )
            })?;
        Ok((a, g2))
    }
}

#[allow(clippy::too_many_arguments)]
fn encode_layer<T: Scalar>(
    input: &Tensor<T>,
    w: &Tensor<T>,
    c: T,
    b: &[T],
    bn: &mut BnState<T>,
    geom: ConvGeom,
    use_bn: bool,
    mode: Mode,
) -> Result<Tensor<T>> {
    let pre = conv2d(input, w, geom)?.scale(c).add_channel_bias(b)?;
    if !use_bn {
        return Ok(relu(&pre));
    }
    let normed = batch_norm_forward(&pre, &bn.gamma, &bn.beta, &mut bn.running, mode)?.y;
    Ok(relu(&normed))
}

/// The encoding pass: returns `(gamma1, gamma2)`.
pub fn ml_encode<T: Scalar>(
    x: &Tensor<T>,
    p: &mut MlBlockParams<T>,
    mode: Mode,
) -> Result<(Tensor<T>, Tensor<T>)> {
    p.check()?;
    let geom = p.geom();
    let g1 = encode_layer(x, &p.w1, p.c1, &p.b1, &mut p.bn1, geom, p.batch_norm, mode)?;
    let g2 = encode_layer(
        &g1,
        &p.w2,
        p.c2,
        &p.b2,
        &mut p.bn2,
        geom,
        p.batch_norm,
        mode,
    )?;
    Ok((g1, g2))
}

/// One refinement iteration: returns the updated `(gamma1, gamma2)`.
pub fn ml_refine<T: Scalar>(
    gamma2: &Tensor<T>,
    x: &Tensor<T>,
    p: &MlBlockParams<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    p.check()?;
    let geom = p.geom();
    let (g1_hw, _) = p.code_sizes(x)?;
    let projected = conv_transpose2d_to(gamma2, &p.w2, geom, g1_hw)?;
    let t1 = conv_transpose2d_to(&projected, &p.w1, geom, (x.h(), x.w()))?.sub(x)?;
    let t2 = conv2d(&t1, &p.w1, geom)?;
    let g1 = relu(&projected.sub(&t2.scale(p.c1))?.add_channel_bias(&p.b1)?);
    let t3 = projected.sub(&g1)?;
    let t4 = conv2d(&t3, &p.w2, geom)?;
    let g2 = relu(&gamma2.sub(&t4.scale(p.c2))?.add_channel_bias(&p.b2)?);
    Ok((g1, g2))
}

/// Encoding pass followed by `p.iterations` refinements. With `trace`, also
/// returns one snapshot after the encoding pass and one per iteration.
pub fn ml_forward<T: Scalar>(
    x: &Tensor<T>,
    p: &mut MlBlockParams<T>,
    mode: Mode,
    trace: bool,
) -> Result<(Tensor<T>, Option<MlBlockTrace>)> {
    let (mut g1, mut g2) = ml_encode(x, p, mode)?;
    let mut tr = trace.then(MlBlockTrace::default);
    if let Some(tr) = tr.as_mut() {
        tr.record(
            0,
            &g1,
            &g2,
            reconstruction_residual(&g2, x, &p.w1, &p.w2, p.geom())?,
        );
    }
    for it in 1..=p.iterations {
        (g1, g2) = ml_refine(&g2, x, p)?;
        if let Some(tr) = tr.as_mut() {
            tr.record(
                it,
                &g1,
                &g2,
                reconstruction_residual(&g2, x, &p.w1, &p.w2, p.geom())?,
            );
        }
    }
    Ok((g2, tr))
}

/// `|| convT(convT(gamma2, W2), W1) - x ||`.
pub fn reconstruction_residual<T: Scalar>(
    gamma2: &Tensor<T>,
    x: &Tensor<T>,
    w1: &Tensor<T>,
    w2: &Tensor<T>,
    geom: ConvGeom,
) -> Result<f64> {
    let k1 = (w1.h(), w1.w());
    let g1_hw = conv_out_size(x.h(), k1.0, geom.stride, geom.padding)
        .zip(conv_out_size(x.w(), k1.1, geom.stride, geom.padding))
        .ok_or_else(|| Error::shape("reconstruction_residual", &x.shape(), &w1.shape(), ""))?;
    let g1 = conv_transpose2d_to(gamma2, w2, geom, g1_hw)?;
    let rec = conv_transpose2d_to(&g1, w1, geom, (x.h(), x.w()))?;
    Ok(rec.sub(x)?.norm().to_f64_lossy())
}

/// Fraction of entries with `|v| <= tol`.
pub fn sparsity<T: Scalar>(t: &Tensor<T>, tol: f64) -> f64 {
    if t.numel() == 0 {
        return 1.0;
    }
    let tol = T::lit(tol);
    let zeros = t.data().iter().filter(|v| v.abs() <= tol).count();
    zeros as f64 / t.numel() as f64
}

/// Nonnegative soft thresholding `max(0, v - lambda)`.
pub fn nonneg_soft_threshold_oracle(v: &[f64], lambda: f64) -> Vec<f64> {
    assert!(lambda >= 0.0, "threshold must be nonnegative");
    v.iter().map(|&x| (x - lambda).max(0.0)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TraceSnapshot {
    pub iteration: usize,
    pub sparsity_gamma1: f64,
    pub sparsity_gamma2: f64,
    pub residual_norm: f64,
    #[serde(skip)]
    pub gamma1: Vec<f64>,
    #[serde(skip)]
    pub gamma2: Vec<f64>,
}

/// Codes after the encoding pass and after every refinement.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct MlBlockTrace {
    pub snapshots: Vec<TraceSnapshot>,
}

impl MlBlockTrace {
    fn record<T: Scalar>(
        &mut self,
        iteration: usize,
        g1: &Tensor<T>,
        g2: &Tensor<T>,
        residual_norm: f64,
    ) {
        self.snapshots.push(TraceSnapshot {
            iteration,
            sparsity_gamma1: sparsity(g1, 0.0),
            sparsity_gamma2: sparsity(g2, 0.0),
            residual_norm,
            gamma1: g1.data().iter().map(|v| v.to_f64_lossy()).collect(),
            gamma2: g2.data().iter().map(|v| v.to_f64_lossy()).collect(),
        });
    }

    pub fn len(&self) -> usize {
        self.snapshots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }

    /// CSV with columns `iteration,sparsity_gamma1,sparsity_gamma2,residual_norm`.
    pub fn write_csv<W: Write>(&self, out: &mut W) -> Result<()> {
        writeln!(
            out,
            "iteration,sparsity_gamma1,sparsity_gamma2,residual_norm"
        )?;
        for s in &self.snapshots {
            writeln!(
                out,
                "{},{},{},{}",
                s.iteration, s.sparsity_gamma1, s.sparsity_gamma2, s.residual_norm
            )?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct BnHandles<T> {
    gamma: ParamId,
    beta: ParamId,
    running: RunningStats<T>,
}

/// Trainable block whose parameters live in a [`ParamSet`].
#[derive(Clone, Debug)]
pub struct MlBlock<T> {
    cfg: MlBlockConfig,
    w1: ParamId,
    w2: ParamId,
    c1: ParamId,
    c2: ParamId,
    b1: ParamId,
    b2: ParamId,
    bn1: BnHandles<T>,
    bn2: BnHandles<T>,
}

impl<T: Scalar> MlBlock<T> {
    /// Registers the block's parameters as `{prefix}.w1`, `{prefix}.c1`, ...
    pub fn new<R: Rng + ?Sized>(
        cfg: MlBlockConfig,
        prefix: &str,
        params: &mut ParamSet<T>,
        rng: &mut R,
    ) -> Result<Self> {
        let init = MlBlockParams::<T>::init(&cfg, rng)?;
        Ok(Self::from_params(cfg, prefix, params, init))
    }

    pub fn from_params(
        cfg: MlBlockConfig,
        prefix: &str,
        params: &mut ParamSet<T>,
        p: MlBlockParams<T>,
    ) -> Self {
        let bn = |params: &mut ParamSet<T>, name: &str, st: BnState<T>| BnHandles {
            gamma: params.add(
                format!("{prefix}.{name}.gamma"),
                Tensor::channel_vector(st.gamma),
            ),
            beta: params.add(
                format!("{prefix}.{name}.beta"),
                Tensor::channel_vector(st.beta),
            ),
            running: st.running,
        };
        let w1 = params.add(format!("{prefix}.w1"), p.w1);
        let w2 = params.add(format!("{prefix}.w2"), p.w2);
        let c1 = params.add(format!("{prefix}.c1"), Tensor::scalar(p.c1));
        let c2 = params.add(format!("{prefix}.c2"), Tensor::scalar(p.c2));
        let b1 = params.add(format!("{prefix}.b1"), Tensor::channel_vector(p.b1));
        let b2 = params.add(format!("{prefix}.b2"), Tensor::channel_vector(p.b2));
        let bn1 = bn(params, "bn1", p.bn1);
        let bn2 = bn(params, "bn2", p.bn2);
        Self {
            cfg,
            w1,
            w2,
            c1,
            c2,
            b1,
            b2,
            bn1,
            bn2,
        }
    }

    pub fn config(&self) -> &MlBlockConfig {
        &self.cfg
    }

    pub fn set_iterations(&mut self, t: usize) {
        self.cfg.iterations = t;
    }

    /// Running batch-norm statistics of the two encoding layers.
    pub fn running_stats(&self) -> [&RunningStats<T>; 2] {
        [&self.bn1.running, &self.bn2.running]
    }

    pub fn running_stats_mut(&mut self) -> [&mut RunningStats<T>; 2] {
        [&mut self.bn1.running, &mut self.bn2.running]
    }

    /// Current parameter values as a standalone [`MlBlockParams`].
    pub fn to_params(&self, params: &ParamSet<T>) -> MlBlockParams<T> {
        let bn = |h: &BnHandles<T>| BnState {
            gamma: params.value(h.gamma).data().to_vec(),
            beta: params.value(h.beta).data().to_vec(),
            running: h.running.clone(),
        };
        MlBlockParams {
            w1: params.value(self.w1).clone(),
            w2: params.value(self.w2).clone(),
            c1: params.value(self.c1).data()[0],
            c2: params.value(self.c2).data()[0],
            b1: params.value(self.b1).data().to_vec(),
            b2: params.value(self.b2).data().to_vec(),
            bn1: bn(&self.bn1),
            bn2: bn(&self.bn2),
            stride: self.cfg.stride,
            padding: self.cfg.padding,
            iterations: self.cfg.iterations,
            batch_norm: self.cfg.batch_norm,
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn encode_layer(
        tape: &mut Tape<T>,
        params: &ParamSet<T>,
        input: Var,
        w: ParamId,
        c: ParamId,
        b: ParamId,
        bn: Option<&mut BnHandles<T>>,
        geom: ConvGeom,
        mode: Mode,
    ) -> Result<Var> {
        let (w, c, b) = (
            tape.param(params, w),
            tape.param(params, c),
            tape.param(params, b),
        );
        let conv = tape.conv2d(input, w, geom)?;
        let scaled = tape.scale_by(conv, c)?;
        let pre = tape.add_channel_bias(scaled, b)?;
        let pre = match bn {
            Some(bn) => {
                let (g, be) = (tape.param(params, bn.gamma), tape.param(params, bn.beta));
                tape.batch_norm(pre, g, be, &mut bn.running, mode)?
            }
            None => pre,
        };
        Ok(tape.relu(pre))
    }

    /// Records the block on `tape` and returns `gamma2`.
    pub fn forward(
        &mut self,
        tape: &mut Tape<T>,
        params: &ParamSet<T>,
        x: Var,
        mode: Mode,
        mut trace: Option<&mut MlBlockTrace>,
    ) -> Result<Var> {
        let geom = self.cfg.geom();
        let x_shape = tape.value(x).shape();
        if x_shape[1] != self.cfg.in_channels {
            return Err(Error::shape(
                "ml_block",
                &x_shape,
                &[self.cfg.in_channels],
                "input channels must equal W1 c_in",
            ));
        }
        let (g1_hw, _) = self.cfg.code_sizes((x_shape[2], x_shape[3]))?;
        let use_bn = self.cfg.batch_norm;
        let mut g1 = Self::encode_layer(
            tape,
            params,
            x,
            self.w1,
            self.c1,
            self.b1,
            use_bn.then_some(&mut self.bn1),
            geom,
            mode,
        )?;
        let mut g2 = Self::encode_layer(
            tape,
            params,
            g1,
            self.w2,
            self.c2,
            self.b2,
            use_bn.then_some(&mut self.bn2),
            geom,
            mode,
        )?;
        let w1 = tape.param(params, self.w1);
        let w2 = tape.param(params, self.w2);
        let c1 = tape.param(params, self.c1);
        let c2 = tape.param(params, self.c2);
        let b1 = tape.param(params, self.b1);
        let b2 = tape.param(params, self.b2);
        if let Some(tr) = trace.as_deref_mut() {
            self.record(tape, tr, 0, g1, g2, x)?;
        }
        for it in 1..=self.cfg.iterations {
            let projected = tape.conv_transpose2d(g2, w2, geom, g1_hw)?;
            let rec = tape.conv_transpose2d(projected, w1, geom, (x_shape[2], x_shape[3]))?;
            let t1 = tape.sub(rec, x)?;
            let t2 = tape.conv2d(t1, w1, geom)?;
            let step = tape.scale_by(t2, c1)?;
            let moved = tape.sub(projected, step)?;
            let biased = tape.add_channel_bias(moved, b1)?;
            g1 = tape.relu(biased);
            let t3 = tape.sub(projected, g1)?;
            let t4 = tape.conv2d(t3, w2, geom)?;
            let step = tape.scale_by(t4, c2)?;
            let moved = tape.sub(g2, step)?;
            let biased = tape.add_channel_bias(moved, b2)?;
            g2 = tape.relu(biased);
            if let Some(tr) = trace.as_deref_mut() {
                self.record(tape, tr, it, g1, g2, x)?;
            }
        }
        Ok(g2)
    }

    fn record(
        &self,
        tape: &Tape<T>,
        tr: &mut MlBlockTrace,
        it: usize,
        g1: Var,
        g2: Var,
        x: Var,
    ) -> Result<()> {
        let w1 = tape.value(tape_param_var(tape, self.w1)?);
        let w2 = tape.value(tape_param_var(tape, self.w2)?);
        let res = reconstruction_residual(tape.value(g2), tape.value(x), w1, w2, self.cfg.geom())?;
        tr.record(it, tape.value(g1), tape.value(g2), res);
        Ok(())
    }
}

fn tape_param_var<T: Scalar>(tape: &Tape<T>, id: ParamId) -> Result<Var> {
    tape.bound_var(id)
        .ok_or_else(|| Error::Usage("parameter not bound on this tape".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_xoshiro::SplitMix64;

    fn rng(seed: u64) -> SplitMix64 {
        SplitMix64::seed_from_u64(seed)
    }

    fn scalar_params(w1: f64, w2: f64, c1: f64, c2: f64, b1: f64, b2: f64) -> MlBlockParams<f64> {
        MlBlockParams {
            w1: Tensor::scalar(w1),
            w2: Tensor::scalar(w2),
            c1,
            c2,
            b1: vec![b1],
            b2: vec![b2],
            bn1: BnState::new(1),
            bn2: BnState::new(1),
            stride: 1,
            padding: 0,
            iterations: 1,
            batch_norm: false,
        }
    }

    #[test]
    fn zero_input_is_a_fixed_point_of_encode() {
        let cfg = MlBlockConfig::same(3, 4, 3, 0);
        let mut p = MlBlockParams::<f64>::init(&cfg, &mut rng(1)).unwrap();
        let (g1, g2) = ml_encode(&Tensor::zeros([2, 3, 5, 5]), &mut p, Mode::Eval).unwrap();
        assert!(g1.data().iter().chain(g2.data()).all(|&v| v == 0.0));
    }

    #[test]
    fn scalar_network_encode() {
        // gamma2 = ReLU(c2 W2 ReLU(c1 W1 x + b1) + b2), identity-stat eval batch norm
        let mut p = scalar_params(1.5, -0.5, 2.0, 0.75, 0.25, 1.0);
        p.batch_norm = true;
        let s = 1.0 / (1.0 + crate::tensor::BN_EPS).sqrt();
        for x in [-2.0, -0.1, 0.0, 0.3, 1.7] {
            let (g1, g2) = ml_encode(&Tensor::scalar(x), &mut p, Mode::Eval).unwrap();
            let e1 = ((2.0 * 1.5 * x + 0.25) * s).max(0.0);
            let e2 = ((0.75 * -0.5 * e1 + 1.0) * s).max(0.0);
            assert!((g1.data()[0] - e1).abs() < 1e-14);
            assert!((g2.data()[0] - e2).abs() < 1e-14);
        }
    }

    #[test]
    fn scalar_network_refine() {
        // g1 = a; t1 = a - v; g1' = relu(a - c1 t1 + b1); gamma2' = relu(a - c2 (a - g1') + b2)
        let p = scalar_params(1.0, 1.0, 0.5, 0.25, 0.1, -0.05);
        let (g1, g2) = ml_refine(&Tensor::scalar(2.0), &Tensor::scalar(0.5), &p).unwrap();
        assert!((g1.data()[0] - 1.35).abs() < 1e-15);
        assert!((g2.data()[0] - 1.7875).abs() < 1e-15);
    }

    #[test]
    fn zero_state_refines_to_zero() {
        let cfg = MlBlockConfig::same(2, 3, 3, 1);
        let p = MlBlockParams::<f64>::init(&cfg, &mut rng(2)).unwrap();
        let (g1, g2) = ml_refine(
            &Tensor::zeros([1, 3, 4, 4]),
            &Tensor::zeros([1, 2, 4, 4]),
            &p,
        )
        .unwrap();
        assert!(g1.data().iter().chain(g2.data()).all(|&v| v == 0.0));
    }

    #[test]
    fn encode_outputs_are_nonnegative() {
        let cfg = MlBlockConfig::same(2, 4, 3, 3);
        let mut p = MlBlockParams::<f64>::init(&cfg, &mut rng(3)).unwrap();
        let x = Tensor::randn([2, 2, 6, 6], &mut rng(4));
        let (g1, g2) = ml_encode(&x, &mut p, Mode::Train).unwrap();
        assert!(g1.data().iter().chain(g2.data()).all(|&v| v >= 0.0));
        let (out, _) = ml_forward(&x, &mut p, Mode::Train, false).unwrap();
        assert!(out.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn zero_iterations_equal_encode() {
        let cfg = MlBlockConfig::same(2, 4, 3, 0);
        let mut p = MlBlockParams::<f64>::init(&cfg, &mut rng(5)).unwrap();
        let x = Tensor::randn([2, 2, 6, 6], &mut rng(6));
        let (_, g2) = ml_encode(&x, &mut p.clone(), Mode::Train).unwrap();
        let (out, _) = ml_forward(&x, &mut p, Mode::Train, false).unwrap();
        assert_eq!(out, g2);
    }

    #[test]
    fn trace_has_t_plus_one_snapshots_and_changes_nothing() {
        let cfg = MlBlockConfig::same(2, 4, 3, 2);
        let p = MlBlockParams::<f64>::init(&cfg, &mut rng(7)).unwrap();
        let x = Tensor::randn([1, 2, 6, 6], &mut rng(8));
        let (plain, none) = ml_forward(&x, &mut p.clone(), Mode::Train, false).unwrap();
        let (traced, tr) = ml_forward(&x, &mut p.clone(), Mode::Train, true).unwrap();
        assert!(none.is_none());
        assert_eq!(plain, traced);
        let tr = tr.unwrap();
        assert_eq!(tr.len(), 3);
        for s in &tr.snapshots {
            assert!((0.0..=1.0).contains(&s.sparsity_gamma1));
            assert!((0.0..=1.0).contains(&s.sparsity_gamma2));
            assert!(s.residual_norm.is_finite());
        }
        let mut csv = Vec::new();
        tr.write_csv(&mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert!(text.starts_with("iteration,sparsity_gamma1,sparsity_gamma2,residual_norm\n0,"));
        assert_eq!(text.lines().count(), 4);
    }

    #[test]
    fn sparsity_values() {
        assert_eq!(sparsity(&Tensor::<f64>::zeros([1, 1, 2, 2]), 0.0), 1.0);
        assert_eq!(sparsity(&Tensor::<f64>::full([1, 1, 2, 2], 1.0), 0.0), 0.0);
        let half = Tensor::<f64>::new([1, 1, 2, 2], vec![0.0, 1.0, 0.0, -3.0]).unwrap();
        assert_eq!(sparsity(&half, 0.0), 0.5);
        assert_eq!(sparsity(&half, 1.0), 0.75);
    }

    #[test]
    fn soft_threshold_definition() {
        assert_eq!(
            nonneg_soft_threshold_oracle(&[3.0, 0.5, -2.0], 1.0),
            vec![2.0, 0.0, 0.0]
        );
        let v = [1.5, -0.2, 0.0, 4.0];
        let r = crate::tensor::relu(&Tensor::new([1, 1, 1, 4], v.to_vec()).unwrap());
        assert_eq!(nonneg_soft_threshold_oracle(&v, 0.0), r.data());
    }

    #[test]
    fn residual_decreases_on_well_conditioned_scalar_instance() {
        // per pixel the residual contracts by 1 - c1 c2 a^2 b^2 while no unit clips
        let mut r = rng(9);
        let p = scalar_params(0.8, 1.2, 0.5, 0.5, 0.0, 0.0);
        let x = Tensor::<f64>::uniform([1, 1, 4, 4], 0.5, 1.5, &mut r);
        let mut g2 = Tensor::<f64>::uniform([1, 1, 4, 4], 0.0, 2.0, &mut r);
        let mut before = reconstruction_residual(&g2, &x, &p.w1, &p.w2, p.geom()).unwrap();
        for _ in 0..5 {
            g2 = ml_refine(&g2, &x, &p).unwrap().1;
            let after = reconstruction_residual(&g2, &x, &p.w1, &p.w2, p.geom()).unwrap();
            assert!(after <= before, "{after} > {before}");
            assert!((after - before * (1.0 - 0.25 * 0.64 * 1.44)).abs() < 1e-12);
            before = after;
        }
    }
}
