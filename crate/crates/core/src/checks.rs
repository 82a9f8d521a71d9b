//! Verification suites behind `cascsc check`: adjoint identities, finite
//! difference gradients, ML-block mechanics and metric oracles.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_xoshiro::SplitMix64;
use serde::Serialize;

use crate::autodiff::{
    finite_diff_check, Fault, FdOptions, FnObjective, Objective, ParamId, ParamSet, Tape, Var,
};
use crate::error::Result;
use crate::mask::Mask;
use crate::metrics::{dsc, hd95, hd95_brute_force};
use crate::mlblock::{
    ml_encode, ml_forward, ml_refine, nonneg_soft_threshold_oracle, MlBlock, MlBlockConfig,
    MlBlockParams,
};
use crate::segnet::{SegNet, SegNetConfig};
use crate::tensor::{
    avg_pool2x, avg_pool2x_adjoint, conv2d, conv_transpose2d, conv_transpose2d_to, upsample2x,
    upsample2x_adjoint, BnState, ConvGeom, Mode, RunningStats, Tensor,
};

pub const ADJOINT_TOL: f64 = 1e-10;
pub const GRAD_TOL: f64 = 1e-4;
pub const GRAD_STEP: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Adjoint,
    Grad,
    Oracle,
    All,
}

impl Suite {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "adjoint" => Some(Suite::Adjoint),
            "grad" => Some(Suite::Grad),
            "oracle" => Some(Suite::Oracle),
            "all" => Some(Suite::All),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct CheckResult {
    pub suite: &'static str,
    pub name: String,
    pub passed: bool,
    /// Largest error observed (0 for exact checks that held).
    pub worst: f64,
    pub tolerance: f64,
    #[serde(skip_serializing_if = "String::is_empty")]
    pub detail: String,
    /// Per-parameter maximum relative error of gradient checks.
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub max_rel_err: BTreeMap<String, f64>,
}

impl CheckResult {
    fn new(suite: &'static str, name: impl Into<String>, worst: f64, tolerance: f64) -> Self {
        Self {
            suite,
            name: name.into(),
            passed: worst <= tolerance,
            worst,
            tolerance,
            detail: String::new(),
            max_rel_err: BTreeMap::new(),
        }
    }

    fn exact(suite: &'static str, name: impl Into<String>, failures: Vec<String>) -> Self {
        let mut r = Self::new(
            suite,
            name,
            if failures.is_empty() { 0.0 } else { 1.0 },
            0.0,
        );
        r.detail = failures.join("; ");
        r
    }

    fn error(suite: &'static str, name: impl Into<String>, e: crate::error::Error) -> Self {
        let mut r = Self::new(suite, name, f64::INFINITY, 0.0);
        r.passed = false;
        r.detail = e.to_string();
        r
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct CheckReport {
    pub passed: bool,
    pub checks: Vec<CheckResult>,
}

impl CheckReport {
    pub fn failures(&self) -> Vec<&CheckResult> {
        self.checks.iter().filter(|c| !c.passed).collect()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct CheckOptions {
    pub seed: u64,
    /// Deliberately broken backward rule, to show the gradient suite catches it.
    pub fault: Option<Fault>,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self {
            seed: 7,
            fault: None,
        }
    }
}

pub fn run(suite: Suite, opts: CheckOptions) -> CheckReport {
    let mut checks = Vec::new();
    if matches!(suite, Suite::Adjoint | Suite::All) {
        checks.extend(adjoint_suite(opts.seed));
    }
    if matches!(suite, Suite::Grad | Suite::All) {
        checks.extend(grad_suite(opts.seed, opts.fault));
    }
    if matches!(suite, Suite::Oracle | Suite::All) {
        checks.extend(mlblock_suite(opts.seed));
        checks.extend(metrics_suite(opts.seed));
    }
    CheckReport {
        passed: checks.iter().all(|c| c.passed),
        checks,
    }
}

fn rel_gap(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + 1e-30)
}

/// `<conv2d(x, w), y>` against `<x, conv_transpose2d(y, w)>` for one random
/// configuration drawn from strides {1, 2}, paddings {0, 1, 2}, kernels {1, 3, 5}.
fn random_conv_adjoint(rng: &mut SplitMix64) -> Result<(f64, String)> {
    let k: usize = [1, 3, 5][rng.gen_range(0..3)];
    let stride = rng.gen_range(1..=2);
    let padding = rng.gen_range(0..=2);
    let (n, c_in, c_out) = (
        rng.gen_range(1..=2),
        rng.gen_range(1..=4),
        rng.gen_range(1..=4),
    );
    let min = k.saturating_sub(2 * padding).max(1);
    let (h, w) = (rng.gen_range(min..min + 9), rng.gen_range(min..min + 9));
    let x = Tensor::<f64>::randn([n, c_in, h, w], rng);
    let kernel = Tensor::<f64>::randn([c_out, c_in, k, k], rng);
    let geom = ConvGeom::new(stride, padding);
    let ax = conv2d(&x, &kernel, geom)?;
    let y = Tensor::<f64>::randn(ax.shape(), rng);
    let aty = conv_transpose2d_to(&y, &kernel, geom, (h, w))?;
    let desc = format!(
        "x {:?} w {:?} s{stride} p{padding}",
        x.shape(),
        kernel.shape()
    );
    Ok((rel_gap(ax.dot(&y)?, x.dot(&aty)?), desc))
}

pub fn adjoint_suite(seed: u64) -> Vec<CheckResult> {
    let mut rng = SplitMix64::seed_from_u64(seed);
    let mut out = Vec::new();

    let mut worst = (0.0f64, String::new());
    let mut failure = None;
    for _ in 0..100 {
        match random_conv_adjoint(&mut rng) {
            Ok((e, desc)) if e > worst.0 => worst = (e, desc),
            Ok(_) => {}
            Err(e) => failure = Some(e),
        }
    }
    let mut r = CheckResult::new(
        "adjoint",
        "conv2d / conv_transpose2d, 100 random configs",
        worst.0,
        ADJOINT_TOL,
    );
    r.detail = format!("worst at {}", worst.1);
    if let Some(e) = failure {
        r = CheckResult::error("adjoint", r.name, e);
    }
    out.push(r);

    // The unit-stride fast path only engages for wide inputs.
    let wide = (|| -> Result<f64> {
        let mut worst = 0.0f64;
        for (c_in, k, p, size) in [(8, 3, 1, 32), (9, 3, 0, 34), (12, 5, 2, 40), (8, 1, 0, 33)] {
            let x = Tensor::<f64>::randn([2, c_in, size, size + 1], &mut rng);
            let kernel = Tensor::<f64>::randn([3, c_in, k, k], &mut rng);
            let geom = ConvGeom::new(1, p);
            let ax = conv2d(&x, &kernel, geom)?;
            let y = Tensor::<f64>::randn(ax.shape(), &mut rng);
            worst = worst.max(rel_gap(
                ax.dot(&y)?,
                x.dot(&conv_transpose2d(&y, &kernel, geom)?)?,
            ));
        }
        Ok(worst)
    })();
    out.push(match wide {
        Ok(e) => CheckResult::new(
            "adjoint",
            "conv2d / conv_transpose2d, wide unit-stride inputs",
            e,
            ADJOINT_TOL,
        ),
        Err(e) => CheckResult::error(
            "adjoint",
            "conv2d / conv_transpose2d, wide unit-stride inputs",
            e,
        ),
    });

    let resample = (|| -> Result<(f64, f64)> {
        let (mut up, mut pool) = (0.0f64, 0.0f64);
        for _ in 0..20 {
            let (n, c, h, w) = (
                rng.gen_range(1..=2),
                rng.gen_range(1..=3),
                rng.gen_range(1..=7),
                rng.gen_range(1..=7),
            );
            let x = Tensor::<f64>::randn([n, c, h, w], &mut rng);
            let y = Tensor::<f64>::randn([n, c, 2 * h, 2 * w], &mut rng);
            up = up.max(rel_gap(
                upsample2x(&x).dot(&y)?,
                x.dot(&upsample2x_adjoint(&y)?)?,
            ));
            pool = pool.max(rel_gap(
                avg_pool2x(&y)?.dot(&x)?,
                y.dot(&avg_pool2x_adjoint(&x))?,
            ));
        }
        Ok((up, pool))
    })();
    match resample {
        Ok((up, pool)) => {
            out.push(CheckResult::new("adjoint", "upsample2x", up, ADJOINT_TOL));
            out.push(CheckResult::new("adjoint", "avg_pool2x", pool, ADJOINT_TOL));
        }
        Err(e) => out.push(CheckResult::error("adjoint", "upsample2x / avg_pool2x", e)),
    }
    out
}

fn fd_options(fault: Option<Fault>, samples: usize) -> FdOptions {
    FdOptions {
        step: GRAD_STEP,
        samples_per_param: samples,
        fault,
    }
}

fn grad_result(name: &str, report: Result<crate::autodiff::FdReport>) -> CheckResult {
    match report {
        Ok(rep) => {
            let mut r = CheckResult::new("grad", name, rep.worst(), GRAD_TOL);
            r.passed = rep.passes(GRAD_TOL);
            if rep.kink_skips > 0 {
                r.detail = format!("{} coordinates skipped at ReLU kinks", rep.kink_skips);
            }
            r.max_rel_err = rep.max_rel_err;
            r
        }
        Err(e) => CheckResult::error("grad", name, e),
    }
}

/// Finite-difference check of one operator. Every input is a parameter, and
/// the output is reduced to a scalar by a fixed random projection.
fn op_check<F>(
    name: &str,
    inputs: Vec<(&str, Tensor<f64>)>,
    seed: u64,
    fault: Option<Fault>,
    mut f: F,
) -> CheckResult
where
    F: FnMut(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut ps = ParamSet::new();
    for (n, t) in inputs {
        ps.add(n, t);
    }
    let mut proj: Option<Tensor<f64>> = None;
    let mut proj_rng = SplitMix64::seed_from_u64(seed ^ 0x5eed);
    let obj = FnObjective::new(ps, move |tape: &mut Tape<f64>, vars: &[Var]| {
        let out = f(tape, vars)?;
        let shape = tape.value(out).shape();
        let p = proj
            .get_or_insert_with(|| Tensor::randn(shape, &mut proj_rng))
            .clone();
        let pv = tape.leaf(p);
        tape.dot(out, pv)
    });
    let mut obj = obj;
    grad_result(
        name,
        finite_diff_check(&mut obj, seed, fd_options(fault, 16)),
    )
}

/// A block or network whose trainable parameters live in its own [`ParamSet`].
struct BlockObjective {
    params: ParamSet<f64>,
    block: MlBlock<f64>,
    x: ParamId,
    proj: Tensor<f64>,
}

impl Objective for BlockObjective {
    fn params(&self) -> &ParamSet<f64> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet<f64> {
        &mut self.params
    }

    fn loss(&mut self, tape: &mut Tape<f64>) -> Result<Var> {
        let x = tape.param(&self.params, self.x);
        let y = self
            .block
            .forward(tape, &self.params, x, Mode::Train, None)?;
        let p = tape.leaf(self.proj.clone());
        tape.dot(y, p)
    }
}

pub struct SegNetObjective {
    pub net: SegNet<f64>,
    pub x: Tensor<f64>,
    pub proj: Tensor<f64>,
}

impl Objective for SegNetObjective {
    fn params(&self) -> &ParamSet<f64> {
        self.net.params()
    }

    fn params_mut(&mut self) -> &mut ParamSet<f64> {
        self.net.params_mut()
    }

    fn loss(&mut self, tape: &mut Tape<f64>) -> Result<Var> {
        let x = tape.leaf(self.x.clone());
        let y = self.net.forward(tape, x, Mode::Train)?;
        let p = tape.leaf(self.proj.clone());
        tape.dot(y, p)
    }
}

/// The default architecture (T = 2 in every stage) on a 2 x 1 x 32 x 32 batch.
pub fn segnet_grad_check(seed: u64, fault: Option<Fault>) -> CheckResult {
    let mut rng = SplitMix64::seed_from_u64(seed);
    let cfg = SegNetConfig::default();
    let k = cfg.n_classes;
    let name = "segnet (default widths, T=2) at 32x32";
    let net = match SegNet::<f64>::new(cfg, &mut rng) {
        Ok(n) => n,
        Err(e) => return CheckResult::error("grad", name, e),
    };
    let x = Tensor::randn([2, 1, 32, 32], &mut rng);
    let proj = Tensor::randn([2, k, 32, 32], &mut rng).scale(1.0 / (2 * k * 1024) as f64);
    let mut obj = SegNetObjective { net, x, proj };
    grad_result(
        name,
        finite_diff_check(&mut obj, seed, fd_options(fault, 16)),
    )
}

pub fn grad_suite(seed: u64, fault: Option<Fault>) -> Vec<CheckResult> {
    let mut rng = SplitMix64::seed_from_u64(seed.wrapping_add(1));
    let mut r = |shape: [usize; 4]| Tensor::<f64>::randn(shape, &mut rng);
    let mut out = Vec::new();
    let s = seed;

    for (label, geom, xs, ws) in [
        (
            "conv2d stride 1 pad 1",
            ConvGeom::new(1, 1),
            [2, 3, 6, 6],
            [4, 3, 3, 3],
        ),
        (
            "conv2d stride 2 pad 1",
            ConvGeom::new(2, 1),
            [1, 2, 7, 7],
            [3, 2, 3, 3],
        ),
        (
            "conv2d stride 1 pad 2 k5",
            ConvGeom::new(1, 2),
            [1, 2, 6, 5],
            [2, 2, 5, 5],
        ),
        (
            "conv2d wide unit stride",
            ConvGeom::new(1, 1),
            [1, 9, 32, 32],
            [2, 9, 3, 3],
        ),
    ] {
        let inputs = vec![("x", r(xs)), ("w", r(ws))];
        out.push(op_check(label, inputs, s, fault, move |t, v| {
            t.conv2d(v[0], v[1], geom)
        }));
    }
    for (label, geom, ys, ws, hw) in [
        (
            "conv_transpose2d stride 2 pad 1",
            ConvGeom::new(2, 1),
            [1, 3, 4, 4],
            [3, 2, 3, 3],
            (7, 7),
        ),
        (
            "conv_transpose2d stride 1 pad 1",
            ConvGeom::new(1, 1),
            [2, 3, 5, 5],
            [3, 2, 3, 3],
            (5, 5),
        ),
    ] {
        let inputs = vec![("y", r(ys)), ("w", r(ws))];
        out.push(op_check(label, inputs, s, fault, move |t, v| {
            t.conv_transpose2d(v[0], v[1], geom, hw)
        }));
    }
    out.push(op_check(
        "relu",
        vec![("x", r([2, 3, 4, 4]))],
        s,
        fault,
        |t, v| Ok(t.relu(v[0])),
    ));
    let pair = |r: &mut dyn FnMut([usize; 4]) -> Tensor<f64>| {
        vec![("a", r([2, 2, 3, 3])), ("b", r([2, 2, 3, 3]))]
    };
    out.push(op_check("add", pair(&mut r), s, fault, |t, v| {
        t.add(v[0], v[1])
    }));
    out.push(op_check("sub", pair(&mut r), s, fault, |t, v| {
        t.sub(v[0], v[1])
    }));
    out.push(op_check("mul", pair(&mut r), s, fault, |t, v| {
        t.mul(v[0], v[1])
    }));
    out.push(op_check("dot", pair(&mut r), s, fault, |t, v| {
        t.dot(v[0], v[1])
    }));
    out.push(op_check(
        "scale",
        vec![("x", r([1, 2, 3, 3]))],
        s,
        fault,
        |t, v| Ok(t.scale(v[0], -1.7)),
    ));
    out.push(op_check(
        "scale_by",
        vec![("x", r([1, 2, 3, 3])), ("c", r([1, 1, 1, 1]))],
        s,
        fault,
        |t, v| t.scale_by(v[0], v[1]),
    ));
    out.push(op_check(
        "add_channel_bias",
        vec![("x", r([2, 3, 4, 4])), ("b", r([1, 3, 1, 1]))],
        s,
        fault,
        |t, v| t.add_channel_bias(v[0], v[1]),
    ));
    for mode in [Mode::Train, Mode::Eval] {
        let mut running = RunningStats::<f64>::new(2);
        running.mean = vec![0.3, -0.2];
        running.var = vec![1.5, 0.7];
        let inputs = vec![
            ("x", r([3, 2, 4, 4])),
            ("gamma", r([1, 2, 1, 1])),
            ("beta", r([1, 2, 1, 1])),
        ];
        let label = format!(
            "batch_norm {}",
            if mode == Mode::Train { "train" } else { "eval" }
        );
        out.push(op_check(&label, inputs, s, fault, move |t, v| {
            // Fresh statistics per pass so every evaluation sees the same state.
            let mut st = running.clone();
            t.batch_norm(v[0], v[1], v[2], &mut st, mode)
        }));
    }
    out.push(op_check(
        "upsample2x",
        vec![("x", r([1, 2, 3, 4]))],
        s,
        fault,
        |t, v| Ok(t.upsample2x(v[0])),
    ));
    out.push(op_check(
        "avg_pool2x",
        vec![("x", r([1, 2, 4, 6]))],
        s,
        fault,
        |t, v| t.avg_pool2x(v[0]),
    ));
    out.push(op_check(
        "concat",
        vec![("a", r([1, 2, 3, 3])), ("b", r([1, 3, 3, 3]))],
        s,
        fault,
        |t, v| t.concat(v[0], v[1]),
    ));
    out.push(op_check(
        "sum",
        vec![("x", r([2, 2, 3, 3]))],
        s,
        fault,
        |t, v| Ok(t.sum(v[0])),
    ));

    let mut trng = SplitMix64::seed_from_u64(seed.wrapping_add(2));
    let target: Vec<u8> = (0..2 * 3 * 3).map(|_| trng.gen_range(0..4)).collect();
    let tg = target.clone();
    out.push(op_check(
        "cross_entropy",
        vec![("logits", r([2, 4, 3, 3]))],
        s,
        fault,
        move |t, v| t.cross_entropy(v[0], &tg),
    ));
    out.push(op_check(
        "dice_loss",
        vec![("logits", r([2, 4, 3, 3]))],
        s,
        fault,
        move |t, v| t.dice_loss(v[0], &target, 4, 1e-5),
    ));

    for (t, stride) in [(0, 1), (1, 1), (2, 1), (2, 2)] {
        out.push(mlblock_grad_check(seed, fault, t, stride));
    }
    out.push(segnet_grad_check(seed, fault));
    out
}

/// Gradient through the encoding pass and `t` unrolled refinements, in
/// which every kernel is used both as a convolution and as its transpose.
fn mlblock_grad_check(seed: u64, fault: Option<Fault>, t: usize, stride: usize) -> CheckResult {
    let name = format!("ml_block T={t} stride {stride}");
    let run = || -> Result<crate::autodiff::FdReport> {
        let mut rng = SplitMix64::seed_from_u64(seed.wrapping_add(3 + t as u64));
        let mut params = ParamSet::new();
        let mut cfg = MlBlockConfig::same(3, 4, 3, t);
        cfg.stride = stride;
        let block = MlBlock::new(cfg.clone(), "ml", &mut params, &mut rng)?;
        let x = params.add("x", Tensor::randn([2, 3, 8, 8], &mut rng));
        let (_, g2) = cfg.code_sizes((8, 8))?;
        let proj = Tensor::randn([2, 4, g2.0, g2.1], &mut rng);
        let mut obj = BlockObjective {
            params,
            block,
            x,
            proj,
        };
        finite_diff_check(&mut obj, seed, fd_options(fault, 16))
    };
    grad_result(&name, run())
}

fn bitwise_eq(a: &Tensor<f64>, b: &Tensor<f64>) -> bool {
    a.shape() == b.shape()
        && a.data()
            .iter()
            .zip(b.data())
            .all(|(x, y)| x.to_bits() == y.to_bits())
}

pub fn mlblock_suite(seed: u64) -> Vec<CheckResult> {
    let mut rng = SplitMix64::seed_from_u64(seed.wrapping_add(4));
    let mut out = Vec::new();

    let zero_t = (|| -> Result<Vec<String>> {
        let mut fails = Vec::new();
        for (i, (c_in, d, k, stride)) in [(2, 4, 3, 1), (3, 5, 1, 1), (1, 3, 3, 2), (4, 2, 5, 1)]
            .into_iter()
            .enumerate()
        {
            let mut cfg = MlBlockConfig::same(c_in, d, k, 0);
            cfg.stride = stride;
            let p = MlBlockParams::<f64>::init(&cfg, &mut rng)?;
            let x = Tensor::randn([2, c_in, 8, 8], &mut rng);
            let (_, g2) = ml_encode(&x, &mut p.clone(), Mode::Train)?;
            let (y, _) = ml_forward(&x, &mut p.clone(), Mode::Train, false)?;
            if !bitwise_eq(&g2, &y) {
                fails.push(format!("config {i}: tensor path differs"));
            }
            let mut params = ParamSet::new();
            let mut block = MlBlock::from_params(cfg, "ml", &mut params, p);
            let mut tape = Tape::new();
            let xv = tape.leaf(x);
            let yv = block.forward(&mut tape, &params, xv, Mode::Train, None)?;
            if !bitwise_eq(tape.value(yv), &g2) {
                fails.push(format!("config {i}: tape path differs"));
            }
        }
        Ok(fails)
    })();
    out.push(match zero_t {
        Ok(f) => CheckResult::exact("oracle", "ml_block T=0 equals the encoding pass bitwise", f),
        Err(e) => CheckResult::error("oracle", "ml_block T=0 equals the encoding pass", e),
    });

    let fixed = (|| -> Result<Vec<String>> {
        let mut fails = Vec::new();
        for (stride, h, g1h, g2h) in [(1usize, 6usize, 6usize, 6usize), (2, 8, 4, 2)] {
            let mut cfg = MlBlockConfig::same(2, 3, 3, 1);
            cfg.stride = stride;
            cfg.batch_norm = false;
            let mut p = MlBlockParams::<f64>::init(&cfg, &mut rng)?;
            p.w1 = Tensor::uniform(p.w1.shape(), 0.0, 1.0, &mut rng);
            p.w2 = Tensor::uniform(p.w2.shape(), 0.0, 1.0, &mut rng);
            p.c1 = rng.gen_range(0.1..1.0);
            p.c2 = rng.gen_range(0.1..1.0);
            let g2_star =
                Tensor::<f64>::uniform([2, 3, g2h, g2h], -0.5, 1.0, &mut rng).map(|v| v.max(0.0));
            let g1_star = conv_transpose2d_to(&g2_star, &p.w2, p.geom(), (g1h, g1h))?;
            let x = conv_transpose2d_to(&g1_star, &p.w1, p.geom(), (h, h))?;
            for t in 1..=5 {
                let mut g2 = g2_star.clone();
                let mut g1 = g1_star.clone();
                for _ in 0..t {
                    (g1, g2) = ml_refine(&g2, &x, &p)?;
                }
                if !bitwise_eq(&g2, &g2_star) || !bitwise_eq(&g1, &g1_star) {
                    fails.push(format!("stride {stride}, T={t}: codes moved"));
                }
            }
        }
        Ok(fails)
    })();
    out.push(match fixed {
        Ok(f) => CheckResult::exact(
            "oracle",
            "ml_refine keeps the constructed fixed point for T=1..5",
            f,
        ),
        Err(e) => CheckResult::error("oracle", "ml_refine keeps the constructed fixed point", e),
    });

    let soft = (|| -> Result<Vec<String>> {
        let mut fails = Vec::new();
        for c in [1usize, 3] {
            let mut cfg = MlBlockConfig::same(c, c, 1, 0);
            cfg.batch_norm = false;
            let mut p = MlBlockParams::<f64>::init(&cfg, &mut rng)?;
            let eye = Tensor::from_fn([c, c, 1, 1], |[o, i, _, _]| if o == i { 1.0 } else { 0.0 });
            let lambda = rng.gen_range(0.0..0.5);
            p.w1 = eye.clone();
            p.w2 = eye;
            p.c1 = 1.0;
            p.c2 = 1.0;
            p.b1 = vec![-lambda; c];
            p.b2 = vec![-lambda; c];
            p.bn1 = BnState::new(c);
            p.bn2 = BnState::new(c);
            let x = Tensor::<f64>::randn([3, c, 1, 1], &mut rng);
            let (g1, g2) = ml_encode(&x, &mut p, Mode::Eval)?;
            let e1 = nonneg_soft_threshold_oracle(x.data(), lambda);
            let e2 = nonneg_soft_threshold_oracle(&e1, lambda);
            let same =
                |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(u, v)| u.to_bits() == v.to_bits());
            if !same(g1.data(), &e1) || !same(g2.data(), &e2) {
                fails.push(format!("{c} channels, lambda {lambda}"));
            }
        }
        Ok(fails)
    })();
    out.push(match soft {
        Ok(f) => CheckResult::exact(
            "oracle",
            "1x1 ml_encode equals nonnegative soft thresholding",
            f,
        ),
        Err(e) => CheckResult::error(
            "oracle",
            "1x1 ml_encode equals nonnegative soft thresholding",
            e,
        ),
    });
    out
}

fn random_mask(rng: &mut SplitMix64, h: usize, w: usize, density: f64) -> Mask {
    Mask {
        h,
        w,
        labels: (0..h * w).map(|_| rng.gen_bool(density) as u8).collect(),
    }
}

pub fn metrics_suite(seed: u64) -> Vec<CheckResult> {
    let mut rng = SplitMix64::seed_from_u64(seed.wrapping_add(5));
    let mut out = Vec::new();

    let mut fails = Vec::new();
    let mut worst = 0.0f64;
    for i in 0..200 {
        let density = [0.02, 0.1, 0.3, 0.6][i % 4];
        let (p, g) = (
            random_mask(&mut rng, 16, 16, density),
            random_mask(&mut rng, 16, 16, density),
        );
        match (hd95(&p, &g, 1), hd95_brute_force(&p, &g, 1)) {
            (Ok(a), Ok(b)) if a.to_bits() == b.to_bits() => {}
            (Ok(a), Ok(b)) => {
                worst = worst.max((a - b).abs());
                fails.push(format!("pair {i}: {a} vs {b}"));
            }
            (a, b) => fails.push(format!("pair {i}: {a:?} / {b:?}")),
        }
    }
    let mut r = CheckResult::exact(
        "oracle",
        "hd95 equals the brute-force oracle on 200 random 16x16 pairs",
        fails,
    );
    r.worst = r.worst.max(worst);
    out.push(r);

    let mut fails = Vec::new();
    let block = |cells: &[(usize, usize)]| {
        let mut m = Mask::filled(4, 4, 0);
        for &(y, x) in cells {
            m.labels[y * 4 + x] = 1;
        }
        m
    };
    let a = block(&[(0, 0), (0, 1), (1, 0), (1, 1)]);
    let b = block(&[(2, 2), (2, 3), (3, 2), (3, 3)]);
    let c = block(&[(0, 0), (0, 1), (3, 2), (3, 3)]);
    for (label, p, g, want) in [
        ("identical", &a, &a, 1.0),
        ("disjoint", &a, &b, 0.0),
        ("half overlap", &a, &c, 0.5),
    ] {
        match dsc(p, g, 1) {
            Ok(v) if v == want => {}
            other => fails.push(format!("{label}: {other:?}, expected {want}")),
        }
    }
    let (p, g) = (block(&[(0, 0)]), block(&[(3, 3)]));
    match hd95(&p, &g, 1) {
        Ok(v) if v == 18f64.sqrt() => {}
        other => fails.push(format!("single pixels: {other:?}")),
    }
    let empty = Mask::filled(4, 4, 0);
    if !matches!(hd95(&empty, &empty, 1), Ok(v) if v == 0.0) {
        fails.push("both empty".into());
    }
    if !matches!(hd95(&a, &empty, 1), Ok(v) if v == 32f64.sqrt()) {
        fails.push("one empty".into());
    }
    out.push(CheckResult::exact(
        "oracle",
        "dsc and hd95 closed-form fixtures",
        fails,
    ));
    out
}
