//! Encoder-decoder segmentation network with ML-block decoder stages.
//!
//! Each decoder stage upsamples the current map 2x, applies an up-conv
//! (`conv3x3-BN-ReLU`), concatenates the matching encoder skip and runs an
//! [`MlBlock`] on the result. A 1x1 convolution with per-class bias turns the
//! last stage into logits.

mod checkpoint;
mod encoder;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use encoder::{CnnEncoder, Encoder, EncoderOutput};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamSet, Tape, Var};
use crate::error::{Error, Result};
use crate::mask::{argmax_channels, Mask};
use crate::mlblock::{kaiming_uniform, MlBlock, MlBlockConfig, MlBlockTrace};
use crate::tensor::{ConvGeom, Mode, RunningStats, Scalar, Tensor};
use encoder::ConvBnRelu;

/// Architecture hyperparameters. Everything needed to rebuild the network
/// from a checkpoint lives here.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegNetConfig {
    pub in_channels: usize,
    pub n_classes: usize,
    /// Encoder widths, shallowest first. The last entry is the bottleneck.
    pub encoder_channels: Vec<usize>,
    /// Decoder stage widths, deepest stage first.
    pub decoder_channels: Vec<usize>,
    /// ML-block kernel size (odd; padding keeps the size).
    pub kernel_size: usize,
    /// ML-block iteration count `T` per decoder stage, deepest first.
    pub iterations: Vec<usize>,
}

impl Default for SegNetConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            n_classes: 4,
            encoder_channels: vec![16, 32, 64, 128],
            decoder_channels: vec![16, 8, 8],
            kernel_size: 3,
            iterations: vec![2; 3],
        }
    }
}

impl SegNetConfig {
    pub fn validate(&self) -> Result<()> {
        let stages = self.encoder_channels.len().saturating_sub(1);
        if self.in_channels == 0 || self.n_classes < 2 {
            return Err(Error::Config(
                "need in_channels >= 1 and n_classes >= 2".into(),
            ));
        }
        if self.n_classes > 256 {
            return Err(Error::Config("n_classes must fit in a byte label".into()));
        }
        if stages == 0 || self.encoder_channels.contains(&0) {
            return Err(Error::Config(
                "encoder needs at least two levels of positive width".into(),
            ));
        }
        if self.decoder_channels.len() != stages || self.decoder_channels.contains(&0) {
            return Err(Error::Config(format!(
                "decoder_channels must hold {stages} positive widths, got {:?}",
                self.decoder_channels
            )));
        }
        if self.iterations.len() != stages {
            return Err(Error::Config(format!(
                "iterations must hold one T per decoder stage ({stages}), got {:?}",
                self.iterations
            )));
        }
        if self.kernel_size.is_multiple_of(2) {
            return Err(Error::Config("kernel_size must be odd".into()));
        }
        Ok(())
    }

    pub fn set_all_iterations(&mut self, t: usize) {
        self.iterations.iter_mut().for_each(|v| *v = t);
    }

    /// Block config of decoder stage `i`.
    pub fn stage_block(&self, i: usize) -> MlBlockConfig {
        let skip = self.encoder_channels[self.encoder_channels.len() - 2 - i];
        let d = self.decoder_channels[i];
        MlBlockConfig::same(d + skip, d, self.kernel_size, self.iterations[i])
    }

    /// Number of trainable scalars for this config with the default encoder.
    pub fn param_count(&self) -> usize {
        let conv_bn = |cin: usize, cout: usize| cout * cin * 9 + 2 * cout;
        let mut total = 0;
        let mut c_in = self.in_channels;
        for &c in &self.encoder_channels {
            total += conv_bn(c_in, c) + conv_bn(c, c);
            c_in = c;
        }
        let mut cur = *self.encoder_channels.last().expect("validated");
        for i in 0..self.decoder_channels.len() {
            let d = self.decoder_channels[i];
            total += conv_bn(cur, d);
            let b = self.stage_block(i);
            let k2 = b.kernel_size * b.kernel_size;
            total += b.d1 * b.in_channels * k2 + b.d2 * b.d1 * k2;
            total += 2 + b.d1 + b.d2 + 2 * (b.d1 + b.d2);
            cur = d;
        }
        total + self.n_classes * cur + self.n_classes
    }
}

struct DecoderStage<T> {
    up: ConvBnRelu<T>,
    block: MlBlock<T>,
}

/// The full network. Owns its parameters.
pub struct SegNet<T: Scalar> {
    cfg: SegNetConfig,
    params: ParamSet<T>,
    encoder: Box<dyn Encoder<T>>,
    stages: Vec<DecoderStage<T>>,
    head_w: ParamId,
    head_b: ParamId,
}

impl<T: Scalar> SegNet<T> {
    /// Builds the network with the default CNN encoder.
    pub fn new<R: Rng + ?Sized>(cfg: SegNetConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamSet::new();
        let encoder = CnnEncoder::new(cfg.in_channels, &cfg.encoder_channels, &mut params, rng)?;
        Self::assemble(cfg, params, Box::new(encoder), rng)
    }

    /// Builds the decoder and head on top of a custom encoder whose
    /// parameters are already registered in `params`.
    pub fn with_encoder<R: Rng + ?Sized>(
        cfg: SegNetConfig,
        params: ParamSet<T>,
        encoder: Box<dyn Encoder<T>>,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut want = cfg.encoder_channels.clone();
        let bottleneck = want.pop().expect("validated");
        if encoder.skip_channels() != want || encoder.bottleneck_channels() != bottleneck {
            return Err(Error::Config(format!(
                "encoder widths {:?} + {} do not match config {:?}",
                encoder.skip_channels(),
                encoder.bottleneck_channels(),
                cfg.encoder_channels
            )));
        }
        Self::assemble(cfg, params, encoder, rng)
    }

    fn assemble<R: Rng + ?Sized>(
        cfg: SegNetConfig,
        mut params: ParamSet<T>,
        encoder: Box<dyn Encoder<T>>,
        rng: &mut R,
    ) -> Result<Self> {
        let mut stages = Vec::with_capacity(cfg.decoder_channels.len());
        let mut cur = encoder.bottleneck_channels();
        for (i, &d) in cfg.decoder_channels.iter().enumerate() {
            let up = ConvBnRelu::new(format!("dec{i}.up"), cur, d, &mut params, rng);
            let block = MlBlock::new(cfg.stage_block(i), &format!("dec{i}.ml"), &mut params, rng)?;
            stages.push(DecoderStage { up, block });
            cur = d;
        }
        let head_w = params.add("head.w", kaiming_uniform([cfg.n_classes, cur, 1, 1], rng));
        let head_b = params.add("head.b", Tensor::zeros([1, cfg.n_classes, 1, 1]));
        Ok(Self {
            cfg,
            params,
            encoder,
            stages,
            head_w,
            head_b,
        })
    }

    pub fn config(&self) -> &SegNetConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    /// Sets `T` for every decoder stage.
    pub fn set_iterations(&mut self, t: usize) {
        self.cfg.set_all_iterations(t);
        for s in &mut self.stages {
            s.block.set_iterations(t);
        }
    }

    pub fn set_stage_iterations(&mut self, stage: usize, t: usize) {
        self.cfg.iterations[stage] = t;
        self.stages[stage].block.set_iterations(t);
    }

    /// Named batch-norm running statistics in a fixed order.
    pub fn buffers(&self) -> Vec<(String, &RunningStats<T>)> {
        let mut out = self.encoder.buffers();
        for (i, s) in self.stages.iter().enumerate() {
            out.push((format!("{}.bn", s.up.name), &s.up.running));
            let [a, b] = s.block.running_stats();
            out.push((format!("dec{i}.ml.bn1"), a));
            out.push((format!("dec{i}.ml.bn2"), b));
        }
        out
    }

    pub fn buffers_mut(&mut self) -> Vec<(String, &mut RunningStats<T>)> {
        let mut out = self.encoder.buffers_mut();
        for (i, s) in self.stages.iter_mut().enumerate() {
            out.push((format!("{}.bn", s.up.name), &mut s.up.running));
            let [a, b] = s.block.running_stats_mut();
            out.push((format!("dec{i}.ml.bn1"), a));
            out.push((format!("dec{i}.ml.bn2"), b));
        }
        out
    }

    pub fn encode(&mut self, tape: &mut Tape<T>, x: Var, mode: Mode) -> Result<EncoderOutput> {
        let c = tape.value(x).c();
        if c != self.cfg.in_channels {
            return Err(Error::shape(
                "segnet",
                &tape.value(x).shape(),
                &[self.cfg.in_channels],
                "input channel count mismatch",
            ));
        }
        self.encoder.encode(tape, &self.params, x, mode)
    }

    /// Runs the decoder and head. When `traces` is given, one trace per
    /// stage (deepest first) is appended.
    pub fn decode(
        &mut self,
        tape: &mut Tape<T>,
        enc: &EncoderOutput,
        mode: Mode,
        mut traces: Option<&mut Vec<MlBlockTrace>>,
    ) -> Result<Var> {
        if enc.features.len() != self.stages.len() {
            return Err(Error::Usage(format!(
                "decoder has {} stages but encoder produced {} skips",
                self.stages.len(),
                enc.features.len()
            )));
        }
        let mut cur = enc.bottleneck;
        for (s, &skip) in self.stages.iter_mut().zip(enc.features.iter().rev()) {
            let up = tape.upsample2x(cur);
            let up = s.up.forward(tape, &self.params, up, mode)?;
            let cat = tape.concat(up, skip)?;
            cur = match traces.as_deref_mut() {
                Some(list) => {
                    let mut tr = MlBlockTrace::default();
                    let out = s
                        .block
                        .forward(tape, &self.params, cat, mode, Some(&mut tr))?;
                    list.push(tr);
                    out
                }
                None => s.block.forward(tape, &self.params, cat, mode, None)?,
            };
        }
        let w = tape.param(&self.params, self.head_w);
        let b = tape.param(&self.params, self.head_b);
        let y = tape.conv2d(cur, w, ConvGeom::default())?;
        tape.add_channel_bias(y, b)
    }

    /// Records the full network on `tape` and returns the logits variable.
    pub fn forward(&mut self, tape: &mut Tape<T>, x: Var, mode: Mode) -> Result<Var> {
        let enc = self.encode(tape, x, mode)?;
        self.decode(tape, &enc, mode, None)
    }

    /// Logits for a batch, without keeping the tape.
    pub fn logits(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let y = self.forward(&mut tape, xv, mode)?;
        Ok(tape.value(y).clone())
    }

    /// Eval-mode logits plus per-stage ML-block traces.
    pub fn logits_traced(&mut self, x: &Tensor<T>) -> Result<(Tensor<T>, Vec<MlBlockTrace>)> {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let enc = self.encode(&mut tape, xv, Mode::Eval)?;
        let mut traces = Vec::new();
        let y = self.decode(&mut tape, &enc, Mode::Eval, Some(&mut traces))?;
        Ok((tape.value(y).clone(), traces))
    }

    /// Eval-mode argmax masks, one per batch item.
    pub fn predict(&mut self, x: &Tensor<T>) -> Result<Vec<Mask>> {
        Ok(argmax_channels(&self.logits(x, Mode::Eval)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_diff_check, FdOptions, Objective};
    use crate::rng::{stream, Stream};

    fn small_cfg() -> SegNetConfig {
        SegNetConfig {
            in_channels: 1,
            n_classes: 3,
            encoder_channels: vec![2, 3, 3, 4],
            decoder_channels: vec![3, 2, 2],
            kernel_size: 3,
            iterations: vec![1, 2, 1],
        }
    }

    #[test]
    fn shape_chain_at_96() {
        let mut rng = stream(1, Stream::Init);
        let mut net = SegNet::<f32>::new(SegNetConfig::default(), &mut rng).unwrap();
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::randn([1, 1, 96, 96], &mut rng));
        let enc = net.encode(&mut tape, x, Mode::Train).unwrap();
        let sizes: Vec<[usize; 4]> = enc
            .features
            .iter()
            .map(|&f| tape.value(f).shape())
            .collect();
        assert_eq!(
            sizes,
            vec![[1, 16, 96, 96], [1, 32, 48, 48], [1, 64, 24, 24]]
        );
        assert_eq!(tape.value(enc.bottleneck).shape(), [1, 128, 12, 12]);
        let mut traces = Vec::new();
        let y = net
            .decode(&mut tape, &enc, Mode::Train, Some(&mut traces))
            .unwrap();
        assert_eq!(tape.value(y).shape(), [1, 4, 96, 96]);
        let code_len: Vec<usize> = traces.iter().map(|t| t.snapshots[0].gamma2.len()).collect();
        assert_eq!(code_len, vec![16 * 24 * 24, 8 * 48 * 48, 8 * 96 * 96]);
    }

    #[test]
    fn indivisible_input_is_a_shape_error() {
        let mut rng = stream(1, Stream::Init);
        let mut net = SegNet::<f64>::new(small_cfg(), &mut rng).unwrap();
        let err = net
            .logits(&Tensor::zeros([1, 1, 36, 32]), Mode::Eval)
            .unwrap_err();
        assert!(
            matches!(err, Error::Shape(ref s) if s.detail.contains("multiples of 8")),
            "{err}"
        );
    }

    #[test]
    fn zero_input_with_zero_final_convs_gives_zero_features() {
        let mut rng = stream(2, Stream::Init);
        let mut net = SegNet::<f64>::new(small_cfg(), &mut rng).unwrap();
        for name in [
            "enc0.conv1.w",
            "enc1.conv1.w",
            "enc2.conv1.w",
            "enc3.conv1.w",
        ] {
            let id = net.params().id_of(name).unwrap();
            net.params_mut().get_mut(id).value.data_mut().fill(0.0);
        }
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros([2, 1, 16, 16]));
        let enc = net.encode(&mut tape, x, Mode::Eval).unwrap();
        for v in enc.features.iter().chain([&enc.bottleneck]) {
            assert_eq!(tape.value(*v).max_abs(), 0.0);
        }
    }

    #[test]
    fn forward_is_bitwise_deterministic() {
        let run = || {
            let mut rng = stream(9, Stream::Init);
            let mut net = SegNet::<f32>::new(small_cfg(), &mut rng).unwrap();
            let x = Tensor::randn([2, 1, 16, 16], &mut stream(9, Stream::Data));
            net.logits(&x, Mode::Train).unwrap().into_data()
        };
        let (a, b) = (run(), run());
        assert!(a.iter().zip(&b).all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    #[test]
    fn parameter_count_fixture() {
        // Encoder: 2 conv3x3 per level plus BN gamma/beta.
        //   level widths 16,32,64,128 from 1 input channel
        //   (144+32)+(2304+32) + (4608+64)+(9216+64) + (18432+128)+(36864+128)
        //   + (73728+256)+(147456+256) = 293_712
        // Up convs: 128->16, 16->8, 8->8 with BN: 18464 + 1168 + 592 = 20_224
        // ML-blocks (in = d + skip, d1 = d2 = d, k = 3):
        //   80->16: 11520+2304 + 2 + 32 + 64 = 13_922
        //   40->8:  2880+576   + 2 + 16 + 32 =  3_506
        //   24->8:  1728+576   + 2 + 16 + 32 =  2_354
        // Head: 4*8 + 4 = 36
        let cfg = SegNetConfig::default();
        let expected = 293_712 + 20_224 + 13_922 + 3_506 + 2_354 + 36;
        assert_eq!(cfg.param_count(), expected);
        let net = SegNet::<f32>::new(cfg, &mut stream(0, Stream::Init)).unwrap();
        assert_eq!(net.params().numel(), expected);
    }

    #[test]
    fn config_validation() {
        let mut cfg = small_cfg();
        cfg.iterations = vec![1];
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let mut cfg = small_cfg();
        cfg.decoder_channels.push(2);
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let mut cfg = small_cfg();
        cfg.kernel_size = 2;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    /// Decoder built by hand from the same parameters, with no refinement.
    fn plain_decoder(net: &mut SegNet<f64>, tape: &mut Tape<f64>, x: Var) -> Var {
        let enc = net.encode(tape, x, Mode::Train).unwrap();
        let p = &net.params;
        let mut cur = enc.bottleneck;
        for (i, (s, &skip)) in net
            .stages
            .iter_mut()
            .zip(enc.features.iter().rev())
            .enumerate()
        {
            let up = tape.upsample2x(cur);
            let up = s.up.forward(tape, p, up, Mode::Train).unwrap();
            let mut h = tape.concat(up, skip).unwrap();
            let [r1, r2] = s.block.running_stats_mut();
            for (layer, running) in [("1", r1), ("2", r2)] {
                let get = |n: &str| p.id_of(&format!("dec{i}.ml.{n}")).unwrap();
                let w = tape.param(p, get(&format!("w{layer}")));
                let c = tape.param(p, get(&format!("c{layer}")));
                let b = tape.param(p, get(&format!("b{layer}")));
                let g = tape.param(p, get(&format!("bn{layer}.gamma")));
                let be = tape.param(p, get(&format!("bn{layer}.beta")));
                let y = tape.conv2d(h, w, ConvGeom::new(1, 1)).unwrap();
                let y = tape.scale_by(y, c).unwrap();
                let y = tape.add_channel_bias(y, b).unwrap();
                let y = tape.batch_norm(y, g, be, running, Mode::Train).unwrap();
                h = tape.relu(y);
            }
            cur = h;
        }
        let w = tape.param(p, net.head_w);
        let b = tape.param(p, net.head_b);
        let y = tape.conv2d(cur, w, ConvGeom::default()).unwrap();
        tape.add_channel_bias(y, b).unwrap()
    }

    #[test]
    fn zero_iterations_is_a_plain_decoder() {
        let mut rng = stream(3, Stream::Init);
        let mut net = SegNet::<f64>::new(small_cfg(), &mut rng).unwrap();
        net.set_iterations(0);
        let x = Tensor::randn([2, 1, 16, 16], &mut rng);
        let mut twin = SegNet::<f64>::new(small_cfg(), &mut stream(3, Stream::Init)).unwrap();
        let got = net.logits(&x, Mode::Train).unwrap();
        let mut tape = Tape::new();
        let xv = tape.leaf(x);
        let y = plain_decoder(&mut twin, &mut tape, xv);
        let want = tape.value(y);
        assert!(got
            .data()
            .iter()
            .zip(want.data())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
        assert_eq!(net.buffers()[0].1, twin.buffers()[0].1);
    }

    struct NetObjective {
        net: SegNet<f64>,
        x: Tensor<f64>,
        proj: Tensor<f64>,
    }

    impl Objective for NetObjective {
        fn params(&self) -> &ParamSet<f64> {
            &self.net.params
        }
        fn params_mut(&mut self) -> &mut ParamSet<f64> {
            &mut self.net.params
        }
        fn loss(&mut self, tape: &mut Tape<f64>) -> Result<Var> {
            let x = tape.leaf(self.x.clone());
            let y = self.net.forward(tape, x, Mode::Train)?;
            let p = tape.leaf(self.proj.clone());
            tape.dot(y, p)
        }
    }

    #[test]
    fn full_network_gradient_check_32() {
        let mut rng = stream(4, Stream::Init);
        let mut net = SegNet::<f64>::new(small_cfg(), &mut rng).unwrap();
        net.set_iterations(2);
        let x = Tensor::randn([2, 1, 32, 32], &mut rng);
        let proj = Tensor::randn([2, 3, 32, 32], &mut rng).scale(1.0 / (2.0 * 3.0 * 1024.0));
        let mut obj = NetObjective { net, x, proj };
        let report = finite_diff_check(&mut obj, 11, FdOptions::default()).unwrap();
        assert!(
            report.passes(1e-4),
            "worst {:e}: {:?}",
            report.worst(),
            report.max_rel_err
        );
    }
}
