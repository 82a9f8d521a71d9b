use rand::Rng;

use crate::autodiff::{ParamId, ParamSet, Tape, Var};
use crate::error::{Error, Result};
use crate::mlblock::kaiming_uniform;
use crate::tensor::{ConvGeom, Mode, RunningStats, Scalar, Tensor};

/// Multi-scale features handed to the decoder.
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    /// Skip features from shallowest (full resolution) to deepest.
    pub features: Vec<Var>,
    /// Deepest map; each feature level halves the spatial size.
    pub bottleneck: Var,
}

/// Backbone interface: anything producing skip features at successive 2x
/// reductions plus a bottleneck can drive the decoder.
pub trait Encoder<T: Scalar>: Send {
    /// Channels of each skip feature, shallowest first.
    fn skip_channels(&self) -> Vec<usize>;

    fn bottleneck_channels(&self) -> usize;

    /// Input sizes must be divisible by this factor.
    fn reduction(&self) -> usize {
        1 << self.skip_channels().len()
    }

    fn encode(
        &mut self,
        tape: &mut Tape<T>,
        params: &ParamSet<T>,
        x: Var,
        mode: Mode,
    ) -> Result<EncoderOutput>;

    /// Named batch-norm running statistics, for checkpoints.
    fn buffers(&self) -> Vec<(String, &RunningStats<T>)>;

    fn buffers_mut(&mut self) -> Vec<(String, &mut RunningStats<T>)>;
}

#[derive(Clone, Debug)]
pub(crate) struct ConvBnRelu<T> {
    pub(crate) name: String,
    pub(crate) w: ParamId,
    pub(crate) gamma: ParamId,
    pub(crate) beta: ParamId,
    pub(crate) running: RunningStats<T>,
}

impl<T: Scalar> ConvBnRelu<T> {
    pub(crate) fn new<R: Rng + ?Sized>(
        name: String,
        c_in: usize,
        c_out: usize,
        params: &mut ParamSet<T>,
        rng: &mut R,
    ) -> Self {
        let w = params.add(
            format!("{name}.w"),
            kaiming_uniform([c_out, c_in, 3, 3], rng),
        );
        let gamma = params.add(
            format!("{name}.bn.gamma"),
            Tensor::full([1, c_out, 1, 1], T::one()),
        );
        let beta = params.add(format!("{name}.bn.beta"), Tensor::zeros([1, c_out, 1, 1]));
        Self {
            name,
            w,
            gamma,
            beta,
            running: RunningStats::new(c_out),
        }
    }

    pub(crate) fn forward(
        &mut self,
        tape: &mut Tape<T>,
        params: &ParamSet<T>,
        x: Var,
        mode: Mode,
    ) -> Result<Var> {
        let w = tape.param(params, self.w);
        let y = tape.conv2d(x, w, ConvGeom::new(1, 1))?;
        let (g, b) = (
            tape.param(params, self.gamma),
            tape.param(params, self.beta),
        );
        let y = tape.batch_norm(y, g, b, &mut self.running, mode)?;
        Ok(tape.relu(y))
    }
}

/// Compact CNN backbone: per level two `conv3x3-BN-ReLU` layers, with a 2x2
/// average pool between levels. The last level is the bottleneck.
#[derive(Clone, Debug)]
pub struct CnnEncoder<T> {
    channels: Vec<usize>,
    levels: Vec<[ConvBnRelu<T>; 2]>,
}

impl<T: Scalar> CnnEncoder<T> {
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        channels: &[usize],
        params: &mut ParamSet<T>,
        rng: &mut R,
    ) -> Result<Self> {
        if channels.len() < 2 || channels.contains(&0) || in_channels == 0 {
            return Err(Error::Config(format!(
                "encoder needs at least two levels of positive width, got {channels:?}"
            )));
        }
        let mut levels = Vec::with_capacity(channels.len());
        let mut c_in = in_channels;
        for (i, &c) in channels.iter().enumerate() {
            let a = ConvBnRelu::new(format!("enc{i}.conv0"), c_in, c, params, rng);
            let b = ConvBnRelu::new(format!("enc{i}.conv1"), c, c, params, rng);
            levels.push([a, b]);
            c_in = c;
        }
        Ok(Self {
            channels: channels.to_vec(),
            levels,
        })
    }
}

impl<T: Scalar> Encoder<T> for CnnEncoder<T> {
    fn skip_channels(&self) -> Vec<usize> {
        self.channels[..self.channels.len() - 1].to_vec()
    }

    fn bottleneck_channels(&self) -> usize {
        *self.channels.last().expect("non-empty")
    }

    fn encode(
        &mut self,
        tape: &mut Tape<T>,
        params: &ParamSet<T>,
        x: Var,
        mode: Mode,
    ) -> Result<EncoderOutput> {
        let shape = tape.value(x).shape();
        let factor = self.reduction();
        if !shape[2].is_multiple_of(factor)
            || !shape[3].is_multiple_of(factor)
            || shape[2] == 0
            || shape[3] == 0
        {
            return Err(Error::shape(
                "encode",
                &shape,
                &[factor, factor],
                format!("height and width must be positive multiples of {factor}"),
            ));
        }
        let mut features = Vec::with_capacity(self.levels.len());
        let mut cur = x;
        for (i, [a, b]) in self.levels.iter_mut().enumerate() {
            if i > 0 {
                cur = tape.avg_pool2x(cur)?;
            }
            cur = a.forward(tape, params, cur, mode)?;
            cur = b.forward(tape, params, cur, mode)?;
            features.push(cur);
        }
        let bottleneck = features.pop().expect("at least two levels");
        Ok(EncoderOutput {
            features,
            bottleneck,
        })
    }

    fn buffers(&self) -> Vec<(String, &RunningStats<T>)> {
        self.levels
            .iter()
            .flat_map(|l| l.iter())
            .map(|c| (format!("{}.bn", c.name), &c.running))
            .collect()
    }

    fn buffers_mut(&mut self) -> Vec<(String, &mut RunningStats<T>)> {
        self.levels
            .iter_mut()
            .flat_map(|l| l.iter_mut())
            .map(|c| (format!("{}.bn", c.name), &mut c.running))
            .collect()
    }
}
