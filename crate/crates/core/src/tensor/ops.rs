use serde::{Deserialize, Serialize};

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Whether batch normalization uses batch statistics (and updates the
/// running estimates) or the stored running estimates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Routes `dy` through the units that were active (`x > 0`); the subgradient at 0 is 0.
pub fn relu_backward<T: Scalar>(x: &Tensor<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
    x.zip_map(dy, "relu_backward", |v, g| {
        if v > T::zero() {
            g
        } else {
            T::zero()
        }
    })
}

/// Running mean / variance estimates of a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Scalar> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

/// Affine parameters plus running statistics of one batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BnState<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running: RunningStats<T>,
}

impl<T: Scalar> BnState<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            running: RunningStats::new(channels),
        }
    }
}

/// Output of a batch-norm forward pass with what its backward pass needs.
#[derive(Clone, Debug)]
pub struct BnForward<T> {
    pub y: Tensor<T>,
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
}

pub fn batch_norm<T: Scalar>(
    x: &Tensor<T>,
    state: &mut BnState<T>,
    mode: Mode,
) -> Result<Tensor<T>> {
    let BnState {
        gamma,
        beta,
        running,
    } = state;
    batch_norm_forward(x, gamma, beta, running, mode).map(|f| f.y)
}

/// `(x - mu) / sqrt(var + eps) * gamma + beta` per channel. Train mode
/// normalizes with biased batch statistics and moves the running estimates
/// by momentum 0.1 (unbiased variance); eval mode uses the running estimates.
pub fn batch_norm_forward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    running: &mut RunningStats<T>,
    mode: Mode,
) -> Result<BnForward<T>> {
    let c = x.c();
    if gamma.len() != c || beta.len() != c || running.channels() != c {
        return Err(Error::shape(
            "batch_norm",
            &x.shape(),
            &[gamma.len(), beta.len(), running.channels()],
            "state channel count must equal input channels",
        ));
    }
    let plane = x.h() * x.w();
    let count = x.n() * plane;
    let (mean, var): (Vec<f64>, Vec<f64>) = match mode {
        Mode::Train => {
            if count == 0 {
                return Err(Error::Usage("batch_norm over an empty batch".into()));
            }
            let mut mean = vec![0.0f64; c];
            let mut var = vec![0.0f64; c];
            for n in 0..x.n() {
                for (ch, m) in mean.iter_mut().enumerate() {
                    let start = x.offset(n, ch, 0, 0);
                    *m += x.data()[start..start + plane]
                        .iter()
                        .map(|v| v.to_f64_lossy())
                        .sum::<f64>();
                }
            }
            for m in &mut mean {
                *m /= count as f64;
            }
            for n in 0..x.n() {
                for (ch, v) in var.iter_mut().enumerate() {
                    let start = x.offset(n, ch, 0, 0);
                    let mu = mean[ch];
                    *v += x.data()[start..start + plane]
                        .iter()
                        .map(|e| {
                            let d = e.to_f64_lossy() - mu;
                            d * d
                        })
                        .sum::<f64>();
                }
            }
            for v in &mut var {
                *v /= count as f64;
            }
            let unbias = if count > 1 {
                count as f64 / (count - 1) as f64
            } else {
                1.0
            };
            for ch in 0..c {
                let rm = running.mean[ch].to_f64_lossy();
                let rv = running.var[ch].to_f64_lossy();
                running.mean[ch] = T::lit((1.0 - BN_MOMENTUM) * rm + BN_MOMENTUM * mean[ch]);
                running.var[ch] = T::lit((1.0 - BN_MOMENTUM) * rv + BN_MOMENTUM * var[ch] * unbias);
            }
            (mean, var)
        }
        Mode::Eval => (
            running.mean.iter().map(|v| v.to_f64_lossy()).collect(),
            running.var.iter().map(|v| v.to_f64_lossy()).collect(),
        ),
    };
    let inv_std: Vec<T> = var
        .iter()
        .map(|&v| T::lit(1.0 / (v + BN_EPS).sqrt()))
        .collect();
    let mean_t: Vec<T> = mean.iter().map(|&m| T::lit(m)).collect();
    let mut xhat = Tensor::zeros(x.shape());
    let mut y = Tensor::zeros(x.shape());
    for n in 0..x.n() {
        for ch in 0..c {
            let start = x.offset(n, ch, 0, 0);
            let (mu, is, g, b) = (mean_t[ch], inv_std[ch], gamma[ch], beta[ch]);
            for i in start..start + plane {
                let h = (x.data()[i] - mu) * is;
                xhat.data_mut()[i] = h;
                y.data_mut()[i] = h * g + b;
            }
        }
    }
    Ok(BnForward { y, xhat, inv_std })
}

/// Returns `(dx, dgamma, dbeta)`. Train mode differentiates through the
/// batch statistics.
pub fn batch_norm_backward<T: Scalar>(
    dy: &Tensor<T>,
    xhat: &Tensor<T>,
    inv_std: &[T],
    gamma: &[T],
    mode: Mode,
) -> Result<(Tensor<T>, Vec<T>, Vec<T>)> {
    dy.expect_same_shape(xhat, "batch_norm_backward")?;
    let c = dy.c();
    let plane = dy.h() * dy.w();
    let count = dy.n() * plane;
    let mut dgamma = vec![0.0f64; c];
    let mut dbeta = vec![0.0f64; c];
    for n in 0..dy.n() {
        for ch in 0..c {
            let start = dy.offset(n, ch, 0, 0);
            for i in start..start + plane {
                let g = dy.data()[i].to_f64_lossy();
                dbeta[ch] += g;
                dgamma[ch] += g * xhat.data()[i].to_f64_lossy();
            }
        }
    }
    let mut dx = Tensor::zeros(dy.shape());
    for n in 0..dy.n() {
        for ch in 0..c {
            let start = dy.offset(n, ch, 0, 0);
            let scale = gamma[ch] * inv_std[ch];
            match mode {
                Mode::Eval => {
                    for i in start..start + plane {
                        dx.data_mut()[i] = scale * dy.data()[i];
                    }
                }
                Mode::Train => {
                    let mean_dy = T::lit(dbeta[ch] / count as f64);
                    let mean_dy_xhat = T::lit(dgamma[ch] / count as f64);
                    for i in start..start + plane {
                        dx.data_mut()[i] =
                            scale * (dy.data()[i] - mean_dy - xhat.data()[i] * mean_dy_xhat);
                    }
                }
            }
        }
    }
    Ok((
        dx,
        dgamma.into_iter().map(T::lit).collect(),
        dbeta.into_iter().map(T::lit).collect(),
    ))
}

/// Per-axis source taps of a 2x bilinear upsampling with half-pixel centres.
fn bilinear_taps(n: usize) -> Vec<(usize, usize, f64, f64)> {
    (0..2 * n)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n - 1);
            let i1 = (i0 + 1).min(n - 1);
            let l1 = src - i0 as f64;
            (i0, i1, 1.0 - l1, l1)
        })
        .collect()
}

/// Bilinear 2x upsampling (align_corners = false).
pub fn upsample2x<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = x.shape();
    let mut out = Tensor::zeros([n, c, 2 * h, 2 * w]);
    if h == 0 || w == 0 {
        return out;
    }
    let ty = bilinear_taps(h);
    let tx = bilinear_taps(w);
    for plane in 0..n * c {
        let src = &x.data()[plane * h * w..(plane + 1) * h * w];
        let dst = &mut out.data_mut()[plane * 4 * h * w..(plane + 1) * 4 * h * w];
        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                let v = T::lit(wy0 * wx0) * src[y0 * w + x0]
                    + T::lit(wy0 * wx1) * src[y0 * w + x1]
                    + T::lit(wy1 * wx0) * src[y1 * w + x0]
                    + T::lit(wy1 * wx1) * src[y1 * w + x1];
                dst[oy * 2 * w + ox] = v;
            }
        }
    }
    out
}

/// Adjoint of [`upsample2x`]: maps a `(n, c, 2h, 2w)` gradient back to `(n, c, h, w)`.
pub fn upsample2x_adjoint<T: Scalar>(dy: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h2, w2] = dy.shape();
    if h2 % 2 != 0 || w2 % 2 != 0 {
        return Err(Error::shape(
            "upsample2x_adjoint",
            &dy.shape(),
            &[2, 2],
            "spatial size must be even",
        ));
    }
    let (h, w) = (h2 / 2, w2 / 2);
    let mut out = Tensor::zeros([n, c, h, w]);
    if h == 0 || w == 0 {
        return Ok(out);
    }
    let ty = bilinear_taps(h);
    let tx = bilinear_taps(w);
    for plane in 0..n * c {
        let src = &dy.data()[plane * h2 * w2..(plane + 1) * h2 * w2];
        let dst = &mut out.data_mut()[plane * h * w..(plane + 1) * h * w];
        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                let g = src[oy * w2 + ox];
                dst[y0 * w + x0] += T::lit(wy0 * wx0) * g;
                dst[y0 * w + x1] += T::lit(wy0 * wx1) * g;
                dst[y1 * w + x0] += T::lit(wy1 * wx0) * g;
                dst[y1 * w + x1] += T::lit(wy1 * wx1) * g;
            }
        }
    }
    Ok(out)
}

/// 2x2 mean pooling with stride 2.
pub fn avg_pool2x<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.shape();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(
            "avg_pool2x",
            &x.shape(),
            &[2, 2],
            "spatial size must be even",
        ));
    }
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::lit(0.25);
    let mut out = Tensor::zeros([n, c, oh, ow]);
    for plane in 0..n * c {
        let src = &x.data()[plane * h * w..(plane + 1) * h * w];
        let dst = &mut out.data_mut()[plane * oh * ow..(plane + 1) * oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let r0 = 2 * oy * w + 2 * ox;
                let r1 = r0 + w;
                dst[oy * ow + ox] = (src[r0] + src[r0 + 1] + src[r1] + src[r1 + 1]) * quarter;
            }
        }
    }
    Ok(out)
}

pub fn avg_pool2x_adjoint<T: Scalar>(dy: &Tensor<T>) -> Tensor<T> {
    let [n, c, oh, ow] = dy.shape();
    let (h, w) = (2 * oh, 2 * ow);
    let quarter = T::lit(0.25);
    let mut out = Tensor::zeros([n, c, h, w]);
    for plane in 0..n * c {
        let src = &dy.data()[plane * oh * ow..(plane + 1) * oh * ow];
        let dst = &mut out.data_mut()[plane * h * w..(plane + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let g = src[oy * ow + ox] * quarter;
                let r0 = 2 * oy * w + 2 * ox;
                dst[r0] = g;
                dst[r0 + 1] = g;
                dst[r0 + w] = g;
                dst[r0 + w + 1] = g;
            }
        }
    }
    out
}

/// Stacks channels `a` then `b`.
pub fn concat_channels<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa[0] != sb[0] || sa[2] != sb[2] || sa[3] != sb[3] {
        return Err(Error::shape(
            "concat_channels",
            &sa,
            &sb,
            "n, h, w must agree",
        ));
    }
    let mut data = Vec::with_capacity(a.numel() + b.numel());
    for n in 0..sa[0] {
        data.extend_from_slice(a.sample(n));
        data.extend_from_slice(b.sample(n));
    }
    Tensor::new([sa[0], sa[1] + sb[1], sa[2], sa[3]], data)
}

/// Inverse of [`concat_channels`]: the first `c_first` channels, then the rest.
pub fn split_channels<T: Scalar>(t: &Tensor<T>, c_first: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    let [n, c, h, w] = t.shape();
    if c_first > c {
        return Err(Error::shape(
            "split_channels",
            &t.shape(),
            &[c_first],
            "split point beyond channel count",
        ));
    }
    let plane = h * w;
    let mut a = Vec::with_capacity(n * c_first * plane);
    let mut b = Vec::with_capacity(n * (c - c_first) * plane);
    for i in 0..n {
        let s = t.sample(i);
        a.extend_from_slice(&s[..c_first * plane]);
        b.extend_from_slice(&s[c_first * plane..]);
    }
    Ok((
        Tensor::new([n, c_first, h, w], a)?,
        Tensor::new([n, c - c_first, h, w], b)?,
    ))
}

/// Softmax across the channel axis at every pixel, max-subtracted.
pub fn softmax_channels<T: Scalar>(logits: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = logits.shape();
    let plane = h * w;
    let mut out = Tensor::zeros(logits.shape());
    for i in 0..n {
        let src = logits.sample(i);
        let dst = out.sample_mut(i);
        for p in 0..plane {
            let mut m = T::neg_infinity();
            for k in 0..c {
                m = m.max(src[k * plane + p]);
            }
            let mut z = T::zero();
            for k in 0..c {
                let e = (src[k * plane + p] - m).exp();
                dst[k * plane + p] = e;
                z += e;
            }
            for k in 0..c {
                dst[k * plane + p] /= z;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_xoshiro::SplitMix64;

    fn t(shape: [usize; 4], v: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn relu_basics() {
        assert_eq!(
            relu(&t([1, 1, 1, 3], &[-1.0, 0.0, 2.0])).data(),
            &[0.0, 0.0, 2.0]
        );
        let mut rng = SplitMix64::seed_from_u64(9);
        let x = Tensor::<f64>::randn([2, 3, 4, 4], &mut rng);
        let once = relu(&x);
        assert_eq!(relu(&once), once);
        assert!(once.data().iter().all(|&v| v >= 0.0));
        let neg = x.map(|v| -v.abs() - 1.0);
        assert!(relu(&neg).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn batch_norm_train_standardizes() {
        let mut rng = SplitMix64::seed_from_u64(10);
        let x = Tensor::<f64>::randn([3, 2, 5, 5], &mut rng).map(|v| 10.0 * v + 2.0);
        let mut st = BnState::new(2);
        let y = batch_norm(&x, &mut st, Mode::Train).unwrap();
        let count = 75.0;
        for c in 0..2 {
            let vals: Vec<f64> = (0..3)
                .flat_map(|n| (0..25).map(move |i| (n, i)))
                .map(|(n, i)| y.at(n, c, i / 5, i % 5))
                .collect();
            let mean = vals.iter().sum::<f64>() / count;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / count;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-6, "var {var}");
            assert!(st.running.mean[c] != 0.0);
        }
    }

    #[test]
    fn batch_norm_eval_identity_stats_is_identity() {
        let mut rng = SplitMix64::seed_from_u64(11);
        let x = Tensor::<f64>::randn([2, 3, 4, 4], &mut rng);
        let mut st = BnState::new(3);
        let y = batch_norm(&x, &mut st, Mode::Eval).unwrap();
        let s = 1.0 / (1.0 + BN_EPS).sqrt();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b * s).abs() < 1e-15);
            assert!((a - b).abs() < 1e-5 * b.abs().max(1.0));
        }
        assert_eq!(st, BnState::new(3));
    }

    #[test]
    fn batch_norm_constant_channel_maps_to_zero() {
        let x = Tensor::<f64>::full([2, 1, 3, 3], 4.25);
        let y = batch_norm(&x, &mut BnState::new(1), Mode::Train).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn batch_norm_channel_mismatch() {
        let x = Tensor::<f64>::zeros([1, 3, 2, 2]);
        assert!(matches!(
            batch_norm(&x, &mut BnState::new(2), Mode::Eval),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn upsample_constant_and_shape() {
        let x = Tensor::<f64>::full([1, 2, 3, 5], 3.0);
        let y = upsample2x(&x);
        assert_eq!(y.shape(), [1, 2, 6, 10]);
        assert!(y.data().iter().all(|&v| v == 3.0));
        assert_eq!(
            upsample2x(&Tensor::<f64>::zeros([1, 4, 7, 5])).shape(),
            [1, 4, 14, 10]
        );
    }

    #[test]
    fn upsample_two_by_two() {
        // half-pixel bilinear, evaluated by hand
        let y = upsample2x(&t([1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let expect = [
            1.0, 1.25, 1.75, 2.0, //
            1.5, 1.75, 2.25, 2.5, //
            2.5, 2.75, 3.25, 3.5, //
            3.0, 3.25, 3.75, 4.0,
        ];
        assert_eq!(y.data(), &expect);
    }

    #[test]
    fn upsample_and_pool_adjoints() {
        let mut rng = SplitMix64::seed_from_u64(12);
        let x = Tensor::<f64>::randn([2, 3, 5, 4], &mut rng);
        let dy = Tensor::<f64>::randn([2, 3, 10, 8], &mut rng);
        let lhs = upsample2x(&x).dot(&dy).unwrap();
        let rhs = x.dot(&upsample2x_adjoint(&dy).unwrap()).unwrap();
        assert!((lhs - rhs).abs() < 1e-12 * lhs.abs().max(1.0));

        let x = Tensor::<f64>::randn([2, 3, 6, 4], &mut rng);
        let dy = Tensor::<f64>::randn([2, 3, 3, 2], &mut rng);
        let lhs = avg_pool2x(&x).unwrap().dot(&dy).unwrap();
        let rhs = x.dot(&avg_pool2x_adjoint(&dy)).unwrap();
        assert!((lhs - rhs).abs() < 1e-12 * lhs.abs().max(1.0));
        assert!(avg_pool2x(&Tensor::<f64>::zeros([1, 1, 3, 4])).is_err());
    }

    #[test]
    fn concat_split_round_trip() {
        let mut rng = SplitMix64::seed_from_u64(13);
        let a = Tensor::<f64>::randn([2, 3, 8, 8], &mut rng);
        let b = Tensor::<f64>::randn([2, 5, 8, 8], &mut rng);
        let ab = concat_channels(&a, &b).unwrap();
        assert_eq!(ab.shape(), [2, 8, 8, 8]);
        let (a2, b2) = split_channels(&ab, 3).unwrap();
        assert_eq!((a2, b2), (a.clone(), b));
        let empty = Tensor::<f64>::zeros([2, 0, 8, 8]);
        assert_eq!(concat_channels(&a, &empty).unwrap(), a);
        assert_eq!(concat_channels(&empty, &a).unwrap(), a);
        assert!(concat_channels(&a, &Tensor::zeros([2, 1, 4, 8])).is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = SplitMix64::seed_from_u64(14);
        let x = Tensor::<f64>::randn([2, 4, 3, 3], &mut rng).scale(50.0);
        let p = softmax_channels(&x);
        for n in 0..2 {
            for i in 0..9 {
                let s: f64 = (0..4).map(|k| p.at(n, k, i / 3, i % 3)).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }
}
