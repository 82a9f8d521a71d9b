//! Segmentation losses on channel logits with their analytic gradients.
//!
//! Targets are integer label maps laid out `(n, h, w)`.

use crate::error::{Error, Result};
use crate::tensor::{softmax_channels, Scalar, Tensor};

pub const DICE_EPS: f64 = 1e-5;

fn check_target<T: Scalar>(logits: &Tensor<T>, target: &[u8], op: &'static str) -> Result<()> {
    let [n, c, h, w] = logits.shape();
    if target.len() != n * h * w {
        return Err(Error::shape(
            op,
            &logits.shape(),
            &[target.len()],
            "target must hold n*h*w labels",
        ));
    }
    if let Some(&bad) = target.iter().find(|&&l| l as usize >= c) {
        return Err(Error::Data(format!(
            "{op}: label {bad} out of range for {c} classes"
        )));
    }
    Ok(())
}

/// Mean over pixels of `-log softmax(logits)[target]`. Returns the loss and
/// the softmax probabilities.
pub fn cross_entropy_forward<T: Scalar>(
    logits: &Tensor<T>,
    target: &[u8],
) -> Result<(T, Tensor<T>)> {
    check_target(logits, target, "cross_entropy")?;
    let [n, c, h, w] = logits.shape();
    let plane = h * w;
    let mut total = 0.0f64;
    for i in 0..n {
        let z = logits.sample(i);
        for p in 0..plane {
            let mut m = f64::NEG_INFINITY;
            for k in 0..c {
                m = m.max(z[k * plane + p].to_f64_lossy());
            }
            let lse = (0..c)
                .map(|k| (z[k * plane + p].to_f64_lossy() - m).exp())
                .sum::<f64>()
                .ln()
                + m;
            let t = target[i * plane + p] as usize;
            total += lse - z[t * plane + p].to_f64_lossy();
        }
    }
    let count = (n * plane).max(1) as f64;
    Ok((T::lit(total / count), softmax_channels(logits)))
}

/// `d CE / d logits = (p - onehot) / pixels`.
pub fn cross_entropy_grad<T: Scalar>(probs: &Tensor<T>, target: &[u8]) -> Tensor<T> {
    let [n, _, h, w] = probs.shape();
    let plane = h * w;
    let inv = T::lit(1.0 / (n * plane).max(1) as f64);
    let mut g = probs.scale(inv);
    for i in 0..n {
        let s = g.sample_mut(i);
        for p in 0..plane {
            let t = target[i * plane + p] as usize;
            s[t * plane + p] -= inv;
        }
    }
    g
}

/// Per-class overlap sums over the whole batch: `(sum p*g, sum p + sum g)`.
fn dice_sums<T: Scalar>(probs: &Tensor<T>, target: &[u8]) -> (Vec<f64>, Vec<f64>) {
    let [n, c, h, w] = probs.shape();
    let plane = h * w;
    let mut inter = vec![0.0f64; c];
    let mut total = vec![0.0f64; c];
    for i in 0..n {
        let s = probs.sample(i);
        for k in 0..c {
            for p in 0..plane {
                let pv = s[k * plane + p].to_f64_lossy();
                total[k] += pv;
                if target[i * plane + p] as usize == k {
                    inter[k] += pv;
                    total[k] += 1.0;
                }
            }
        }
    }
    (inter, total)
}

/// `1 - mean_k (2 sum p_k g_k + eps) / (sum p_k + sum g_k + eps)` with
/// `p = softmax(logits)` and `g` the one-hot target, over all classes.
pub fn dice_forward<T: Scalar>(
    logits: &Tensor<T>,
    target: &[u8],
    n_classes: usize,
    eps: f64,
) -> Result<(T, Tensor<T>)> {
    if logits.c() != n_classes {
        return Err(Error::shape(
            "dice_loss",
            &logits.shape(),
            &[n_classes],
            "channels must equal n_classes",
        ));
    }
    check_target(logits, target, "dice_loss")?;
    let probs = softmax_channels(logits);
    let (inter, total) = dice_sums(&probs, target);
    let mean_dice = inter
        .iter()
        .zip(&total)
        .map(|(&i, &s)| (2.0 * i + eps) / (s + eps))
        .sum::<f64>()
        / n_classes.max(1) as f64;
    Ok((T::lit(1.0 - mean_dice), probs))
}

/// Gradient of [`dice_forward`] with respect to the logits.
pub fn dice_grad<T: Scalar>(probs: &Tensor<T>, target: &[u8], eps: f64) -> Tensor<T> {
    let [n, c, h, w] = probs.shape();
    let plane = h * w;
    let (inter, total) = dice_sums(probs, target);
    let kf = c.max(1) as f64;
    // dL/dp_k = -(2 g (S+eps) - (2I+eps)) / (K (S+eps)^2)
    let a: Vec<f64> = total.iter().map(|&s| -2.0 / (kf * (s + eps))).collect();
    let b: Vec<f64> = inter
        .iter()
        .zip(&total)
        .map(|(&i, &s)| (2.0 * i + eps) / (kf * (s + eps) * (s + eps)))
        .collect();
    let mut g = Tensor::zeros(probs.shape());
    for i in 0..n {
        let ps = probs.sample(i);
        let gs = g.sample_mut(i);
        for p in 0..plane {
            let t = target[i * plane + p] as usize;
            let mut dot = 0.0f64;
            for k in 0..c {
                let dp = b[k] + if k == t { a[k] } else { 0.0 };
                dot += ps[k * plane + p].to_f64_lossy() * dp;
            }
            for k in 0..c {
                let dp = b[k] + if k == t { a[k] } else { 0.0 };
                let pk = ps[k * plane + p].to_f64_lossy();
                gs[k * plane + p] = T::lit(pk * (dp - dot));
            }
        }
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_log_k() {
        for k in [2usize, 3, 5] {
            let logits = Tensor::<f64>::zeros([2, k, 3, 4]);
            let target: Vec<u8> = (0..24).map(|i| (i % k) as u8).collect();
            let (ce, _) = cross_entropy_forward(&logits, &target).unwrap();
            assert!((ce - (k as f64).ln()).abs() < 1e-15);
        }
    }

    #[test]
    fn confident_correct_logits_give_near_zero_losses() {
        let target: Vec<u8> = (0..16).map(|i| (i % 3) as u8).collect();
        let logits = Tensor::<f64>::from_fn([1, 3, 4, 4], |[_, c, h, w]| {
            if target[h * 4 + w] as usize == c {
                60.0
            } else {
                -60.0
            }
        });
        let (ce, _) = cross_entropy_forward(&logits, &target).unwrap();
        assert!(ce < 1e-12);
        let (dice, _) = dice_forward(&logits, &target, 3, DICE_EPS).unwrap();
        assert!(dice <= 1e-3);
    }

    #[test]
    fn uniform_two_class_balanced_dice_is_half() {
        // p = 0.5 everywhere, each class covers N/2 pixels:
        // per class (2 * 0.5 * N/2 + eps) / (0.5 N + N/2 + eps)
        let n_pix = 64.0;
        let logits = Tensor::<f64>::zeros([1, 2, 8, 8]);
        let target: Vec<u8> = (0..64).map(|i| (i % 2) as u8).collect();
        let (loss, _) = dice_forward(&logits, &target, 2, DICE_EPS).unwrap();
        let per_class =
            (2.0 * 0.5 * n_pix / 2.0 + DICE_EPS) / (0.5 * n_pix + n_pix / 2.0 + DICE_EPS);
        assert!((loss - (1.0 - per_class)).abs() < 1e-15);
        assert!((loss - 0.5).abs() < 1e-6);
    }

    #[test]
    fn labels_out_of_range_are_data_errors() {
        let logits = Tensor::<f64>::zeros([1, 2, 2, 2]);
        let target = [0u8, 1, 2, 0];
        assert!(matches!(
            cross_entropy_forward(&logits, &target),
            Err(Error::Data(_))
        ));
        assert!(matches!(
            dice_forward(&logits, &target, 2, DICE_EPS),
            Err(Error::Data(_))
        ));
    }
}
