//! 2-D cross-correlation and its exact adjoint, via im2col + GEMM.

use serde::{Deserialize, Serialize};

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Stride and zero padding shared by both spatial axes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConvGeom {
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn new(stride: usize, padding: usize) -> Self {
        Self { stride, padding }
    }
}

impl Default for ConvGeom {
    fn default() -> Self {
        Self::new(1, 0)
    }
}

/// A convolution kernel `(c_out, c_in, k_h, k_w)` together with its geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvSpec<T> {
    pub kernel: Tensor<T>,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Scalar> ConvSpec<T> {
    pub fn new(kernel: Tensor<T>, stride: usize, padding: usize) -> Self {
        Self {
            kernel,
            stride,
            padding,
        }
    }

    pub fn geom(&self) -> ConvGeom {
        ConvGeom::new(self.stride, self.padding)
    }

    pub fn c_out(&self) -> usize {
        self.kernel.n()
    }

    pub fn c_in(&self) -> usize {
        self.kernel.c()
    }

    pub fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        conv2d(x, &self.kernel, self.geom())
    }

    pub fn adjoint(&self, y: &Tensor<T>) -> Result<Tensor<T>> {
        conv_transpose2d(y, &self.kernel, self.geom())
    }
}

/// `floor((input + 2*padding - k) / stride) + 1`, or `None` when the
/// window does not fit or the stride is zero.
pub fn conv_out_size(input: usize, k: usize, stride: usize, padding: usize) -> Option<usize> {
    if stride == 0 || k == 0 || input + 2 * padding < k {
        return None;
    }
    Some((input + 2 * padding - k) / stride + 1)
}

struct Plan {
    c_in: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    geom: ConvGeom,
}

impl Plan {
    fn patch(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn pixels(&self) -> usize {
        self.oh * self.ow
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.geom.stride == 1 && self.geom.padding == 0
    }

    /// Unit-stride convolutions with enough input channels skip im2col: each
    /// kernel tap becomes one GEMM against a shifted view of a zero-padded
    /// copy of the input.
    fn use_shifted(&self) -> bool {
        self.geom.stride == 1 && self.c_in >= 8 && self.oh * self.ow >= 1024
    }

    fn padded_width(&self) -> usize {
        self.w + 2 * self.geom.padding
    }

    /// Length of one padded channel plane, with slack so the shifted view
    /// of the last tap stays in bounds.
    fn padded_plane(&self) -> usize {
        (self.h + 2 * self.geom.padding) * self.padded_width() + self.kw - 1
    }

    fn pad_into<T: Scalar>(&self, x: &[T], buf: &mut [T]) {
        let (p, wp, plane) = (self.geom.padding, self.padded_width(), self.padded_plane());
        buf.fill(T::zero());
        for c in 0..self.c_in {
            for y in 0..self.h {
                let src = &x[(c * self.h + y) * self.w..][..self.w];
                buf[c * plane + (y + p) * wp + p..][..self.w].copy_from_slice(src);
            }
        }
    }

    /// Range of output columns whose input column `ox*s + kj - p` is inside `[0, w)`.
    fn valid_cols(&self, kj: usize) -> (usize, usize) {
        let s = self.geom.stride;
        let p = self.geom.padding;
        let lo = if p > kj { (p - kj).div_ceil(s) } else { 0 };
        let hi = if self.w + p > kj {
            (self.w + p - kj).div_ceil(s).min(self.ow)
        } else {
            0
        };
        (lo.min(hi), hi)
    }

    fn input_row(&self, oy: usize, ki: usize) -> Option<usize> {
        let iy = oy * self.geom.stride + ki;
        if iy < self.geom.padding || iy - self.geom.padding >= self.h {
            None
        } else {
            Some(iy - self.geom.padding)
        }
    }

    fn im2col<T: Scalar>(&self, x: &[T], cols: &mut [T]) {
        let (s, p) = (self.geom.stride, self.geom.padding);
        let pixels = self.pixels();
        for ci in 0..self.c_in {
            let plane = &x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (ci * self.kh + ki) * self.kw + kj;
                    let dst = &mut cols[row * pixels..(row + 1) * pixels];
                    let (lo, hi) = self.valid_cols(kj);
                    for oy in 0..self.oh {
                        let out = &mut dst[oy * self.ow..(oy + 1) * self.ow];
                        match self.input_row(oy, ki) {
                            None => out.fill(T::zero()),
                            Some(iy) => {
                                out[..lo].fill(T::zero());
                                out[hi..].fill(T::zero());
                                let src = &plane[iy * self.w..(iy + 1) * self.w];
                                if lo == hi {
                                    continue;
                                }
                                if s == 1 {
                                    out[lo..hi].copy_from_slice(&src[lo + kj - p..hi + kj - p]);
                                } else {
                                    for (ox, v) in out[lo..hi].iter_mut().enumerate() {
                                        *v = src[(ox + lo) * s + kj - p];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of `im2col`: scatters columns back, accumulating into `x`.
    fn col2im<T: Scalar>(&self, cols: &[T], x: &mut [T]) {
        let (s, p) = (self.geom.stride, self.geom.padding);
        let pixels = self.pixels();
        for ci in 0..self.c_in {
            let plane = &mut x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (ci * self.kh + ki) * self.kw + kj;
                    let src = &cols[row * pixels..(row + 1) * pixels];
                    let (lo, hi) = self.valid_cols(kj);
                    for oy in 0..self.oh {
                        if let Some(iy) = self.input_row(oy, ki).filter(|_| lo < hi) {
                            let dst = &mut plane[iy * self.w..(iy + 1) * self.w];
                            let vals = &src[oy * self.ow..(oy + 1) * self.ow];
                            if s == 1 {
                                for (d, &v) in
                                    dst[lo + kj - p..hi + kj - p].iter_mut().zip(&vals[lo..hi])
                                {
                                    *d += v;
                                }
                            } else {
                                for ox in lo..hi {
                                    dst[ox * s + kj - p] += vals[ox];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn plan_forward(
    x_shape: [usize; 4],
    k_shape: [usize; 4],
    geom: ConvGeom,
    op: &'static str,
) -> Result<Plan> {
    let [c_out, c_in, kh, kw] = k_shape;
    if x_shape[1] != c_in {
        return Err(Error::shape(
            op,
            &x_shape,
            &k_shape,
            "input channels must equal kernel c_in",
        ));
    }
    let oh = conv_out_size(x_shape[2], kh, geom.stride, geom.padding);
    let ow = conv_out_size(x_shape[3], kw, geom.stride, geom.padding);
    match (oh, ow) {
        (Some(oh), Some(ow)) => Ok(Plan {
            c_in,
            c_out,
            kh,
            kw,
            h: x_shape[2],
            w: x_shape[3],
            oh,
            ow,
            geom,
        }),
        _ => Err(Error::shape(
            op,
            &x_shape,
            &k_shape,
            format!(
                "output spatial size must be >= 1 (stride {}, padding {})",
                geom.stride, geom.padding
            ),
        )),
    }
}

/// Cross-correlation (no kernel flip), no bias.
pub fn conv2d<T: Scalar>(x: &Tensor<T>, kernel: &Tensor<T>, geom: ConvGeom) -> Result<Tensor<T>> {
    let plan = plan_forward(x.shape(), kernel.shape(), geom, "conv2d")?;
    if plan.use_shifted() {
        return Ok(conv2d_shifted(x, kernel, &plan));
    }
    let (patch, pixels) = (plan.patch(), plan.pixels());
    let mut out = Tensor::zeros([x.n(), plan.c_out, plan.oh, plan.ow]);
    let mut cols = if plan.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); patch * pixels]
    };
    for n in 0..x.n() {
        let src: &[T] = if plan.is_pointwise() {
            x.sample(n)
        } else {
            plan.im2col(x.sample(n), &mut cols);
            &cols
        };
        T::gemm(
            plan.c_out,
            patch,
            pixels,
            T::one(),
            kernel.data(),
            (patch, 1),
            src,
            (pixels, 1),
            T::zero(),
            out.sample_mut(n),
            (pixels, 1),
        );
    }
    Ok(out)
}

fn conv2d_shifted<T: Scalar>(x: &Tensor<T>, kernel: &Tensor<T>, plan: &Plan) -> Tensor<T> {
    let (wp, plane) = (plan.padded_width(), plan.padded_plane());
    let q = plan.oh * wp;
    let taps = plan.kh * plan.kw;
    let mut padded = vec![T::zero(); plan.c_in * plane];
    let mut wide = vec![T::zero(); plan.c_out * q];
    let mut out = Tensor::zeros([x.n(), plan.c_out, plan.oh, plan.ow]);
    for n in 0..x.n() {
        plan.pad_into(x.sample(n), &mut padded);
        for a in 0..plan.kh {
            for b in 0..plan.kw {
                let tap = a * plan.kw + b;
                T::gemm(
                    plan.c_out,
                    plan.c_in,
                    q,
                    T::one(),
                    &kernel.data()[tap..],
                    (plan.c_in * taps, taps),
                    &padded[a * wp + b..],
                    (plane, 1),
                    if tap == 0 { T::zero() } else { T::one() },
                    &mut wide,
                    (q, 1),
                );
            }
        }
        let dst = out.sample_mut(n);
        for (o, rows) in dst.chunks_exact_mut(plan.ow).enumerate() {
            let (c, y) = (o / plan.oh, o % plan.oh);
            rows.copy_from_slice(&wide[c * q + y * wp..][..plan.ow]);
        }
    }
    out
}

/// Exact adjoint of [`conv2d`], producing an input of spatial size `out_hw`.
///
/// `out_hw` must be a size that `conv2d` maps onto `y`'s spatial size.
pub fn conv_transpose2d_to<T: Scalar>(
    y: &Tensor<T>,
    kernel: &Tensor<T>,
    geom: ConvGeom,
    out_hw: (usize, usize),
) -> Result<Tensor<T>> {
    let k_shape = kernel.shape();
    if y.c() != k_shape[0] {
        return Err(Error::shape(
            "conv_transpose2d",
            &y.shape(),
            &k_shape,
            "input channels must equal kernel c_out",
        ));
    }
    let x_shape = [y.n(), k_shape[1], out_hw.0, out_hw.1];
    let plan = plan_forward(x_shape, k_shape, geom, "conv_transpose2d")?;
    if plan.oh != y.h() || plan.ow != y.w() {
        return Err(Error::shape(
            "conv_transpose2d",
            &y.shape(),
            &x_shape,
            "target size does not map onto the input under conv2d",
        ));
    }
    let [c_out, c_in, kh, kw] = k_shape;
    if geom.stride == 1 && kh == kw && geom.padding < kh {
        // With unit stride the adjoint is a correlation with the flipped,
        // channel-transposed kernel, which avoids the col2im scatter.
        let flipped = Tensor::from_fn([c_in, c_out, kh, kw], |[i, o, a, b]| {
            kernel.at(o, i, kh - 1 - a, kw - 1 - b)
        });
        return conv2d(y, &flipped, ConvGeom::new(1, kh - 1 - geom.padding));
    }
    let (patch, pixels) = (plan.patch(), plan.pixels());
    let mut out = Tensor::zeros(x_shape);
    if plan.is_pointwise() {
        for n in 0..y.n() {
            T::gemm(
                patch,
                plan.c_out,
                pixels,
                T::one(),
                kernel.data(),
                (1, patch),
                y.sample(n),
                (pixels, 1),
                T::zero(),
                out.sample_mut(n),
                (pixels, 1),
            );
        }
        return Ok(out);
    }
    let mut cols = vec![T::zero(); patch * pixels];
    for n in 0..y.n() {
        T::gemm(
            patch,
            plan.c_out,
            pixels,
            T::one(),
            kernel.data(),
            (1, patch),
            y.sample(n),
            (pixels, 1),
            T::zero(),
            &mut cols,
            (pixels, 1),
        );
        plan.col2im(&cols, out.sample_mut(n));
    }
    Ok(out)
}

/// Exact adjoint of [`conv2d`] at the smallest compatible input size,
/// `(out - 1) * stride - 2 * padding + k` per axis.
pub fn conv_transpose2d<T: Scalar>(
    y: &Tensor<T>,
    kernel: &Tensor<T>,
    geom: ConvGeom,
) -> Result<Tensor<T>> {
    let [_, _, kh, kw] = kernel.shape();
    let size = |out: usize, k: usize| -> Option<usize> {
        let full = out.checked_sub(1)? * geom.stride + k;
        full.checked_sub(2 * geom.padding).filter(|&s| s >= 1)
    };
    match (size(y.h(), kh), size(y.w(), kw)) {
        (Some(h), Some(w)) => conv_transpose2d_to(y, kernel, geom, (h, w)),
        _ => Err(Error::shape(
            "conv_transpose2d",
            &y.shape(),
            &kernel.shape(),
            "no input size maps onto this output",
        )),
    }
}

/// Gradient of `<conv2d(x, w), dy>` with respect to `w`, summed over the batch.
pub fn conv2d_kernel_grad<T: Scalar>(
    x: &Tensor<T>,
    dy: &Tensor<T>,
    kernel_shape: [usize; 4],
    geom: ConvGeom,
) -> Result<Tensor<T>> {
    let plan = plan_forward(x.shape(), kernel_shape, geom, "conv2d_kernel_grad")?;
    let expect = [x.n(), plan.c_out, plan.oh, plan.ow];
    if dy.shape() != expect {
        return Err(Error::shape(
            "conv2d_kernel_grad",
            &dy.shape(),
            &expect,
            "output gradient shape",
        ));
    }
    if plan.use_shifted() {
        return Ok(kernel_grad_shifted(x, dy, kernel_shape, &plan));
    }
    let (patch, pixels) = (plan.patch(), plan.pixels());
    let mut grad = Tensor::zeros(kernel_shape);
    let mut cols = if plan.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); patch * pixels]
    };
    for n in 0..x.n() {
        let src: &[T] = if plan.is_pointwise() {
            x.sample(n)
        } else {
            plan.im2col(x.sample(n), &mut cols);
            &cols
        };
        T::gemm(
            plan.c_out,
            pixels,
            patch,
            T::one(),
            dy.sample(n),
            (pixels, 1),
            src,
            (1, pixels),
            T::one(),
            grad.data_mut(),
            (patch, 1),
        );
    }
    Ok(grad)
}

fn kernel_grad_shifted<T: Scalar>(
    x: &Tensor<T>,
    dy: &Tensor<T>,
    kernel_shape: [usize; 4],
    plan: &Plan,
) -> Tensor<T> {
    let (wp, plane) = (plan.padded_width(), plan.padded_plane());
    let q = plan.oh * wp;
    let taps = plan.kh * plan.kw;
    let mut padded = vec![T::zero(); plan.c_in * plane];
    // Output gradient laid out on the padded width; the extra columns stay
    // zero so the wrapped-around entries of each shifted view contribute nothing.
    let mut wide = vec![T::zero(); plan.c_out * q];
    let mut grad = Tensor::zeros(kernel_shape);
    for n in 0..x.n() {
        plan.pad_into(x.sample(n), &mut padded);
        for (o, rows) in dy.sample(n).chunks_exact(plan.ow).enumerate() {
            let (c, y) = (o / plan.oh, o % plan.oh);
            wide[c * q + y * wp..][..plan.ow].copy_from_slice(rows);
        }
        for a in 0..plan.kh {
            for b in 0..plan.kw {
                let tap = a * plan.kw + b;
                T::gemm(
                    plan.c_out,
                    q,
                    plan.c_in,
                    T::one(),
                    &wide,
                    (q, 1),
                    &padded[a * wp + b..],
                    (1, plane),
                    T::one(),
                    &mut grad.data_mut()[tap..],
                    (plan.c_in * taps, taps),
                );
            }
        }
    }
    grad
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_xoshiro::SplitMix64;

    /// Direct nested-loop cross-correlation.
    fn conv_naive(x: &Tensor<f64>, k: &Tensor<f64>, g: ConvGeom) -> Tensor<f64> {
        let [co, ci, kh, kw] = k.shape();
        let oh = conv_out_size(x.h(), kh, g.stride, g.padding).unwrap();
        let ow = conv_out_size(x.w(), kw, g.stride, g.padding).unwrap();
        Tensor::from_fn([x.n(), co, oh, ow], |[n, o, y, xx]| {
            let mut acc = 0.0;
            for c in 0..ci {
                for i in 0..kh {
                    for j in 0..kw {
                        let iy = (y * g.stride + i) as isize - g.padding as isize;
                        let ix = (xx * g.stride + j) as isize - g.padding as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < x.h() && (ix as usize) < x.w() {
                            acc += x.at(n, c, iy as usize, ix as usize) * k.at(o, c, i, j);
                        }
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let mut rng = SplitMix64::seed_from_u64(1);
        let k = Tensor::<f64>::randn([2, 1, 3, 3], &mut rng);
        let y = conv2d(&Tensor::zeros([1, 1, 4, 4]), &k, ConvGeom::new(1, 1)).unwrap();
        assert_eq!(y.shape(), [1, 2, 4, 4]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn impulse_response_is_the_flipped_kernel() {
        let k = Tensor::<f64>::from_fn([1, 1, 3, 3], |[_, _, i, j]| (3 * i + j + 1) as f64);
        let mut x = Tensor::zeros([1, 1, 3, 3]);
        x.set(0, 0, 1, 1, 1.0);
        let y = conv2d(&x, &k, ConvGeom::new(1, 1)).unwrap();
        assert_eq!(y, conv_naive(&x, &k, ConvGeom::new(1, 1)));
        // out[i][j] = k[2-i][2-j] for a centred impulse
        let center_row: Vec<f64> = (0..3).map(|j| y.at(0, 0, 1, j)).collect();
        assert_eq!(center_row, vec![6.0, 5.0, 4.0]);
        assert_eq!(y.at(0, 0, 0, 0), 9.0);
    }

    #[test]
    fn stride_two_output_shape() {
        let mut rng = SplitMix64::seed_from_u64(2);
        let x = Tensor::<f64>::randn([1, 1, 5, 5], &mut rng);
        let k = Tensor::<f64>::randn([1, 1, 3, 3], &mut rng);
        let y = conv2d(&x, &k, ConvGeom::new(2, 1)).unwrap();
        assert_eq!(y.shape(), [1, 1, 3, 3]);
    }

    #[test]
    fn matches_naive_over_geometries() {
        let mut rng = SplitMix64::seed_from_u64(3);
        for &(s, p, k) in &[
            (1, 0, 1),
            (1, 1, 3),
            (2, 1, 3),
            (2, 2, 5),
            (1, 2, 5),
            (2, 0, 3),
        ] {
            let x = Tensor::<f64>::randn([2, 3, 7, 6], &mut rng);
            let w = Tensor::<f64>::randn([4, 3, k, k], &mut rng);
            let g = ConvGeom::new(s, p);
            let fast = conv2d(&x, &w, g).unwrap();
            let slow = conv_naive(&x, &w, g);
            assert_eq!(fast.shape(), slow.shape());
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
            }
        }
    }

    /// Inputs narrower than the padding leave some kernel taps without any
    /// valid input column.
    #[test]
    fn padding_wider_than_input_matches_naive() {
        let mut rng = SplitMix64::seed_from_u64(5);
        for &(s, p, k, h, w) in &[
            (1, 2, 5, 1, 1),
            (1, 2, 5, 3, 1),
            (2, 2, 5, 2, 1),
            (1, 2, 3, 1, 2),
            (2, 1, 3, 1, 1),
        ] {
            let x = Tensor::<f64>::randn([1, 2, h, w], &mut rng);
            let kernel = Tensor::<f64>::randn([3, 2, k, k], &mut rng);
            let g = ConvGeom::new(s, p);
            let fast = conv2d(&x, &kernel, g).unwrap();
            let slow = conv_naive(&x, &kernel, g);
            assert_eq!(fast.shape(), slow.shape());
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
            }
            let y = Tensor::<f64>::randn(fast.shape(), &mut rng);
            let back = conv_transpose2d_to(&y, &kernel, g, (h, w)).unwrap();
            let (l, r) = (fast.dot(&y).unwrap(), x.dot(&back).unwrap());
            assert!((l - r).abs() <= 1e-12 * (1.0 + l.abs()));
        }
    }

    #[test]
    fn channel_mismatch_is_a_shape_error() {
        let x = Tensor::<f64>::zeros([1, 2, 4, 4]);
        let k = Tensor::<f64>::zeros([1, 3, 3, 3]);
        match conv2d(&x, &k, ConvGeom::new(1, 1)) {
            Err(Error::Shape(e)) => {
                assert_eq!(e.left, vec![1, 2, 4, 4]);
                assert_eq!(e.right, vec![1, 3, 3, 3]);
            }
            other => panic!("expected shape error, got {other:?}"),
        }
        let small = Tensor::<f64>::zeros([1, 3, 1, 1]);
        assert!(conv2d(&small, &k, ConvGeom::new(1, 0)).is_err());
    }

    #[test]
    fn transpose_of_zero_is_zero() {
        let k = Tensor::<f64>::full([2, 3, 3, 3], 0.7);
        let x = conv_transpose2d(&Tensor::zeros([1, 2, 4, 4]), &k, ConvGeom::new(1, 1)).unwrap();
        assert_eq!(x.shape(), [1, 3, 4, 4]);
        assert!(x.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pointwise_transpose_is_scaling() {
        let mut rng = SplitMix64::seed_from_u64(4);
        let y = Tensor::<f64>::randn([2, 1, 3, 5], &mut rng);
        let k = Tensor::scalar(-1.75);
        let x = conv_transpose2d(&y, &k, ConvGeom::new(1, 0)).unwrap();
        assert_eq!(x, y.scale(-1.75));
    }

    #[test]
    fn adjoint_identity_stride_two() {
        let mut rng = SplitMix64::seed_from_u64(5);
        let x = Tensor::<f64>::randn([1, 2, 6, 6], &mut rng);
        let w = Tensor::<f64>::randn([3, 2, 3, 3], &mut rng);
        let g = ConvGeom::new(2, 1);
        let ax = conv2d(&x, &w, g).unwrap();
        let y = Tensor::<f64>::randn(ax.shape(), &mut rng);
        let aty = conv_transpose2d_to(&y, &w, g, (6, 6)).unwrap();
        let lhs = ax.dot(&y).unwrap();
        let rhs = x.dot(&aty).unwrap();
        assert!((lhs - rhs).abs() / (lhs.abs() + 1e-30) <= 1e-10);
    }

    #[test]
    fn minimal_transpose_size_and_bad_target() {
        let w = Tensor::<f64>::zeros([1, 1, 3, 3]);
        let y = Tensor::<f64>::zeros([1, 1, 3, 3]);
        let g = ConvGeom::new(2, 1);
        assert_eq!(conv_transpose2d(&y, &w, g).unwrap().shape(), [1, 1, 5, 5]);
        assert_eq!(
            conv_transpose2d_to(&y, &w, g, (6, 6)).unwrap().shape(),
            [1, 1, 6, 6]
        );
        assert!(conv_transpose2d_to(&y, &w, g, (8, 8)).is_err());
    }

    #[test]
    fn kernel_grad_matches_definition() {
        // d<conv(x,w), dy>/dw[o,c,i,j] = sum over outputs of dy * x at the tap
        let mut rng = SplitMix64::seed_from_u64(6);
        let x = Tensor::<f64>::randn([2, 2, 5, 5], &mut rng);
        let g = ConvGeom::new(2, 1);
        let w = Tensor::<f64>::zeros([3, 2, 3, 3]);
        let dy = Tensor::<f64>::randn(conv2d(&x, &w, g).unwrap().shape(), &mut rng);
        let grad = conv2d_kernel_grad(&x, &dy, w.shape(), g).unwrap();
        for o in 0..3 {
            for c in 0..2 {
                for i in 0..3 {
                    for j in 0..3 {
                        let mut basis = Tensor::zeros(w.shape());
                        basis.set(o, c, i, j, 1.0);
                        let expect = conv_naive(&x, &basis, g).dot(&dy).unwrap();
                        assert!(
                            (grad.at(o, c, i, j) - expect).abs() <= 1e-12 * (1.0 + expect.abs())
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn wide_unit_stride_paths_match_naive() {
        let mut rng = SplitMix64::seed_from_u64(7);
        for &(p, k, h, w) in &[
            (1, 3, 32, 32),
            (0, 3, 34, 33),
            (2, 5, 32, 40),
            (1, 3, 36, 32),
        ] {
            let x = Tensor::<f64>::randn([2, 9, h, w], &mut rng);
            let wt = Tensor::<f64>::randn([5, 9, k, k], &mut rng);
            let g = ConvGeom::new(1, p);
            let fast = conv2d(&x, &wt, g).unwrap();
            let slow = conv_naive(&x, &wt, g);
            assert_eq!(fast.shape(), slow.shape());
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
            }
            // Transpose and kernel gradient through the same shapes.
            let dy = Tensor::<f64>::randn(slow.shape(), &mut rng);
            let back = conv_transpose2d_to(&dy, &wt, g, (h, w)).unwrap();
            let lhs = slow.dot(&dy).unwrap();
            assert!((lhs - x.dot(&back).unwrap()).abs() <= 1e-10 * lhs.abs());
            let kg = conv2d_kernel_grad(&x, &dy, wt.shape(), g).unwrap();
            assert!((lhs - wt.dot(&kg).unwrap()).abs() <= 1e-10 * lhs.abs());
            for &(o, c, i, j) in &[(0, 0, 0, 0), (4, 8, k - 1, k - 1), (2, 5, 1, 0)] {
                let mut basis = Tensor::zeros(wt.shape());
                basis.set(o, c, i, j, 1.0);
                let expect = conv_naive(&x, &basis, g).dot(&dy).unwrap();
                assert!((kg.at(o, c, i, j) - expect).abs() <= 1e-10 * (1.0 + expect.abs()));
            }
        }
    }

    #[test]
    fn narrowing_transpose_matches_naive_adjoint() {
        // c_out < c_in takes the flipped-kernel route
        let mut rng = SplitMix64::seed_from_u64(8);
        let w = Tensor::<f64>::randn([2, 6, 3, 3], &mut rng);
        let y = Tensor::<f64>::randn([1, 2, 5, 4], &mut rng);
        let g = ConvGeom::new(1, 1);
        let got = conv_transpose2d_to(&y, &w, g, (5, 4)).unwrap();
        let want = Tensor::from_fn([1, 6, 5, 4], |[_, c, a, b]| {
            let mut basis = Tensor::zeros([1, 6, 5, 4]);
            basis.set(0, c, a, b, 1.0);
            conv_naive(&basis, &w, g).dot(&y).unwrap()
        });
        for (a, b) in got.data().iter().zip(want.data()) {
            assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
    }
}
