//! Inference-only neural primitives over [`Tensor`].
//!
//! Convolutions accumulate in `f64` and round once on store. Every output
//! element is reduced in a fixed order, so results are bit-identical no
//! matter how the work is split across threads.

use rayon::prelude::*;

use crate::error::{shape_err, Error, Result};
use crate::tensor::{Shape, Tensor};

/// Kernel and hyper-parameters of a (possibly grouped) 2-D convolution.
///
/// `kernel` is stored as `(c_out, c_in / groups, k, k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvWeights {
    pub kernel: Tensor,
    pub bias: Option<Vec<f32>>,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvWeights {
    pub fn new(
        kernel: Tensor,
        bias: Option<Vec<f32>>,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Self> {
        let w = Self {
            kernel,
            bias,
            stride,
            padding,
            groups,
        };
        w.validate()?;
        Ok(w)
    }

    /// Stride-1 convolution with "same" zero padding.
    pub fn same(kernel: Tensor, bias: Option<Vec<f32>>, groups: usize) -> Result<Self> {
        let k = kernel.shape().h;
        Self::new(kernel, bias, 1, k / 2, groups)
    }

    pub fn out_channels(&self) -> usize {
        self.kernel.shape().n
    }

    pub fn in_channels_per_group(&self) -> usize {
        self.kernel.shape().c
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels_per_group() * self.groups
    }

    pub fn kernel_size(&self) -> usize {
        self.kernel.shape().h
    }

    fn validate(&self) -> Result<()> {
        let ks = self.kernel.shape();
        if ks.h != ks.w {
            return shape_err(format!("kernel must be square, got {}x{}", ks.h, ks.w));
        }
        if ks.h.is_multiple_of(2) {
            return shape_err(format!("kernel size must be odd, got {}", ks.h));
        }
        if self.stride == 0 || self.groups == 0 {
            return Err(Error::InvalidArgument(
                "stride and groups must be positive".into(),
            ));
        }
        if !ks.n.is_multiple_of(self.groups) {
            return shape_err(format!(
                "output channels {} not divisible by groups {}",
                ks.n, self.groups
            ));
        }
        if let Some(b) = &self.bias {
            if b.len() != ks.n {
                return shape_err(format!(
                    "bias length {} does not match {} output channels",
                    b.len(),
                    ks.n
                ));
            }
        }
        Ok(())
    }

    /// Output shape for an input of shape `input`, or a shape error.
    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        self.validate()?;
        if input.c != self.in_channels() {
            return shape_err(format!(
                "input has {} channels but kernel expects {} ({} groups x {} per group)",
                input.c,
                self.in_channels(),
                self.groups,
                self.in_channels_per_group()
            ));
        }
        conv_output_hw(
            input.h,
            input.w,
            self.kernel_size(),
            self.stride,
            self.padding,
        )
        .map(|(h, w)| Shape::new(input.n, self.out_channels(), h, w))
    }
}

pub(crate) fn conv_output_hw(
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    padding: usize,
) -> Result<(usize, usize)> {
    if h + 2 * padding < k || w + 2 * padding < k {
        return shape_err(format!(
            "kernel {k} with padding {padding} does not fit a {h}x{w} input"
        ));
    }
    Ok((
        (h + 2 * padding - k) / stride + 1,
        (w + 2 * padding - k) / stride + 1,
    ))
}

/// Cross-correlation with zero padding, optional bias and channel groups.
pub fn conv2d(input: &Tensor, weights: &ConvWeights) -> Result<Tensor> {
    let out_shape = weights.output_shape(input.shape())?;
    let in_shape = input.shape();
    let k = weights.kernel_size();
    let cin_g = weights.in_channels_per_group();
    let cout_g = weights.out_channels() / weights.groups;
    let (stride, pad) = (weights.stride, weights.padding as isize);
    let (ho, wo) = (out_shape.h, out_shape.w);
    let kernel = weights.kernel.data();

    let mut out = Tensor::zeros(out_shape);
    out.data_mut()
        .par_chunks_mut(ho * wo)
        .enumerate()
        .for_each(|(plane_idx, out_plane)| {
            let n = plane_idx / out_shape.c;
            let co = plane_idx % out_shape.c;
            let g = co / cout_g;
            let mut acc = vec![0.0f64; ho * wo];
            for ci in 0..cin_g {
                let src = input.plane(n, g * cin_g + ci);
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = f64::from(kernel[((co * cin_g + ci) * k + ky) * k + kx]);
                        accumulate_tap(
                            &mut acc, src, wv, in_shape.h, in_shape.w, ho, wo, ky, kx, stride, pad,
                        );
                    }
                }
            }
            let b = weights.bias.as_ref().map_or(0.0, |b| f64::from(b[co]));
            for (o, a) in out_plane.iter_mut().zip(&acc) {
                *o = (a + b) as f32;
            }
        });
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
#[inline]
fn accumulate_tap(
    acc: &mut [f64],
    src: &[f32],
    wv: f64,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
    ky: usize,
    kx: usize,
    stride: usize,
    pad: isize,
) {
    // Range of output columns whose input column lands inside [0, w).
    let off_x = kx as isize - pad;
    let ox_lo = if off_x >= 0 {
        0
    } else {
        ((-off_x) as usize).div_ceil(stride)
    };
    let ox_hi = {
        let lim = w as isize - off_x; // need ox*stride < lim
        if lim <= 0 {
            0
        } else {
            ((lim as usize).div_ceil(stride)).min(wo)
        }
    };
    if ox_lo >= ox_hi {
        return;
    }
    for oy in 0..ho {
        let iy = (oy * stride) as isize + ky as isize - pad;
        if iy < 0 || iy >= h as isize {
            continue;
        }
        let row = &src[iy as usize * w..(iy as usize + 1) * w];
        let dst = &mut acc[oy * wo..(oy + 1) * wo];
        if stride == 1 {
            let start = (ox_lo as isize + off_x) as usize;
            let len = ox_hi - ox_lo;
            for (d, s) in dst[ox_lo..ox_hi].iter_mut().zip(&row[start..start + len]) {
                *d += wv * f64::from(*s);
            }
        } else {
            for ox in ox_lo..ox_hi {
                let ix = (ox * stride) as isize + off_x;
                dst[ox] += wv * f64::from(row[ix as usize]);
            }
        }
    }
}

/// Per-channel convolution; `weights.groups` must equal the channel count.
pub fn depthwise_conv2d(input: &Tensor, weights: &ConvWeights) -> Result<Tensor> {
    let c = input.shape().c;
    if weights.groups != c || weights.out_channels() != c || weights.in_channels_per_group() != 1 {
        return shape_err(format!(
            "depthwise convolution needs groups = c_in = c_out = {c}, got groups {} with kernel {}",
            weights.groups,
            weights.kernel.shape()
        ));
    }
    conv2d(input, weights)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
}

#[inline]
pub fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn activation(input: &Tensor, kind: Activation) -> Tensor {
    match kind {
        Activation::Relu => input.map(|v| v.max(0.0)),
        Activation::Sigmoid => input.map(sigmoid),
    }
}

/// Inference-mode batch normalisation parameters, one entry per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormParams {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub eps: f32,
}

impl BatchNormParams {
    /// gamma = 1, beta = 0, mean = 0, var = 1, eps = 0: the identity map.
    pub fn pass_through(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            eps: 0.0,
        }
    }
}

pub const BN_EPS: f32 = 1e-5;

pub fn batchnorm_infer(input: &Tensor, bn: &BatchNormParams) -> Result<Tensor> {
    let s = input.shape();
    for (name, v) in [
        ("mean", &bn.mean),
        ("var", &bn.var),
        ("gamma", &bn.gamma),
        ("beta", &bn.beta),
    ] {
        if v.len() != s.c {
            return shape_err(format!(
                "batch-norm {name} has {} entries for {} channels",
                v.len(),
                s.c
            ));
        }
    }
    if let Some(i) = bn.var.iter().position(|&v| v < 0.0 || v.is_nan()) {
        return Err(Error::InvalidArgument(format!(
            "batch-norm variance of channel {i} is negative ({})",
            bn.var[i]
        )));
    }
    if bn.eps < 0.0 {
        return Err(Error::InvalidArgument("batch-norm eps must be >= 0".into()));
    }
    let mut out = input.clone();
    for n in 0..s.n {
        for c in 0..s.c {
            let denom = (f64::from(bn.var[c]) + f64::from(bn.eps)).sqrt();
            if denom == 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "batch-norm channel {c} has zero variance and zero eps"
                )));
            }
            let scale = f64::from(bn.gamma[c]) / denom;
            let (mean, beta) = (f64::from(bn.mean[c]), f64::from(bn.beta[c]));
            for v in out.plane_mut(n, c) {
                *v = (scale * (f64::from(*v) - mean) + beta) as f32;
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Resample {
    /// 2x2 window, stride 2.
    MaxPool2,
    /// Nearest-neighbour x2.
    UpNearest2,
}

pub fn resample(input: &Tensor, mode: Resample) -> Result<Tensor> {
    let s = input.shape();
    match mode {
        Resample::MaxPool2 => {
            if !s.h.is_multiple_of(2) || !s.w.is_multiple_of(2) {
                return shape_err(format!("max-pool needs even spatial dims, got {s}"));
            }
            let (ho, wo) = (s.h / 2, s.w / 2);
            Ok(Tensor::from_fn(
                Shape::new(s.n, s.c, ho, wo),
                |n, c, y, x| {
                    let (y0, x0) = (2 * y, 2 * x);
                    input
                        .at(n, c, y0, x0)
                        .max(input.at(n, c, y0, x0 + 1))
                        .max(input.at(n, c, y0 + 1, x0))
                        .max(input.at(n, c, y0 + 1, x0 + 1))
                },
            ))
        }
        Resample::UpNearest2 => Ok(Tensor::from_fn(
            Shape::new(s.n, s.c, s.h * 2, s.w * 2),
            |n, c, y, x| input.at(n, c, y / 2, x / 2),
        )),
    }
}

/// Per-channel spatial mean, shape `(n, c, 1, 1)`.
pub fn global_avg_pool(input: &Tensor) -> Tensor {
    let s = input.shape();
    let mut out = Tensor::zeros(Shape::new(s.n, s.c, 1, 1));
    for n in 0..s.n {
        for c in 0..s.c {
            let sum: f64 = input.plane(n, c).iter().map(|&v| f64::from(v)).sum();
            out.set(n, c, 0, 0, (sum / s.plane() as f64) as f32);
        }
    }
    out
}

/// Row-major `rows x cols` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return shape_err(format!(
                "matrix data length {} does not match {rows}x{cols}",
                data.len()
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }
}

/// `weights · input + bias`.
pub fn fully_connected(input: &[f32], weights: &Matrix, bias: &[f32]) -> Result<Vec<f32>> {
    if input.len() != weights.cols {
        return shape_err(format!(
            "input length {} does not match matrix inner dim {}",
            input.len(),
            weights.cols
        ));
    }
    if bias.len() != weights.rows {
        return shape_err(format!(
            "bias length {} does not match matrix rows {}",
            bias.len(),
            weights.rows
        ));
    }
    Ok((0..weights.rows)
        .map(|r| {
            let row = &weights.data[r * weights.cols..(r + 1) * weights.cols];
            let dot: f64 = row
                .iter()
                .zip(input)
                .map(|(&w, &x)| f64::from(w) * f64::from(x))
                .sum();
            (dot + f64::from(bias[r])) as f32
        })
        .collect())
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return shape_err(format!("cannot add {} and {}", a.shape(), b.shape()));
    }
    let mut out = a.clone();
    for (o, v) in out.data_mut().iter_mut().zip(b.data()) {
        *o += v;
    }
    Ok(out)
}

/// Multiplies every plane `(n, c)` by `scales[n * c_count + c]`.
pub fn scale_channels(input: &Tensor, scales: &[f32]) -> Result<Tensor> {
    let s = input.shape();
    if scales.len() != s.n * s.c {
        return shape_err(format!("{} channel scales for input {}", scales.len(), s));
    }
    let mut out = input.clone();
    for n in 0..s.n {
        for c in 0..s.c {
            let f = scales[n * s.c + c];
            out.plane_mut(n, c).iter_mut().for_each(|v| *v *= f);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ones(shape: Shape) -> Tensor {
        Tensor::full(shape, 1.0)
    }

    #[test]
    fn box_sum_center_and_corner() {
        let input = ones(Shape::new(1, 1, 3, 3));
        let w = ConvWeights::new(ones(Shape::new(1, 1, 3, 3)), None, 1, 1, 1).unwrap();
        let out = conv2d(&input, &w).unwrap();
        assert_eq!(out.shape(), Shape::new(1, 1, 3, 3));
        assert_eq!(out.at(0, 0, 1, 1), 9.0);
        assert_eq!(out.at(0, 0, 0, 0), 4.0);
        assert_eq!(out.at(0, 0, 2, 2), 4.0);
        assert_eq!(out.at(0, 0, 0, 1), 6.0);
    }

    #[test]
    fn pointwise_permutation_is_identity_up_to_order() {
        let input = Tensor::from_fn(Shape::new(1, 3, 4, 4), |_, c, y, x| {
            (c * 16 + y * 4 + x) as f32
        });
        let mut kernel = Tensor::zeros(Shape::new(3, 3, 1, 1));
        for c in 0..3 {
            kernel.set(c, c, 0, 0, 1.0);
        }
        let w = ConvWeights::new(kernel, None, 1, 0, 1).unwrap();
        assert_eq!(conv2d(&input, &w).unwrap(), input);
    }

    #[test]
    fn strided_output_shape() {
        let input = ones(Shape::new(2, 3, 9, 8));
        let w = ConvWeights::new(ones(Shape::new(4, 3, 7, 7)), None, 2, 3, 1).unwrap();
        let out = conv2d(&input, &w).unwrap();
        assert_eq!(out.shape(), Shape::new(2, 4, 5, 4));
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let input = ones(Shape::new(1, 3, 4, 4));
        let w = ConvWeights::new(ones(Shape::new(2, 2, 3, 3)), None, 1, 1, 1).unwrap();
        let err = conv2d(&input, &w).unwrap_err();
        assert!(matches!(err, Error::Shape(_)), "{err}");
        assert!(err.to_string().contains("3 channels"));
    }

    #[test]
    fn even_kernel_is_rejected() {
        assert!(ConvWeights::new(ones(Shape::new(1, 1, 2, 2)), None, 1, 0, 1).is_err());
    }

    #[test]
    fn depthwise_identity_and_zero_kernels() {
        let input = Tensor::from_fn(Shape::new(1, 2, 5, 5), |_, c, y, x| {
            (c + y * x) as f32 - 3.0
        });
        let mut kernel = Tensor::zeros(Shape::new(2, 1, 3, 3));
        kernel.set(0, 0, 1, 1, 1.0);
        kernel.set(1, 0, 1, 1, 1.0);
        let w = ConvWeights::same(kernel, None, 2).unwrap();
        assert_eq!(depthwise_conv2d(&input, &w).unwrap(), input);

        let mut kernel = Tensor::zeros(Shape::new(2, 1, 3, 3));
        for y in 0..3 {
            for x in 0..3 {
                kernel.set(0, 0, y, x, 1.0);
            }
        }
        let w = ConvWeights::same(kernel, None, 2).unwrap();
        let out = depthwise_conv2d(&input, &w).unwrap();
        assert!(out.plane(0, 1).iter().all(|&v| v == 0.0));
        assert!(out.plane(0, 0).iter().any(|&v| v != 0.0));
    }

    #[test]
    fn depthwise_rejects_wrong_groups() {
        let input = ones(Shape::new(1, 4, 3, 3));
        let w = ConvWeights::same(ones(Shape::new(4, 2, 3, 3)), None, 2).unwrap();
        assert!(depthwise_conv2d(&input, &w).is_err());
    }

    #[test]
    fn activations() {
        let t = Tensor::from_vec(Shape::new(1, 1, 1, 3), vec![-3.0, 2.0, 0.0]).unwrap();
        assert_eq!(activation(&t, Activation::Relu).data(), &[0.0, 2.0, 0.0]);
        let s = activation(&t, Activation::Sigmoid);
        assert_eq!(s.data()[2], 0.5);
        // 1 / (1 + e^-2)
        let expected = 1.0 / (1.0 + (-2.0f64).exp());
        assert!((f64::from(s.data()[1]) - expected).abs() < 1e-7);
        assert!((expected - 0.880797).abs() < 1e-6);
        assert!(sigmoid(-200.0).is_finite() && sigmoid(200.0) == 1.0);
    }

    #[test]
    fn batchnorm_cases() {
        let x = Tensor::from_vec(Shape::new(1, 1, 1, 3), vec![2.0, -1.0, 5.0]).unwrap();
        let id = BatchNormParams::pass_through(1);
        assert_eq!(batchnorm_infer(&x, &id).unwrap(), x);

        let mut zero_gamma = BatchNormParams::pass_through(1);
        zero_gamma.gamma = vec![0.0];
        zero_gamma.beta = vec![0.75];
        let out = batchnorm_infer(&x, &zero_gamma).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.75));

        let bn = BatchNormParams {
            mean: vec![1.0],
            var: vec![4.0],
            gamma: vec![3.0],
            beta: vec![1.0],
            eps: 0.0,
        };
        let x = Tensor::full(Shape::new(1, 1, 1, 1), 2.0);
        assert_eq!(batchnorm_infer(&x, &bn).unwrap().data(), &[2.5]);

        let mut neg = BatchNormParams::pass_through(1);
        neg.var = vec![-1.0];
        assert!(matches!(
            batchnorm_infer(&x, &neg),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn resample_cases() {
        let c = Tensor::full(Shape::new(1, 2, 4, 4), 3.0);
        assert_eq!(
            resample(&c, Resample::MaxPool2).unwrap(),
            Tensor::full(Shape::new(1, 2, 2, 2), 3.0)
        );
        assert_eq!(
            resample(&c, Resample::UpNearest2).unwrap(),
            Tensor::full(Shape::new(1, 2, 8, 8), 3.0)
        );

        let b = Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(resample(&b, Resample::MaxPool2).unwrap().data(), &[4.0]);

        let odd = Tensor::zeros(Shape::new(1, 1, 3, 4));
        assert!(resample(&odd, Resample::MaxPool2).is_err());
    }

    #[test]
    fn global_pool_cases() {
        let t = Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        assert_eq!(global_avg_pool(&t).data(), &[1.5]);
        let perm = Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![3.0, 0.0, 2.0, 1.0]).unwrap();
        assert_eq!(global_avg_pool(&perm), global_avg_pool(&t));
        let c = Tensor::full(Shape::new(2, 3, 5, 5), -0.25);
        assert!(global_avg_pool(&c).data().iter().all(|&v| v == -0.25));
    }

    #[test]
    fn fully_connected_cases() {
        let x = [1.0, -2.0, 3.0];
        assert_eq!(
            fully_connected(&x, &Matrix::identity(3), &[0.0; 3]).unwrap(),
            x.to_vec()
        );
        assert_eq!(
            fully_connected(&x, &Matrix::zeros(2, 3), &[0.5, -1.0]).unwrap(),
            vec![0.5, -1.0]
        );
        assert!(fully_connected(&x, &Matrix::zeros(2, 4), &[0.0; 2]).is_err());
    }
}
