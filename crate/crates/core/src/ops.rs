//! Forward and backward kernels for the layer primitives.
//!
//! These work on plain tensors; [`crate::graph::Graph`] records them and
//! replays the backward halves. The eager wrappers ([`conv2d`], [`maxpool2d`],
//! [`upsample_bilinear2x`], [`activation`]) are what the graph-free callers use.

use crate::tensor::{Scalar, Tensor, TensorError};

/// Negative-side slope of the leaky rectifier used by the CIFAR architectures.
pub const LEAKY_SLOPE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Activation {
    Identity,
    Relu,
    LeakyRelu,
    Sigmoid,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Identity => "linear",
            Activation::Relu => "relu",
            Activation::LeakyRelu => "leaky_relu",
            Activation::Sigmoid => "sigmoid",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "linear" => Activation::Identity,
            "relu" => Activation::Relu,
            "leaky_relu" => Activation::LeakyRelu,
            "sigmoid" => Activation::Sigmoid,
            _ => return None,
        })
    }

    pub fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(T::zero()),
            Activation::LeakyRelu => {
                if x > T::zero() {
                    x
                } else {
                    x * T::from_f64_lossy(LEAKY_SLOPE)
                }
            }
            Activation::Sigmoid => sigmoid(x),
        }
    }

    /// Derivative given the pre-activation input `x` and output `y`.
    pub fn derivative<T: Scalar>(self, x: T, y: T) -> T {
        match self {
            Activation::Identity => T::one(),
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::LeakyRelu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::from_f64_lossy(LEAKY_SLOPE)
                }
            }
            Activation::Sigmoid => y * (T::one() - y),
        }
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    // split on sign so exp never overflows
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn activation<T: Scalar>(input: &Tensor<T>, kind: Activation) -> Tensor<T> {
    input.map(|v| kind.apply(v))
}

/// Output length of a strided window sweep, or `None` if the window does not fit.
pub fn window_out(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if kernel == 0 || stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub filters: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(
        input: &[usize],
        kernel: &[usize],
        stride: usize,
        padding: usize,
    ) -> Result<Self, TensorError> {
        let mismatch = || TensorError::ShapeMismatch {
            op: "conv2d",
            left: input.to_vec(),
            right: kernel.to_vec(),
        };
        if input.len() != 4 || kernel.len() != 4 || input[1] != kernel[1] {
            return Err(mismatch());
        }
        if stride == 0 {
            return Err(TensorError::Contract {
                op: "conv2d",
                message: "stride must be positive".into(),
            });
        }
        let out_h = window_out(input[2], kernel[2], stride, padding).ok_or_else(mismatch)?;
        let out_w = window_out(input[3], kernel[3], stride, padding).ok_or_else(mismatch)?;
        Ok(Self {
            batch: input[0],
            in_channels: input[1],
            height: input[2],
            width: input[3],
            filters: kernel[0],
            kernel_h: kernel[2],
            kernel_w: kernel[3],
            stride,
            padding,
            out_h,
            out_w,
        })
    }

    fn patch(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    fn in_plane(&self) -> usize {
        self.in_channels * self.height * self.width
    }

    /// Unfolds one sample (C x H x W) into a (C*kh*kw) x (oh*ow) matrix.
    fn im2col<T: Scalar>(&self, x: &[T], cols: &mut [T]) {
        let pos = self.positions();
        let pad = self.padding as isize;
        for c in 0..self.in_channels {
            for ki in 0..self.kernel_h {
                for kj in 0..self.kernel_w {
                    let row = (c * self.kernel_h + ki) * self.kernel_w + kj;
                    let dst = &mut cols[row * pos..(row + 1) * pos];
                    for oi in 0..self.out_h {
                        let ii = (oi * self.stride + ki) as isize - pad;
                        for oj in 0..self.out_w {
                            let jj = (oj * self.stride + kj) as isize - pad;
                            dst[oi * self.out_w + oj] = if ii < 0
                                || jj < 0
                                || ii >= self.height as isize
                                || jj >= self.width as isize
                            {
                                T::zero()
                            } else {
                                x[(c * self.height + ii as usize) * self.width + jj as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Scalar>(&self, cols: &[T], dx: &mut [T]) {
        let pos = self.positions();
        let pad = self.padding as isize;
        for c in 0..self.in_channels {
            for ki in 0..self.kernel_h {
                for kj in 0..self.kernel_w {
                    let row = (c * self.kernel_h + ki) * self.kernel_w + kj;
                    let src = &cols[row * pos..(row + 1) * pos];
                    for oi in 0..self.out_h {
                        let ii = (oi * self.stride + ki) as isize - pad;
                        if ii < 0 || ii >= self.height as isize {
                            continue;
                        }
                        for oj in 0..self.out_w {
                            let jj = (oj * self.stride + kj) as isize - pad;
                            if jj < 0 || jj >= self.width as isize {
                                continue;
                            }
                            let idx = (c * self.height + ii as usize) * self.width + jj as usize;
                            dx[idx] = dx[idx] + src[oi * self.out_w + oj];
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation forward pass. Returns the output and the unfolded input
/// columns, which the backward pass reuses.
pub fn conv2d_forward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
) -> Result<(Tensor<T>, Vec<T>), TensorError> {
    let g = ConvGeometry::new(input.shape(), kernel.shape(), stride, padding)?;
    if let Some(b) = bias {
        if b.numel() != g.filters {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d bias",
                left: kernel.shape().to_vec(),
                right: b.shape().to_vec(),
            });
        }
    }
    let (patch, pos) = (g.patch(), g.positions());
    let mut cols = vec![T::zero(); g.batch * patch * pos];
    let mut out = vec![T::zero(); g.batch * g.filters * pos];
    for n in 0..g.batch {
        let x = &input.data()[n * g.in_plane()..(n + 1) * g.in_plane()];
        let col = &mut cols[n * patch * pos..(n + 1) * patch * pos];
        g.im2col(x, col);
        let o = &mut out[n * g.filters * pos..(n + 1) * g.filters * pos];
        if let Some(b) = bias {
            for (f, chunk) in o.chunks_mut(pos).enumerate() {
                chunk.fill(b.data()[f]);
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        T::gemm(g.filters, patch, pos, T::one(), kernel.data(), false, col, false, beta, o);
    }
    let out = Tensor::new([g.batch, g.filters, g.out_h, g.out_w], out)?;
    Ok((out, cols))
}

pub struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub kernel: Vec<T>,
    pub bias: Vec<T>,
}

pub fn conv2d_backward<T: Scalar>(
    geometry: &ConvGeometry,
    grad_out: &[T],
    kernel: &[T],
    cols: &[T],
    need_input: bool,
    need_kernel: bool,
) -> ConvGrads<T> {
    let g = geometry;
    let (patch, pos) = (g.patch(), g.positions());
    let mut dk = vec![T::zero(); if need_kernel { g.filters * patch } else { 0 }];
    let mut db = vec![T::zero(); g.filters];
    let mut dx = need_input.then(|| vec![T::zero(); g.batch * g.in_plane()]);
    let mut dcols = vec![T::zero(); patch * pos];
    for n in 0..g.batch {
        let go = &grad_out[n * g.filters * pos..(n + 1) * g.filters * pos];
        for (f, chunk) in go.chunks(pos).enumerate() {
            db[f] = db[f] + chunk.iter().copied().sum::<T>();
        }
        if need_kernel {
            // dK += dOut (F x P) . cols^T (P x patch)
            let col = &cols[n * patch * pos..(n + 1) * patch * pos];
            T::gemm(g.filters, pos, patch, T::one(), go, false, col, true, T::one(), &mut dk);
        }
        if let Some(dx) = dx.as_mut() {
            // dcols = K^T (patch x F) . dOut (F x P)
            T::gemm(patch, g.filters, pos, T::one(), kernel, true, go, false, T::zero(), &mut dcols);
            g.col2im(&dcols, &mut dx[n * g.in_plane()..(n + 1) * g.in_plane()]);
        }
    }
    ConvGrads {
        input: dx,
        kernel: dk,
        bias: db,
    }
}

/// Eager 2-D cross-correlation with optional per-filter bias.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>, TensorError> {
    conv2d_forward(input, kernel, bias, stride, padding).map(|(out, _)| out)
}

/// Max pooling over an `N x C x H x W` tensor. Returns the output and, for
/// each output element, the flat input index that won the window (first in
/// row-major order on ties).
pub fn maxpool2d_forward<T: Scalar>(
    input: &Tensor<T>,
    kernel: usize,
    stride: usize,
) -> Result<(Tensor<T>, Vec<usize>), TensorError> {
    let s = input.shape();
    let bad = || TensorError::Contract {
        op: "maxpool2d",
        message: format!("input {s:?} cannot be pooled with kernel {kernel} stride {stride}"),
    };
    if s.len() != 4 {
        return Err(bad());
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let oh = window_out(h, kernel, stride, 0).ok_or_else(bad)?;
    let ow = window_out(w, kernel, stride, 0).ok_or_else(bad)?;
    let x = input.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oi in 0..oh {
            for oj in 0..ow {
                let mut best = base + oi * stride * w + oj * stride;
                for ki in 0..kernel {
                    for kj in 0..kernel {
                        let idx = base + (oi * stride + ki) * w + oj * stride + kj;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    Ok((Tensor::new([n, c, oh, ow], out)?, arg))
}

pub fn maxpool2d<T: Scalar>(
    input: &Tensor<T>,
    kernel: usize,
    stride: usize,
) -> Result<Tensor<T>, TensorError> {
    maxpool2d_forward(input, kernel, stride).map(|(out, _)| out)
}

/// Source taps for one output coordinate of a 2x bilinear resize with
/// half-pixel centres: `(lo, hi, weight_of_hi)`.
fn bilinear_taps(out_len: usize, in_len: usize) -> Vec<(usize, usize, f64)> {
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(in_len - 1);
            let hi = (lo + 1).min(in_len - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

pub fn upsample_bilinear2x<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    let s = input.shape();
    if s.len() != 4 {
        return Err(TensorError::Contract {
            op: "upsample_bilinear2x",
            message: format!("expected N x C x H x W, got {s:?}"),
        });
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let (oh, ow) = (2 * h, 2 * w);
    let rows = bilinear_taps(oh, h);
    let colt = bilinear_taps(ow, w);
    let x = input.data();
    let mut out = vec![T::zero(); n * c * oh * ow];
    for plane in 0..n * c {
        let src = &x[plane * h * w..(plane + 1) * h * w];
        let dst = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
        for (oi, &(r0, r1, ly)) in rows.iter().enumerate() {
            let ly = T::from_f64_lossy(ly);
            for (oj, &(c0, c1, lx)) in colt.iter().enumerate() {
                let lx = T::from_f64_lossy(lx);
                let top = src[r0 * w + c0] * (T::one() - lx) + src[r0 * w + c1] * lx;
                let bot = src[r1 * w + c0] * (T::one() - lx) + src[r1 * w + c1] * lx;
                dst[oi * ow + oj] = top * (T::one() - ly) + bot * ly;
            }
        }
    }
    Tensor::new([n, c, oh, ow], out)
}

pub fn upsample_bilinear2x_backward<T: Scalar>(input_shape: &[usize], grad_out: &[T]) -> Vec<T> {
    let (n, c, h, w) = (input_shape[0], input_shape[1], input_shape[2], input_shape[3]);
    let (oh, ow) = (2 * h, 2 * w);
    let rows = bilinear_taps(oh, h);
    let colt = bilinear_taps(ow, w);
    let mut dx = vec![T::zero(); n * c * h * w];
    for plane in 0..n * c {
        let go = &grad_out[plane * oh * ow..(plane + 1) * oh * ow];
        let d = &mut dx[plane * h * w..(plane + 1) * h * w];
        for (oi, &(r0, r1, ly)) in rows.iter().enumerate() {
            let ly = T::from_f64_lossy(ly);
            for (oj, &(c0, c1, lx)) in colt.iter().enumerate() {
                let lx = T::from_f64_lossy(lx);
                let gv = go[oi * ow + oj];
                let top = gv * (T::one() - ly);
                let bot = gv * ly;
                d[r0 * w + c0] = d[r0 * w + c0] + top * (T::one() - lx);
                d[r0 * w + c1] = d[r0 * w + c1] + top * lx;
                d[r1 * w + c0] = d[r1 * w + c0] + bot * (T::one() - lx);
                d[r1 * w + c1] = d[r1 * w + c1] + bot * lx;
            }
        }
    }
    dx
}
