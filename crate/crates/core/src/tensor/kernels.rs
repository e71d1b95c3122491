//! Forward and backward kernels for the layer vocabulary.
//!
//! All spatial kernels work on `[N, C, D, H, W]` tensors. Convolutions gather
//! windows into a column matrix (im2col) and hand the product to GEMM; the
//! scatter-add adjoint (col2im) serves both the data gradient of a
//! convolution and the forward pass of a transposed convolution.
//!
//! Work is split across samples of the batch. Per-sample weight gradients
//! are summed in sample order afterwards, so results do not depend on the
//! number of worker threads.

use super::gemm::{gemm, MatRef};
use super::Tensor;
use crate::error::{Error, Result};
use rayon::prelude::*;

/// Stride-1 convolution geometry. Kernel extents are odd; a padded axis
/// receives `(k - 1) / 2` zeros on each side and keeps its extent.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: [usize; 3],
    pub padded: [bool; 3],
}

impl ConvGeometry {
    /// 3×3 in-plane kernel with size-preserving padding.
    pub fn planar(k: usize) -> Self {
        Self {
            kernel: [1, k, k],
            padded: [true, true, true],
        }
    }

    /// Cubic kernel; each axis padded per flag in `[D, H, W]` order.
    pub fn volumetric(k: usize, padded: [bool; 3]) -> Self {
        Self {
            kernel: [k, k, k],
            padded,
        }
    }

    pub fn kernel_volume(&self) -> usize {
        self.kernel.iter().product()
    }

    fn pads(&self) -> [usize; 3] {
        let mut p = [0; 3];
        for a in 0..3 {
            if self.padded[a] {
                p[a] = (self.kernel[a] - 1) / 2;
            }
        }
        p
    }

    pub fn output_extents(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            let k = self.kernel[a];
            if k.is_multiple_of(2) {
                return Err(Error::InvalidArgument(format!(
                    "convolution kernel extent {k} must be odd"
                )));
            }
            out[a] = if self.padded[a] {
                input[a]
            } else if input[a] >= k {
                input[a] - k + 1
            } else {
                return Err(Error::Extent(format!(
                    "unpadded axis of extent {} cannot take a kernel of {}",
                    input[a], k
                )));
            };
        }
        Ok(out)
    }
}

/// Transposed convolution geometry: output index `i * stride + tap` per axis,
/// taps past `extent * stride` are dropped so every axis scales exactly by
/// its stride.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TransposedGeometry {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
}

impl TransposedGeometry {
    pub fn planar(k: usize) -> Self {
        Self {
            kernel: [1, k, k],
            stride: [1, 2, 2],
        }
    }

    pub fn volumetric(k: usize) -> Self {
        Self {
            kernel: [k, k, k],
            stride: [2, 2, 2],
        }
    }

    pub fn kernel_volume(&self) -> usize {
        self.kernel.iter().product()
    }

    pub fn output_extents(&self, input: [usize; 3]) -> [usize; 3] {
        [
            input[0] * self.stride[0],
            input[1] * self.stride[1],
            input[2] * self.stride[2],
        ]
    }
}

/// Window relation between a "large" grid and a "small" grid:
/// `large = small * stride + tap - pad`.
#[derive(Clone, Copy)]
struct Windows {
    channels: usize,
    large: [usize; 3],
    small: [usize; 3],
    kernel: [usize; 3],
    stride: [usize; 3],
    pad: [usize; 3],
}

impl Windows {
    fn rows(&self) -> usize {
        self.channels * self.kernel.iter().product::<usize>()
    }

    fn cols(&self) -> usize {
        self.small.iter().product()
    }

    fn large_len(&self) -> usize {
        self.channels * self.large.iter().product::<usize>()
    }

    /// Valid small-grid range along one axis for a tap, i.e. the indices whose
    /// mapped large index falls inside `[0, large)`.
    fn range(&self, axis: usize, tap: usize) -> (usize, usize) {
        let (s, p, big, small) = (
            self.stride[axis],
            self.pad[axis] as isize,
            self.large[axis] as isize,
            self.small[axis],
        );
        let off = tap as isize - p;
        // smallest i with i*s + off >= 0
        let lo = if off >= 0 { 0 } else { ((-off) as usize).div_ceil(s) };
        // largest i with i*s + off < big
        let hi = if big - 1 - off < 0 {
            0
        } else {
            (((big - 1 - off) as usize) / s + 1).min(small)
        };
        (lo.min(hi), hi)
    }

    /// Gathers `large` into the `rows × cols` column matrix.
    fn gather(&self, large: &[f64], cols: &mut [f64]) {
        let [kd, kh, kw] = self.kernel;
        let [ds, hs, ws] = self.small;
        let [_, hl, wl] = self.large;
        let plane = ds * hs * ws;
        cols.iter_mut().for_each(|v| *v = 0.0);
        let mut row = 0;
        for c in 0..self.channels {
            let base_c = c * self.large[0] * hl * wl;
            for tz in 0..kd {
                let (z0, z1) = self.range(0, tz);
                for ty in 0..kh {
                    let (y0, y1) = self.range(1, ty);
                    for tx in 0..kw {
                        let (x0, x1) = self.range(2, tx);
                        let dst = &mut cols[row * plane..(row + 1) * plane];
                        for z in z0..z1 {
                            let lz = z * self.stride[0] + tz - self.pad[0];
                            for y in y0..y1 {
                                let ly = y * self.stride[1] + ty - self.pad[1];
                                let src_row = base_c + (lz * hl + ly) * wl;
                                let dst_row = (z * hs + y) * ws;
                                let (sx, px) = (self.stride[2], self.pad[2]);
                                for x in x0..x1 {
                                    dst[dst_row + x] = large[src_row + x * sx + tx - px];
                                }
                            }
                        }
                        row += 1;
                    }
                }
            }
        }
    }

    /// Adjoint of [`Windows::gather`]: scatter-adds columns into `large`.
    fn scatter_add(&self, cols: &[f64], large: &mut [f64]) {
        let [kd, kh, kw] = self.kernel;
        let [ds, hs, ws] = self.small;
        let [_, hl, wl] = self.large;
        let plane = ds * hs * ws;
        let mut row = 0;
        for c in 0..self.channels {
            let base_c = c * self.large[0] * hl * wl;
            for tz in 0..kd {
                let (z0, z1) = self.range(0, tz);
                for ty in 0..kh {
                    let (y0, y1) = self.range(1, ty);
                    for tx in 0..kw {
                        let (x0, x1) = self.range(2, tx);
                        let src = &cols[row * plane..(row + 1) * plane];
                        for z in z0..z1 {
                            let lz = z * self.stride[0] + tz - self.pad[0];
                            for y in y0..y1 {
                                let ly = y * self.stride[1] + ty - self.pad[1];
                                let dst_row = base_c + (lz * hl + ly) * wl;
                                let src_row = (z * hs + y) * ws;
                                let (sx, px) = (self.stride[2], self.pad[2]);
                                for x in x0..x1 {
                                    large[dst_row + x * sx + tx - px] += src[src_row + x];
                                }
                            }
                        }
                        row += 1;
                    }
                }
            }
        }
    }
}

fn sum_in_order(parts: Vec<Vec<f64>>, len: usize) -> Vec<f64> {
    let mut acc = vec![0.0; len];
    for part in parts {
        for (a, p) in acc.iter_mut().zip(part) {
            *a += p;
        }
    }
    acc
}

fn add_bias(out: &mut [f64], bias: &[f64], plane: usize) {
    for (chunk, b) in out.chunks_mut(plane).zip(bias) {
        chunk.iter_mut().for_each(|v| *v += b);
    }
}

fn bias_grad(grad_out: &Tensor, channels: usize) -> Vec<f64> {
    let dims = grad_out.shape();
    let plane: usize = dims[2..].iter().product();
    let mut db = vec![0.0; channels];
    for sample in grad_out.data().chunks(channels * plane) {
        for (c, chunk) in sample.chunks(plane).enumerate() {
            db[c] += chunk.iter().sum::<f64>();
        }
    }
    db
}

/// Checks `[Cout, Cin, kd, kh, kw]` against the input and geometry.
fn check_conv(input: &Tensor, kernel: &Tensor, bias: &Tensor, geom: &ConvGeometry) -> Result<()> {
    let [_, cin, ..] = input.dims5()?;
    let ks = kernel.shape();
    if ks.len() != 5 {
        return Err(Error::Shape(format!("kernel must be rank 5, got {ks:?}")));
    }
    if ks[1] != cin {
        return Err(Error::ChannelMismatch {
            expected: ks[1],
            got: cin,
        });
    }
    if ks[2..] != geom.kernel {
        return Err(Error::Shape(format!(
            "kernel extents {:?} disagree with geometry {:?}",
            &ks[2..],
            geom.kernel
        )));
    }
    if bias.numel() != ks[0] {
        return Err(Error::Shape(format!(
            "bias has {} entries for {} output channels",
            bias.numel(),
            ks[0]
        )));
    }
    Ok(())
}

fn conv_windows(input: &Tensor, geom: &ConvGeometry) -> Result<Windows> {
    let [_, cin, d, h, w] = input.dims5()?;
    let out = geom.output_extents([d, h, w])?;
    Ok(Windows {
        channels: cin,
        large: [d, h, w],
        small: out,
        kernel: geom.kernel,
        stride: [1, 1, 1],
        pad: geom.pads(),
    })
}

/// Stride-1 convolution. `kernel` is `[Cout, Cin, kd, kh, kw]`.
pub fn conv_forward(
    input: &Tensor,
    kernel: &Tensor,
    bias: &Tensor,
    geom: &ConvGeometry,
) -> Result<Tensor> {
    check_conv(input, kernel, bias, geom)?;
    let n = input.shape()[0];
    let cout = kernel.shape()[0];
    let win = conv_windows(input, geom)?;
    let (rows, plane) = (win.rows(), win.cols());
    let in_len = win.large_len();
    let mut out = vec![0.0; n * cout * plane];
    out.par_chunks_mut(cout * plane)
        .zip(input.data().par_chunks(in_len))
        .for_each(|(out_n, in_n)| {
            let mut cols = vec![0.0; rows * plane];
            win.gather(in_n, &mut cols);
            gemm(
                MatRef::row_major(kernel.data(), cout, rows),
                MatRef::row_major(&cols, rows, plane),
                0.0,
                out_n,
            );
            add_bias(out_n, bias.data(), plane);
        });
    let [d, h, w] = win.small;
    Tensor::new(vec![n, cout, d, h, w], out)
}

/// Gradients of [`conv_forward`]: `(d_input, d_kernel, d_bias)`.
/// The input gradient is skipped when `need_input` is false.
pub fn conv_backward(
    input: &Tensor,
    kernel: &Tensor,
    geom: &ConvGeometry,
    grad_out: &Tensor,
    need_input: bool,
) -> Result<(Option<Tensor>, Tensor, Tensor)> {
    let cout = kernel.shape()[0];
    let win = conv_windows(input, geom)?;
    let (rows, plane) = (win.rows(), win.cols());
    let in_len = win.large_len();
    let go = grad_out.data();

    let parts: Vec<Vec<f64>> = input
        .data()
        .par_chunks(in_len)
        .zip(go.par_chunks(cout * plane))
        .map(|(in_n, go_n)| {
            let mut cols = vec![0.0; rows * plane];
            win.gather(in_n, &mut cols);
            let mut dw = vec![0.0; cout * rows];
            gemm(
                MatRef::row_major(go_n, cout, plane),
                MatRef::row_major(&cols, rows, plane).t(),
                0.0,
                &mut dw,
            );
            dw
        })
        .collect();
    let dkernel = Tensor::new(kernel.shape().to_vec(), sum_in_order(parts, cout * rows))?;
    let dbias = Tensor::new(vec![cout], bias_grad(grad_out, cout))?;

    let dinput = if need_input {
        let mut dx = vec![0.0; input.numel()];
        dx.par_chunks_mut(in_len)
            .zip(go.par_chunks(cout * plane))
            .for_each(|(dx_n, go_n)| {
                let mut cols = vec![0.0; rows * plane];
                gemm(
                    MatRef::row_major(kernel.data(), cout, rows).t(),
                    MatRef::row_major(go_n, cout, plane),
                    0.0,
                    &mut cols,
                );
                win.scatter_add(&cols, dx_n);
            });
        Some(Tensor::new(input.shape().to_vec(), dx)?)
    } else {
        None
    };
    Ok((dinput, dkernel, dbias))
}

fn tconv_windows(input: &Tensor, kernel: &Tensor, geom: &TransposedGeometry) -> Result<Windows> {
    let [_, cin, d, h, w] = input.dims5()?;
    let ks = kernel.shape();
    if ks.len() != 5 {
        return Err(Error::Shape(format!("kernel must be rank 5, got {ks:?}")));
    }
    if ks[0] != cin {
        return Err(Error::ChannelMismatch {
            expected: ks[0],
            got: cin,
        });
    }
    if ks[2..] != geom.kernel {
        return Err(Error::Shape(format!(
            "kernel extents {:?} disagree with geometry {:?}",
            &ks[2..],
            geom.kernel
        )));
    }
    Ok(Windows {
        channels: ks[1],
        large: geom.output_extents([d, h, w]),
        small: [d, h, w],
        kernel: geom.kernel,
        stride: geom.stride,
        pad: [0, 0, 0],
    })
}

/// Transposed (fractionally strided) convolution. `kernel` is
/// `[Cin, Cout, kd, kh, kw]`; each spatial extent scales by its stride.
pub fn transposed_conv_forward(
    input: &Tensor,
    kernel: &Tensor,
    bias: &Tensor,
    geom: &TransposedGeometry,
) -> Result<Tensor> {
    let win = tconv_windows(input, kernel, geom)?;
    let [n, cin, ..] = input.dims5()?;
    let cout = kernel.shape()[1];
    if bias.numel() != cout {
        return Err(Error::Shape(format!(
            "bias has {} entries for {} output channels",
            bias.numel(),
            cout
        )));
    }
    let (rows, plane_in) = (win.rows(), win.cols());
    let out_plane: usize = win.large.iter().product();
    let mut out = vec![0.0; n * cout * out_plane];
    out.par_chunks_mut(cout * out_plane)
        .zip(input.data().par_chunks(cin * plane_in))
        .for_each(|(out_n, in_n)| {
            let mut cols = vec![0.0; rows * plane_in];
            gemm(
                MatRef::row_major(kernel.data(), cin, rows).t(),
                MatRef::row_major(in_n, cin, plane_in),
                0.0,
                &mut cols,
            );
            win.scatter_add(&cols, out_n);
            add_bias(out_n, bias.data(), out_plane);
        });
    let [d, h, w] = win.large;
    Tensor::new(vec![n, cout, d, h, w], out)
}

/// Gradients of [`transposed_conv_forward`]: `(d_input, d_kernel, d_bias)`.
pub fn transposed_conv_backward(
    input: &Tensor,
    kernel: &Tensor,
    geom: &TransposedGeometry,
    grad_out: &Tensor,
    need_input: bool,
) -> Result<(Option<Tensor>, Tensor, Tensor)> {
    let win = tconv_windows(input, kernel, geom)?;
    let [_, cin, ..] = input.dims5()?;
    let cout = kernel.shape()[1];
    let (rows, plane_in) = (win.rows(), win.cols());
    let out_len = win.large_len();
    let go = grad_out.data();

    let per_sample: Vec<(Vec<f64>, Option<Vec<f64>>)> = input
        .data()
        .par_chunks(cin * plane_in)
        .zip(go.par_chunks(out_len))
        .map(|(in_n, go_n)| {
            let mut cols = vec![0.0; rows * plane_in];
            win.gather(go_n, &mut cols);
            let mut dw = vec![0.0; cin * rows];
            gemm(
                MatRef::row_major(in_n, cin, plane_in),
                MatRef::row_major(&cols, rows, plane_in).t(),
                0.0,
                &mut dw,
            );
            let dx = need_input.then(|| {
                let mut dx = vec![0.0; cin * plane_in];
                gemm(
                    MatRef::row_major(kernel.data(), cin, rows),
                    MatRef::row_major(&cols, rows, plane_in),
                    0.0,
                    &mut dx,
                );
                dx
            });
            (dw, dx)
        })
        .collect();

    let mut dw_parts = Vec::with_capacity(per_sample.len());
    let mut dx_all = Vec::with_capacity(if need_input { input.numel() } else { 0 });
    for (dw, dx) in per_sample {
        dw_parts.push(dw);
        if let Some(dx) = dx {
            dx_all.extend(dx);
        }
    }
    let dkernel = Tensor::new(kernel.shape().to_vec(), sum_in_order(dw_parts, cin * rows))?;
    let dbias = Tensor::new(vec![cout], bias_grad(grad_out, cout))?;
    let dinput = if need_input {
        Some(Tensor::new(input.shape().to_vec(), dx_all)?)
    } else {
        None
    };
    Ok((dinput, dkernel, dbias))
}

/// Flat positions (into the pooled tensor's input) of each window maximum.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PoolIndices {
    pub input_shape: Vec<usize>,
    pub positions: Vec<usize>,
}

/// Non-overlapping max pooling with window = stride = `factor` per axis.
/// Ties resolve to the first position in row-major window order.
pub fn maxpool_forward(input: &Tensor, factor: [usize; 3]) -> Result<(Tensor, PoolIndices)> {
    let [n, c, d, h, w] = input.dims5()?;
    for (a, (&e, &f)) in [d, h, w].iter().zip(&factor).enumerate() {
        if f == 0 || e % f != 0 {
            return Err(Error::Extent(format!(
                "axis {a} of extent {e} is not divisible by pooling factor {f}"
            )));
        }
    }
    let [fd, fh, fw] = factor;
    let (od, oh, ow) = (d / fd, h / fh, w / fw);
    let x = input.data();
    let mut out = Vec::with_capacity(n * c * od * oh * ow);
    let mut positions = Vec::with_capacity(out.capacity());
    for nc in 0..n * c {
        let base = nc * d * h * w;
        for z in 0..od {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut best_pos = usize::MAX;
                    let mut best = f64::NEG_INFINITY;
                    for tz in 0..fd {
                        for ty in 0..fh {
                            for tx in 0..fw {
                                let pos = base
                                    + ((z * fd + tz) * h + (y * fh + ty)) * w
                                    + xx * fw
                                    + tx;
                                if best_pos == usize::MAX || x[pos] > best {
                                    best = x[pos];
                                    best_pos = pos;
                                }
                            }
                        }
                    }
                    out.push(best);
                    positions.push(best_pos);
                }
            }
        }
    }
    Ok((
        Tensor::new(vec![n, c, od, oh, ow], out)?,
        PoolIndices {
            input_shape: input.shape().to_vec(),
            positions,
        },
    ))
}

/// Routes each pooled gradient back to its argmax position.
pub fn maxpool_backward(indices: &PoolIndices, grad_out: &Tensor) -> Result<Tensor> {
    let mut dx = Tensor::zeros(&indices.input_shape);
    let data = dx.data_mut();
    for (&pos, &g) in indices.positions.iter().zip(grad_out.data()) {
        data[pos] += g;
    }
    Ok(dx)
}

/// Places each value at its recorded origin; all other positions are zero.
pub fn unpool_forward(input: &Tensor, indices: &PoolIndices) -> Result<Tensor> {
    if input.numel() != indices.positions.len() {
        return Err(Error::Shape(format!(
            "unpool input has {} elements but {} indices",
            input.numel(),
            indices.positions.len()
        )));
    }
    let mut out = Tensor::zeros(&indices.input_shape);
    let data = out.data_mut();
    for (&pos, &v) in indices.positions.iter().zip(input.data()) {
        data[pos] = v;
    }
    Ok(out)
}

pub fn unpool_backward(indices: &PoolIndices, grad_out: &Tensor, input_shape: &[usize]) -> Result<Tensor> {
    let g = grad_out.data();
    let data = indices.positions.iter().map(|&p| g[p]).collect();
    Tensor::new(input_shape.to_vec(), data)
}

/// Values saved by a training-mode batch-norm forward pass.
#[derive(Clone, Debug)]
pub struct BatchNormSaved {
    pub normalized: Tensor,
    pub inv_std: Vec<f64>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

fn channel_planes(input: &Tensor) -> Result<(usize, usize, usize)> {
    let [n, c, d, h, w] = input.dims5()?;
    Ok((n, c, d * h * w))
}

/// Training-mode batch norm: per-channel batch statistics over `N, D, H, W`
/// (biased variance), then `gamma * x̂ + beta`.
pub fn batch_norm_train(
    input: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> Result<(Tensor, BatchNormSaved)> {
    let (n, c, plane) = channel_planes(input)?;
    if gamma.numel() != c || beta.numel() != c {
        return Err(Error::ChannelMismatch {
            expected: c,
            got: gamma.numel(),
        });
    }
    let count = (n * plane) as f64;
    let x = input.data();
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for s in 0..n {
        for ch in 0..c {
            let off = (s * c + ch) * plane;
            mean[ch] += x[off..off + plane].iter().sum::<f64>();
        }
    }
    mean.iter_mut().for_each(|m| *m /= count);
    for s in 0..n {
        for ch in 0..c {
            let off = (s * c + ch) * plane;
            var[ch] += x[off..off + plane]
                .iter()
                .map(|v| (v - mean[ch]).powi(2))
                .sum::<f64>();
        }
    }
    var.iter_mut().for_each(|v| *v /= count);
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();

    let mut xhat = vec![0.0; x.len()];
    let mut y = vec![0.0; x.len()];
    let (g, b) = (gamma.data(), beta.data());
    for s in 0..n {
        for ch in 0..c {
            let off = (s * c + ch) * plane;
            for i in off..off + plane {
                xhat[i] = (x[i] - mean[ch]) * inv_std[ch];
                y[i] = g[ch] * xhat[i] + b[ch];
            }
        }
    }
    let shape = input.shape().to_vec();
    Ok((
        Tensor::new(shape.clone(), y)?,
        BatchNormSaved {
            normalized: Tensor::new(shape, xhat)?,
            inv_std,
            mean,
            var,
        },
    ))
}

/// Inference-mode batch norm with fixed statistics.
pub fn batch_norm_infer(
    input: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    mean: &[f64],
    var: &[f64],
    eps: f64,
) -> Result<Tensor> {
    let (n, c, plane) = channel_planes(input)?;
    if gamma.numel() != c || beta.numel() != c || mean.len() != c || var.len() != c {
        return Err(Error::ChannelMismatch {
            expected: c,
            got: gamma.numel(),
        });
    }
    let x = input.data();
    let mut y = vec![0.0; x.len()];
    for s in 0..n {
        for ch in 0..c {
            let scale = gamma.data()[ch] / (var[ch] + eps).sqrt();
            let off = (s * c + ch) * plane;
            for i in off..off + plane {
                y[i] = (x[i] - mean[ch]) * scale + beta.data()[ch];
            }
        }
    }
    Tensor::new(input.shape().to_vec(), y)
}

/// Gradients of [`batch_norm_train`]: `(d_input, d_gamma, d_beta)`.
pub fn batch_norm_train_backward(
    saved: &BatchNormSaved,
    gamma: &Tensor,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (n, c, plane) = channel_planes(grad_out)?;
    let count = (n * plane) as f64;
    let dy = grad_out.data();
    let xhat = saved.normalized.data();
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for s in 0..n {
        for ch in 0..c {
            let off = (s * c + ch) * plane;
            for i in off..off + plane {
                dgamma[ch] += dy[i] * xhat[i];
                dbeta[ch] += dy[i];
            }
        }
    }
    let mut dx = vec![0.0; dy.len()];
    for s in 0..n {
        for ch in 0..c {
            // Σ dx̂ = γ Σ dy and Σ dx̂·x̂ = γ Σ dy·x̂
            let g = gamma.data()[ch];
            let k = g * saved.inv_std[ch] / count;
            let off = (s * c + ch) * plane;
            for i in off..off + plane {
                dx[i] = k * (count * dy[i] - dbeta[ch] - xhat[i] * dgamma[ch]);
            }
        }
    }
    Ok((
        Tensor::new(grad_out.shape().to_vec(), dx)?,
        Tensor::new(vec![c], dgamma)?,
        Tensor::new(vec![c], dbeta)?,
    ))
}

/// Softmax across axis 1 of an `[N, K, ...]` tensor, max-shifted.
pub fn softmax_forward(input: &Tensor) -> Result<Tensor> {
    let shape = input.shape();
    if shape.len() < 2 || shape[1] < 2 {
        return Err(Error::Shape(format!(
            "softmax needs a class axis of extent >= 2, got {shape:?}"
        )));
    }
    let (n, k) = (shape[0], shape[1]);
    let plane: usize = shape[2..].iter().product();
    let x = input.data();
    let mut y = vec![0.0; x.len()];
    for s in 0..n {
        let base = s * k * plane;
        for p in 0..plane {
            let mut m = f64::NEG_INFINITY;
            for c in 0..k {
                m = m.max(x[base + c * plane + p]);
            }
            let mut z = 0.0;
            for c in 0..k {
                let e = (x[base + c * plane + p] - m).exp();
                y[base + c * plane + p] = e;
                z += e;
            }
            for c in 0..k {
                y[base + c * plane + p] /= z;
            }
        }
    }
    Tensor::new(shape.to_vec(), y)
}

pub fn softmax_backward(output: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    let shape = output.shape();
    let (n, k) = (shape[0], shape[1]);
    let plane: usize = shape[2..].iter().product();
    let (y, dy) = (output.data(), grad_out.data());
    let mut dx = vec![0.0; y.len()];
    for s in 0..n {
        let base = s * k * plane;
        for p in 0..plane {
            let dot: f64 = (0..k)
                .map(|c| y[base + c * plane + p] * dy[base + c * plane + p])
                .sum();
            for c in 0..k {
                let i = base + c * plane + p;
                dx[i] = y[i] * (dy[i] - dot);
            }
        }
    }
    Tensor::new(shape.to_vec(), dx)
}

/// Concatenates along axis 1.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() < 2 || sa.len() != sb.len() || sa[0] != sb[0] || sa[2..] != sb[2..] {
        return Err(Error::Shape(format!("cannot concatenate {sa:?} with {sb:?}")));
    }
    let n = sa[0];
    let (la, lb) = (a.numel() / n, b.numel() / n);
    let mut out = Vec::with_capacity(a.numel() + b.numel());
    for s in 0..n {
        out.extend_from_slice(&a.data()[s * la..(s + 1) * la]);
        out.extend_from_slice(&b.data()[s * lb..(s + 1) * lb]);
    }
    let mut shape = sa.to_vec();
    shape[1] += sb[1];
    Tensor::new(shape, out)
}

pub fn split_channels(grad: &Tensor, first: usize) -> Result<(Tensor, Tensor)> {
    let s = grad.shape();
    let (n, c) = (s[0], s[1]);
    let plane: usize = s[2..].iter().product();
    let mut a = Vec::with_capacity(n * first * plane);
    let mut b = Vec::with_capacity(n * (c - first) * plane);
    for chunk in grad.data().chunks(c * plane) {
        a.extend_from_slice(&chunk[..first * plane]);
        b.extend_from_slice(&chunk[first * plane..]);
    }
    let mut sa = s.to_vec();
    sa[1] = first;
    let mut sb = s.to_vec();
    sb[1] = c - first;
    Ok((Tensor::new(sa, a)?, Tensor::new(sb, b)?))
}

/// Folds depth into channels: `[N, C, d, H, W] → [N, d·C, 1, H, W]`, with
/// output channel `depth_index * C + channel_index`.
pub fn channel_fold(input: &Tensor) -> Result<Tensor> {
    let [n, c, d, h, w] = input.dims5()?;
    let plane = h * w;
    let x = input.data();
    let mut out = vec![0.0; x.len()];
    for s in 0..n {
        let base = s * c * d * plane;
        for ch in 0..c {
            for z in 0..d {
                let src = base + (ch * d + z) * plane;
                let dst = base + (z * c + ch) * plane;
                out[dst..dst + plane].copy_from_slice(&x[src..src + plane]);
            }
        }
    }
    Tensor::new(vec![n, d * c, 1, h, w], out)
}

/// Inverse of [`channel_fold`].
pub fn channel_unfold(input: &Tensor, channels: usize) -> Result<Tensor> {
    let [n, dc, one, h, w] = input.dims5()?;
    if one != 1 || channels == 0 || dc % channels != 0 {
        return Err(Error::Shape(format!(
            "cannot unfold {:?} into {} channels",
            input.shape(),
            channels
        )));
    }
    let (c, d, plane) = (channels, dc / channels, h * w);
    let x = input.data();
    let mut out = vec![0.0; x.len()];
    for s in 0..n {
        let base = s * c * d * plane;
        for ch in 0..c {
            for z in 0..d {
                let dst = base + (ch * d + z) * plane;
                let src = base + (z * c + ch) * plane;
                out[dst..dst + plane].copy_from_slice(&x[src..src + plane]);
            }
        }
    }
    Tensor::new(vec![n, c, d, h, w], out)
}

/// Lower clip applied to probabilities inside the cross-entropy log.
pub const PROB_FLOOR: f64 = 1e-12;

fn class_layout(probs: &Tensor, target: &Tensor) -> Result<(usize, usize, usize)> {
    if probs.shape() != target.shape() {
        return Err(Error::Shape(format!(
            "prediction {:?} and target {:?} differ",
            probs.shape(),
            target.shape()
        )));
    }
    let s = probs.shape();
    if s.len() < 2 {
        return Err(Error::Shape(format!("need [N, K, ...], got {s:?}")));
    }
    Ok((s[0], s[1], s[2..].iter().product()))
}

/// Per-class `(Σ u·v, Σ u + Σ v)` over batch and positions.
fn dice_terms(probs: &Tensor, target: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
    let (n, k, plane) = class_layout(probs, target)?;
    let (u, v) = (probs.data(), target.data());
    let mut inter = vec![0.0; k];
    let mut total = vec![0.0; k];
    for s in 0..n {
        for c in 0..k {
            let off = (s * k + c) * plane;
            for i in off..off + plane {
                inter[c] += u[i] * v[i];
                total[c] += u[i] + v[i];
            }
        }
    }
    Ok((inter, total))
}

/// Class-averaged soft Dice loss `mean_c(-2 Σ u v / (Σ u + Σ v + ε))`.
pub fn soft_dice_forward(probs: &Tensor, target: &Tensor, eps: f64) -> Result<f64> {
    let (inter, total) = dice_terms(probs, target)?;
    let k = inter.len() as f64;
    Ok(inter
        .iter()
        .zip(&total)
        .map(|(i, t)| -2.0 * i / (t + eps))
        .sum::<f64>()
        / k)
}

pub fn soft_dice_backward(probs: &Tensor, target: &Tensor, eps: f64, upstream: f64) -> Result<Tensor> {
    let (n, k, plane) = class_layout(probs, target)?;
    let (inter, total) = dice_terms(probs, target)?;
    let v = target.data();
    let mut du = vec![0.0; v.len()];
    for s in 0..n {
        for c in 0..k {
            let den = total[c] + eps;
            let a = -2.0 / den;
            let b = 2.0 * inter[c] / (den * den);
            let off = (s * k + c) * plane;
            for i in off..off + plane {
                du[i] = upstream * (a * v[i] + b) / k as f64;
            }
        }
    }
    Tensor::new(probs.shape().to_vec(), du)
}

/// Mean over positions of `-Σ_c v_c log(max(u_c, floor))`.
pub fn cross_entropy_forward(probs: &Tensor, target: &Tensor) -> Result<f64> {
    let (n, _, plane) = class_layout(probs, target)?;
    let acc: f64 = probs
        .data()
        .iter()
        .zip(target.data())
        .filter(|(_, &v)| v != 0.0)
        .map(|(&u, &v)| -v * u.max(PROB_FLOOR).ln())
        .sum();
    // adding zero turns a negative zero into a positive one
    Ok(acc / (n * plane) as f64 + 0.0)
}

pub fn cross_entropy_backward(probs: &Tensor, target: &Tensor, upstream: f64) -> Result<Tensor> {
    let (n, _, plane) = class_layout(probs, target)?;
    let m = (n * plane) as f64;
    let du = probs
        .data()
        .iter()
        .zip(target.data())
        .map(|(&u, &v)| {
            if u > PROB_FLOOR {
                -upstream * v / (u * m)
            } else {
                0.0
            }
        })
        .collect();
    Tensor::new(probs.shape().to_vec(), du)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t5(shape: [usize; 5], data: Vec<f64>) -> Tensor {
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn zero_kernel_gives_zero_output() {
        let x = t5([1, 1, 1, 8, 8], (0..64).map(|i| i as f64).collect());
        let k = Tensor::zeros(&[1, 1, 1, 3, 3]);
        let b = Tensor::zeros(&[1]);
        let y = conv_forward(&x, &k, &b, &ConvGeometry::planar(3)).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 8, 8]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn centered_delta_kernel_is_identity() {
        let x = t5([1, 1, 1, 4, 4], (0..16).map(|i| (i as f64).sin()).collect());
        let mut k = Tensor::zeros(&[1, 1, 1, 3, 3]);
        k.data_mut()[4] = 1.0;
        let y = conv_forward(&x, &k, &Tensor::zeros(&[1]), &ConvGeometry::planar(3)).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn unpadded_depth_shrinks_by_two() {
        let x = Tensor::full(&[1, 4, 3, 8, 8], 1.0);
        let k = Tensor::full(&[5, 4, 3, 3, 3], 0.1);
        let geom = ConvGeometry::volumetric(3, [false, true, true]);
        let y = conv_forward(&x, &k, &Tensor::zeros(&[5]), &geom).unwrap();
        assert_eq!(y.shape(), &[1, 5, 1, 8, 8]);
        // centre pixel sees all 27·4 taps
        let centre = y.data()[4 * 8 + 4];
        assert!((centre - 10.8).abs() < 1e-12);
    }

    #[test]
    fn conv_errors() {
        let x = Tensor::full(&[1, 2, 2, 8, 8], 1.0);
        let geom = ConvGeometry::volumetric(3, [false, true, true]);
        let k = Tensor::zeros(&[1, 2, 3, 3, 3]);
        assert!(matches!(
            conv_forward(&x, &k, &Tensor::zeros(&[1]), &geom),
            Err(Error::Extent(_))
        ));
        let k3 = Tensor::zeros(&[1, 3, 3, 3, 3]);
        assert!(matches!(
            conv_forward(&x, &k3, &Tensor::zeros(&[1]), &geom),
            Err(Error::ChannelMismatch { .. })
        ));
    }

    #[test]
    fn conv_matches_direct_sum() {
        // direct (non-GEMM) evaluation of a padded 3×3 convolution
        let (cin, cout, h, w) = (2, 3, 5, 4);
        let x: Vec<f64> = (0..cin * h * w).map(|i| (i as f64 * 0.7).sin()).collect();
        let k: Vec<f64> = (0..cout * cin * 9).map(|i| (i as f64 * 0.3).cos()).collect();
        let bias = vec![0.1, -0.2, 0.3];
        let y = conv_forward(
            &t5([1, cin, 1, h, w], x.clone()),
            &Tensor::new(vec![cout, cin, 1, 3, 3], k.clone()).unwrap(),
            &Tensor::new(vec![cout], bias.clone()).unwrap(),
            &ConvGeometry::planar(3),
        )
        .unwrap();
        for co in 0..cout {
            for i in 0..h {
                for j in 0..w {
                    let mut acc = bias[co];
                    for ci in 0..cin {
                        for a in 0..3 {
                            for b in 0..3 {
                                let (yy, xx) = (i as isize + a as isize - 1, j as isize + b as isize - 1);
                                if yy >= 0 && yy < h as isize && xx >= 0 && xx < w as isize {
                                    acc += k[((co * cin + ci) * 3 + a) * 3 + b]
                                        * x[(ci * h + yy as usize) * w + xx as usize];
                                }
                            }
                        }
                    }
                    assert!((y.data()[(co * h + i) * w + j] - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn transposed_conv_shapes_and_scatter() {
        let x = Tensor::full(&[1, 8, 1, 4, 4], 0.0);
        let k = Tensor::full(&[8, 3, 1, 2, 2], 1.0);
        let y = transposed_conv_forward(&x, &k, &Tensor::zeros(&[3]), &TransposedGeometry::planar(2)).unwrap();
        assert_eq!(y.shape(), &[1, 3, 1, 8, 8]);
        assert!(y.data().iter().all(|&v| v == 0.0));

        let one = Tensor::full(&[1, 1, 1, 1, 1], 1.0);
        let k = Tensor::full(&[1, 1, 1, 2, 2], 1.0);
        let y = transposed_conv_forward(&one, &k, &Tensor::zeros(&[1]), &TransposedGeometry::planar(2)).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 2, 2]);
        assert_eq!(y.data(), &[1.0; 4]);
    }

    #[test]
    fn transposed_kernel3_crops_to_double_extent() {
        // taps landing at index 2n are dropped
        let one = Tensor::full(&[1, 1, 1, 1, 1], 1.0);
        let k = Tensor::new(vec![1, 1, 1, 3, 3], (1..=9).map(f64::from).collect()).unwrap();
        let y = transposed_conv_forward(&one, &k, &Tensor::zeros(&[1]), &TransposedGeometry::planar(3)).unwrap();
        assert_eq!(y.data(), &[1.0, 2.0, 4.0, 5.0]);
    }

    #[test]
    fn maxpool_windows_and_ties() {
        let x = t5(
            [1, 1, 1, 4, 4],
            vec![
                1.0, 2.0, 5.0, 3.0, //
                4.0, 0.0, 1.0, 1.0, //
                9.0, 8.0, 0.0, 7.0, //
                6.0, 7.0, 6.0, 2.0,
            ],
        );
        let (y, idx) = maxpool_forward(&x, [1, 2, 2]).unwrap();
        assert_eq!(y.data(), &[4.0, 5.0, 9.0, 7.0]);
        assert_eq!(idx.positions, vec![4, 2, 8, 11]);

        let c = Tensor::full(&[1, 1, 1, 4, 4], 3.0);
        let (y, idx) = maxpool_forward(&c, [1, 2, 2]).unwrap();
        assert!(y.data().iter().all(|&v| v == 3.0));
        assert_eq!(idx.positions, vec![0, 2, 8, 10]);

        let up = unpool_forward(&y, &idx).unwrap();
        let nonzero: Vec<usize> = up.data().iter().enumerate().filter(|(_, &v)| v != 0.0).map(|(i, _)| i).collect();
        assert_eq!(nonzero, idx.positions);
    }

    #[test]
    fn maxpool_rejects_odd_extent() {
        let x = Tensor::zeros(&[1, 1, 1, 5, 4]);
        assert!(matches!(maxpool_forward(&x, [1, 2, 2]), Err(Error::Extent(_))));
    }

    #[test]
    fn softmax_examples() {
        let x = t5([1, 3, 1, 1, 1], vec![0.0, 0.0, 0.0]);
        let y = softmax_forward(&x).unwrap();
        for v in y.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let y = softmax_forward(&t5([1, 2, 1, 1, 1], vec![1000.0, 0.0])).unwrap();
        assert!((y.data()[0] - 1.0).abs() < 1e-15 && y.data()[1] < 1e-300 + f64::EPSILON);
        let y = softmax_forward(&t5([1, 2, 1, 1, 1], vec![1.0, 2.0])).unwrap();
        assert!((y.data()[0] - 0.26894).abs() < 1e-5);
        assert!((y.data()[1] - 0.73106).abs() < 1e-5);
    }

    #[test]
    fn batch_norm_normalizes_and_applies_affine() {
        let x = t5([2, 2, 1, 2, 3], (0..24).map(|i| ((i * 7) % 11) as f64).collect());
        let ones = Tensor::full(&[2], 1.0);
        let zeros = Tensor::zeros(&[2]);
        let (y, _) = batch_norm_train(&x, &ones, &zeros, 1e-12).unwrap();
        for c in 0..2 {
            let vals: Vec<f64> = (0..2)
                .flat_map(|s| y.data()[(s * 2 + c) * 6..(s * 2 + c + 1) * 6].to_vec())
                .collect();
            let m = vals.iter().sum::<f64>() / 12.0;
            let v = vals.iter().map(|a| (a - m).powi(2)).sum::<f64>() / 12.0;
            assert!(m.abs() < 1e-6 && (v - 1.0).abs() < 1e-6);
        }
        let (y, _) = batch_norm_train(&x, &Tensor::full(&[2], 2.0), &Tensor::full(&[2], 3.0), 1e-12).unwrap();
        let m = y.sum() / 24.0;
        let sd = (y.data().iter().map(|a| (a - m).powi(2)).sum::<f64>() / 24.0).sqrt();
        assert!((m - 3.0).abs() < 1e-6 && (sd - 2.0).abs() < 1e-6);

        let y = batch_norm_infer(&x, &ones, &zeros, &[0.0, 0.0], &[1.0, 1.0], 0.0).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn fold_roundtrip_and_order() {
        let x = t5([1, 2, 3, 1, 1], vec![0.0, 1.0, 2.0, 10.0, 11.0, 12.0]);
        let f = channel_fold(&x).unwrap();
        assert_eq!(f.shape(), &[1, 6, 1, 1, 1]);
        // channel index = depth * C + channel
        assert_eq!(f.data(), &[0.0, 10.0, 1.0, 11.0, 2.0, 12.0]);
        assert_eq!(channel_unfold(&f, 2).unwrap(), x);
    }
}
