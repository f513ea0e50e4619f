//! Layer kernels: the forward/backward math behind every tape operation.
//!
//! All kernels are pure functions on `[C, D, H, W]` tensors (kernels are
//! `[C_out, C_in, kd, kh, kw]`). Backward passes accumulate in a fixed
//! order so repeated runs are bit-identical.

use crate::error::{EmmaError, Result};
use crate::scalar::Scalar;
use crate::tensor::{offset4, Tensor};
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Valid,
    ZeroSame,
}

/// `out[i] += w * a[i]` over equal-length slices. The elementwise form keeps
/// the loop free of reductions so it vectorizes.
#[inline]
fn axpy<T: Scalar>(out: &mut [T], a: &[T], w: T) {
    debug_assert_eq!(out.len(), a.len());
    for (o, &v) in out.iter_mut().zip(a.iter()) {
        *o += w * v;
    }
}

/// Dot product with eight independent accumulators; the fixed lane order
/// keeps results deterministic while letting the lanes vectorize.
#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut lanes = [T::ZERO; 8];
    let chunks = a.len() / 8;
    for i in 0..chunks {
        let off = i * 8;
        for l in 0..8 {
            lanes[l] += a[off + l] * b[off + l];
        }
    }
    let mut tail = T::ZERO;
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    let mut acc = tail;
    for l in 0..8 {
        acc += lanes[l];
    }
    acc
}

fn conv_out_extent(input: usize, kernel: usize, stride: usize) -> Result<usize> {
    if kernel > input {
        return Err(EmmaError::Dimension(format!(
            "kernel extent {kernel} exceeds (padded) input extent {input}"
        )));
    }
    Ok((input - kernel) / stride + 1)
}

/// Zero-pads the spatial extents of a `[C, D, H, W]` tensor by `pad` voxels
/// on each side per axis.
pub fn pad_spatial<T: Scalar>(input: &Tensor<T>, pad: [usize; 3]) -> Result<Tensor<T>> {
    let [d, h, w] = input.spatial()?;
    let c = input.channels();
    let (pd, ph, pw) = (d + 2 * pad[0], h + 2 * pad[1], w + 2 * pad[2]);
    let mut out = Tensor::zeros(&[c, pd, ph, pw]);
    let oshape = [c, pd, ph, pw];
    let ishape = [c, d, h, w];
    let (src, dst) = (input.data(), out.data_mut());
    for ci in 0..c {
        for z in 0..d {
            for y in 0..h {
                let s = offset4(&ishape, ci, z, y, 0);
                let t = offset4(&oshape, ci, z + pad[0], y + pad[1], pad[2]);
                dst[t..t + w].copy_from_slice(&src[s..s + w]);
            }
        }
    }
    Ok(out)
}

/// Removes `pad` voxels from each side per axis (inverse of [`pad_spatial`]).
pub fn unpad_spatial<T: Scalar>(input: &Tensor<T>, pad: [usize; 3]) -> Result<Tensor<T>> {
    let [d, h, w] = input.spatial()?;
    crop_spatial(input, pad, [d - 2 * pad[0], h - 2 * pad[1], w - 2 * pad[2]])
}

/// Copies the spatial box starting at `offset` with the given extents.
pub fn crop_spatial<T: Scalar>(
    input: &Tensor<T>,
    offset: [usize; 3],
    extents: [usize; 3],
) -> Result<Tensor<T>> {
    let [d, h, w] = input.spatial()?;
    let c = input.channels();
    for a in 0..3 {
        if offset[a] + extents[a] > [d, h, w][a] {
            return Err(EmmaError::Dimension(format!(
                "crop box {offset:?}+{extents:?} exceeds input extents {:?}",
                [d, h, w]
            )));
        }
    }
    let mut out = Tensor::zeros(&[c, extents[0], extents[1], extents[2]]);
    let ishape = [c, d, h, w];
    let oshape = [c, extents[0], extents[1], extents[2]];
    let (src, dst) = (input.data(), out.data_mut());
    for ci in 0..c {
        for z in 0..extents[0] {
            for y in 0..extents[1] {
                let s = offset4(&ishape, ci, z + offset[0], y + offset[1], offset[2]);
                let t = offset4(&oshape, ci, z, y, 0);
                dst[t..t + extents[2]].copy_from_slice(&src[s..s + extents[2]]);
            }
        }
    }
    Ok(out)
}

/// Scatters `grad` back into a zero tensor of the pre-crop shape.
pub fn crop_spatial_backward<T: Scalar>(
    grad: &Tensor<T>,
    offset: [usize; 3],
    input_shape: &[usize],
) -> Tensor<T> {
    let mut out = Tensor::zeros(input_shape);
    let [gd, gh, gw] = [grad.shape()[1], grad.shape()[2], grad.shape()[3]];
    let gshape = grad.shape().to_vec();
    let dst = out.data_mut();
    for ci in 0..gshape[0] {
        for z in 0..gd {
            for y in 0..gh {
                let s = offset4(&gshape, ci, z, y, 0);
                let t = offset4(input_shape, ci, z + offset[0], y + offset[1], offset[2]);
                dst[t..t + gw].copy_from_slice(&grad.data()[s..s + gw]);
            }
        }
    }
    out
}

fn same_padding(kernel: &[usize; 3]) -> Result<[usize; 3]> {
    for &k in kernel {
        if k % 2 == 0 {
            return Err(EmmaError::Dimension(format!(
                "zero_same padding requires odd kernel extents, got {kernel:?}"
            )));
        }
    }
    Ok([(kernel[0] - 1) / 2, (kernel[1] - 1) / 2, (kernel[2] - 1) / 2])
}

pub fn conv3d_output_shape(
    input: &[usize],
    kernel: &[usize],
    stride: [usize; 3],
    padding: Padding,
) -> Result<Vec<usize>> {
    if kernel.len() != 5 || input.len() != 4 {
        return Err(EmmaError::Dimension(format!(
            "conv3d expects input [C,D,H,W] and kernel [Co,Ci,kd,kh,kw], got {input:?} / {kernel:?}"
        )));
    }
    if input[0] != kernel[1] {
        return Err(EmmaError::Dimension(format!(
            "conv3d channel mismatch: input has {} channels, kernel expects {}",
            input[0], kernel[1]
        )));
    }
    if stride.iter().any(|&s| s == 0) {
        return Err(EmmaError::Dimension("conv3d stride components must be >= 1".into()));
    }
    let pad = match padding {
        Padding::Valid => [0, 0, 0],
        Padding::ZeroSame => same_padding(&[kernel[2], kernel[3], kernel[4]])?,
    };
    let mut out = vec![kernel[0]];
    for a in 0..3 {
        out.push(conv_out_extent(input[1 + a] + 2 * pad[a], kernel[2 + a], stride[a])?);
    }
    Ok(out)
}

/// 3D cross-correlation of a `[C_in, D, H, W]` input with a
/// `[C_out, C_in, kd, kh, kw]` kernel.
pub fn conv3d_forward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: [usize; 3],
    padding: Padding,
) -> Result<Tensor<T>> {
    let out_shape = conv3d_output_shape(input.shape(), kernel.shape(), stride, padding)?;
    let padded;
    let input = match padding {
        Padding::Valid => input,
        Padding::ZeroSame => {
            let k = kernel.shape();
            padded = pad_spatial(input, same_padding(&[k[2], k[3], k[4]])?)?;
            &padded
        }
    };

    let ks = kernel.shape().to_vec();
    let (c_in, kd, kh, kw) = (ks[1], ks[2], ks[3], ks[4]);
    let ishape = input.shape().to_vec();
    let (od, oh, ow) = (out_shape[1], out_shape[2], out_shape[3]);
    let mut out = Tensor::zeros(&out_shape);
    let chunk = od * oh * ow;
    let src = input.data();
    let wdat = kernel.data();

    out.data_mut()
        .par_chunks_mut(chunk)
        .enumerate()
        .for_each(|(co, out_c)| {
            if stride == [1, 1, 1] {
                for ci in 0..c_in {
                    for kz in 0..kd {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let w = wdat[(((co * c_in + ci) * kd + kz) * kh + ky) * kw + kx];
                                for z in 0..od {
                                    for y in 0..oh {
                                        let s = offset4(&ishape, ci, z + kz, y + ky, kx);
                                        let t = (z * oh + y) * ow;
                                        axpy(&mut out_c[t..t + ow], &src[s..s + ow], w);
                                    }
                                }
                            }
                        }
                    }
                }
            } else {
                for z in 0..od {
                    for y in 0..oh {
                        for x in 0..ow {
                            let mut acc = T::ZERO;
                            for ci in 0..c_in {
                                for kz in 0..kd {
                                    for ky in 0..kh {
                                        let s = offset4(
                                            &ishape,
                                            ci,
                                            z * stride[0] + kz,
                                            y * stride[1] + ky,
                                            x * stride[2],
                                        );
                                        let wo = (((co * c_in + ci) * kd + kz) * kh + ky) * kw;
                                        for kx in 0..kw {
                                            acc += wdat[wo + kx] * src[s + kx];
                                        }
                                    }
                                }
                            }
                            out_c[(z * oh + y) * ow + x] = acc;
                        }
                    }
                }
            }
        });
    Ok(out)
}

/// Gradient of [`conv3d_forward`] with respect to its input.
pub fn conv3d_backward_input<T: Scalar>(
    grad_out: &Tensor<T>,
    kernel: &Tensor<T>,
    input_shape: &[usize],
    stride: [usize; 3],
    padding: Padding,
) -> Result<Tensor<T>> {
    let ks = kernel.shape().to_vec();
    let (c_out, c_in, kd, kh, kw) = (ks[0], ks[1], ks[2], ks[3], ks[4]);
    let pad = match padding {
        Padding::Valid => [0, 0, 0],
        Padding::ZeroSame => same_padding(&[kd, kh, kw])?,
    };
    let padded_shape = [
        input_shape[0],
        input_shape[1] + 2 * pad[0],
        input_shape[2] + 2 * pad[1],
        input_shape[3] + 2 * pad[2],
    ];
    let gshape = grad_out.shape().to_vec();
    let (od, oh, ow) = (gshape[1], gshape[2], gshape[3]);
    let mut gin = Tensor::zeros(&padded_shape);
    let chunk = padded_shape[1] * padded_shape[2] * padded_shape[3];
    let gdat = grad_out.data();
    let wdat = kernel.data();

    gin.data_mut()
        .par_chunks_mut(chunk)
        .enumerate()
        .for_each(|(ci, gin_c)| {
            let cshape = [1usize, padded_shape[1], padded_shape[2], padded_shape[3]];
            for co in 0..c_out {
                for kz in 0..kd {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let w = wdat[(((co * c_in + ci) * kd + kz) * kh + ky) * kw + kx];
                            if stride == [1, 1, 1] {
                                for z in 0..od {
                                    for y in 0..oh {
                                        let t = offset4(&cshape, 0, z + kz, y + ky, kx);
                                        let s = offset4(&gshape, co, z, y, 0);
                                        axpy(&mut gin_c[t..t + ow], &gdat[s..s + ow], w);
                                    }
                                }
                            } else {
                                for z in 0..od {
                                    for y in 0..oh {
                                        for x in 0..ow {
                                            let t = offset4(
                                                &cshape,
                                                0,
                                                z * stride[0] + kz,
                                                y * stride[1] + ky,
                                                x * stride[2] + kx,
                                            );
                                            gin_c[t] += w * gdat[offset4(&gshape, co, z, y, x)];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });

    if pad == [0, 0, 0] {
        Ok(gin)
    } else {
        unpad_spatial(&gin, pad)
    }
}

/// Gradient of [`conv3d_forward`] with respect to the kernel.
pub fn conv3d_backward_kernel<T: Scalar>(
    grad_out: &Tensor<T>,
    input: &Tensor<T>,
    kernel_shape: &[usize],
    stride: [usize; 3],
    padding: Padding,
) -> Result<Tensor<T>> {
    let (kd, kh, kw) = (kernel_shape[2], kernel_shape[3], kernel_shape[4]);
    let padded;
    let input = match padding {
        Padding::Valid => input,
        Padding::ZeroSame => {
            padded = pad_spatial(input, same_padding(&[kd, kh, kw])?)?;
            &padded
        }
    };
    let c_in = kernel_shape[1];
    let ishape = input.shape().to_vec();
    let gshape = grad_out.shape().to_vec();
    let (od, oh, ow) = (gshape[1], gshape[2], gshape[3]);
    let mut gw = Tensor::zeros(kernel_shape);
    let chunk = c_in * kd * kh * kw;
    let src = input.data();
    let gdat = grad_out.data();

    gw.data_mut()
        .par_chunks_mut(chunk)
        .enumerate()
        .for_each(|(co, gw_c)| {
            for ci in 0..c_in {
                for kz in 0..kd {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let mut acc = T::ZERO;
                            if stride == [1, 1, 1] {
                                for z in 0..od {
                                    for y in 0..oh {
                                        let s = offset4(&ishape, ci, z + kz, y + ky, kx);
                                        let g = offset4(&gshape, co, z, y, 0);
                                        acc += dot(&gdat[g..g + ow], &src[s..s + ow]);
                                    }
                                }
                            } else {
                                for z in 0..od {
                                    for y in 0..oh {
                                        for x in 0..ow {
                                            let s = offset4(
                                                &ishape,
                                                ci,
                                                z * stride[0] + kz,
                                                y * stride[1] + ky,
                                                x * stride[2] + kx,
                                            );
                                            acc += gdat[offset4(&gshape, co, z, y, x)] * src[s];
                                        }
                                    }
                                }
                            }
                            gw_c[((ci * kd + kz) * kh + ky) * kw + kx] = acc;
                        }
                    }
                }
            }
        });
    Ok(gw)
}

/// `y[c, ...] = x[c, ...] + bias[c]`.
pub fn add_channel_bias<T: Scalar>(input: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    if bias.rank() != 1 || bias.numel() != input.channels() {
        return Err(EmmaError::Dimension(format!(
            "bias length {} does not match channel count {}",
            bias.numel(),
            input.channels()
        )));
    }
    let vol = input.channel_volume();
    let mut out = input.clone();
    out.requires_grad = false;
    for (c, chunk) in out.data_mut().chunks_mut(vol).enumerate() {
        let b = bias.data()[c];
        for v in chunk.iter_mut() {
            *v += b;
        }
    }
    Ok(out)
}

pub fn add_channel_bias_backward<T: Scalar>(grad_out: &Tensor<T>) -> Tensor<T> {
    let c = grad_out.channels();
    let vol = grad_out.channel_volume();
    let mut gb = Tensor::zeros(&[c]);
    for (ci, chunk) in grad_out.data().chunks(vol).enumerate() {
        let mut acc = 0.0f64;
        for &g in chunk {
            acc += g.to_f64();
        }
        gb.data_mut()[ci] = T::from_f64(acc);
    }
    gb
}

pub fn max_pool3d_output_shape(
    input: &[usize],
    window: [usize; 3],
    stride: [usize; 3],
) -> Result<Vec<usize>> {
    if input.len() != 4 {
        return Err(EmmaError::Dimension("max_pool3d expects a [C,D,H,W] tensor".into()));
    }
    if stride.iter().any(|&s| s == 0) || window.iter().any(|&w| w == 0) {
        return Err(EmmaError::Dimension("pool window and stride must be >= 1".into()));
    }
    let mut out = vec![input[0]];
    for a in 0..3 {
        if window[a] > input[1 + a] {
            return Err(EmmaError::Dimension(format!(
                "pool window {window:?} larger than input extents {:?}",
                &input[1..]
            )));
        }
        out.push((input[1 + a] - window[a]) / stride[a] + 1);
    }
    Ok(out)
}

/// Max pooling; also returns the flat input offset of each window maximum
/// (first occurrence in scan order on ties) for the backward pass.
pub fn max_pool3d_forward<T: Scalar>(
    input: &Tensor<T>,
    window: [usize; 3],
    stride: [usize; 3],
) -> Result<(Tensor<T>, Vec<u32>)> {
    let out_shape = max_pool3d_output_shape(input.shape(), window, stride)?;
    let ishape = input.shape().to_vec();
    let (od, oh, ow) = (out_shape[1], out_shape[2], out_shape[3]);
    let mut out = Tensor::zeros(&out_shape);
    let mut argmax = vec![0u32; out.numel()];
    let src = input.data();
    let dst = out.data_mut();
    let mut t = 0;
    for c in 0..ishape[0] {
        for z in 0..od {
            for y in 0..oh {
                for x in 0..ow {
                    let mut best = T::from_f64(f64::NEG_INFINITY);
                    let mut best_at = 0usize;
                    for wz in 0..window[0] {
                        for wy in 0..window[1] {
                            let s = offset4(
                                &ishape,
                                c,
                                z * stride[0] + wz,
                                y * stride[1] + wy,
                                x * stride[2],
                            );
                            for wx in 0..window[2] {
                                let v = src[s + wx];
                                if v > best {
                                    best = v;
                                    best_at = s + wx;
                                }
                            }
                        }
                    }
                    dst[t] = best;
                    argmax[t] = best_at as u32;
                    t += 1;
                }
            }
        }
    }
    Ok((out, argmax))
}

pub fn max_pool3d_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    argmax: &[u32],
    input_shape: &[usize],
) -> Tensor<T> {
    let mut gin = Tensor::zeros(input_shape);
    let dst = gin.data_mut();
    for (g, &at) in grad_out.data().iter().zip(argmax.iter()) {
        dst[at as usize] += *g;
    }
    gin
}

/// Block-average downsampling by an integer factor per spatial axis.
pub fn downsample_average<T: Scalar>(input: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let [d, h, w] = input.spatial()?;
    if factor == 0 {
        return Err(EmmaError::Dimension("downsample factor must be >= 1".into()));
    }
    if d % factor != 0 || h % factor != 0 || w % factor != 0 {
        return Err(EmmaError::Dimension(format!(
            "spatial extents {:?} not divisible by downsample factor {factor}",
            [d, h, w]
        )));
    }
    let c = input.channels();
    let (od, oh, ow) = (d / factor, h / factor, w / factor);
    let mut out = Tensor::zeros(&[c, od, oh, ow]);
    let ishape = [c, d, h, w];
    let oshape = [c, od, oh, ow];
    let inv = T::ONE / T::from_f64((factor * factor * factor) as f64);
    let src = input.data();
    let dst = out.data_mut();
    for ci in 0..c {
        for z in 0..od {
            for y in 0..oh {
                for x in 0..ow {
                    let mut acc = T::ZERO;
                    for bz in 0..factor {
                        for by in 0..factor {
                            let s = offset4(
                                &ishape,
                                ci,
                                z * factor + bz,
                                y * factor + by,
                                x * factor,
                            );
                            for bx in 0..factor {
                                acc += src[s + bx];
                            }
                        }
                    }
                    dst[offset4(&oshape, ci, z, y, x)] = acc * inv;
                }
            }
        }
    }
    Ok(out)
}

pub fn downsample_average_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    factor: usize,
    input_shape: &[usize],
) -> Tensor<T> {
    let mut gin = Tensor::zeros(input_shape);
    let gshape = grad_out.shape().to_vec();
    let inv = T::ONE / T::from_f64((factor * factor * factor) as f64);
    let dst = gin.data_mut();
    for ci in 0..gshape[0] {
        for z in 0..gshape[1] {
            for y in 0..gshape[2] {
                for x in 0..gshape[3] {
                    let g = grad_out.data()[offset4(&gshape, ci, z, y, x)] * inv;
                    for bz in 0..factor {
                        for by in 0..factor {
                            let t = offset4(
                                input_shape,
                                ci,
                                z * factor + bz,
                                y * factor + by,
                                x * factor,
                            );
                            for bx in 0..factor {
                                dst[t + bx] += g;
                            }
                        }
                    }
                }
            }
        }
    }
    gin
}

/// Nearest-neighbour (repetition) upsampling by an integer factor.
pub fn upsample_repeat<T: Scalar>(input: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    if factor == 0 {
        return Err(EmmaError::Dimension("upsample factor must be >= 1".into()));
    }
    let [d, h, w] = input.spatial()?;
    let c = input.channels();
    let (od, oh, ow) = (d * factor, h * factor, w * factor);
    let mut out = Tensor::zeros(&[c, od, oh, ow]);
    let ishape = [c, d, h, w];
    let oshape = [c, od, oh, ow];
    let src = input.data();
    let dst = out.data_mut();
    for ci in 0..c {
        for z in 0..od {
            for y in 0..oh {
                for x in 0..ow {
                    dst[offset4(&oshape, ci, z, y, x)] =
                        src[offset4(&ishape, ci, z / factor, y / factor, x / factor)];
                }
            }
        }
    }
    Ok(out)
}

/// Backward of repetition upsampling: sums each factor-cubed block.
pub fn upsample_repeat_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    factor: usize,
    input_shape: &[usize],
) -> Tensor<T> {
    let mut gin = Tensor::zeros(input_shape);
    let gshape = grad_out.shape().to_vec();
    let dst = gin.data_mut();
    for ci in 0..gshape[0] {
        for z in 0..gshape[1] {
            for y in 0..gshape[2] {
                for x in 0..gshape[3] {
                    dst[offset4(input_shape, ci, z / factor, y / factor, x / factor)] +=
                        grad_out.data()[offset4(&gshape, ci, z, y, x)];
                }
            }
        }
    }
    gin
}

/// Trilinear interpolation weights for one axis: source index pair and blend.
#[inline]
fn lerp_coords(dst: usize, factor: usize, in_extent: usize) -> (usize, usize, f64) {
    let src = (dst as f64 + 0.5) / factor as f64 - 0.5;
    let src = src.max(0.0).min((in_extent - 1) as f64);
    let lo = src.floor() as usize;
    let hi = (lo + 1).min(in_extent - 1);
    (lo, hi, src - lo as f64)
}

pub fn upsample_trilinear<T: Scalar>(input: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    if factor == 0 {
        return Err(EmmaError::Dimension("upsample factor must be >= 1".into()));
    }
    let [d, h, w] = input.spatial()?;
    let c = input.channels();
    let (od, oh, ow) = (d * factor, h * factor, w * factor);
    let mut out = Tensor::zeros(&[c, od, oh, ow]);
    let ishape = [c, d, h, w];
    let src = input.data();
    let dst = out.data_mut();
    let mut t = 0;
    for ci in 0..c {
        for z in 0..od {
            let (z0, z1, fz) = lerp_coords(z, factor, d);
            for y in 0..oh {
                let (y0, y1, fy) = lerp_coords(y, factor, h);
                for x in 0..ow {
                    let (x0, x1, fx) = lerp_coords(x, factor, w);
                    let mut acc = 0.0f64;
                    for (zz, wz) in [(z0, 1.0 - fz), (z1, fz)] {
                        for (yy, wy) in [(y0, 1.0 - fy), (y1, fy)] {
                            for (xx, wx) in [(x0, 1.0 - fx), (x1, fx)] {
                                acc += wz * wy * wx
                                    * src[offset4(&ishape, ci, zz, yy, xx)].to_f64();
                            }
                        }
                    }
                    dst[t] = T::from_f64(acc);
                    t += 1;
                }
            }
        }
    }
    Ok(out)
}

pub fn upsample_trilinear_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    factor: usize,
    input_shape: &[usize],
) -> Tensor<T> {
    let mut gin = Tensor::zeros(input_shape);
    let gshape = grad_out.shape().to_vec();
    let (d, h, w) = (input_shape[1], input_shape[2], input_shape[3]);
    let dst = gin.data_mut();
    let mut t = 0;
    for ci in 0..gshape[0] {
        for z in 0..gshape[1] {
            let (z0, z1, fz) = lerp_coords(z, factor, d);
            for y in 0..gshape[2] {
                let (y0, y1, fy) = lerp_coords(y, factor, h);
                for x in 0..gshape[3] {
                    let (x0, x1, fx) = lerp_coords(x, factor, w);
                    let g = grad_out.data()[t].to_f64();
                    t += 1;
                    for (zz, wz) in [(z0, 1.0 - fz), (z1, fz)] {
                        for (yy, wy) in [(y0, 1.0 - fy), (y1, fy)] {
                            for (xx, wx) in [(x0, 1.0 - fx), (x1, fx)] {
                                let at = offset4(input_shape, ci, zz, yy, xx);
                                dst[at] += T::from_f64(wz * wy * wx * g);
                            }
                        }
                    }
                }
            }
        }
    }
    gin
}

/// Per-channel statistics saved by the batch-norm forward pass.
pub struct BatchNormSaved<T: Scalar> {
    pub xhat: Vec<T>,
    pub invstd: Vec<T>,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

fn require_spatial<T: Scalar>(input: &Tensor<T>, what: &str) -> Result<usize> {
    if input.rank() < 2 {
        return Err(EmmaError::Dimension(format!(
            "{what} requires a [C, spatial...] tensor with non-empty spatial part, got shape {:?}",
            input.shape()
        )));
    }
    Ok(input.channel_volume())
}

/// Training-mode batch norm over the spatial dims of each channel.
pub fn batch_norm_train<T: Scalar>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, BatchNormSaved<T>)> {
    let vol = require_spatial(input, "batch_norm")?;
    let c = input.channels();
    if gamma.numel() != c || beta.numel() != c {
        return Err(EmmaError::Dimension(format!(
            "gamma/beta length {}/{} does not match channel count {c}",
            gamma.numel(),
            beta.numel()
        )));
    }
    let mut out = Tensor::zeros(input.shape());
    let mut saved = BatchNormSaved {
        xhat: vec![T::ZERO; input.numel()],
        invstd: vec![T::ZERO; c],
        mean: vec![T::ZERO; c],
        var: vec![T::ZERO; c],
    };
    for ci in 0..c {
        let chunk = &input.data()[ci * vol..(ci + 1) * vol];
        let mut sum = 0.0f64;
        for &v in chunk {
            sum += v.to_f64();
        }
        let mean = sum / vol as f64;
        let mut sq = 0.0f64;
        for &v in chunk {
            let d = v.to_f64() - mean;
            sq += d * d;
        }
        let var = sq / vol as f64;
        let invstd = 1.0 / (var + eps).sqrt();
        saved.mean[ci] = T::from_f64(mean);
        saved.var[ci] = T::from_f64(var);
        saved.invstd[ci] = T::from_f64(invstd);
        let (g, b) = (gamma.data()[ci], beta.data()[ci]);
        let m = T::from_f64(mean);
        let istd = T::from_f64(invstd);
        let xh = &mut saved.xhat[ci * vol..(ci + 1) * vol];
        let dst = &mut out.data_mut()[ci * vol..(ci + 1) * vol];
        for i in 0..vol {
            let xhat = (chunk[i] - m) * istd;
            xh[i] = xhat;
            dst[i] = g * xhat + b;
        }
    }
    Ok((out, saved))
}

/// Inference-mode batch norm using running statistics.
pub fn batch_norm_infer<T: Scalar>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    eps: f64,
) -> Result<Tensor<T>> {
    let vol = require_spatial(input, "batch_norm")?;
    let c = input.channels();
    if gamma.numel() != c || beta.numel() != c {
        return Err(EmmaError::Dimension(format!(
            "gamma/beta length {}/{} does not match channel count {c}",
            gamma.numel(),
            beta.numel()
        )));
    }
    let mut out = Tensor::zeros(input.shape());
    for ci in 0..c {
        let invstd = T::from_f64(1.0 / (running_var.data()[ci].to_f64() + eps).sqrt());
        let scale = gamma.data()[ci] * invstd;
        let shift = beta.data()[ci] - scale * running_mean.data()[ci];
        let chunk = &input.data()[ci * vol..(ci + 1) * vol];
        let dst = &mut out.data_mut()[ci * vol..(ci + 1) * vol];
        for i in 0..vol {
            dst[i] = scale * chunk[i] + shift;
        }
    }
    Ok(out)
}

/// Gradients of training-mode batch norm: `(d_input, d_gamma, d_beta)`.
pub fn batch_norm_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    saved: &BatchNormSaved<T>,
    gamma: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let c = grad_out.channels();
    let vol = grad_out.channel_volume();
    let mut gin = Tensor::zeros(grad_out.shape());
    let mut dgamma = Tensor::zeros(&[c]);
    let mut dbeta = Tensor::zeros(&[c]);
    for ci in 0..c {
        let g = &grad_out.data()[ci * vol..(ci + 1) * vol];
        let xh = &saved.xhat[ci * vol..(ci + 1) * vol];
        let mut sum_g = 0.0f64;
        let mut sum_gx = 0.0f64;
        for i in 0..vol {
            sum_g += g[i].to_f64();
            sum_gx += g[i].to_f64() * xh[i].to_f64();
        }
        dbeta.data_mut()[ci] = T::from_f64(sum_g);
        dgamma.data_mut()[ci] = T::from_f64(sum_gx);
        let n = vol as f64;
        let coef = gamma.data()[ci].to_f64() * saved.invstd[ci].to_f64();
        let mean_g = T::from_f64(sum_g / n);
        let mean_gx = T::from_f64(sum_gx / n);
        let coef = T::from_f64(coef);
        let dst = &mut gin.data_mut()[ci * vol..(ci + 1) * vol];
        for i in 0..vol {
            dst[i] = coef * (g[i] - mean_g - xh[i] * mean_gx);
        }
    }
    (gin, dgamma, dbeta)
}

pub fn relu<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| v.maximum(T::ZERO))
}

pub fn relu_backward<T: Scalar>(grad_out: &Tensor<T>, input: &Tensor<T>) -> Tensor<T> {
    let mut gin = Tensor::zeros(input.shape());
    for ((g, &x), o) in grad_out
        .data()
        .iter()
        .zip(input.data())
        .zip(gin.data_mut().iter_mut())
    {
        if x > T::ZERO {
            *o = *g;
        }
    }
    gin
}

/// Softmax across the class axis (axis 0) at every spatial position, with
/// max-subtraction so large logits cannot overflow.
pub fn softmax_channels<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    if input.rank() < 1 {
        return Err(EmmaError::Dimension("softmax_channels requires a [K, ...] tensor".into()));
    }
    let k = input.channels();
    let vol = input.channel_volume();
    let mut out = Tensor::zeros(input.shape());
    let src = input.data();
    let dst = out.data_mut();
    for v in 0..vol {
        let mut m = src[v];
        for c in 1..k {
            m = m.maximum(src[c * vol + v]);
        }
        let mut sum = T::ZERO;
        for c in 0..k {
            let e = (src[c * vol + v] - m).exp();
            dst[c * vol + v] = e;
            sum += e;
        }
        for c in 0..k {
            dst[c * vol + v] /= sum;
        }
    }
    Ok(out)
}

pub fn softmax_channels_backward<T: Scalar>(grad_out: &Tensor<T>, output: &Tensor<T>) -> Tensor<T> {
    let k = output.channels();
    let vol = output.channel_volume();
    let mut gin = Tensor::zeros(output.shape());
    let y = output.data();
    let g = grad_out.data();
    let dst = gin.data_mut();
    for v in 0..vol {
        let mut dot = T::ZERO;
        for c in 0..k {
            dot += g[c * vol + v] * y[c * vol + v];
        }
        for c in 0..k {
            dst[c * vol + v] = y[c * vol + v] * (g[c * vol + v] - dot);
        }
    }
    gin
}

pub fn concat_channels<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let sa = a.spatial()?;
    let sb = b.spatial()?;
    if sa != sb {
        return Err(EmmaError::Dimension(format!(
            "concat_channels spatial extents differ: {sa:?} vs {sb:?}"
        )));
    }
    let mut shape = a.shape().to_vec();
    shape[0] += b.channels();
    let mut data = Vec::with_capacity(a.numel() + b.numel());
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    Tensor::new(shape, data)
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(EmmaError::Dimension(format!(
            "add operands differ in shape: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = a.clone();
    out.requires_grad = false;
    for (o, &v) in out.data_mut().iter_mut().zip(b.data()) {
        *o += v;
    }
    Ok(out)
}

pub fn mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(EmmaError::Dimension(format!(
            "mul operands differ in shape: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = a.clone();
    out.requires_grad = false;
    for (o, &v) in out.data_mut().iter_mut().zip(b.data()) {
        *o *= v;
    }
    Ok(out)
}

/// Sum of all elements, accumulated in f64.
pub fn sum_all<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    let mut acc = 0.0f64;
    for &v in input.data() {
        acc += v.to_f64();
    }
    Tensor::scalar(T::from_f64(acc))
}

/// Inverted dropout: kept activations are rescaled by `1 / keep` at train
/// time so inference is the identity.
pub fn dropout_apply<T: Scalar>(input: &Tensor<T>, mask: &[u8], keep: f64) -> Tensor<T> {
    let scale = T::from_f64(1.0 / keep);
    let mut out = Tensor::zeros(input.shape());
    for ((o, &x), &m) in out.data_mut().iter_mut().zip(input.data()).zip(mask) {
        if m != 0 {
            *o = x * scale;
        }
    }
    out
}

/// Mirrors the chosen spatial axes of a `[C, D, H, W]` tensor.
pub fn flip_spatial<T: Scalar>(input: &Tensor<T>, flips: [bool; 3]) -> Result<Tensor<T>> {
    let [d, h, w] = input.spatial()?;
    let c = input.channels();
    let mut out = Tensor::zeros(input.shape());
    let src = input.data();
    let dst = out.data_mut();
    for ci in 0..c {
        for z in 0..d {
            let sz = if flips[0] { d - 1 - z } else { z };
            for y in 0..h {
                let sy = if flips[1] { h - 1 - y } else { y };
                for x in 0..w {
                    let sx = if flips[2] { w - 1 - x } else { x };
                    dst[((ci * d + z) * h + y) * w + x] = src[((ci * d + sz) * h + sy) * w + sx];
                }
            }
        }
    }
    Ok(out)
}

/// Copies the window `[corner, corner + extents)` out of a `[C, D, H, W]`
/// tensor, filling everything outside the source bounds with zeros. The
/// corner may be negative or beyond the volume.
pub fn crop_channels_zero_pad<T: Scalar>(
    input: &Tensor<T>,
    corner: [i64; 3],
    extents: [usize; 3],
) -> Result<Tensor<T>> {
    let [d, h, w] = input.spatial()?;
    let src_ext = [d as i64, h as i64, w as i64];
    let c = input.channels();
    if extents.iter().any(|&e| e == 0) {
        return Err(EmmaError::Dimension("crop extents must be positive".into()));
    }
    let mut out = Tensor::zeros(&[c, extents[0], extents[1], extents[2]]);
    // Overlap of the requested window with the volume, in window coords.
    let mut lo = [0usize; 3];
    let mut hi = [0usize; 3];
    for a in 0..3 {
        let start = (-corner[a]).max(0);
        let stop = (src_ext[a] - corner[a]).min(extents[a] as i64);
        if start >= stop {
            return Ok(out); // fully outside: all zeros
        }
        lo[a] = start as usize;
        hi[a] = stop as usize;
    }
    let src = input.data();
    let dst = out.data_mut();
    let row = hi[2] - lo[2];
    for ci in 0..c {
        for z in lo[0]..hi[0] {
            let sz = (corner[0] + z as i64) as usize;
            for y in lo[1]..hi[1] {
                let sy = (corner[1] + y as i64) as usize;
                let sx = (corner[2] + lo[2] as i64) as usize;
                let s0 = ((ci * d + sz) * h + sy) * w + sx;
                let d0 = ((ci * extents[0] + z) * extents[1] + y) * extents[2] + lo[2];
                dst[d0..d0 + row].copy_from_slice(&src[s0..s0 + row]);
            }
        }
    }
    Ok(out)
}
