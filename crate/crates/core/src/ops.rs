//! Layer primitives on `[C, H, W]` tensors, each with the backward pass the
//! micro U-Net needs.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Padding {
    /// Zero padding of `k / 2`; output keeps the input size.
    Same,
    Valid,
}

#[derive(Debug, Clone, Copy)]
struct ConvGeometry {
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeometry {
    fn new(input: &[usize], kernels: &[usize], padding: Padding) -> Result<Self> {
        let [cin, h, w] = input[..] else {
            return Err(Error::shape("conv2d", format!("input must be [C,H,W], got {input:?}")));
        };
        let [cout, kcin, k, k2] = kernels[..] else {
            return Err(Error::shape("conv2d", format!("kernels must be [Cout,Cin,k,k], got {kernels:?}")));
        };
        if kcin != cin || k != k2 {
            return Err(Error::shape("conv2d", format!("kernels {kernels:?} do not fit input {input:?}")));
        }
        if k % 2 == 0 {
            return Err(Error::shape("conv2d", format!("kernel size {k} must be odd")));
        }
        let pad = match padding {
            Padding::Same => k / 2,
            Padding::Valid => 0,
        };
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(Error::shape("conv2d", format!("kernel {k} larger than input {h}x{w}")));
        }
        Ok(ConvGeometry { cin, h, w, cout, k, pad, ho: h + 2 * pad - k + 1, wo: w + 2 * pad - k + 1 })
    }

    /// Output rows (or columns) `[lo, hi)` whose tap `offset` lands inside
    /// an input of length `len`.
    #[inline]
    fn span(&self, offset: usize, len: usize, out_len: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(offset);
        let hi = out_len.min((len + self.pad).saturating_sub(offset));
        (lo, hi.max(lo))
    }
}

/// Cross-correlation of `input [Cin,H,W]` with `kernels [Cout,Cin,k,k]`.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    bias: &Tensor<T>,
    padding: Padding,
) -> Result<Tensor<T>> {
    let g = ConvGeometry::new(input.shape(), kernels.shape(), padding)?;
    if bias.shape() != [g.cout] {
        return Err(Error::shape("conv2d", format!("bias {:?}, expected [{}]", bias.shape(), g.cout)));
    }
    let (x, wts) = (input.data(), kernels.data());
    let plane = g.ho * g.wo;
    let mut out = vec![T::zero(); g.cout * plane];
    let fast = g.k == 3 && g.pad == 1;
    let zeros = vec![T::zero(); g.w];
    for (co, out_plane) in out.chunks_exact_mut(plane).enumerate() {
        out_plane.fill(bias.data()[co]);
        for ci in 0..g.cin {
            let in_plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
            let kbase = (co * g.cin + ci) * g.k * g.k;
            if fast {
                let taps: [T; 9] = core::array::from_fn(|i| wts[kbase + i]);
                correlate3(out_plane, in_plane, &taps, g.h, g.w, &zeros);
                continue;
            }
            for ky in 0..g.k {
                let (y0, y1) = g.span(ky, g.h, g.ho);
                for kx in 0..g.k {
                    let wv = wts[kbase + ky * g.k + kx];
                    let (x0, x1) = g.span(kx, g.w, g.wo);
                    let n = x1 - x0;
                    if n == 0 {
                        continue;
                    }
                    for y in y0..y1 {
                        let iy = y + ky - g.pad;
                        let ix = x0 + kx - g.pad;
                        let irow = &in_plane[iy * g.w + ix..iy * g.w + ix + n];
                        let orow = &mut out_plane[y * g.wo + x0..y * g.wo + x1];
                        for (o, &i) in orow.iter_mut().zip(irow) {
                            *o += wv * i;
                        }
                    }
                }
            }
        }
    }
    Tensor::from_parts("conv2d", vec![g.cout, g.ho, g.wo], out)
}

pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub kernels: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Gradients of [`conv2d`] given the upstream gradient of its output.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    grad_out: &Tensor<T>,
    padding: Padding,
) -> Result<ConvGrads<T>> {
    let g = ConvGeometry::new(input.shape(), kernels.shape(), padding)?;
    if grad_out.shape() != [g.cout, g.ho, g.wo] {
        return Err(Error::shape("conv2d_backward", format!("grad {:?}", grad_out.shape())));
    }
    let (x, wts, go) = (input.data(), kernels.data(), grad_out.data());
    let plane = g.ho * g.wo;
    let in_plane_len = g.h * g.w;
    let mut gx = vec![T::zero(); g.cin * in_plane_len];
    let mut gw = vec![T::zero(); wts.len()];
    let mut gb = vec![T::zero(); g.cout];
    let fast = g.k == 3 && g.pad == 1;
    let zeros = vec![T::zero(); g.w];

    for co in 0..g.cout {
        let g_plane = &go[co * plane..(co + 1) * plane];
        let mut lanes = [T::zero(); LANES];
        dot_accumulate(&mut lanes, g_plane, None);
        gb[co] = reduce_lanes(&lanes);
        for ci in 0..g.cin {
            let in_plane = &x[ci * in_plane_len..(ci + 1) * in_plane_len];
            let gx_plane = &mut gx[ci * in_plane_len..(ci + 1) * in_plane_len];
            let kbase = (co * g.cin + ci) * g.k * g.k;
            if fast {
                // The input gradient of a same-padded 3x3 correlation is the
                // correlation of the output gradient with the flipped kernel.
                let flipped: [T; 9] = core::array::from_fn(|i| wts[kbase + 8 - i]);
                correlate3(gx_plane, g_plane, &flipped, g.h, g.w, &zeros);
                let taps = tap_gradients3(g_plane, in_plane, g.h, g.w);
                gw[kbase..kbase + 9].copy_from_slice(&taps);
                continue;
            }
            for ky in 0..g.k {
                let (y0, y1) = g.span(ky, g.h, g.ho);
                for kx in 0..g.k {
                    let wv = wts[kbase + ky * g.k + kx];
                    let (x0, x1) = g.span(kx, g.w, g.wo);
                    let n = x1 - x0;
                    if n == 0 {
                        continue;
                    }
                    let mut lanes = [T::zero(); LANES];
                    for y in y0..y1 {
                        let iy = y + ky - g.pad;
                        let ix = x0 + kx - g.pad;
                        let grow = &g_plane[y * g.wo + x0..y * g.wo + x1];
                        let irow = &in_plane[iy * g.w + ix..iy * g.w + ix + n];
                        dot_accumulate(&mut lanes, grow, Some(irow));
                        let gxrow = &mut gx_plane[iy * g.w + ix..iy * g.w + ix + n];
                        for (d, &gv) in gxrow.iter_mut().zip(grow) {
                            *d += wv * gv;
                        }
                    }
                    gw[kbase + ky * g.k + kx] = reduce_lanes(&lanes);
                }
            }
        }
    }
    flush_subnormals(&mut gx);
    Ok(ConvGrads {
        input: Tensor::from_parts("conv2d_backward", input.shape().to_vec(), gx)?,
        kernels: Tensor::from_parts("conv2d_backward", kernels.shape().to_vec(), gw)?,
        bias: Tensor::from_parts("conv2d_backward", vec![g.cout], gb)?,
    })
}

/// Zeroes subnormal values. Gradients that shrink below the normal range
/// contribute nothing measurable but make every later kernel that reads
/// them several times slower.
pub fn flush_subnormals<T: Scalar>(values: &mut [T]) {
    for v in values.iter_mut() {
        if v.is_subnormal() {
            *v = T::zero();
        }
    }
}

/// `out += input ⋆ taps` for one `h x w` plane with zero padding 1. All
/// nine taps of a pixel are summed in one pass, row-major tap order.
fn correlate3<T: Scalar>(out: &mut [T], input: &[T], taps: &[T; 9], h: usize, w: usize, zeros: &[T]) {
    let [w0, w1, w2, w3, w4, w5, w6, w7, w8] = *taps;
    for y in 0..h {
        let rows = [
            if y > 0 { &input[(y - 1) * w..y * w] } else { zeros },
            &input[y * w..(y + 1) * w],
            if y + 1 < h { &input[(y + 1) * w..(y + 2) * w] } else { zeros },
        ];
        let orow = &mut out[y * w..(y + 1) * w];
        let edge = |x: usize, acc: T| {
            let mut acc = acc;
            for (ky, row) in rows.iter().enumerate() {
                for kx in 0..3 {
                    if x + kx >= 1 && x + kx - 1 < w {
                        acc += taps[ky * 3 + kx] * row[x + kx - 1];
                    }
                }
            }
            acc
        };
        orow[0] = edge(0, orow[0]);
        if w == 1 {
            continue;
        }
        orow[w - 1] = edge(w - 1, orow[w - 1]);
        if w == 2 {
            continue;
        }
        let n = w - 2;
        let (a, b, c) = (rows[0], rows[1], rows[2]);
        let (a0, a1, a2) = (&a[..n], &a[1..n + 1], &a[2..n + 2]);
        let (b0, b1, b2) = (&b[..n], &b[1..n + 1], &b[2..n + 2]);
        let (c0, c1, c2) = (&c[..n], &c[1..n + 1], &c[2..n + 2]);
        let o = &mut orow[1..n + 1];
        for i in 0..n {
            o[i] = o[i]
                + w0 * a0[i]
                + w1 * a1[i]
                + w2 * a2[i]
                + w3 * b0[i]
                + w4 * b1[i]
                + w5 * b2[i]
                + w6 * c0[i]
                + w7 * c1[i]
                + w8 * c2[i];
        }
    }
}

/// Kernel gradient of [`correlate3`]: the nine dot products of `grad` with
/// the shifted input. Each kernel row shares one pass over the gradient.
fn tap_gradients3<T: Scalar>(grad: &[T], input: &[T], h: usize, w: usize) -> [T; 9] {
    let mut out = [T::zero(); 9];
    for ky in 0..3 {
        // Output rows whose tap row `ky` lands inside the input.
        let (y0, y1) = (usize::from(ky == 0), if ky == 2 { h - 1 } else { h });
        let mut acc = [[T::zero(); LANES]; 3];
        for y in y0..y1 {
            let row = &input[(y + ky - 1) * w..(y + ky) * w];
            let grow = &grad[y * w..(y + 1) * w];
            // kx = 0 reads x - 1, so output column 0 is skipped; kx = 2 skips the last.
            dot_accumulate(&mut acc[0], &grow[1..], Some(&row[..w - 1]));
            dot_accumulate(&mut acc[1], grow, Some(row));
            dot_accumulate(&mut acc[2], &grow[..w - 1], Some(&row[1..]));
        }
        for kx in 0..3 {
            out[ky * 3 + kx] = reduce_lanes(&acc[kx]);
        }
    }
    out
}

const LANES: usize = 8;

/// Adds `a[i] * b[i]` (or `a[i]` when `b` is `None`) into fixed lanes. The
/// summation order is fixed, so results are bitwise reproducible while the
/// independent lanes still vectorise.
#[inline]
fn dot_accumulate<T: Scalar>(lanes: &mut [T; LANES], a: &[T], b: Option<&[T]>) {
    let ca = a.chunks_exact(LANES);
    let rem_a = ca.remainder();
    match b {
        Some(b) => {
            let cb = b.chunks_exact(LANES);
            let rem_b = cb.remainder();
            for (xa, xb) in ca.zip(cb) {
                for l in 0..LANES {
                    lanes[l] += xa[l] * xb[l];
                }
            }
            for (l, (&va, &vb)) in rem_a.iter().zip(rem_b).enumerate() {
                lanes[l] += va * vb;
            }
        }
        None => {
            for xa in ca {
                for l in 0..LANES {
                    lanes[l] += xa[l];
                }
            }
            for (l, &va) in rem_a.iter().enumerate() {
                lanes[l] += va;
            }
        }
    }
}

#[inline]
fn reduce_lanes<T: Scalar>(lanes: &[T; LANES]) -> T {
    ((lanes[0] + lanes[4]) + (lanes[2] + lanes[6])) + ((lanes[1] + lanes[5]) + (lanes[3] + lanes[7]))
}

/// Flat input offsets of each pooled maximum, for routing gradients back.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PoolIndices {
    pub input_shape: Vec<usize>,
    pub argmax: Vec<usize>,
}

/// Non-overlapping `window x window` max pooling. Ties go to the first
/// element in row-major window order.
pub fn maxpool2d<T: Scalar>(input: &Tensor<T>, window: usize) -> Result<(Tensor<T>, PoolIndices)> {
    let [c, h, w] = input.shape()[..] else {
        return Err(Error::shape("maxpool2d", format!("input must be [C,H,W], got {:?}", input.shape())));
    };
    if window == 0 || h % window != 0 || w % window != 0 {
        return Err(Error::shape("maxpool2d", format!("spatial dims {h}x{w} not divisible by window {window}")));
    }
    let (ho, wo) = (h / window, w / window);
    let x = input.data();
    let mut out = Vec::with_capacity(c * ho * wo);
    let mut argmax = Vec::with_capacity(c * ho * wo);
    for ch in 0..c {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best_idx = ch * h * w + oy * window * w + ox * window;
                let mut best = x[best_idx];
                for dy in 0..window {
                    for dx in 0..window {
                        let idx = ch * h * w + (oy * window + dy) * w + ox * window + dx;
                        if x[idx] > best {
                            best = x[idx];
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                argmax.push(best_idx);
            }
        }
    }
    let pooled = Tensor::from_parts("maxpool2d", vec![c, ho, wo], out)?;
    Ok((pooled, PoolIndices { input_shape: input.shape().to_vec(), argmax }))
}

pub fn maxpool2d_backward<T: Scalar>(grad_out: &Tensor<T>, indices: &PoolIndices) -> Result<Tensor<T>> {
    if grad_out.len() != indices.argmax.len() {
        return Err(Error::shape("maxpool2d_backward", "gradient does not match recorded indices"));
    }
    let len = indices.input_shape.iter().product();
    let mut gx = vec![T::zero(); len];
    for (&idx, &g) in indices.argmax.iter().zip(grad_out.data()) {
        gx[idx] += g;
    }
    Tensor::from_parts("maxpool2d_backward", indices.input_shape.clone(), gx)
}

/// Nearest-neighbour upsampling: every pixel becomes a `factor x factor`
/// block.
pub fn upsample_nearest<T: Scalar>(input: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let [c, h, w] = input.shape()[..] else {
        return Err(Error::shape("upsample_nearest", format!("input must be [C,H,W], got {:?}", input.shape())));
    };
    if factor == 0 {
        return Err(Error::invalid("factor", "must be positive"));
    }
    let (ho, wo) = (h * factor, w * factor);
    let x = input.data();
    let mut out = vec![T::zero(); c * ho * wo];
    for ch in 0..c {
        for oy in 0..ho {
            let src = &x[ch * h * w + (oy / factor) * w..][..w];
            let dst = &mut out[ch * ho * wo + oy * wo..][..wo];
            for (ox, d) in dst.iter_mut().enumerate() {
                *d = src[ox / factor];
            }
        }
    }
    Tensor::from_parts("upsample_nearest", vec![c, ho, wo], out)
}

/// Adjoint of [`upsample_nearest`]: sums each block.
pub fn upsample_nearest_backward<T: Scalar>(grad_out: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let [c, ho, wo] = grad_out.shape()[..] else {
        return Err(Error::shape("upsample_nearest_backward", "gradient must be [C,H,W]"));
    };
    if factor == 0 || ho % factor != 0 || wo % factor != 0 {
        return Err(Error::shape("upsample_nearest_backward", "size not divisible by factor"));
    }
    let (h, w) = (ho / factor, wo / factor);
    let g = grad_out.data();
    let mut gx = vec![T::zero(); c * h * w];
    for ch in 0..c {
        for oy in 0..ho {
            for ox in 0..wo {
                gx[ch * h * w + (oy / factor) * w + ox / factor] += g[ch * ho * wo + oy * wo + ox];
            }
        }
    }
    Tensor::from_parts("upsample_nearest_backward", vec![c, h, w], gx)
}

/// Per-pixel softmax across the leading channel axis of `[K, H, W]`
/// (max-subtracted, normaliser accumulated in `f64`).
pub fn softmax_channels<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let [k, h, w] = input.shape()[..] else {
        return Err(Error::shape("softmax_channels", format!("input must be [K,H,W], got {:?}", input.shape())));
    };
    if k < 2 {
        return Err(Error::shape("softmax_channels", format!("need at least 2 channels, got {k}")));
    }
    let plane = h * w;
    let x = input.data();
    let mut out = vec![T::zero(); k * plane];
    let mut exps = vec![0.0f64; k];
    for p in 0..plane {
        let max = (0..k).map(|c| x[c * plane + p].as_f64()).fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for c in 0..k {
            exps[c] = libm::exp(x[c * plane + p].as_f64() - max);
            total += exps[c];
        }
        for c in 0..k {
            out[c * plane + p] = T::from_f64(exps[c] / total);
        }
    }
    Tensor::from_parts("softmax_channels", input.shape().to_vec(), out)
}

/// Shannon entropy in nats, with `0 ln 0 = 0`.
pub fn entropy(p: &[f64]) -> Result<f64> {
    if p.is_empty() {
        return Err(Error::InvalidProbability { detail: "empty vector".into() });
    }
    let mut sum = 0.0;
    for &v in p {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::InvalidProbability { detail: format!("component {v} outside [0,1]") });
        }
        sum += v;
    }
    if (sum - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidProbability { detail: format!("components sum to {sum}") });
    }
    Ok(entropy_unchecked(p).clamp(0.0, libm::log(p.len() as f64)))
}

#[inline]
pub(crate) fn entropy_unchecked(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|&v| v * libm::log(v)).sum::<f64>()
}

/// Inverted-dropout mask: each element is 0 with probability `p`, else
/// `1 / (1 - p)`.
pub fn dropout_mask<T: Scalar>(shape: &[usize], p: f64, rng: &mut RngStream) -> Result<Tensor<T>> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::invalid("dropout probability", format!("{p} not in [0, 1)")));
    }
    let keep = T::from_f64(1.0 / (1.0 - p));
    let cutoff = p * 4_294_967_296.0;
    Tensor::from_fn(shape, |_| if f64::from(rng.next_u32()) < cutoff { T::zero() } else { keep })
}

pub fn relu<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    let data = input.data().iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect();
    Tensor::from_parts("relu", input.shape().to_vec(), data).expect("relu of finite input is finite")
}

/// Gradient through ReLU given its forward output.
pub fn relu_backward<T: Scalar>(grad_out: &Tensor<T>, output: &Tensor<T>) -> Tensor<T> {
    let data =
        grad_out.data().iter().zip(output.data()).map(|(&g, &o)| if o > T::zero() { g } else { T::zero() }).collect();
    Tensor::from_parts("relu_backward", output.shape().to_vec(), data).expect("finite")
}

pub fn mul_elementwise<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(Error::shape("mul", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
    Tensor::from_parts("mul", a.shape().to_vec(), data)
}

/// Concatenate `[Ca,H,W]` and `[Cb,H,W]` along channels.
pub fn concat_channels<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() != 3 || b.rank() != 3 || a.shape()[1..] != b.shape()[1..] {
        return Err(Error::shape("concat_channels", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let mut data = Vec::with_capacity(a.len() + b.len());
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    Tensor::from_parts("concat_channels", vec![a.dim(0) + b.dim(0), a.dim(1), a.dim(2)], data)
}

/// Inverse of [`concat_channels`]: first `channels` channels, then the rest.
pub fn split_channels<T: Scalar>(t: &Tensor<T>, channels: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    if t.rank() != 3 || channels == 0 || channels >= t.dim(0) {
        return Err(Error::shape("split_channels", format!("cannot split {:?} at {channels}", t.shape())));
    }
    let (h, w) = (t.dim(1), t.dim(2));
    let (a, b) = t.data().split_at(channels * h * w);
    Ok((
        Tensor::from_parts("split_channels", vec![channels, h, w], a.to_vec())?,
        Tensor::from_parts("split_channels", vec![t.dim(0) - channels, h, w], b.to_vec())?,
    ))
}
