//! Raw numeric kernels behind the recorded tensor operations.
//!
//! Every kernel accumulates in a fixed order so repeated runs are
//! bit-identical. Parallel loops only ever split over disjoint output
//! regions, which keeps the per-element accumulation order independent of
//! the thread count.

use rayon::prelude::*;

use super::Scalar;

#[derive(Clone, Copy)]
pub(crate) struct ConvDims {
    pub batch: usize,
    pub c_in: usize,
    pub h_in: usize,
    pub w_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub padding: usize,
    pub stride: usize,
    pub h_out: usize,
    pub w_out: usize,
}

/// Output positions `o` with `0 <= o*stride + k_off - pad < in_extent`.
#[inline]
fn valid_range(
    k_off: usize,
    pad: usize,
    stride: usize,
    in_extent: usize,
    out_extent: usize,
) -> Option<(usize, usize)> {
    let lo = pad.saturating_sub(k_off).div_ceil(stride);
    if k_off >= in_extent + pad {
        return None;
    }
    let hi = ((in_extent + pad - 1 - k_off) / stride).min(out_extent - 1);
    if lo > hi {
        None
    } else {
        Some((lo, hi))
    }
}

/// Cross-correlation with zero padding (no kernel flip).
pub(crate) fn conv2d_forward<T: Scalar>(
    input: &[T],
    kernel: &[T],
    bias: &[T],
    d: &ConvDims,
) -> Vec<T> {
    let plane_out = d.h_out * d.w_out;
    let plane_in = d.h_in * d.w_in;
    let mut out = vec![T::zero(); d.batch * d.c_out * plane_out];
    out.par_chunks_mut(plane_out)
        .enumerate()
        .for_each(|(bc, plane)| {
            let b = bc / d.c_out;
            let co = bc % d.c_out;
            plane.fill(bias[co]);
            for ci in 0..d.c_in {
                let in_plane = &input[(b * d.c_in + ci) * plane_in..][..plane_in];
                for kh in 0..d.k {
                    let Some((oh0, oh1)) = valid_range(kh, d.padding, d.stride, d.h_in, d.h_out)
                    else {
                        continue;
                    };
                    for kw in 0..d.k {
                        let w = kernel[((co * d.c_in + ci) * d.k + kh) * d.k + kw];
                        if w == T::zero() {
                            continue;
                        }
                        let Some((ow0, ow1)) =
                            valid_range(kw, d.padding, d.stride, d.w_in, d.w_out)
                        else {
                            continue;
                        };
                        for oh in oh0..=oh1 {
                            let ih = oh * d.stride + kh - d.padding;
                            let in_row = &in_plane[ih * d.w_in..][..d.w_in];
                            let out_row = &mut plane[oh * d.w_out..][..d.w_out];
                            if d.stride == 1 {
                                let iw0 = ow0 + kw - d.padding;
                                let len = ow1 - ow0 + 1;
                                let src = &in_row[iw0..iw0 + len];
                                let dst = &mut out_row[ow0..ow0 + len];
                                for (o, &x) in dst.iter_mut().zip(src.iter()) {
                                    *o += w * x;
                                }
                            } else {
                                for ow in ow0..=ow1 {
                                    out_row[ow] += w * in_row[ow * d.stride + kw - d.padding];
                                }
                            }
                        }
                    }
                }
            }
        });
    out
}

pub(crate) fn conv2d_backward_bias<T: Scalar>(grad_out: &[T], d: &ConvDims) -> Vec<T> {
    let plane_out = d.h_out * d.w_out;
    let mut gb = vec![T::zero(); d.c_out];
    for b in 0..d.batch {
        for (co, acc) in gb.iter_mut().enumerate() {
            let plane = &grad_out[(b * d.c_out + co) * plane_out..][..plane_out];
            for &g in plane {
                *acc += g;
            }
        }
    }
    gb
}

pub(crate) fn conv2d_backward_kernel<T: Scalar>(
    input: &[T],
    grad_out: &[T],
    d: &ConvDims,
) -> Vec<T> {
    let plane_out = d.h_out * d.w_out;
    let plane_in = d.h_in * d.w_in;
    let mut gk = vec![T::zero(); d.c_out * d.c_in * d.k * d.k];
    gk.par_chunks_mut(d.c_in * d.k * d.k)
        .enumerate()
        .for_each(|(co, gk_co)| {
            for ci in 0..d.c_in {
                for kh in 0..d.k {
                    let Some((oh0, oh1)) = valid_range(kh, d.padding, d.stride, d.h_in, d.h_out)
                    else {
                        continue;
                    };
                    for kw in 0..d.k {
                        let Some((ow0, ow1)) =
                            valid_range(kw, d.padding, d.stride, d.w_in, d.w_out)
                        else {
                            continue;
                        };
                        let mut acc = T::zero();
                        for b in 0..d.batch {
                            let g_plane = &grad_out[(b * d.c_out + co) * plane_out..][..plane_out];
                            let in_plane = &input[(b * d.c_in + ci) * plane_in..][..plane_in];
                            for oh in oh0..=oh1 {
                                let ih = oh * d.stride + kh - d.padding;
                                let g_row = &g_plane[oh * d.w_out..][..d.w_out];
                                let in_row = &in_plane[ih * d.w_in..][..d.w_in];
                                if d.stride == 1 {
                                    let iw0 = ow0 + kw - d.padding;
                                    let len = ow1 - ow0 + 1;
                                    let gs = &g_row[ow0..ow0 + len];
                                    let xs = &in_row[iw0..iw0 + len];
                                    for (&g, &x) in gs.iter().zip(xs.iter()) {
                                        acc += g * x;
                                    }
                                } else {
                                    for ow in ow0..=ow1 {
                                        acc += g_row[ow] * in_row[ow * d.stride + kw - d.padding];
                                    }
                                }
                            }
                        }
                        gk_co[(ci * d.k + kh) * d.k + kw] = acc;
                    }
                }
            }
        });
    gk
}

pub(crate) fn conv2d_backward_input<T: Scalar>(
    kernel: &[T],
    grad_out: &[T],
    d: &ConvDims,
) -> Vec<T> {
    let plane_out = d.h_out * d.w_out;
    let plane_in = d.h_in * d.w_in;
    let mut gin = vec![T::zero(); d.batch * d.c_in * plane_in];
    gin.par_chunks_mut(d.c_in * plane_in)
        .enumerate()
        .for_each(|(b, gin_b)| {
            for co in 0..d.c_out {
                let g_plane = &grad_out[(b * d.c_out + co) * plane_out..][..plane_out];
                for ci in 0..d.c_in {
                    let gin_plane = &mut gin_b[ci * plane_in..][..plane_in];
                    for kh in 0..d.k {
                        let Some((oh0, oh1)) =
                            valid_range(kh, d.padding, d.stride, d.h_in, d.h_out)
                        else {
                            continue;
                        };
                        for kw in 0..d.k {
                            let w = kernel[((co * d.c_in + ci) * d.k + kh) * d.k + kw];
                            if w == T::zero() {
                                continue;
                            }
                            let Some((ow0, ow1)) =
                                valid_range(kw, d.padding, d.stride, d.w_in, d.w_out)
                            else {
                                continue;
                            };
                            for oh in oh0..=oh1 {
                                let ih = oh * d.stride + kh - d.padding;
                                let g_row = &g_plane[oh * d.w_out..][..d.w_out];
                                let gin_row = &mut gin_plane[ih * d.w_in..][..d.w_in];
                                if d.stride == 1 {
                                    let iw0 = ow0 + kw - d.padding;
                                    let len = ow1 - ow0 + 1;
                                    let gs = &g_row[ow0..ow0 + len];
                                    let dst = &mut gin_row[iw0..iw0 + len];
                                    for (o, &g) in dst.iter_mut().zip(gs.iter()) {
                                        *o += w * g;
                                    }
                                } else {
                                    for ow in ow0..=ow1 {
                                        gin_row[ow * d.stride + kw - d.padding] += w * g_row[ow];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });
    gin
}

/// 2x2 average pooling, stride 2. Caller guarantees even extents.
pub(crate) fn avg_pool2_forward<T: Scalar>(input: &[T], b: usize, c: usize, h: usize, w: usize) -> Vec<T> {
    let (ho, wo) = (h / 2, w / 2);
    let quarter = T::from_f64(0.25);
    let mut out = vec![T::zero(); b * c * ho * wo];
    for bc in 0..b * c {
        let ip = &input[bc * h * w..][..h * w];
        let op = &mut out[bc * ho * wo..][..ho * wo];
        for i in 0..ho {
            for j in 0..wo {
                let s = ip[2 * i * w + 2 * j]
                    + ip[2 * i * w + 2 * j + 1]
                    + ip[(2 * i + 1) * w + 2 * j]
                    + ip[(2 * i + 1) * w + 2 * j + 1];
                op[i * wo + j] = s * quarter;
            }
        }
    }
    out
}

pub(crate) fn avg_pool2_backward<T: Scalar>(grad_out: &[T], b: usize, c: usize, h: usize, w: usize) -> Vec<T> {
    let (ho, wo) = (h / 2, w / 2);
    let quarter = T::from_f64(0.25);
    let mut gin = vec![T::zero(); b * c * h * w];
    for bc in 0..b * c {
        let gp = &grad_out[bc * ho * wo..][..ho * wo];
        let ip = &mut gin[bc * h * w..][..h * w];
        for i in 0..ho {
            for j in 0..wo {
                let g = gp[i * wo + j] * quarter;
                ip[2 * i * w + 2 * j] = g;
                ip[2 * i * w + 2 * j + 1] = g;
                ip[(2 * i + 1) * w + 2 * j] = g;
                ip[(2 * i + 1) * w + 2 * j + 1] = g;
            }
        }
    }
    gin
}

/// Spatial crop of a rank-4 tensor: rows `h0..h1`, cols `w0..w1`.
pub(crate) fn crop2d_forward<T: Scalar>(
    input: &[T],
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    h0: usize,
    h1: usize,
    w0: usize,
    w1: usize,
) -> Vec<T> {
    let (hc, wc) = (h1 - h0, w1 - w0);
    let mut out = Vec::with_capacity(b * c * hc * wc);
    for bc in 0..b * c {
        let plane = &input[bc * h * w..][..h * w];
        for i in h0..h1 {
            out.extend_from_slice(&plane[i * w + w0..i * w + w1]);
        }
    }
    out
}

pub(crate) fn crop2d_backward<T: Scalar>(
    grad_out: &[T],
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    h0: usize,
    h1: usize,
    w0: usize,
    w1: usize,
) -> Vec<T> {
    let (hc, wc) = (h1 - h0, w1 - w0);
    let mut gin = vec![T::zero(); b * c * h * w];
    for bc in 0..b * c {
        let gp = &grad_out[bc * hc * wc..][..hc * wc];
        let ip = &mut gin[bc * h * w..][..h * w];
        for (i, row) in gp.chunks_exact(wc).enumerate() {
            ip[(h0 + i) * w + w0..(h0 + i) * w + w1].copy_from_slice(row);
        }
    }
    gin
}

/// Sequential left-to-right accumulation; the reproducibility contract for
/// reductions fixes this order.
pub(crate) fn sum_all<T: Scalar>(data: &[T]) -> T {
    let mut acc = T::zero();
    for &x in data {
        acc += x;
    }
    acc
}

/// Sum over the axes marked in `reduce`, keeping reduced extents as 1.
pub(crate) fn sum_axes<T: Scalar>(data: &[T], dims: &[usize], reduce: &[bool]) -> Vec<T> {
    let rank = dims.len();
    let out_dims: Vec<usize> = dims
        .iter()
        .zip(reduce.iter())
        .map(|(&d, &r)| if r { 1 } else { d })
        .collect();
    let mut out_strides = vec![0usize; rank];
    let mut acc = 1usize;
    for a in (0..rank).rev() {
        out_strides[a] = if reduce[a] { 0 } else { acc };
        acc *= out_dims[a];
    }
    let mut out = vec![T::zero(); out_dims.iter().product::<usize>().max(1)];
    let mut idx = vec![0usize; rank];
    for &x in data {
        let mut o = 0usize;
        for a in 0..rank {
            o += idx[a] * out_strides[a];
        }
        out[o] += x;
        for a in (0..rank).rev() {
            idx[a] += 1;
            if idx[a] < dims[a] {
                break;
            }
            idx[a] = 0;
        }
    }
    out
}

/// Broadcast a reduced (keepdim) gradient back over the input dims; each
/// element is scaled by `scale` (1 for sum, 1/count for mean).
pub(crate) fn broadcast_reduced<T: Scalar>(
    grad: &[T],
    dims: &[usize],
    reduce: &[bool],
    scale: T,
) -> Vec<T> {
    let rank = dims.len();
    let out_dims: Vec<usize> = dims
        .iter()
        .zip(reduce.iter())
        .map(|(&d, &r)| if r { 1 } else { d })
        .collect();
    let mut out_strides = vec![0usize; rank];
    let mut acc = 1usize;
    for a in (0..rank).rev() {
        out_strides[a] = if reduce[a] { 0 } else { acc };
        acc *= out_dims[a];
    }
    let n: usize = dims.iter().product::<usize>().max(1);
    let mut gin = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    for _ in 0..n {
        let mut o = 0usize;
        for a in 0..rank {
            o += idx[a] * out_strides[a];
        }
        gin.push(grad[o] * scale);
        for a in (0..rank).rev() {
            idx[a] += 1;
            if idx[a] < dims[a] {
                break;
            }
            idx[a] = 0;
        }
    }
    gin
}
