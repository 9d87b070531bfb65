//! Direct 3D cross-correlation kernels. 2D convolution runs through the same
//! code with a unit depth axis.
//!
//! Work is split over disjoint output slabs so results do not depend on the
//! number of worker threads.

use rayon::prelude::*;

use crate::element::Element;

/// Kernel extents, strides and zero padding per spatial axis (depth, height, width).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Geom {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

/// `floor((input + 2·pad − kernel)/stride) + 1`, or `None` when the padded
/// input is smaller than the kernel.
pub fn conv_output_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    (input + 2 * pad).checked_sub(kernel).map(|span| span / stride + 1)
}

/// `(input − 1)·stride − 2·pad + kernel + output_padding`.
pub fn conv_transpose_output_extent(
    input: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    output_padding: usize,
) -> Option<usize> {
    ((input.max(1) - 1) * stride + kernel + output_padding).checked_sub(2 * pad)
}

/// Range of output columns whose tap `k` lands inside `[0, input)`.
#[inline]
fn valid_range(out: usize, stride: usize, k: usize, pad: usize, input: usize) -> (usize, usize) {
    // o·s + k − p ∈ [0, input)
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    let hi = if input + pad > k { (input + pad - k).div_ceil(stride).min(out) } else { 0 };
    (lo.min(hi), hi)
}

#[inline]
fn tap(o: usize, stride: usize, k: usize, pad: usize, input: usize) -> Option<usize> {
    let i = o * stride + k;
    if i < pad || i - pad >= input {
        None
    } else {
        Some(i - pad)
    }
}

/// `out[co, o] = Σ_{ci, k} w[co, ci, k] · in[ci, o·s + k − p]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_forward<T: Element>(
    input: &[T],
    in_ch: usize,
    in_ext: [usize; 3],
    weight: &[T],
    out_ch: usize,
    out_ext: [usize; 3],
    g: &Geom,
) -> Vec<T> {
    let [kd, kh, kw] = g.kernel;
    let [sd, sh, sw] = g.stride;
    let [pd, ph, pw] = g.pad;
    let in_plane = in_ext[1] * in_ext[2];
    let out_plane = out_ext[1] * out_ext[2];
    let (wi, wo) = (in_ext[2], out_ext[2]);
    let mut out = vec![T::zero(); out_ch * out_ext[0] * out_plane];
    if out.is_empty() {
        return out;
    }
    out.par_chunks_mut(out_plane).enumerate().for_each(|(slab, out_sl)| {
        let co = slab / out_ext[0];
        let od = slab % out_ext[0];
        for ci in 0..in_ch {
            for z in 0..kd {
                let Some(id) = tap(od, sd, z, pd, in_ext[0]) else {
                    continue;
                };
                let in_sl = &input[(ci * in_ext[0] + id) * in_plane..][..in_plane];
                for y in 0..kh {
                    for x in 0..kw {
                        let wv = weight[(((co * in_ch + ci) * kd + z) * kh + y) * kw + x];
                        let (lo, hi) = valid_range(wo, sw, x, pw, wi);
                        if lo >= hi {
                            continue;
                        }
                        for oh in 0..out_ext[1] {
                            let Some(ih) = tap(oh, sh, y, ph, in_ext[1]) else {
                                continue;
                            };
                            let orow = &mut out_sl[oh * wo..(oh + 1) * wo];
                            let irow = &in_sl[ih * wi..(ih + 1) * wi];
                            if sw == 1 {
                                let shift = lo + x - pw;
                                for (o, &i) in orow[lo..hi].iter_mut().zip(&irow[shift..]) {
                                    *o += wv * i;
                                }
                            } else {
                                for ow in lo..hi {
                                    orow[ow] += wv * irow[ow * sw + x - pw];
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    out
}

/// Adjoint of [`conv_forward`] with respect to its input: scatters
/// `grad_out` back through the weights into an `[in_ch, in_ext]` buffer.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_backward_input<T: Element>(
    grad_out: &[T],
    out_ch: usize,
    out_ext: [usize; 3],
    weight: &[T],
    in_ch: usize,
    in_ext: [usize; 3],
    g: &Geom,
) -> Vec<T> {
    let [kd, kh, kw] = g.kernel;
    let [sd, sh, sw] = g.stride;
    let [pd, ph, pw] = g.pad;
    let in_plane = in_ext[1] * in_ext[2];
    let out_plane = out_ext[1] * out_ext[2];
    let (wi, wo) = (in_ext[2], out_ext[2]);
    let mut grad_in = vec![T::zero(); in_ch * in_ext[0] * in_plane];
    if grad_in.is_empty() {
        return grad_in;
    }
    grad_in.par_chunks_mut(in_plane).enumerate().for_each(|(slab, gi_sl)| {
        let ci = slab / in_ext[0];
        let id = slab % in_ext[0];
        for co in 0..out_ch {
            for z in 0..kd {
                // od·sd + z − pd = id
                let num = id + pd;
                if num < z || !(num - z).is_multiple_of(sd) {
                    continue;
                }
                let od = (num - z) / sd;
                if od >= out_ext[0] {
                    continue;
                }
                let go_sl = &grad_out[(co * out_ext[0] + od) * out_plane..][..out_plane];
                for y in 0..kh {
                    for x in 0..kw {
                        let wv = weight[(((co * in_ch + ci) * kd + z) * kh + y) * kw + x];
                        let (lo, hi) = valid_range(wo, sw, x, pw, wi);
                        if lo >= hi {
                            continue;
                        }
                        for oh in 0..out_ext[1] {
                            let Some(ih) = tap(oh, sh, y, ph, in_ext[1]) else {
                                continue;
                            };
                            let grow = &go_sl[oh * wo..(oh + 1) * wo];
                            let girow = &mut gi_sl[ih * wi..(ih + 1) * wi];
                            if sw == 1 {
                                let shift = lo + x - pw;
                                for (gi, &go) in girow[shift..].iter_mut().zip(&grow[lo..hi]) {
                                    *gi += wv * go;
                                }
                            } else {
                                for ow in lo..hi {
                                    girow[ow * sw + x - pw] += wv * grow[ow];
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    grad_in
}

/// Gradient of [`conv_forward`] with respect to the weights.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_backward_weight<T: Element>(
    grad_out: &[T],
    out_ch: usize,
    out_ext: [usize; 3],
    input: &[T],
    in_ch: usize,
    in_ext: [usize; 3],
    g: &Geom,
) -> Vec<T> {
    let [kd, kh, kw] = g.kernel;
    let [sd, sh, sw] = g.stride;
    let [pd, ph, pw] = g.pad;
    let in_plane = in_ext[1] * in_ext[2];
    let out_plane = out_ext[1] * out_ext[2];
    let (wi, wo) = (in_ext[2], out_ext[2]);
    let taps = kd * kh * kw;
    let mut grad_w = vec![T::zero(); out_ch * in_ch * taps];
    grad_w.par_chunks_mut(taps).enumerate().for_each(|(pair, gw)| {
        let co = pair / in_ch;
        let ci = pair % in_ch;
        for od in 0..out_ext[0] {
            let go_sl = &grad_out[(co * out_ext[0] + od) * out_plane..][..out_plane];
            for z in 0..kd {
                let Some(id) = tap(od, sd, z, pd, in_ext[0]) else {
                    continue;
                };
                let in_sl = &input[(ci * in_ext[0] + id) * in_plane..][..in_plane];
                for y in 0..kh {
                    for x in 0..kw {
                        let (lo, hi) = valid_range(wo, sw, x, pw, wi);
                        if lo >= hi {
                            continue;
                        }
                        let mut acc = T::zero();
                        for oh in 0..out_ext[1] {
                            let Some(ih) = tap(oh, sh, y, ph, in_ext[1]) else {
                                continue;
                            };
                            let grow = &go_sl[oh * wo..(oh + 1) * wo];
                            let irow = &in_sl[ih * wi..(ih + 1) * wi];
                            if sw == 1 {
                                let shift = lo + x - pw;
                                for (&go, &i) in grow[lo..hi].iter().zip(&irow[shift..]) {
                                    acc += go * i;
                                }
                            } else {
                                for ow in lo..hi {
                                    acc += grow[ow] * irow[ow * sw + x - pw];
                                }
                            }
                        }
                        gw[(z * kh + y) * kw + x] += acc;
                    }
                }
            }
        }
    });
    grad_w
}
