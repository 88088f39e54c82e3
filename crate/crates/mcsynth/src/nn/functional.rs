//! Elementwise activations, softmax, pooling, resampling, and the im2col /
//! col2im pair backing convolution. Every op that participates in training
//! has a matching `*_backward`.

use ndarray::{s, Array2, Array4, ArrayView2, ArrayView3, ArrayViewMut3, Dimension};

use super::Scalar;

/// Numerically stable logistic function.
pub fn sigmoid_scalar<F: Scalar>(v: F) -> F {
    if v >= F::zero() {
        F::one() / (F::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (F::one() + e)
    }
}

/// Numerically stable softplus: max(x, 0) + ln(1 + exp(-|x|)).
pub fn softplus_scalar<F: Scalar>(v: F) -> F {
    v.max(F::zero()) + (F::one() + (-v.abs()).exp()).ln()
}

pub fn silu<F: Scalar, D: Dimension>(x: &ndarray::Array<F, D>) -> ndarray::Array<F, D> {
    x.mapv(|v| v * sigmoid_scalar(v))
}

pub fn silu_backward<F: Scalar, D: Dimension>(
    g: &ndarray::Array<F, D>,
    x: &ndarray::Array<F, D>,
) -> ndarray::Array<F, D> {
    let mut out = g.clone();
    ndarray::Zip::from(&mut out).and(x).for_each(|o, &v| {
        let s = sigmoid_scalar(v);
        *o = *o * s * (F::one() + v * (F::one() - s));
    });
    out
}

pub fn tanh_forward<F: Scalar, D: Dimension>(x: &ndarray::Array<F, D>) -> ndarray::Array<F, D> {
    x.mapv(|v| v.tanh())
}

/// Backward through tanh given the forward *output* y.
pub fn tanh_backward<F: Scalar, D: Dimension>(
    g: &ndarray::Array<F, D>,
    y: &ndarray::Array<F, D>,
) -> ndarray::Array<F, D> {
    let mut out = g.clone();
    ndarray::Zip::from(&mut out).and(y).for_each(|o, &v| {
        *o = *o * (F::one() - v * v);
    });
    out
}

pub fn sigmoid_array<F: Scalar, D: Dimension>(x: &ndarray::Array<F, D>) -> ndarray::Array<F, D> {
    x.mapv(sigmoid_scalar)
}

/// Backward through the logistic function given the forward *output* y.
pub fn sigmoid_backward<F: Scalar, D: Dimension>(
    g: &ndarray::Array<F, D>,
    y: &ndarray::Array<F, D>,
) -> ndarray::Array<F, D> {
    let mut out = g.clone();
    ndarray::Zip::from(&mut out).and(y).for_each(|o, &v| {
        *o = *o * v * (F::one() - v);
    });
    out
}

/// Row-wise softmax, in place, with max subtraction.
pub fn softmax_rows_inplace<F: Scalar>(m: &mut Array2<F>) {
    for mut row in m.rows_mut() {
        let mx = row.iter().cloned().fold(F::neg_infinity(), F::max);
        let mut sum = F::zero();
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
}

/// Backward through row-wise softmax given output y: dy ⊙ y - y * rowsum(dy ⊙ y).
pub fn softmax_rows_backward<F: Scalar>(g: &ArrayView2<F>, y: &ArrayView2<F>) -> Array2<F> {
    let mut out = Array2::zeros(g.raw_dim());
    for (mut orow, (grow, yrow)) in
        out.rows_mut().into_iter().zip(g.rows().into_iter().zip(y.rows()))
    {
        let mut dot = F::zero();
        for (gv, yv) in grow.iter().zip(yrow.iter()) {
            dot += *gv * *yv;
        }
        for ((ov, gv), yv) in orow.iter_mut().zip(grow.iter()).zip(yrow.iter()) {
            *ov = *yv * (*gv - dot);
        }
    }
    out
}

pub fn all_finite<F: Scalar, D: Dimension>(x: &ndarray::Array<F, D>) -> bool {
    x.iter().all(|v| v.is_finite())
}

/// Output spatial size of a convolution.
pub fn conv_out_size(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - k) / stride + 1
}

/// Unrolls one sample [C,H,W] into a [OH*OW, C*k*k] matrix.
pub fn im2col<F: Scalar>(
    x: &ArrayView3<F>,
    k: usize,
    stride: usize,
    pad: usize,
    cols: &mut Array2<F>,
) {
    let (c_in, h, w) = x.dim();
    let oh = conv_out_size(h, k, stride, pad);
    let ow = conv_out_size(w, k, stride, pad);
    debug_assert_eq!(cols.dim(), (oh * ow, c_in * k * k));
    let zero = F::zero();
    for oy in 0..oh {
        for ox in 0..ow {
            let row = oy * ow + ox;
            let iy0 = (oy * stride) as isize - pad as isize;
            let ix0 = (ox * stride) as isize - pad as isize;
            for c in 0..c_in {
                let base = c * k * k;
                for ky in 0..k {
                    let iy = iy0 + ky as isize;
                    for kx in 0..k {
                        let ix = ix0 + kx as isize;
                        let v = if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                            x[[c, iy as usize, ix as usize]]
                        } else {
                            zero
                        };
                        cols[[row, base + ky * k + kx]] = v;
                    }
                }
            }
        }
    }
}

/// Scatter-adds a [OH*OW, C*k*k] column gradient back onto the input layout.
pub fn col2im_add<F: Scalar>(
    cols: &ArrayView2<F>,
    k: usize,
    stride: usize,
    pad: usize,
    dx: &mut ArrayViewMut3<F>,
) {
    let (c_in, h, w) = dx.dim();
    let oh = conv_out_size(h, k, stride, pad);
    let ow = conv_out_size(w, k, stride, pad);
    debug_assert_eq!(cols.dim(), (oh * ow, c_in * k * k));
    for oy in 0..oh {
        for ox in 0..ow {
            let row = oy * ow + ox;
            let iy0 = (oy * stride) as isize - pad as isize;
            let ix0 = (ox * stride) as isize - pad as isize;
            for c in 0..c_in {
                let base = c * k * k;
                for ky in 0..k {
                    let iy = iy0 + ky as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = ix0 + kx as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        dx[[c, iy as usize, ix as usize]] += cols[[row, base + ky * k + kx]];
                    }
                }
            }
        }
    }
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample_nearest2<F: Scalar>(x: &Array4<F>) -> Array4<F> {
    let (b, c, h, w) = x.dim();
    let mut out = Array4::zeros((b, c, h * 2, w * 2));
    for bi in 0..b {
        for ci in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let v = x[[bi, ci, y, xx]];
                    out[[bi, ci, 2 * y, 2 * xx]] = v;
                    out[[bi, ci, 2 * y, 2 * xx + 1]] = v;
                    out[[bi, ci, 2 * y + 1, 2 * xx]] = v;
                    out[[bi, ci, 2 * y + 1, 2 * xx + 1]] = v;
                }
            }
        }
    }
    out
}

pub fn upsample_nearest2_backward<F: Scalar>(g: &Array4<F>) -> Array4<F> {
    let (b, c, h2, w2) = g.dim();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut out = Array4::zeros((b, c, h, w));
    for bi in 0..b {
        for ci in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    out[[bi, ci, y, xx]] = g[[bi, ci, 2 * y, 2 * xx]]
                        + g[[bi, ci, 2 * y, 2 * xx + 1]]
                        + g[[bi, ci, 2 * y + 1, 2 * xx]]
                        + g[[bi, ci, 2 * y + 1, 2 * xx + 1]];
                }
            }
        }
    }
    out
}

fn bilinear_taps(out_len: usize, in_len: usize) -> Vec<(usize, usize, f64)> {
    // Half-pixel-centre convention; returns (lo, hi, weight of hi) per output index.
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = (o as f64 + 0.5) * scale - 0.5;
            let src = src.max(0.0).min((in_len - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(in_len - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

/// Bilinear resize to an arbitrary target size (half-pixel centres, clamped).
pub fn bilinear_resize<F: Scalar>(x: &Array4<F>, oh: usize, ow: usize) -> Array4<F> {
    let (b, c, h, w) = x.dim();
    let ytaps = bilinear_taps(oh, h);
    let xtaps = bilinear_taps(ow, w);
    let mut out = Array4::zeros((b, c, oh, ow));
    for bi in 0..b {
        for ci in 0..c {
            for (oy, &(y0, y1, fy)) in ytaps.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in xtaps.iter().enumerate() {
                    let v00 = x[[bi, ci, y0, x0]].as_f64();
                    let v01 = x[[bi, ci, y0, x1]].as_f64();
                    let v10 = x[[bi, ci, y1, x0]].as_f64();
                    let v11 = x[[bi, ci, y1, x1]].as_f64();
                    let top = v00 * (1.0 - fx) + v01 * fx;
                    let bot = v10 * (1.0 - fx) + v11 * fx;
                    out[[bi, ci, oy, ox]] = F::from_f64(top * (1.0 - fy) + bot * fy);
                }
            }
        }
    }
    out
}

/// Transpose of [`bilinear_resize`]: scatters output-space gradients back to
/// the input grid.
pub fn bilinear_resize_backward<F: Scalar>(g: &Array4<F>, ih: usize, iw: usize) -> Array4<F> {
    let (b, c, oh, ow) = g.dim();
    let ytaps = bilinear_taps(oh, ih);
    let xtaps = bilinear_taps(ow, iw);
    let mut out = Array4::zeros((b, c, ih, iw));
    for bi in 0..b {
        for ci in 0..c {
            for (oy, &(y0, y1, fy)) in ytaps.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in xtaps.iter().enumerate() {
                    let gv = g[[bi, ci, oy, ox]].as_f64();
                    out[[bi, ci, y0, x0]] += F::from_f64(gv * (1.0 - fy) * (1.0 - fx));
                    out[[bi, ci, y0, x1]] += F::from_f64(gv * (1.0 - fy) * fx);
                    out[[bi, ci, y1, x0]] += F::from_f64(gv * fy * (1.0 - fx));
                    out[[bi, ci, y1, x1]] += F::from_f64(gv * fy * fx);
                }
            }
        }
    }
    out
}

/// Global average pooling over the spatial axes: [B,C,H,W] -> [B,C].
pub fn global_avg_pool<F: Scalar>(x: &Array4<F>) -> Array2<F> {
    let (b, c, h, w) = x.dim();
    let inv = F::from_f64(1.0 / (h * w) as f64);
    let mut out = Array2::zeros((b, c));
    for bi in 0..b {
        for ci in 0..c {
            let mut acc = F::zero();
            for v in x.slice(s![bi, ci, .., ..]).iter() {
                acc += *v;
            }
            out[[bi, ci]] = acc * inv;
        }
    }
    out
}

pub fn global_avg_pool_backward<F: Scalar>(g: &Array2<F>, h: usize, w: usize) -> Array4<F> {
    let (b, c) = g.dim();
    let inv = F::from_f64(1.0 / (h * w) as f64);
    let mut out = Array4::zeros((b, c, h, w));
    for bi in 0..b {
        for ci in 0..c {
            out.slice_mut(s![bi, ci, .., ..]).fill(g[[bi, ci]] * inv);
        }
    }
    out
}

/// Broadcasts a [B,C] vector across the spatial grid.
pub fn broadcast_spatial<F: Scalar>(v: &Array2<F>, h: usize, w: usize) -> Array4<F> {
    let (b, c) = v.dim();
    let mut out = Array4::zeros((b, c, h, w));
    for bi in 0..b {
        for ci in 0..c {
            out.slice_mut(s![bi, ci, .., ..]).fill(v[[bi, ci]]);
        }
    }
    out
}
