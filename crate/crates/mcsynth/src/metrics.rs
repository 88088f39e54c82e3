//! Image fidelity metrics. Inputs are single images `[H, W]` or batches
//! `[B, C, H, W]`; accumulation is always f64. Callers are expected to pass
//! images in display range (ours are [0, 1] after denormalization).

use ndarray::{s, Array2, Array4, ArrayView2};

use crate::nn::Scalar;
use crate::{Error, Result};

const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;
const SSIM_WIN: usize = 11;
const SSIM_SIGMA: f64 = 1.5;

/// Peak signal-to-noise ratio in dB; identical images give `+inf`.
pub fn psnr<F: Scalar>(x: &ArrayView2<F>, y: &ArrayView2<F>, data_range: f64) -> Result<f64> {
    if x.dim() != y.dim() {
        return Err(Error::ShapeMismatch(format!("psnr: {:?} vs {:?}", x.dim(), y.dim())));
    }
    if data_range <= 0.0 || !data_range.is_finite() {
        return Err(Error::Config(format!("psnr: data_range must be positive, got {data_range}")));
    }
    let n = x.len() as f64;
    let mut mse = 0.0f64;
    for (a, b) in x.iter().zip(y.iter()) {
        let d = a.as_f64() - b.as_f64();
        mse += d * d;
    }
    mse /= n;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (data_range * data_range / mse).log10())
}

fn gaussian_kernel(win: usize, sigma: f64) -> Vec<f64> {
    let c = (win - 1) as f64 / 2.0;
    let mut k: Vec<f64> = (0..win)
        .map(|i| {
            let d = i as f64 - c;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = k.iter().sum();
    for v in k.iter_mut() {
        *v /= s;
    }
    k
}

/// Separable valid-mode convolution with a symmetric 1-D kernel.
fn conv_valid_sep(img: &Array2<f64>, k: &[f64]) -> Array2<f64> {
    let (h, w) = img.dim();
    let win = k.len();
    let (oh, ow) = (h - win + 1, w - win + 1);
    let mut rows = Array2::zeros((h, ow));
    for y in 0..h {
        for x in 0..ow {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                acc += img[[y, x + i]] * kv;
            }
            rows[[y, x]] = acc;
        }
    }
    let mut out = Array2::zeros((oh, ow));
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                acc += rows[[y + i, x]] * kv;
            }
            out[[y, x]] = acc;
        }
    }
    out
}

/// Structural similarity with a Gaussian window, averaged over all fully
/// valid window positions.
///
/// The window is 11x11 (sigma 1.5) when the image allows it; on smaller
/// images it shrinks to the largest odd size that fits, with sigma scaled
/// proportionally. Images narrower than 3 pixels are rejected.
pub fn ssim<F: Scalar>(x: &ArrayView2<F>, y: &ArrayView2<F>, data_range: f64) -> Result<f64> {
    if x.dim() != y.dim() {
        return Err(Error::ShapeMismatch(format!("ssim: {:?} vs {:?}", x.dim(), y.dim())));
    }
    if data_range <= 0.0 || !data_range.is_finite() {
        return Err(Error::Config(format!("ssim: data_range must be positive, got {data_range}")));
    }
    let (h, w) = x.dim();
    let min_side = h.min(w);
    if min_side < 3 {
        return Err(Error::ShapeMismatch(format!(
            "ssim: image {h}x{w} too small, need at least 3x3"
        )));
    }
    let win = if min_side >= SSIM_WIN {
        SSIM_WIN
    } else if min_side % 2 == 1 {
        min_side
    } else {
        min_side - 1
    };
    let sigma = SSIM_SIGMA * win as f64 / SSIM_WIN as f64;
    let k = gaussian_kernel(win, sigma);

    let xf = x.mapv(|v| v.as_f64());
    let yf = y.mapv(|v| v.as_f64());
    let mu_x = conv_valid_sep(&xf, &k);
    let mu_y = conv_valid_sep(&yf, &k);
    let xx = conv_valid_sep(&(&xf * &xf), &k);
    let yy = conv_valid_sep(&(&yf * &yf), &k);
    let xy = conv_valid_sep(&(&xf * &yf), &k);

    let c1 = (SSIM_K1 * data_range).powi(2);
    let c2 = (SSIM_K2 * data_range).powi(2);
    let mut acc = 0.0;
    let n = mu_x.len() as f64;
    for ((((mx, my), sxx), syy), sxy) in
        mu_x.iter().zip(mu_y.iter()).zip(xx.iter()).zip(yy.iter()).zip(xy.iter())
    {
        let var_x = sxx - mx * mx;
        let var_y = syy - my * my;
        let cov = sxy - mx * my;
        let num = (2.0 * mx * my + c1) * (2.0 * cov + c2);
        let den = (mx * mx + my * my + c1) * (var_x + var_y + c2);
        acc += num / den;
    }
    Ok(acc / n)
}

/// Per-sample metrics over a batch; PSNR pools squared error over channels,
/// SSIM averages the per-channel scores.
pub fn psnr_batch<F: Scalar>(x: &Array4<F>, y: &Array4<F>, data_range: f64) -> Result<Vec<f64>> {
    if x.dim() != y.dim() {
        return Err(Error::ShapeMismatch(format!("psnr_batch: {:?} vs {:?}", x.dim(), y.dim())));
    }
    let (b, c, h, w) = x.dim();
    let mut out = Vec::with_capacity(b);
    for bi in 0..b {
        let n = (c * h * w) as f64;
        let mut mse = 0.0;
        for (a, bb) in x.slice(s![bi, .., .., ..]).iter().zip(y.slice(s![bi, .., .., ..]).iter())
        {
            let d = a.as_f64() - bb.as_f64();
            mse += d * d;
        }
        mse /= n;
        out.push(if mse == 0.0 {
            f64::INFINITY
        } else {
            10.0 * (data_range * data_range / mse).log10()
        });
    }
    Ok(out)
}

pub fn ssim_batch<F: Scalar>(x: &Array4<F>, y: &Array4<F>, data_range: f64) -> Result<Vec<f64>> {
    if x.dim() != y.dim() {
        return Err(Error::ShapeMismatch(format!("ssim_batch: {:?} vs {:?}", x.dim(), y.dim())));
    }
    let (b, c, _, _) = x.dim();
    let mut out = Vec::with_capacity(b);
    for bi in 0..b {
        let mut acc = 0.0;
        for ci in 0..c {
            acc += ssim(&x.slice(s![bi, ci, .., ..]), &y.slice(s![bi, ci, .., ..]), data_range)?;
        }
        out.push(acc / c as f64);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricSummary {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

/// Mean and sample standard deviation; a single value gets std 0.
pub fn summarize(values: &[f64]) -> MetricSummary {
    let n = values.len();
    assert!(n > 0, "summarize needs at least one value");
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = if n > 1 {
        (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    MetricSummary { mean, std, n }
}
