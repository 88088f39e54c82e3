//! Training losses: non-saturating adversarial terms with a stable softplus,
//! L1 pixel reconstruction, gradient penalty on real transitions, and an
//! attention-saliency supervision term tying the denoiser's decoder attention
//! to a frozen autoencoder's.

use ndarray::{Array1, Array4, Axis, Dimension};

use crate::nn::attention::AttentionRecord;
use crate::nn::functional::{bilinear_resize, bilinear_resize_backward, sigmoid_scalar, softplus_scalar};
use crate::nn::Scalar;
use crate::{Error, Result};

fn ensure_finite<F: Scalar>(name: &str, it: impl IntoIterator<Item = F>) -> Result<()> {
    for v in it {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("{name} contains a non-finite value")));
        }
    }
    Ok(())
}

/// Discriminator objective: mean softplus(-real) + softplus(fake).
pub fn d_loss<F: Scalar>(real: &Array1<F>, fake: &Array1<F>) -> Result<F> {
    Ok(d_loss_grads(real, fake)?.0)
}

/// Loss plus gradients with respect to both logit vectors.
pub fn d_loss_grads<F: Scalar>(
    real: &Array1<F>,
    fake: &Array1<F>,
) -> Result<(F, Array1<F>, Array1<F>)> {
    if real.len() != fake.len() || real.is_empty() {
        return Err(Error::ShapeMismatch(format!(
            "logit batches {} vs {}",
            real.len(),
            fake.len()
        )));
    }
    ensure_finite("real logits", real.iter().copied())?;
    ensure_finite("fake logits", fake.iter().copied())?;
    let n = F::from_f64(real.len() as f64);
    let mut loss = F::zero();
    let mut g_real = Array1::zeros(real.len());
    let mut g_fake = Array1::zeros(fake.len());
    for i in 0..real.len() {
        loss += softplus_scalar(-real[i]) + softplus_scalar(fake[i]);
        g_real[i] = -sigmoid_scalar(-real[i]) / n;
        g_fake[i] = sigmoid_scalar(fake[i]) / n;
    }
    Ok((loss / n, g_real, g_fake))
}

/// Non-saturating generator objective: mean softplus(-fake).
pub fn g_adv_loss<F: Scalar>(fake: &Array1<F>) -> Result<F> {
    Ok(g_adv_grads(fake)?.0)
}

pub fn g_adv_grads<F: Scalar>(fake: &Array1<F>) -> Result<(F, Array1<F>)> {
    if fake.is_empty() {
        return Err(Error::ShapeMismatch("empty logit batch".into()));
    }
    ensure_finite("fake logits", fake.iter().copied())?;
    let n = F::from_f64(fake.len() as f64);
    let mut loss = F::zero();
    let mut g = Array1::zeros(fake.len());
    for i in 0..fake.len() {
        loss += softplus_scalar(-fake[i]);
        g[i] = -sigmoid_scalar(-fake[i]) / n;
    }
    Ok((loss / n, g))
}

/// Mean absolute error over all elements.
pub fn l1_loss<F: Scalar, D: Dimension>(
    a: &ndarray::Array<F, D>,
    b: &ndarray::Array<F, D>,
) -> Result<F> {
    Ok(l1_grads(a, b)?.0)
}

/// Loss and its gradient with respect to `a` (sign convention d|a-b|/da).
pub fn l1_grads<F: Scalar, D: Dimension>(
    a: &ndarray::Array<F, D>,
    b: &ndarray::Array<F, D>,
) -> Result<(F, ndarray::Array<F, D>)> {
    if a.raw_dim() != b.raw_dim() {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    if a.is_empty() {
        return Err(Error::ShapeMismatch("empty arrays".into()));
    }
    let n = F::from_f64(a.len() as f64);
    let mut loss = F::zero();
    let mut g = ndarray::Array::zeros(a.raw_dim());
    ndarray::Zip::from(&mut g).and(a).and(b).for_each(|gv, &av, &bv| {
        let d = av - bv;
        loss += d.abs();
        *gv = if d > F::zero() {
            F::one() / n
        } else if d < F::zero() {
            -F::one() / n
        } else {
            F::zero()
        };
    });
    Ok((loss / n, g))
}

/// Gradient penalty gamma/2 * mean_b ||grad_b||^2 from a per-sample input
/// gradient map of the discriminator logit.
pub fn r1_penalty<F: Scalar>(grad: &Array4<F>, gamma: f64) -> F {
    let b = grad.dim().0.max(1);
    let mut acc = F::zero();
    for v in grad.iter() {
        acc += *v * *v;
    }
    F::from_f64(gamma / 2.0 / b as f64) * acc
}

/// Saliency of a set of attention records: per layer, average the raw
/// weights over heads and queries into a per-key map, reshape to the layer's
/// spatial grid, upsample bilinearly to (oh, ow), then average layers.
/// Output is [B, 1, oh, ow]; uniform attention at a layer contributes the
/// constant 1/(h*w).
pub fn attention_saliency<F: Scalar>(
    records: &[&AttentionRecord<F>],
    oh: usize,
    ow: usize,
) -> Result<Array4<F>> {
    if records.is_empty() {
        return Err(Error::ShapeMismatch("no attention records".into()));
    }
    let b = records[0].raw.dim().0;
    let mut acc: Array4<F> = Array4::zeros((b, 1, oh, ow));
    for r in records {
        let (rb, heads, qn, kn) = r.raw.dim();
        if rb != b {
            return Err(Error::ShapeMismatch("record batch sizes differ".into()));
        }
        if heads != r.heads || qn != r.h * r.w || kn != r.h * r.w {
            return Err(Error::ShapeMismatch(format!(
                "record {} geometry does not match its raw tensor",
                r.layer_id
            )));
        }
        ensure_finite("attention weights", r.raw.iter().copied())?;
        // Mean over heads and queries leaves one weight per key position.
        let inv = F::from_f64(1.0 / (heads * qn) as f64);
        let per_key = r.raw.sum_axis(Axis(1)).sum_axis(Axis(1)).mapv(|v| v * inv);
        let small = per_key.into_shape_with_order((b, 1, r.h, r.w)).unwrap();
        acc += &bilinear_resize(&small, oh, ow);
    }
    let scale = F::from_f64(1.0 / records.len() as f64);
    Ok(acc.mapv(|v| v * scale))
}

/// Mean absolute gap between the two saliency maps at the output grid.
pub fn fa_loss<F: Scalar>(
    gen_records: &[AttentionRecord<F>],
    ae_records: &[AttentionRecord<F>],
    oh: usize,
    ow: usize,
) -> Result<F> {
    Ok(fa_loss_with_grads(gen_records, ae_records, oh, ow)?.0)
}

/// Loss plus gradients on each generator record's raw weights (the reference
/// records are treated as constants).
pub fn fa_loss_with_grads<F: Scalar>(
    gen_records: &[AttentionRecord<F>],
    ae_records: &[AttentionRecord<F>],
    oh: usize,
    ow: usize,
) -> Result<(F, Vec<Array4<F>>)> {
    if gen_records.len() != ae_records.len() {
        return Err(Error::ShapeMismatch(format!(
            "attention layer counts differ: {} vs {}",
            gen_records.len(),
            ae_records.len()
        )));
    }
    for (g, a) in gen_records.iter().zip(ae_records.iter()) {
        if (g.heads, g.h, g.w) != (a.heads, a.h, a.w) {
            return Err(Error::ShapeMismatch(format!(
                "attention geometry differs at {} vs {}",
                g.layer_id, a.layer_id
            )));
        }
    }
    let gen_refs: Vec<&AttentionRecord<F>> = gen_records.iter().collect();
    let ae_refs: Vec<&AttentionRecord<F>> = ae_records.iter().collect();
    let w_gen = attention_saliency(&gen_refs, oh, ow)?;
    let w_ae = attention_saliency(&ae_refs, oh, ow)?;
    let (loss, g_w) = l1_grads(&w_gen, &w_ae)?;

    // Chain back through layer averaging, upsampling, and the double mean.
    let layers = F::from_f64(1.0 / gen_records.len() as f64);
    let mut g_raws = Vec::with_capacity(gen_records.len());
    for r in gen_records {
        let (b, heads, qn, _) = r.raw.dim();
        let g_small = bilinear_resize_backward(&g_w.mapv(|v| v * layers), r.h, r.w);
        let per_key_scale = F::from_f64(1.0 / (heads * qn) as f64);
        let mut g_raw = Array4::zeros(r.raw.raw_dim());
        for bi in 0..b {
            for hd in 0..heads {
                for q in 0..qn {
                    for ky in 0..r.h {
                        for kx in 0..r.w {
                            g_raw[[bi, hd, q, ky * r.w + kx]] =
                                g_small[[bi, 0, ky, kx]] * per_key_scale;
                        }
                    }
                }
            }
        }
        g_raws.push(g_raw);
    }
    Ok((loss, g_raws))
}

/// Weighted generator objective with its components kept visible.
#[derive(Debug, Clone, Copy)]
pub struct LossReport<F: Scalar> {
    pub adv: F,
    pub l1: F,
    pub fa: F,
    pub total: F,
}

/// total = adv + lambda1 * l1 + lambda2 * fa, evaluated in this exact order.
pub fn total_generator_loss<F: Scalar>(
    adv: F,
    l1: F,
    fa: F,
    lambda1: f64,
    lambda2: f64,
) -> LossReport<F> {
    let total = adv + F::from_f64(lambda1) * l1 + F::from_f64(lambda2) * fa;
    LossReport { adv, l1, fa, total }
}
