//! Trainable layers. Each layer owns `ParamId` handles into a shared
//! `ParamStore`; forward passes return whatever cache the matching backward
//! needs. Backwards accumulate into `Grads` (never overwrite), so one buffer
//! can collect gradients across an arbitrary graph.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, Array4, Ix1, Ix2};
use rand_chacha::ChaCha8Rng;

use super::functional::{col2im_add, conv_out_size, im2col};
use super::params::{init_bias, init_kaiming, init_zeros, Grads, ParamId, ParamStore};
use super::Scalar;

const GN_EPS: f64 = 1e-5;

/// Fully connected layer; weight layout [in, out].
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_features: usize,
        out_features: usize,
        bias: bool,
    ) -> Self {
        let w = store.register(
            format!("{name}.w"),
            init_kaiming(rng, &[in_features, out_features], in_features),
        );
        let b = bias
            .then(|| store.register(format!("{name}.b"), init_bias(rng, out_features, in_features)));
        Self { w, b, in_features, out_features }
    }

    /// Weight and bias start at zero; used where the layer must be an exact
    /// no-op at init (output projections, modulation heads, gates).
    pub fn new_zero_init<F: Scalar>(
        store: &mut ParamStore<F>,
        name: &str,
        in_features: usize,
        out_features: usize,
        bias: bool,
    ) -> Self {
        let w = store.register(format!("{name}.w"), init_zeros(&[in_features, out_features]));
        let b = bias.then(|| store.register(format!("{name}.b"), init_zeros(&[out_features])));
        Self { w, b, in_features, out_features }
    }

    pub fn forward<F: Scalar>(&self, store: &ParamStore<F>, x: &Array2<F>) -> Array2<F> {
        let w = store.value(self.w).view().into_dimensionality::<Ix2>().unwrap();
        let mut y = x.dot(&w);
        if let Some(bid) = self.b {
            let b = store.value(bid).view().into_dimensionality::<Ix1>().unwrap();
            y += &b;
        }
        y
    }

    /// `x` is the forward input. Returns the input gradient.
    pub fn backward<F: Scalar>(
        &self,
        store: &ParamStore<F>,
        grads: &mut Grads<F>,
        x: &Array2<F>,
        gy: &Array2<F>,
    ) -> Array2<F> {
        let w = store.value(self.w).view().into_dimensionality::<Ix2>().unwrap();
        {
            let gw = grads.slot_mut(self.w);
            let mut gw2 = gw.view_mut().into_dimensionality::<Ix2>().unwrap();
            general_mat_mul(F::one(), &x.t(), gy, F::one(), &mut gw2);
        }
        if let Some(bid) = self.b {
            let gb = grads.slot_mut(bid);
            let mut gb1 = gb.view_mut().into_dimensionality::<Ix1>().unwrap();
            for row in gy.rows() {
                gb1 += &row;
            }
        }
        gy.dot(&w.t())
    }
}

/// 2-D convolution via im2col and one matrix product per sample. Weight
/// layout [c_in*k*k, c_out] keeps the gemm operand contiguous.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let fan_in = c_in * k * k;
        let w = store.register(format!("{name}.w"), init_kaiming(rng, &[fan_in, c_out], fan_in));
        let b = Some(store.register(format!("{name}.b"), init_bias(rng, c_out, fan_in)));
        Self { w, b, c_in, c_out, k, stride, pad }
    }

    /// Zero weights and bias; the layer outputs exactly zero at init.
    pub fn new_zero_init<F: Scalar>(
        store: &mut ParamStore<F>,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let fan_in = c_in * k * k;
        let w = store.register(format!("{name}.w"), init_zeros(&[fan_in, c_out]));
        let b = Some(store.register(format!("{name}.b"), init_zeros(&[c_out])));
        Self { w, b, c_in, c_out, k, stride, pad }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (conv_out_size(h, self.k, self.stride, self.pad), conv_out_size(w, self.k, self.stride, self.pad))
    }

    pub fn forward<F: Scalar>(&self, store: &ParamStore<F>, x: &Array4<F>) -> Array4<F> {
        let (b, c_in, h, w) = x.dim();
        assert_eq!(c_in, self.c_in, "conv input channels");
        let (oh, ow) = self.out_hw(h, w);
        let wmat = store.value(self.w).view().into_dimensionality::<Ix2>().unwrap();
        let bias: Option<Array1<F>> = self.b.map(|bid| {
            store.value(bid).view().into_dimensionality::<Ix1>().unwrap().to_owned()
        });
        let mut out = Array4::zeros((b, self.c_out, oh, ow));
        let mut cols = Array2::zeros((oh * ow, self.c_in * self.k * self.k));
        for bi in 0..b {
            im2col(&x.slice(s![bi, .., .., ..]), self.k, self.stride, self.pad, &mut cols);
            let out_mat = cols.dot(&wmat); // [OH*OW, c_out]
            for co in 0..self.c_out {
                let add = bias.as_ref().map_or(F::zero(), |bv| bv[co]);
                let col = out_mat.column(co);
                let mut dst = out.slice_mut(s![bi, co, .., ..]);
                let dst_flat = dst.as_slice_mut().unwrap();
                for (d, &v) in dst_flat.iter_mut().zip(col.iter()) {
                    *d = v + add;
                }
            }
        }
        out
    }

    /// Recomputes im2col from the cached input instead of caching the column
    /// matrices; trades a little compute for a much smaller live set.
    pub fn backward<F: Scalar>(
        &self,
        store: &ParamStore<F>,
        grads: &mut Grads<F>,
        x: &Array4<F>,
        gy: &Array4<F>,
    ) -> Array4<F> {
        let (b, _, h, w) = x.dim();
        let (oh, ow) = self.out_hw(h, w);
        assert_eq!(gy.dim(), (b, self.c_out, oh, ow), "conv grad shape");
        let wmat =
            store.value(self.w).view().into_dimensionality::<Ix2>().unwrap().to_owned();
        let mut dx = Array4::zeros(x.raw_dim());
        let mut cols = Array2::zeros((oh * ow, self.c_in * self.k * self.k));
        let mut gmat = Array2::zeros((oh * ow, self.c_out));
        for bi in 0..b {
            for co in 0..self.c_out {
                let src = gy.slice(s![bi, co, .., ..]);
                let src_flat = src.to_owned();
                let src_flat = src_flat.as_slice().unwrap().to_vec();
                for (p, v) in src_flat.into_iter().enumerate() {
                    gmat[[p, co]] = v;
                }
            }
            im2col(&x.slice(s![bi, .., .., ..]), self.k, self.stride, self.pad, &mut cols);
            {
                let gw = grads.slot_mut(self.w);
                let mut gw2 = gw.view_mut().into_dimensionality::<Ix2>().unwrap();
                general_mat_mul(F::one(), &cols.t(), &gmat.view(), F::one(), &mut gw2);
            }
            if let Some(bid) = self.b {
                let gb = grads.slot_mut(bid);
                let mut gb1 = gb.view_mut().into_dimensionality::<Ix1>().unwrap();
                for row in gmat.rows() {
                    gb1 += &row;
                }
            }
            let gcols = gmat.dot(&wmat.t()); // [OH*OW, c_in*k*k]
            col2im_add(&gcols.view(), self.k, self.stride, self.pad, &mut dx.slice_mut(s![bi, .., .., ..]));
        }
        dx
    }
}

/// Group normalization with per-sample statistics, so results never depend
/// on batch composition.
#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub channels: usize,
    pub groups: usize,
}

pub struct GroupNormCache<F: Scalar> {
    xhat: Array4<F>,
    istd: Array2<F>, // [B, groups]
}

impl GroupNorm {
    /// Group count is the largest divisor of the channel count that is at
    /// most 8, so any width normalizes without remainder.
    pub fn new<F: Scalar>(store: &mut ParamStore<F>, name: &str, channels: usize) -> Self {
        let groups = (1..=channels.min(8)).rev().find(|g| channels % g == 0).unwrap();
        let gamma = store.register(format!("{name}.gamma"), super::params::init_ones(&[channels]));
        let beta = store.register(format!("{name}.beta"), init_zeros(&[channels]));
        Self { gamma, beta, channels, groups }
    }

    pub fn forward<F: Scalar>(
        &self,
        store: &ParamStore<F>,
        x: &Array4<F>,
    ) -> (Array4<F>, GroupNormCache<F>) {
        let (b, c, h, w) = x.dim();
        assert_eq!(c, self.channels, "groupnorm channels");
        let cpg = c / self.groups;
        let m = F::from_f64((cpg * h * w) as f64);
        let eps = F::from_f64(GN_EPS);
        let gamma = store.value(self.gamma).view().into_dimensionality::<Ix1>().unwrap();
        let beta = store.value(self.beta).view().into_dimensionality::<Ix1>().unwrap();
        let mut xhat = Array4::zeros(x.raw_dim());
        let mut istd = Array2::zeros((b, self.groups));
        let mut y = Array4::zeros(x.raw_dim());
        for bi in 0..b {
            for g in 0..self.groups {
                let c0 = g * cpg;
                let sl = x.slice(s![bi, c0..c0 + cpg, .., ..]);
                let mut mean = F::zero();
                for v in sl.iter() {
                    mean += *v;
                }
                mean = mean / m;
                let mut var = F::zero();
                for v in sl.iter() {
                    let d = *v - mean;
                    var += d * d;
                }
                var = var / m;
                let is = F::one() / (var + eps).sqrt();
                istd[[bi, g]] = is;
                for ci in 0..cpg {
                    let ch = c0 + ci;
                    let (ga, be) = (gamma[ch], beta[ch]);
                    for yy in 0..h {
                        for xx in 0..w {
                            let xh = (x[[bi, ch, yy, xx]] - mean) * is;
                            xhat[[bi, ch, yy, xx]] = xh;
                            y[[bi, ch, yy, xx]] = ga * xh + be;
                        }
                    }
                }
            }
        }
        (y, GroupNormCache { xhat, istd })
    }

    pub fn backward<F: Scalar>(
        &self,
        store: &ParamStore<F>,
        grads: &mut Grads<F>,
        cache: &GroupNormCache<F>,
        gy: &Array4<F>,
    ) -> Array4<F> {
        let (b, c, h, w) = gy.dim();
        let cpg = c / self.groups;
        let m = F::from_f64((cpg * h * w) as f64);
        let gamma = store.value(self.gamma).view().into_dimensionality::<Ix1>().unwrap();
        let mut dx = Array4::zeros(gy.raw_dim());
        {
            let ggamma = grads.slot_mut(self.gamma);
            let mut gg = ggamma.view_mut().into_dimensionality::<Ix1>().unwrap();
            for bi in 0..b {
                for ch in 0..c {
                    let mut acc = F::zero();
                    ndarray::Zip::from(gy.slice(s![bi, ch, .., ..]))
                        .and(cache.xhat.slice(s![bi, ch, .., ..]))
                        .for_each(|&g, &xh| acc += g * xh);
                    gg[ch] += acc;
                }
            }
        }
        {
            let gbeta = grads.slot_mut(self.beta);
            let mut gb = gbeta.view_mut().into_dimensionality::<Ix1>().unwrap();
            for bi in 0..b {
                for ch in 0..c {
                    gb[ch] += gy.slice(s![bi, ch, .., ..]).sum();
                }
            }
        }
        // dx = istd * (dxhat - mean(dxhat) - xhat * mean(dxhat .* xhat))
        for bi in 0..b {
            for g in 0..self.groups {
                let c0 = g * cpg;
                let is = cache.istd[[bi, g]];
                let mut sum_dxh = F::zero();
                let mut sum_dxh_xh = F::zero();
                for ci in 0..cpg {
                    let ch = c0 + ci;
                    let ga = gamma[ch];
                    ndarray::Zip::from(gy.slice(s![bi, ch, .., ..]))
                        .and(cache.xhat.slice(s![bi, ch, .., ..]))
                        .for_each(|&gv, &xh| {
                            let dxh = gv * ga;
                            sum_dxh += dxh;
                            sum_dxh_xh += dxh * xh;
                        });
                }
                let mean_dxh = sum_dxh / m;
                let mean_dxh_xh = sum_dxh_xh / m;
                for ci in 0..cpg {
                    let ch = c0 + ci;
                    let ga = gamma[ch];
                    for yy in 0..h {
                        for xx in 0..w {
                            let dxh = gy[[bi, ch, yy, xx]] * ga;
                            let xh = cache.xhat[[bi, ch, yy, xx]];
                            dx[[bi, ch, yy, xx]] =
                                is * (dxh - mean_dxh - xh * mean_dxh_xh);
                        }
                    }
                }
            }
        }
        dx
    }
}
