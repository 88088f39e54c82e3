//! Multi-head self-attention over spatial feature maps, with the residual
//! folded into the op. Every forward emits an `AttentionRecord` holding the
//! post-softmax weights, which downstream losses can both read and push
//! gradients back through.

use ndarray::{s, Array2, Array3, Array4, Ix2};
use rand_chacha::ChaCha8Rng;

use super::functional::{softmax_rows_backward, softmax_rows_inplace};
use super::params::{init_kaiming, init_zeros, Grads, ParamId, ParamStore};
use super::Scalar;

/// Post-softmax attention weights captured during a forward pass.
/// `raw` is [B, heads, HW, HW]; every row sums to 1.
#[derive(Debug, Clone)]
pub struct AttentionRecord<F: Scalar> {
    pub layer_id: String,
    pub heads: usize,
    pub h: usize,
    pub w: usize,
    pub raw: Array4<F>,
}

pub struct AttentionCache<F: Scalar> {
    x_flat: Array3<F>,
    q: Array3<F>,
    k: Array3<F>,
    v: Array3<F>,
    o: Array3<F>,
}

/// [B,C,H,W] -> [B, H*W, C]
pub fn nchw_to_nlc<F: Scalar>(x: &Array4<F>) -> Array3<F> {
    let (b, c, h, w) = x.dim();
    let mut out = Array3::zeros((b, h * w, c));
    for bi in 0..b {
        for ci in 0..c {
            for yy in 0..h {
                for xx in 0..w {
                    out[[bi, yy * w + xx, ci]] = x[[bi, ci, yy, xx]];
                }
            }
        }
    }
    out
}

/// [B, H*W, C] -> [B,C,H,W]
pub fn nlc_to_nchw<F: Scalar>(x: &Array3<F>, h: usize, w: usize) -> Array4<F> {
    let (b, _, c) = x.dim();
    let mut out = Array4::zeros((b, c, h, w));
    for bi in 0..b {
        for ci in 0..c {
            for yy in 0..h {
                for xx in 0..w {
                    out[[bi, ci, yy, xx]] = x[[bi, yy * w + xx, ci]];
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct SelfAttention {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub channels: usize,
    pub heads: usize,
    pub layer_id: String,
}

impl SelfAttention {
    /// Projections have no bias. The output projection starts at zero so the
    /// op is exactly the identity at init.
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
        name: &str,
        channels: usize,
        heads: usize,
    ) -> Self {
        assert_eq!(channels % heads, 0, "head count must divide channels");
        let wq = store.register(format!("{name}.wq"), init_kaiming(rng, &[channels, channels], channels));
        let wk = store.register(format!("{name}.wk"), init_kaiming(rng, &[channels, channels], channels));
        let wv = store.register(format!("{name}.wv"), init_kaiming(rng, &[channels, channels], channels));
        let wo = store.register(format!("{name}.wo"), init_zeros(&[channels, channels]));
        Self { wq, wk, wv, wo, channels, heads, layer_id: name.to_string() }
    }

    pub fn forward<F: Scalar>(
        &self,
        store: &ParamStore<F>,
        x: &Array4<F>,
    ) -> (Array4<F>, AttentionRecord<F>, AttentionCache<F>) {
        let (b, c, h, w) = x.dim();
        assert_eq!(c, self.channels, "attention channels");
        let hw = h * w;
        let d = c / self.heads;
        let scale = F::from_f64(1.0 / (d as f64).sqrt());
        let wq = store.value(self.wq).view().into_dimensionality::<Ix2>().unwrap();
        let wk = store.value(self.wk).view().into_dimensionality::<Ix2>().unwrap();
        let wv = store.value(self.wv).view().into_dimensionality::<Ix2>().unwrap();
        let wo = store.value(self.wo).view().into_dimensionality::<Ix2>().unwrap();

        let x_flat = nchw_to_nlc(x);
        let mut q = Array3::zeros((b, hw, c));
        let mut k = Array3::zeros((b, hw, c));
        let mut v = Array3::zeros((b, hw, c));
        let mut o = Array3::zeros((b, hw, c));
        let mut raw = Array4::zeros((b, self.heads, hw, hw));
        let mut y_flat = x_flat.clone();
        for bi in 0..b {
            let f = x_flat.slice(s![bi, .., ..]);
            q.slice_mut(s![bi, .., ..]).assign(&f.dot(&wq));
            k.slice_mut(s![bi, .., ..]).assign(&f.dot(&wk));
            v.slice_mut(s![bi, .., ..]).assign(&f.dot(&wv));
            for hd in 0..self.heads {
                let cols = hd * d..(hd + 1) * d;
                let qh = q.slice(s![bi, .., cols.clone()]);
                let kh = k.slice(s![bi, .., cols.clone()]);
                let vh = v.slice(s![bi, .., cols.clone()]);
                let mut a: Array2<F> = qh.dot(&kh.t());
                a.mapv_inplace(|t| t * scale);
                softmax_rows_inplace(&mut a);
                o.slice_mut(s![bi, .., cols]).assign(&a.dot(&vh));
                raw.slice_mut(s![bi, hd, .., ..]).assign(&a);
            }
            let proj = o.slice(s![bi, .., ..]).dot(&wo);
            let mut yrow = y_flat.slice_mut(s![bi, .., ..]);
            yrow += &proj;
        }
        let y = nlc_to_nchw(&y_flat, h, w);
        let record =
            AttentionRecord { layer_id: self.layer_id.clone(), heads: self.heads, h, w, raw };
        let cache = AttentionCache { x_flat, q, k, v, o };
        (y, record, cache)
    }

    /// `g_raw`, when given, is a loss gradient on the recorded post-softmax
    /// weights ([B, heads, HW, HW]); it joins the in-op gradient before the
    /// softmax backward.
    pub fn backward<F: Scalar>(
        &self,
        store: &ParamStore<F>,
        grads: &mut Grads<F>,
        cache: &AttentionCache<F>,
        record: &AttentionRecord<F>,
        gy: &Array4<F>,
        g_raw: Option<&Array4<F>>,
    ) -> Array4<F> {
        let (b, hw, c) = cache.x_flat.dim();
        let d = c / self.heads;
        let scale = F::from_f64(1.0 / (d as f64).sqrt());
        let wq = store.value(self.wq).view().into_dimensionality::<Ix2>().unwrap().to_owned();
        let wk = store.value(self.wk).view().into_dimensionality::<Ix2>().unwrap().to_owned();
        let wv = store.value(self.wv).view().into_dimensionality::<Ix2>().unwrap().to_owned();
        let wo = store.value(self.wo).view().into_dimensionality::<Ix2>().unwrap().to_owned();

        let gy_flat = nchw_to_nlc(gy);
        let mut gx_flat = gy_flat.clone(); // residual branch
        for bi in 0..b {
            let gyb = gy_flat.slice(s![bi, .., ..]);
            let ob = cache.o.slice(s![bi, .., ..]);
            {
                let gwo = grads.slot_mut(self.wo);
                let mut gwo2 = gwo.view_mut().into_dimensionality::<Ix2>().unwrap();
                ndarray::linalg::general_mat_mul(F::one(), &ob.t(), &gyb, F::one(), &mut gwo2);
            }
            let go = gyb.dot(&wo.t()); // [HW, C]
            let mut gq = Array2::<F>::zeros((hw, c));
            let mut gk = Array2::<F>::zeros((hw, c));
            let mut gv = Array2::<F>::zeros((hw, c));
            for hd in 0..self.heads {
                let cols = hd * d..(hd + 1) * d;
                let a = record.raw.slice(s![bi, hd, .., ..]);
                let qh = cache.q.slice(s![bi, .., cols.clone()]);
                let kh = cache.k.slice(s![bi, .., cols.clone()]);
                let vh = cache.v.slice(s![bi, .., cols.clone()]);
                let goh = go.slice(s![.., cols.clone()]);
                let mut ga: Array2<F> = goh.dot(&vh.t());
                if let Some(gr) = g_raw {
                    ga += &gr.slice(s![bi, hd, .., ..]);
                }
                let gvh = a.t().dot(&goh);
                let gs = softmax_rows_backward(&ga.view(), &a);
                let mut gqh = gs.dot(&kh);
                gqh.mapv_inplace(|t| t * scale);
                let mut gkh = gs.t().dot(&qh);
                gkh.mapv_inplace(|t| t * scale);
                gq.slice_mut(s![.., cols.clone()]).assign(&gqh);
                gk.slice_mut(s![.., cols.clone()]).assign(&gkh);
                gv.slice_mut(s![.., cols]).assign(&gvh);
            }
            let f = cache.x_flat.slice(s![bi, .., ..]);
            for (wid, gmat) in [(self.wq, &gq), (self.wk, &gk), (self.wv, &gv)] {
                let gw = grads.slot_mut(wid);
                let mut gw2 = gw.view_mut().into_dimensionality::<Ix2>().unwrap();
                ndarray::linalg::general_mat_mul(F::one(), &f.t(), &gmat.view(), F::one(), &mut gw2);
            }
            let mut gxb = gx_flat.slice_mut(s![bi, .., ..]);
            gxb += &gq.dot(&wq.t());
            gxb += &gk.dot(&wk.t());
            gxb += &gv.dot(&wv.t());
        }
        nlc_to_nchw(&gx_flat, record.h, record.w)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn identity_at_init_because_output_projection_is_zero() {
        let mut r = rng(2);
        let mut store = ParamStore::<f32>::new();
        let att = SelfAttention::new(&mut store, &mut r, "att", 8, 2);
        let x = Array4::from_shape_fn((2, 8, 4, 4), |_| r.gen::<f32>() - 0.5);
        let (y, _, _) = att.forward(&store, &x);
        assert_eq!(y, x);
    }

    #[test]
    fn recorded_rows_sum_to_one() {
        let mut r = rng(3);
        let mut store = ParamStore::<f64>::new();
        let att = SelfAttention::new(&mut store, &mut r, "att", 4, 2);
        let x = Array4::from_shape_fn((2, 4, 3, 3), |_| r.gen::<f64>() * 4.0 - 2.0);
        let (_, rec, _) = att.forward(&store, &x);
        for bi in 0..2 {
            for hd in 0..2 {
                for row in rec.raw.slice(s![bi, hd, .., ..]).rows() {
                    let s: f64 = row.sum();
                    assert!((s - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn matches_hand_computed_two_token_case() {
        // Single head, one channel, two spatial positions; weights set by hand.
        let mut r = rng(4);
        let mut store = ParamStore::<f64>::new();
        let att = SelfAttention::new(&mut store, &mut r, "att", 1, 1);
        store.value_mut(att.wq).fill(2.0);
        store.value_mut(att.wk).fill(1.0);
        store.value_mut(att.wv).fill(1.0);
        store.value_mut(att.wo).fill(1.0);
        let (a, b) = (0.7, -0.4);
        let mut x = Array4::zeros((1, 1, 1, 2));
        x[[0, 0, 0, 0]] = a;
        x[[0, 0, 0, 1]] = b;
        let (y, rec, _) = att.forward(&store, &x);
        // scores: s_ij = (2 x_i)(x_j), scale = 1
        let s00 = 2.0 * a * a;
        let s01 = 2.0 * a * b;
        let a00 = s00.exp() / (s00.exp() + s01.exp());
        let a01 = 1.0 - a00;
        let expect0 = a + (a00 * a + a01 * b);
        assert!((rec.raw[[0, 0, 0, 0]] - a00).abs() < 1e-12);
        assert!((y[[0, 0, 0, 0]] - expect0).abs() < 1e-12);
    }

    #[test]
    fn gradients_match_finite_differences_including_raw_path() {
        let mut r = rng(9);
        let mut store = ParamStore::<f64>::new();
        let att = SelfAttention::new(&mut store, &mut r, "att", 4, 2);
        // move wo off zero so its gradient path is exercised
        for v in store.value_mut(att.wo).iter_mut() {
            *v = r.gen::<f64>() * 0.2 - 0.1;
        }
        let x = Array4::from_shape_fn((1, 4, 2, 3), |_| r.gen::<f64>() - 0.5);
        let lw = Array4::from_shape_fn((1, 4, 2, 3), |_| r.gen::<f64>() - 0.5);
        let rw = Array4::from_shape_fn((1, 2, 6, 6), |_| r.gen::<f64>() - 0.5);
        let loss = |st: &ParamStore<f64>, xv: &Array4<f64>| {
            let (y, rec, _) = att.forward(st, xv);
            (&y * &lw).sum() + (&rec.raw * &rw).sum()
        };

        let (_, rec, cache) = att.forward(&store, &x);
        let mut grads = Grads::zeros_like(&store);
        let gx = att.backward(&store, &mut grads, &cache, &rec, &lw, Some(&rw));

        let eps = 1e-6;
        for id in store.ids().collect::<Vec<_>>() {
            let n = store.value(id).len();
            for i in (0..n).step_by(3) {
                let orig = store.value(id).as_slice().unwrap()[i];
                store.value_mut(id).as_slice_mut().unwrap()[i] = orig + eps;
                let lp = loss(&store, &x);
                store.value_mut(id).as_slice_mut().unwrap()[i] = orig - eps;
                let lm = loss(&store, &x);
                store.value_mut(id).as_slice_mut().unwrap()[i] = orig;
                let fd = (lp - lm) / (2.0 * eps);
                let an = grads.get(id).as_slice().unwrap()[i];
                assert!(
                    (fd - an).abs() < 1e-6,
                    "attn param grad {} [{i}]: {fd} vs {an}",
                    store.name(id)
                );
            }
        }
        let mut xp = x.clone();
        for i in 0..xp.len() {
            let orig = xp.as_slice().unwrap()[i];
            xp.as_slice_mut().unwrap()[i] = orig + eps;
            let lp = loss(&store, &xp);
            xp.as_slice_mut().unwrap()[i] = orig - eps;
            let lm = loss(&store, &xp);
            xp.as_slice_mut().unwrap()[i] = orig;
            let fd = (lp - lm) / (2.0 * eps);
            let an = gx.as_slice().unwrap()[i];
            assert!((fd - an).abs() < 1e-6, "attn input grad [{i}]: {fd} vs {an}");
        }
    }
}
