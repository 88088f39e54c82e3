//! Shared building blocks: sinusoidal step embedding, conditioned residual
//! blocks, and resolution changes.

use ndarray::{s, Array1, Array2, Array4};
use rand_chacha::ChaCha8Rng;

use crate::nn::functional::{silu, silu_backward, upsample_nearest2, upsample_nearest2_backward};
use crate::nn::layers::{Conv2d, GroupNorm, GroupNormCache, Linear};
use crate::nn::params::{Grads, ParamStore};
use crate::nn::Scalar;
use crate::{Error, Result};

/// Sinusoidal embedding of a discrete step index, interleaved as
/// [sin(t*w_0), cos(t*w_0), sin(t*w_1), ...] with w_i = 10000^(-2i/dim).
/// t = 0 therefore maps to [0, 1, 0, 1, ...].
pub fn time_embed<F: Scalar>(t: usize, dim: usize) -> Result<Array1<F>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::Config(format!("embedding dim {dim} must be even and positive")));
    }
    let half = dim / 2;
    let mut out = Array1::zeros(dim);
    for i in 0..half {
        let omega = 10000f64.powf(-2.0 * i as f64 / dim as f64);
        let arg = t as f64 * omega;
        out[2 * i] = F::from_f64(arg.sin());
        out[2 * i + 1] = F::from_f64(arg.cos());
    }
    Ok(out)
}

/// Per-sample step embeddings stacked into [B, dim].
pub fn time_embed_batch<F: Scalar>(ts: &[usize], dim: usize) -> Result<Array2<F>> {
    let mut out = Array2::zeros((ts.len(), dim));
    for (b, &t) in ts.iter().enumerate() {
        out.slice_mut(s![b, ..]).assign(&time_embed(t, dim)?);
    }
    Ok(out)
}

/// Residual block: GN -> SiLU -> conv, then GN modulated by a per-channel
/// scale-and-shift derived from the conditioning vector, SiLU -> conv, plus
/// a skip (1x1 conv when widths differ). The modulation head is zero-init so
/// conditioning is an exact no-op at construction.
pub struct ResBlock {
    pub gn1: GroupNorm,
    pub conv1: Conv2d,
    pub gn2: GroupNorm,
    pub conv2: Conv2d,
    pub modulation: Option<Linear>,
    pub skip: Option<Conv2d>,
    pub c_in: usize,
    pub c_out: usize,
}

pub struct ResBlockCache<F: Scalar> {
    x: Array4<F>,
    gn1: GroupNormCache<F>,
    n1: Array4<F>,
    s1: Array4<F>,
    gn2: GroupNormCache<F>,
    n2: Array4<F>,
    m: Array4<F>,
    s2: Array4<F>,
    cond: Option<CondCache<F>>,
}

struct CondCache<F: Scalar> {
    cond: Array2<F>,
    cond_silu: Array2<F>,
    scale: Array2<F>,
}

impl ResBlock {
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        cond_dim: Option<usize>,
    ) -> Self {
        let gn1 = GroupNorm::new(store, &format!("{name}.gn1"), c_in);
        let conv1 = Conv2d::new(store, rng, &format!("{name}.conv1"), c_in, c_out, 3, 1, 1);
        let gn2 = GroupNorm::new(store, &format!("{name}.gn2"), c_out);
        let conv2 = Conv2d::new(store, rng, &format!("{name}.conv2"), c_out, c_out, 3, 1, 1);
        let modulation =
            cond_dim.map(|d| Linear::new_zero_init(store, &format!("{name}.mod"), d, 2 * c_out, true));
        let skip = (c_in != c_out)
            .then(|| Conv2d::new(store, rng, &format!("{name}.skip"), c_in, c_out, 1, 1, 0));
        Self { gn1, conv1, gn2, conv2, modulation, skip, c_in, c_out }
    }

    /// `cond` is the [B, cond_dim] conditioning vector; required iff the
    /// block was built with one.
    pub fn forward<F: Scalar>(
        &self,
        store: &ParamStore<F>,
        x: &Array4<F>,
        cond: Option<&Array2<F>>,
    ) -> (Array4<F>, ResBlockCache<F>) {
        let (n1, c1) = self.gn1.forward(store, x);
        let s1 = silu(&n1);
        let h = self.conv1.forward(store, &s1);
        let (n2, c2) = self.gn2.forward(store, &h);
        let (m, cond_cache) = match (&self.modulation, cond) {
            (Some(lin), Some(cv)) => {
                let cond_silu = silu(cv);
                let sc_sh = lin.forward(store, &cond_silu);
                let c = self.c_out;
                let scale = sc_sh.slice(s![.., ..c]).to_owned();
                let shift = sc_sh.slice(s![.., c..]).to_owned();
                let mut m = n2.clone();
                let (b, _, hh, ww) = m.dim();
                for bi in 0..b {
                    for ch in 0..c {
                        let (sc, sh) = (F::one() + scale[[bi, ch]], shift[[bi, ch]]);
                        for yy in 0..hh {
                            for xx in 0..ww {
                                m[[bi, ch, yy, xx]] = m[[bi, ch, yy, xx]] * sc + sh;
                            }
                        }
                    }
                }
                (m, Some(CondCache { cond: cv.clone(), cond_silu, scale }))
            }
            (None, None) => (n2.clone(), None),
            _ => panic!("conditioning presence must match block construction"),
        };
        let s2 = silu(&m);
        let h2 = self.conv2.forward(store, &s2);
        let mut out = match &self.skip {
            Some(sc) => sc.forward(store, x),
            None => x.clone(),
        };
        out += &h2;
        let cache = ResBlockCache { x: x.clone(), gn1: c1, n1, s1, gn2: c2, n2, m, s2, cond: cond_cache };
        (out, cache)
    }

    /// Returns the input gradient; the conditioning gradient, when the block
    /// is conditioned, is accumulated into `g_cond`.
    pub fn backward<F: Scalar>(
        &self,
        store: &ParamStore<F>,
        grads: &mut Grads<F>,
        cache: &ResBlockCache<F>,
        gy: &Array4<F>,
        g_cond: Option<&mut Array2<F>>,
    ) -> Array4<F> {
        let g_s2 = self.conv2.backward(store, grads, &cache.s2, gy);
        let g_m = silu_backward(&g_s2, &cache.m);
        let g_n2 = match (&self.modulation, &cache.cond) {
            (Some(lin), Some(cc)) => {
                let (b, c, hh, ww) = g_m.dim();
                let mut g_n2 = g_m.clone();
                let mut g_sc_sh = Array2::zeros((b, 2 * c));
                for bi in 0..b {
                    for ch in 0..c {
                        let sc = F::one() + cc.scale[[bi, ch]];
                        let mut gs = F::zero();
                        let mut gsh = F::zero();
                        for yy in 0..hh {
                            for xx in 0..ww {
                                let g = g_m[[bi, ch, yy, xx]];
                                gs += g * cache.n2[[bi, ch, yy, xx]];
                                gsh += g;
                                g_n2[[bi, ch, yy, xx]] = g * sc;
                            }
                        }
                        g_sc_sh[[bi, ch]] = gs;
                        g_sc_sh[[bi, c + ch]] = gsh;
                    }
                }
                let g_cond_silu = lin.backward(store, grads, &cc.cond_silu, &g_sc_sh);
                let g_cv = silu_backward(&g_cond_silu, &cc.cond);
                let gc = g_cond.expect("conditioned block needs a conditioning grad sink");
                *gc += &g_cv;
                g_n2
            }
            _ => g_m,
        };
        let g_h = self.gn2.backward(store, grads, &cache.gn2, &g_n2);
        let g_s1 = self.conv1.backward(store, grads, &cache.s1, &g_h);
        let g_n1 = silu_backward(&g_s1, &cache.n1);
        let mut g_x = self.gn1.backward(store, grads, &cache.gn1, &g_n1);
        match &self.skip {
            Some(sc) => g_x += &sc.backward(store, grads, &cache.x, gy),
            None => g_x += gy,
        }
        g_x
    }
}

/// Stride-2 3x3 conv halving the spatial side and changing width.
pub struct Downsample {
    pub conv: Conv2d,
}

impl Downsample {
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
    ) -> Self {
        Self { conv: Conv2d::new(store, rng, name, c_in, c_out, 3, 2, 1) }
    }

    pub fn forward<F: Scalar>(&self, store: &ParamStore<F>, x: &Array4<F>) -> Array4<F> {
        self.conv.forward(store, x)
    }

    pub fn backward<F: Scalar>(
        &self,
        store: &ParamStore<F>,
        grads: &mut Grads<F>,
        x: &Array4<F>,
        gy: &Array4<F>,
    ) -> Array4<F> {
        self.conv.backward(store, grads, x, gy)
    }
}

/// Nearest-neighbour x2 upsampling followed by a 3x3 conv.
pub struct Upsample {
    pub conv: Conv2d,
}

pub struct UpsampleCache<F: Scalar> {
    up: Array4<F>,
}

impl Upsample {
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
    ) -> Self {
        Self { conv: Conv2d::new(store, rng, name, c_in, c_out, 3, 1, 1) }
    }

    pub fn forward<F: Scalar>(
        &self,
        store: &ParamStore<F>,
        x: &Array4<F>,
    ) -> (Array4<F>, UpsampleCache<F>) {
        let up = upsample_nearest2(x);
        let y = self.conv.forward(store, &up);
        (y, UpsampleCache { up })
    }

    pub fn backward<F: Scalar>(
        &self,
        store: &ParamStore<F>,
        grads: &mut Grads<F>,
        cache: &UpsampleCache<F>,
        gy: &Array4<F>,
    ) -> Array4<F> {
        let g_up = self.conv.backward(store, grads, &cache.up, gy);
        upsample_nearest2_backward(&g_up)
    }
}
