//! Step-conditional discriminator over denoising transitions. It scores the
//! pair (previous-step image, current noisy image); the condition images are
//! excluded unless explicitly enabled.

use ndarray::{s, Array1, Array2, Array4, Axis};
use rand_chacha::ChaCha8Rng;

use super::blocks::{time_embed_batch, Downsample, ResBlock, ResBlockCache};
use super::config::GeneratorConfig;
use crate::nn::functional::{global_avg_pool, global_avg_pool_backward, silu, silu_backward};
use crate::nn::layers::{Conv2d, GroupNorm, GroupNormCache, Linear};
use crate::nn::params::{Grads, ParamStore};
use crate::nn::Scalar;
use crate::{Error, Result};

pub struct Discriminator {
    pub stem: Conv2d,
    levels: Vec<DiscLevel>,
    head_gn: GroupNorm,
    head_lin: Linear,
    pub sees_condition: bool,
    cfg: GeneratorConfig,
}

struct DiscLevel {
    blocks: Vec<ResBlock>,
    down: Option<Downsample>,
}

pub struct DiscCache<F: Scalar> {
    x_cat: Array4<F>,
    levels: Vec<LevelCache<F>>,
    head_gn: GroupNormCache<F>,
    head_norm: Array4<F>,
    pooled: Array2<F>,
}

struct LevelCache<F: Scalar> {
    blocks: Vec<ResBlockCache<F>>,
    pre_down: Option<Array4<F>>,
}

impl Discriminator {
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
        cfg: &GeneratorConfig,
        sees_condition: bool,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut in_ch = 2 * cfg.in_channels_target;
        if sees_condition {
            in_ch += cfg.in_channels_cond;
        }
        let stem = Conv2d::new(store, rng, "d.stem", in_ch, cfg.base_channels, 3, 1, 1);
        let mut levels = Vec::with_capacity(cfg.num_scales);
        for k in 0..cfg.num_scales {
            let c = cfg.channels_at(k);
            let blocks = (0..cfg.resnet_blocks_per_scale)
                .map(|i| {
                    ResBlock::new(store, rng, &format!("d.l{k}.b{i}"), c, c, Some(cfg.time_embed_dim))
                })
                .collect();
            let down = (k + 1 < cfg.num_scales)
                .then(|| Downsample::new(store, rng, &format!("d.l{k}.down"), c, cfg.channels_at(k + 1)));
            levels.push(DiscLevel { blocks, down });
        }
        let cb = cfg.channels_at(cfg.bottom());
        let head_gn = GroupNorm::new(store, "d.head.gn", cb);
        let head_lin = Linear::new(store, rng, "d.head.lin", cb, 1, true);
        Ok(Self { stem, levels, head_gn, head_lin, sees_condition, cfg: cfg.clone() })
    }

    /// Returns one logit per sample.
    pub fn forward<F: Scalar>(
        &self,
        store: &ParamStore<F>,
        x_prev: &Array4<F>,
        x_t: &Array4<F>,
        y: Option<&Array4<F>>,
        ts: &[usize],
    ) -> Result<(Array1<F>, DiscCache<F>)> {
        if x_prev.dim() != x_t.dim() {
            return Err(Error::ShapeMismatch(format!(
                "transition pair {:?} vs {:?}",
                x_prev.dim(),
                x_t.dim()
            )));
        }
        if ts.len() != x_prev.dim().0 {
            return Err(Error::ShapeMismatch(format!(
                "{} step indices for batch {}",
                ts.len(),
                x_prev.dim().0
            )));
        }
        if self.sees_condition != y.is_some() {
            return Err(Error::Config("condition input does not match construction".into()));
        }
        let mut views = vec![x_prev.view(), x_t.view()];
        if let Some(yv) = y {
            views.push(yv.view());
        }
        let x_cat = ndarray::concatenate(Axis(1), &views).unwrap();
        let cond = time_embed_batch(ts, self.cfg.time_embed_dim)?;

        let mut h = self.stem.forward(store, &x_cat);
        let mut level_caches = Vec::with_capacity(self.levels.len());
        for lvl in &self.levels {
            let mut blocks = Vec::with_capacity(lvl.blocks.len());
            for blk in &lvl.blocks {
                let (h2, c) = blk.forward(store, &h, Some(&cond));
                h = h2;
                blocks.push(c);
            }
            let pre_down = lvl.down.as_ref().map(|d| {
                let pre = h.clone();
                h = d.forward(store, &h);
                pre
            });
            level_caches.push(LevelCache { blocks, pre_down });
        }
        let (norm, gn_cache) = self.head_gn.forward(store, &h);
        let sl = silu(&norm);
        let pooled = global_avg_pool(&sl);
        let logits2 = self.head_lin.forward(store, &pooled);
        let logits = logits2.index_axis(Axis(1), 0).to_owned();
        let cache = DiscCache {
            x_cat,
            levels: level_caches,
            head_gn: gn_cache,
            head_norm: norm,
            pooled,
        };
        Ok((logits, cache))
    }

    /// Returns gradients for (x_prev, x_t); the conditioning embedding has no
    /// parameters upstream, so its gradient is dropped.
    pub fn backward<F: Scalar>(
        &self,
        store: &ParamStore<F>,
        grads: &mut Grads<F>,
        cache: &DiscCache<F>,
        g_logits: &Array1<F>,
    ) -> (Array4<F>, Array4<F>) {
        let b = g_logits.len();
        let ted = self.cfg.time_embed_dim;
        let g2 = g_logits.view().insert_axis(Axis(1)).to_owned();
        let g_pooled = self.head_lin.backward(store, grads, &cache.pooled, &g2);
        let (_, _, hh, ww) = cache.head_norm.dim();
        let g_sl = global_avg_pool_backward(&g_pooled, hh, ww);
        let g_norm = silu_backward(&g_sl, &cache.head_norm);
        let mut g_h = self.head_gn.backward(store, grads, &cache.head_gn, &g_norm);

        let mut g_cond: Array2<F> = Array2::zeros((b, ted));
        for (lvl, lc) in self.levels.iter().zip(cache.levels.iter()).rev() {
            if let (Some(d), Some(pre)) = (&lvl.down, &lc.pre_down) {
                g_h = d.backward(store, grads, pre, &g_h);
            }
            for (blk, bc) in lvl.blocks.iter().rev().zip(lc.blocks.iter().rev()) {
                g_h = blk.backward(store, grads, bc, &g_h, Some(&mut g_cond));
            }
        }
        let g_cat = self.stem.backward(store, grads, &cache.x_cat, &g_h);
        let c = self.cfg.in_channels_target;
        (
            g_cat.slice(s![.., ..c, .., ..]).to_owned(),
            g_cat.slice(s![.., c..2 * c, .., ..]).to_owned(),
        )
    }

    /// Per-sample gradient of the logit with respect to the previous-step
    /// image. Parameter gradients go to a scratch buffer; batch independence
    /// of every layer makes the rows exact per-sample gradients.
    pub fn grad_wrt_x_prev<F: Scalar>(
        &self,
        store: &ParamStore<F>,
        x_prev: &Array4<F>,
        x_t: &Array4<F>,
        y: Option<&Array4<F>>,
        ts: &[usize],
    ) -> Result<Array4<F>> {
        let (logits, cache) = self.forward(store, x_prev, x_t, y, ts)?;
        let mut scratch = Grads::zeros_like(store);
        let ones = Array1::from_elem(logits.len(), F::one());
        let (g_prev, _) = self.backward(store, &mut scratch, &cache, &ones);
        Ok(g_prev)
    }
}
