//! Multi-scale decoder: starts from a (possibly widened) bottleneck, climbs
//! back to full resolution concatenating skip features from one or more
//! encoder bundles, and finishes with a tanh head in [-1, 1].

use ndarray::{s, Array2, Array4, Axis};
use rand_chacha::ChaCha8Rng;

use super::blocks::{ResBlock, ResBlockCache, Upsample, UpsampleCache};
use super::config::GeneratorConfig;
use super::encoder::FeatureBundle;
use crate::nn::attention::{AttentionCache, AttentionRecord, SelfAttention};
use crate::nn::functional::{silu, silu_backward, tanh_backward, tanh_forward};
use crate::nn::layers::{Conv2d, GroupNorm, GroupNormCache};
use crate::nn::params::{Grads, ParamStore};
use crate::nn::Scalar;

pub struct DecoderLevel {
    pub blocks: Vec<ResBlock>,
    pub attn: Option<SelfAttention>,
    /// Maps this scale's width to the next shallower one; absent at full res.
    pub up: Option<Upsample>,
}

pub struct Decoder {
    /// Bottleneck input width as a multiple of the deepest scale width.
    pub input_mult: usize,
    /// Number of encoder bundles contributing skip features per scale.
    pub skip_sets: usize,
    /// Deepest scale first.
    pub levels: Vec<DecoderLevel>,
    pub head_gn: GroupNorm,
    pub head_conv: Conv2d,
    pub out_channels: usize,
}

struct DecoderLevelCache<F: Scalar> {
    concat_in: Option<Array4<F>>,
    blocks: Vec<ResBlockCache<F>>,
    attn: Option<(AttentionCache<F>, AttentionRecord<F>)>,
    up: Option<(Array4<F>, UpsampleCache<F>)>,
}

pub struct DecoderCache<F: Scalar> {
    levels: Vec<DecoderLevelCache<F>>,
    head_gn: GroupNormCache<F>,
    head_norm: Array4<F>,
    head_silu: Array4<F>,
    y: Array4<F>,
}

impl Decoder {
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
        name: &str,
        out_channels: usize,
        cond_dim: Option<usize>,
        input_mult: usize,
        skip_sets: usize,
        cfg: &GeneratorConfig,
    ) -> Self {
        let kb = cfg.bottom();
        let mut levels = Vec::with_capacity(cfg.num_scales);
        for (i, k) in (0..=kb).rev().enumerate() {
            let c = cfg.channels_at(k);
            let in_width = if i == 0 { input_mult * c } else { (1 + skip_sets) * c };
            let mut blocks = Vec::with_capacity(cfg.resnet_blocks_per_scale);
            for b in 0..cfg.resnet_blocks_per_scale {
                let c_in = if b == 0 { in_width } else { c };
                blocks.push(ResBlock::new(store, rng, &format!("{name}.l{k}.b{b}"), c_in, c, cond_dim));
            }
            let attn = (cfg.side_at(k) == cfg.attention_resolution).then(|| {
                SelfAttention::new(store, rng, &format!("{name}.l{k}.attn"), c, cfg.heads)
            });
            let up = (k > 0).then(|| {
                Upsample::new(store, rng, &format!("{name}.l{k}.up"), c, cfg.channels_at(k - 1))
            });
            levels.push(DecoderLevel { blocks, attn, up });
        }
        let c0 = cfg.base_channels;
        let head_gn = GroupNorm::new(store, &format!("{name}.head.gn"), c0);
        let head_conv = Conv2d::new(store, rng, &format!("{name}.head.conv"), c0, out_channels, 3, 1, 1);
        Self { input_mult, skip_sets, levels, head_gn, head_conv, out_channels }
    }

    /// `z` enters at the deepest scale; `bundles` supply skips for all
    /// shallower scales. Returns the tanh image and the attention records.
    pub fn forward<F: Scalar>(
        &self,
        store: &ParamStore<F>,
        z: &Array4<F>,
        bundles: &[&FeatureBundle<F>],
        cond: Option<&Array2<F>>,
    ) -> (Array4<F>, Vec<AttentionRecord<F>>, DecoderCache<F>) {
        assert_eq!(bundles.len(), self.skip_sets, "skip bundle count");
        let kb = self.levels.len() - 1;
        let mut h = z.clone();
        let mut records = Vec::new();
        let mut level_caches = Vec::with_capacity(self.levels.len());
        for (i, lvl) in self.levels.iter().enumerate() {
            let k = kb - i;
            let concat_in = (i > 0).then(|| {
                let mut views = vec![h.view()];
                for b in bundles {
                    views.push(b.skips[k].view());
                }
                let cat = ndarray::concatenate(Axis(1), &views).unwrap();
                h = cat.clone();
                cat
            });
            let mut block_caches = Vec::with_capacity(lvl.blocks.len());
            for blk in &lvl.blocks {
                let (h2, c) = blk.forward(store, &h, cond);
                h = h2;
                block_caches.push(c);
            }
            let attn_cache = lvl.attn.as_ref().map(|a| {
                let (h2, record, cache) = a.forward(store, &h);
                h = h2;
                records.push(record.clone());
                (cache, record)
            });
            let up_cache = lvl.up.as_ref().map(|u| {
                let pre = h.clone();
                let (h2, c) = u.forward(store, &h);
                h = h2;
                (pre, c)
            });
            level_caches.push(DecoderLevelCache { concat_in, blocks: block_caches, attn: attn_cache, up: up_cache });
        }
        let (norm, gn_cache) = self.head_gn.forward(store, &h);
        let sl = silu(&norm);
        let pre = self.head_conv.forward(store, &sl);
        let y = tanh_forward(&pre);
        let cache = DecoderCache {
            levels: level_caches,
            head_gn: gn_cache,
            head_norm: norm,
            head_silu: sl,
            y: y.clone(),
        };
        (y, records, cache)
    }

    /// `g_records` pairs with the records returned by `forward` (gradients on
    /// the raw post-softmax attention weights). Returns the bottleneck input
    /// gradient and per-bundle, per-scale skip gradients (index [bundle][k]
    /// for scales 0..deepest, which receive skips).
    pub fn backward<F: Scalar>(
        &self,
        store: &ParamStore<F>,
        grads: &mut Grads<F>,
        cache: &DecoderCache<F>,
        g_y: &Array4<F>,
        g_records: Option<&[Array4<F>]>,
        mut g_cond: Option<&mut Array2<F>>,
    ) -> (Array4<F>, Vec<Vec<Array4<F>>>) {
        let kb = self.levels.len() - 1;
        let g_pre = tanh_backward(g_y, &cache.y);
        let g_sl = self.head_conv.backward(store, grads, &cache.head_silu, &g_pre);
        let g_norm = silu_backward(&g_sl, &cache.head_norm);
        let mut g_h = self.head_gn.backward(store, grads, &cache.head_gn, &g_norm);

        let mut g_skips: Vec<Vec<Array4<F>>> =
            (0..self.skip_sets).map(|_| Vec::with_capacity(kb)).collect();
        let mut record_idx = self
            .levels
            .iter()
            .filter(|l| l.attn.is_some())
            .count();
        for (i, lvl) in self.levels.iter().enumerate().rev() {
            let lc = &cache.levels[i];
            if let Some(u) = &lvl.up {
                let (pre, uc) = lc.up.as_ref().unwrap();
                let _ = pre;
                g_h = u.backward(store, grads, uc, &g_h);
            }
            if let (Some(a), Some((ac, ar))) = (&lvl.attn, &lc.attn) {
                record_idx -= 1;
                let g_raw = g_records.map(|gr| &gr[record_idx]);
                g_h = a.backward(store, grads, ac, ar, &g_h, g_raw);
            }
            for (blk, bc) in lvl.blocks.iter().rev().zip(lc.blocks.iter().rev()) {
                g_h = blk.backward(store, grads, bc, &g_h, g_cond.as_deref_mut());
            }
            if let Some(cat) = &lc.concat_in {
                let c_own = cat.dim().1 / (1 + self.skip_sets);
                for (bi, sink) in g_skips.iter_mut().enumerate() {
                    let c0 = c_own * (1 + bi);
                    sink.push(g_h.slice(s![.., c0..c0 + c_own, .., ..]).to_owned());
                }
                g_h = g_h.slice(s![.., ..c_own, .., ..]).to_owned();
            }
        }
        // The reverse traversal starts at the output, so skip gradients were
        // pushed full-resolution-first already, matching the bundle order.
        (g_h, g_skips)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::networks::encoder::EncoderTower;
    use rand::{Rng, SeedableRng};

    fn small_cfg() -> GeneratorConfig {
        GeneratorConfig {
            image_size: 8,
            in_channels_target: 1,
            in_channels_cond: 2,
            base_channels: 4,
            num_scales: 2,
            resnet_blocks_per_scale: 1,
            attention_resolution: 4,
            time_embed_dim: 8,
            z_dim: 8,
            heads: 2,
            ..Default::default()
        }
    }

    fn make_bundle(rng: &mut ChaCha8Rng, b: usize, cfg: &GeneratorConfig) -> FeatureBundle<f64> {
        let skips: Vec<Array4<f64>> = (0..cfg.num_scales)
            .map(|k| {
                Array4::from_shape_fn((b, cfg.channels_at(k), cfg.side_at(k), cfg.side_at(k)), |_| {
                    rng.gen::<f64>() - 0.5
                })
            })
            .collect();
        let bottleneck = skips.last().unwrap().clone();
        FeatureBundle { skips, bottleneck }
    }

    #[test]
    fn output_is_full_resolution_and_bounded() {
        let cfg = small_cfg();
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let dec = Decoder::new(&mut store, &mut rng, "dec", 1, None, 2, 2, &cfg);
        let b1 = make_bundle(&mut rng, 2, &cfg);
        let b2 = make_bundle(&mut rng, 2, &cfg);
        let z = Array4::from_shape_fn((2, 16, 4, 4), |_| rng.gen::<f64>() * 4.0 - 2.0);
        let (y, records, _) = dec.forward(&store, &z, &[&b1, &b2], None);
        assert_eq!(y.dim(), (2, 1, 8, 8));
        assert!(y.iter().all(|&v| (-1.0..=1.0).contains(&v)));
        assert_eq!(records.len(), 1, "attention at the deepest scale only");
        assert_eq!(records[0].h, 4);
    }

    #[test]
    fn decoder_gradients_match_finite_differences() {
        let cfg = small_cfg();
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let dec = Decoder::new(&mut store, &mut rng, "dec", 1, Some(8), 2, 2, &cfg);
        let b1 = make_bundle(&mut rng, 1, &cfg);
        let b2 = make_bundle(&mut rng, 1, &cfg);
        let cond = Array2::from_shape_fn((1, 8), |_| rng.gen::<f64>() - 0.5);
        let z = Array4::from_shape_fn((1, 16, 4, 4), |_| rng.gen::<f64>() - 0.5);
        let gy = Array4::from_shape_fn((1, 1, 8, 8), |_| rng.gen::<f64>() - 0.5);
        // Raw-attention gradient: one per record, matching record shape.
        let g_raw = vec![Array4::from_shape_fn((1, 2, 16, 16), |_| rng.gen::<f64>() * 0.1)];

        let loss = |store: &ParamStore<f64>,
                    z: &Array4<f64>,
                    b1: &FeatureBundle<f64>,
                    cond: &Array2<f64>| {
            let (y, records, _) = dec.forward(store, z, &[b1, &b2], Some(cond));
            let mut l = (&y * &gy).sum();
            for (r, g) in records.iter().zip(g_raw.iter()) {
                l += (&r.raw * g).sum();
            }
            l
        };

        let (_, _, cache) = dec.forward(&store, &z, &[&b1, &b2], Some(&cond));
        let mut grads = Grads::zeros_like(&store);
        let mut g_cond = Array2::zeros((1, 8));
        let (g_z, g_skips) =
            dec.backward(&store, &mut grads, &cache, &gy, Some(&g_raw), Some(&mut g_cond));
        assert_eq!(g_skips.len(), 2);
        assert_eq!(g_skips[0].len(), 1, "skips feed scales below the deepest");

        let eps = 1e-6;
        let check = |fd: f64, want: f64, what: &str| {
            let rel = (fd - want).abs() / want.abs().max(1e-8);
            assert!(rel < 1e-4, "{what}: fd={fd} analytic={want}");
        };
        {
            let mut p = z.clone();
            let mut m = z.clone();
            p[[0, 7, 1, 2]] += eps;
            m[[0, 7, 1, 2]] -= eps;
            check(
                (loss(&store, &p, &b1, &cond) - loss(&store, &m, &b1, &cond)) / (2.0 * eps),
                g_z[[0, 7, 1, 2]],
                "bottleneck",
            );
        }
        {
            // Skip gradient for bundle 0 at scale 0.
            let mut p = FeatureBundle { skips: b1.skips.clone(), bottleneck: b1.bottleneck.clone() };
            let mut m = FeatureBundle { skips: b1.skips.clone(), bottleneck: b1.bottleneck.clone() };
            p.skips[0][[0, 2, 5, 5]] += eps;
            m.skips[0][[0, 2, 5, 5]] -= eps;
            check(
                (loss(&store, &z, &p, &cond) - loss(&store, &z, &m, &cond)) / (2.0 * eps),
                g_skips[0][0][[0, 2, 5, 5]],
                "skip",
            );
        }
        {
            let mut p = cond.clone();
            let mut m = cond.clone();
            p[[0, 1]] += eps;
            m[[0, 1]] -= eps;
            check(
                (loss(&store, &z, &b1, &p) - loss(&store, &z, &b1, &m)) / (2.0 * eps),
                g_cond[[0, 1]],
                "cond",
            );
        }
        for pname in ["dec.l1.attn.wv", "dec.l1.up.w", "dec.l0.b0.conv1.w", "dec.head.conv.w"] {
            let pid = store.id_by_name(pname).unwrap();
            let flat = store.value(pid).len() / 2;
            let orig = store.value(pid).as_slice().unwrap()[flat];
            let want = grads.get(pid).as_slice().unwrap()[flat];
            store.value_mut(pid).as_slice_mut().unwrap()[flat] = orig + eps;
            let lp = loss(&store, &z, &b1, &cond);
            store.value_mut(pid).as_slice_mut().unwrap()[flat] = orig - eps;
            let lm = loss(&store, &z, &b1, &cond);
            store.value_mut(pid).as_slice_mut().unwrap()[flat] = orig;
            check((lp - lm) / (2.0 * eps), want, pname);
        }
    }

    #[test]
    fn three_scale_skip_gradients_come_back_full_resolution_first() {
        // Two distinct consumed scales make the ordering observable; a
        // two-scale decoder has only one and cannot.
        let cfg = GeneratorConfig {
            image_size: 16,
            num_scales: 3,
            attention_resolution: 4,
            ..small_cfg()
        };
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let dec = Decoder::new(&mut store, &mut rng, "dec", 1, None, 1, 1, &cfg);
        let b1 = make_bundle(&mut rng, 1, &cfg);
        let z = b1.bottleneck.clone();
        let gy = Array4::from_shape_fn((1, 1, 16, 16), |_| rng.gen::<f64>() - 0.5);

        let loss = |store: &ParamStore<f64>, b1: &FeatureBundle<f64>| {
            let (y, _, _) = dec.forward(store, &b1.bottleneck, &[b1], None);
            (&y * &gy).sum()
        };
        let (_, _, cache) = dec.forward(&store, &z, &[&b1], None);
        let mut grads = Grads::zeros_like(&store);
        let (_, g_skips) = dec.backward(&store, &mut grads, &cache, &gy, None, None);
        assert_eq!(g_skips[0].len(), 2);
        assert_eq!(g_skips[0][0].dim(), (1, 4, 16, 16), "entry 0 is the full-res scale");
        assert_eq!(g_skips[0][1].dim(), (1, 8, 8, 8), "entry 1 is the middle scale");

        let eps = 1e-6;
        for (k, idx) in [(0usize, [0, 2, 9, 5]), (1usize, [0, 5, 3, 6])] {
            let mut p = b1.clone();
            let mut m = b1.clone();
            p.skips[k][idx] += eps;
            m.skips[k][idx] -= eps;
            let fd = (loss(&store, &p) - loss(&store, &m)) / (2.0 * eps);
            let want = g_skips[0][k][idx];
            let rel = (fd - want).abs() / want.abs().max(1e-8);
            assert!(rel < 1e-4, "scale {k}: fd={fd} analytic={want}");
        }
    }

    #[test]
    fn single_bundle_mode_matches_autoencoder_layout() {
        let cfg = small_cfg();
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let enc = EncoderTower::new(&mut store, &mut rng, "e", 1, None, false, &cfg);
        let dec = Decoder::new(&mut store, &mut rng, "d", 1, None, 1, 1, &cfg);
        let x = Array4::from_shape_fn((1, 1, 8, 8), |_| rng.gen::<f64>());
        let (bundle, _) = enc.forward(&store, &x, None, None);
        let (y, records, _) = dec.forward(&store, &bundle.bottleneck, &[&bundle], None);
        assert_eq!(y.dim(), x.dim());
        assert_eq!(records.len(), 1);
    }
}
