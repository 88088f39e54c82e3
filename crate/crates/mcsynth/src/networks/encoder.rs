//! Multi-scale convolutional encoder tower. One construction serves three
//! roles: plain condition encoder (no conditioning vector), denoiser encoder
//! (conditioned, with per-scale guidance fusion), and autoencoder front end.

use ndarray::{s, Array2, Array4, Axis};
use rand_chacha::ChaCha8Rng;

use super::blocks::{Downsample, ResBlock, ResBlockCache};
use super::config::GeneratorConfig;
use crate::nn::attention::{AttentionCache, AttentionRecord, SelfAttention};
use crate::nn::layers::Conv2d;
use crate::nn::params::{fork_rng, Grads, ParamStore};
use crate::nn::Scalar;

/// Per-scale feature maps handed to the decoder plus the deepest map.
#[derive(Clone)]
pub struct FeatureBundle<F: Scalar> {
    /// One entry per scale, full resolution first; entry k has the width of
    /// scale k before downsampling.
    pub skips: Vec<Array4<F>>,
    pub bottleneck: Array4<F>,
}

pub struct EncoderLevel {
    pub blocks: Vec<ResBlock>,
    pub attn: Option<SelfAttention>,
    /// 1x1 conv mixing [own features, guidance features] back to own width.
    pub fusion: Option<Conv2d>,
    pub down: Option<Downsample>,
}

pub struct EncoderTower {
    pub stem: Conv2d,
    pub levels: Vec<EncoderLevel>,
    pub cond_dim: Option<usize>,
    pub with_fusion: bool,
}

struct LevelCache<F: Scalar> {
    blocks: Vec<ResBlockCache<F>>,
    attn: Option<(AttentionCache<F>, AttentionRecord<F>)>,
    /// Fusion input (concat of own and guidance features).
    fusion_in: Option<Array4<F>>,
    /// Feature entering the downsample (equals the skip feature).
    pre_down: Array4<F>,
}

pub struct EncoderCache<F: Scalar> {
    x: Array4<F>,
    levels: Vec<LevelCache<F>>,
}

impl<F: Scalar> EncoderCache<F> {
    /// Attention records captured during the forward pass, in layer order.
    pub fn records(&self) -> Vec<&AttentionRecord<F>> {
        self.levels.iter().filter_map(|l| l.attn.as_ref().map(|(_, r)| r)).collect()
    }
}

impl EncoderTower {
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_channels: usize,
        cond_dim: Option<usize>,
        with_fusion: bool,
        cfg: &GeneratorConfig,
    ) -> Self {
        // Stem width varies with the condition count; its own stream keeps
        // the level inits identical across that choice.
        let mut r_stem = fork_rng(rng);
        let stem = Conv2d::new(
            store,
            &mut r_stem,
            &format!("{name}.stem"),
            in_channels,
            cfg.base_channels,
            3,
            1,
            1,
        );
        let mut levels = Vec::with_capacity(cfg.num_scales);
        for k in 0..cfg.num_scales {
            let r = &mut fork_rng(rng);
            let c = cfg.channels_at(k);
            let blocks = (0..cfg.resnet_blocks_per_scale)
                .map(|i| ResBlock::new(store, r, &format!("{name}.l{k}.b{i}"), c, c, cond_dim))
                .collect();
            let attn = (cfg.side_at(k) == cfg.attention_resolution).then(|| {
                SelfAttention::new(store, r, &format!("{name}.l{k}.attn"), c, cfg.heads)
            });
            let fusion = with_fusion
                .then(|| Conv2d::new(store, r, &format!("{name}.l{k}.fuse"), 2 * c, c, 1, 1, 0));
            let down = (k + 1 < cfg.num_scales).then(|| {
                Downsample::new(store, r, &format!("{name}.l{k}.down"), c, cfg.channels_at(k + 1))
            });
            levels.push(EncoderLevel { blocks, attn, fusion, down });
        }
        Self { stem, levels, cond_dim, with_fusion }
    }

    /// `guidance` supplies per-scale features for the fusion layers (widths
    /// must match this tower's); `None` with fusion enabled feeds zeros.
    pub fn forward<F: Scalar>(
        &self,
        store: &ParamStore<F>,
        x: &Array4<F>,
        cond: Option<&Array2<F>>,
        guidance: Option<&[Array4<F>]>,
    ) -> (FeatureBundle<F>, EncoderCache<F>) {
        assert_eq!(cond.is_some(), self.cond_dim.is_some(), "conditioning mismatch");
        assert!(guidance.is_none() || self.with_fusion, "guidance without fusion layers");
        let mut h = self.stem.forward(store, x);
        let mut skips = Vec::with_capacity(self.levels.len());
        let mut level_caches = Vec::with_capacity(self.levels.len());
        for (k, lvl) in self.levels.iter().enumerate() {
            let mut block_caches = Vec::with_capacity(lvl.blocks.len());
            for blk in &lvl.blocks {
                let (h2, c) = blk.forward(store, &h, cond);
                h = h2;
                block_caches.push(c);
            }
            let attn_cache = lvl.attn.as_ref().map(|a| {
                let (h2, record, cache) = a.forward(store, &h);
                h = h2;
                (cache, record)
            });
            let fusion_in = lvl.fusion.as_ref().map(|f| {
                let g = match guidance {
                    Some(gs) => gs[k].clone(),
                    None => Array4::zeros(h.raw_dim()),
                };
                let cat = ndarray::concatenate(Axis(1), &[h.view(), g.view()]).unwrap();
                h = f.forward(store, &cat);
                cat
            });
            skips.push(h.clone());
            let pre_down = h.clone();
            if let Some(d) = &lvl.down {
                h = d.forward(store, &h);
            }
            level_caches.push(LevelCache { blocks: block_caches, attn: attn_cache, fusion_in, pre_down });
        }
        let bottleneck = skips.last().expect("at least one scale").clone();
        (FeatureBundle { skips, bottleneck }, EncoderCache { x: x.clone(), levels: level_caches })
    }

    /// `g_skips` carries one gradient per scale (bottleneck gradient already
    /// folded into the last entry). Returns the input gradient and, when
    /// fusion is active, per-scale gradients for the guidance features.
    pub fn backward<F: Scalar>(
        &self,
        store: &ParamStore<F>,
        grads: &mut Grads<F>,
        cache: &EncoderCache<F>,
        g_skips: &[Array4<F>],
        mut g_cond: Option<&mut Array2<F>>,
    ) -> (Array4<F>, Option<Vec<Array4<F>>>) {
        assert_eq!(g_skips.len(), self.levels.len(), "one skip gradient per scale");
        let mut g_guidance: Vec<Array4<F>> = Vec::new();
        let last = self.levels.len() - 1;
        let mut g_s = g_skips[last].clone();
        let mut g_in_prev: Option<Array4<F>> = None;
        for k in (0..self.levels.len()).rev() {
            let lvl = &self.levels[k];
            let lc = &cache.levels[k];
            if k < last {
                // Gradient arriving from the level above through its down op.
                let d = lvl.down.as_ref().expect("non-bottom level has a downsample");
                g_s = d.backward(store, grads, &lc.pre_down, &g_in_prev.take().unwrap());
                g_s += &g_skips[k];
            }
            let mut g_h = match (&lvl.fusion, &lc.fusion_in) {
                (Some(f), Some(cat)) => {
                    let g_cat = f.backward(store, grads, cat, &g_s);
                    let c = g_cat.dim().1 / 2;
                    g_guidance.push(g_cat.slice(s![.., c.., .., ..]).to_owned());
                    g_cat.slice(s![.., ..c, .., ..]).to_owned()
                }
                _ => g_s.clone(),
            };
            if let (Some(a), Some((ac, ar))) = (&lvl.attn, &lc.attn) {
                g_h = a.backward(store, grads, ac, ar, &g_h, None);
            }
            for (blk, bc) in lvl.blocks.iter().rev().zip(lc.blocks.iter().rev()) {
                g_h = blk.backward(store, grads, bc, &g_h, g_cond.as_deref_mut());
            }
            g_in_prev = Some(g_h);
        }
        let g_x = self.stem.backward(store, grads, &cache.x, &g_in_prev.unwrap());
        let g_guidance = self.with_fusion.then(|| {
            g_guidance.reverse();
            g_guidance
        });
        (g_x, g_guidance)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn small_cfg() -> GeneratorConfig {
        GeneratorConfig {
            image_size: 16,
            in_channels_target: 1,
            in_channels_cond: 2,
            base_channels: 8,
            num_scales: 3,
            resnet_blocks_per_scale: 1,
            attention_resolution: 4,
            time_embed_dim: 16,
            z_dim: 8,
            heads: 2,
            ..Default::default()
        }
    }

    #[test]
    fn bundle_shapes_follow_the_scale_plan() {
        let cfg = small_cfg();
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let enc = EncoderTower::new(&mut store, &mut rng, "e", 2, None, false, &cfg);
        let x = Array4::from_shape_fn((2, 2, 16, 16), |_| rng.gen::<f64>());
        let (bundle, cache) = enc.forward(&store, &x, None, None);
        assert_eq!(bundle.skips.len(), 3);
        assert_eq!(bundle.skips[0].dim(), (2, 8, 16, 16));
        assert_eq!(bundle.skips[1].dim(), (2, 16, 8, 8));
        assert_eq!(bundle.skips[2].dim(), (2, 32, 4, 4));
        assert_eq!(bundle.bottleneck, bundle.skips[2]);
        assert_eq!(cache.records().len(), 1, "attention only at side 4");
    }

    #[test]
    fn zero_input_with_zeroed_biases_gives_zero_features() {
        let cfg = small_cfg();
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let enc = EncoderTower::new(&mut store, &mut rng, "e", 2, None, false, &cfg);
        for pid in store.ids().collect::<Vec<_>>() {
            let n = store.name(pid);
            if n.ends_with(".b") || n.ends_with(".beta") {
                store.value_mut(pid).fill(0.0);
            }
        }
        let x = Array4::zeros((1, 2, 16, 16));
        let (bundle, _) = enc.forward(&store, &x, None, None);
        for skip in &bundle.skips {
            assert!(skip.iter().all(|&v| v == 0.0), "nonzero feature from zero input");
        }
    }

    #[test]
    fn guidance_changes_fused_features_and_zeros_match_none() {
        let cfg = small_cfg();
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let enc = EncoderTower::new(&mut store, &mut rng, "d", 1, None, true, &cfg);
        let x = Array4::from_shape_fn((1, 1, 16, 16), |_| rng.gen::<f64>());
        let guidance: Vec<Array4<f64>> = vec![
            Array4::from_shape_fn((1, 8, 16, 16), |_| rng.gen::<f64>()),
            Array4::from_shape_fn((1, 16, 8, 8), |_| rng.gen::<f64>()),
            Array4::from_shape_fn((1, 32, 4, 4), |_| rng.gen::<f64>()),
        ];
        let zeros: Vec<Array4<f64>> = guidance.iter().map(|g| Array4::zeros(g.raw_dim())).collect();

        let (with_g, _) = enc.forward(&store, &x, None, Some(&guidance));
        let (with_zero, _) = enc.forward(&store, &x, None, Some(&zeros));
        let (with_none, _) = enc.forward(&store, &x, None, None);

        let gap = (&with_g.bottleneck - &with_none.bottleneck)
            .iter()
            .map(|v| v * v)
            .sum::<f64>();
        assert!(gap > 0.0, "guidance had no effect on the bottleneck");
        for (a, b) in with_zero.skips.iter().zip(with_none.skips.iter()) {
            assert_eq!(a, b, "explicit zeros must equal omitted guidance");
        }
    }

    #[test]
    fn encoder_gradients_match_finite_differences() {
        let cfg = GeneratorConfig {
            image_size: 8,
            base_channels: 4,
            num_scales: 2,
            attention_resolution: 4,
            time_embed_dim: 8,
            heads: 2,
            ..small_cfg()
        };
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let enc = EncoderTower::new(&mut store, &mut rng, "d", 1, Some(8), true, &cfg);
        let x = Array4::from_shape_fn((1, 1, 8, 8), |_| rng.gen::<f64>() - 0.5);
        let cond = Array2::from_shape_fn((1, 8), |_| rng.gen::<f64>() - 0.5);
        let guidance: Vec<Array4<f64>> = vec![
            Array4::from_shape_fn((1, 4, 8, 8), |_| rng.gen::<f64>() - 0.5),
            Array4::from_shape_fn((1, 8, 4, 4), |_| rng.gen::<f64>() - 0.5),
        ];
        let gy: Vec<Array4<f64>> = vec![
            Array4::from_shape_fn((1, 4, 8, 8), |_| rng.gen::<f64>() - 0.5),
            Array4::from_shape_fn((1, 8, 4, 4), |_| rng.gen::<f64>() - 0.5),
        ];
        let loss = |store: &ParamStore<f64>, x: &Array4<f64>, cond: &Array2<f64>, g: &[Array4<f64>]| {
            let (bundle, _) = enc.forward(store, x, Some(cond), Some(g));
            bundle.skips.iter().zip(gy.iter()).map(|(s, w)| (s * w).sum()).sum::<f64>()
        };

        let (_, cache) = enc.forward(&store, &x, Some(&cond), Some(&guidance));
        let mut grads = Grads::zeros_like(&store);
        let mut g_cond = Array2::zeros((1, 8));
        let (g_x, g_guid) = enc.backward(&store, &mut grads, &cache, &gy, Some(&mut g_cond));
        let g_guid = g_guid.unwrap();
        assert_eq!(g_guid.len(), 2);

        let eps = 1e-6;
        let check = |fd: f64, want: f64, what: &str| {
            let rel = (fd - want).abs() / want.abs().max(1e-8);
            assert!(rel < 1e-4, "{what}: fd={fd} analytic={want}");
        };
        {
            let mut p = x.clone();
            let mut m = x.clone();
            p[[0, 0, 3, 5]] += eps;
            m[[0, 0, 3, 5]] -= eps;
            check(
                (loss(&store, &p, &cond, &guidance) - loss(&store, &m, &cond, &guidance)) / (2.0 * eps),
                g_x[[0, 0, 3, 5]],
                "input",
            );
        }
        {
            let mut p = cond.clone();
            let mut m = cond.clone();
            p[[0, 3]] += eps;
            m[[0, 3]] -= eps;
            check(
                (loss(&store, &x, &p, &guidance) - loss(&store, &x, &m, &guidance)) / (2.0 * eps),
                g_cond[[0, 3]],
                "cond",
            );
        }
        for (lvl, idx) in [(0usize, [0usize, 2usize, 4usize, 4usize]), (1, [0, 5, 1, 2])] {
            let mut p = guidance.to_vec();
            let mut m = guidance.to_vec();
            p[lvl][idx] += eps;
            m[lvl][idx] -= eps;
            check(
                (loss(&store, &x, &cond, &p) - loss(&store, &x, &cond, &m)) / (2.0 * eps),
                g_guid[lvl][idx],
                "guidance",
            );
        }
        for pname in ["d.stem.w", "d.l0.fuse.w", "d.l1.attn.wq", "d.l0.down.w"] {
            let pid = store.id_by_name(pname).unwrap();
            let flat = store.value(pid).len() / 2;
            let orig = store.value(pid).as_slice().unwrap()[flat];
            let want = grads.get(pid).as_slice().unwrap()[flat];
            store.value_mut(pid).as_slice_mut().unwrap()[flat] = orig + eps;
            let lp = loss(&store, &x, &cond, &guidance);
            store.value_mut(pid).as_slice_mut().unwrap()[flat] = orig - eps;
            let lm = loss(&store, &x, &cond, &guidance);
            store.value_mut(pid).as_slice_mut().unwrap()[flat] = orig;
            check((lp - lm) / (2.0 * eps), want, pname);
        }
    }

    #[test]
    fn per_sample_rows_are_batch_independent() {
        let cfg = small_cfg();
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let enc = EncoderTower::new(&mut store, &mut rng, "e", 2, None, false, &cfg);
        let x = Array4::from_shape_fn((3, 2, 16, 16), |_| rng.gen::<f64>());
        let (full, _) = enc.forward(&store, &x, None, None);
        let one = x.slice(s![1..2, .., .., ..]).to_owned();
        let (solo, _) = enc.forward(&store, &one, None, None);
        let gap = (&full.bottleneck.slice(s![1..2, .., .., ..]) - &solo.bottleneck)
            .iter()
            .map(|v| v.abs())
            .fold(0.0, f64::max);
        assert!(gap < 1e-12, "batch context leaked into a sample: {gap}");
    }
}
