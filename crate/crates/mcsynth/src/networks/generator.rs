//! The conditional denoiser: a semantic encoder over the condition images, a
//! diffusive encoder over the noisy target guided per scale by the semantic
//! features, bottleneck fusion, and a skip decoder estimating the clean
//! target. Conditioning on step index and latent noise enters every residual
//! block through zero-init scale-shift modulation.

use ndarray::{Array2, Array4};
use rand_chacha::ChaCha8Rng;

use super::blocks::time_embed_batch;
use super::config::GeneratorConfig;
use super::decoder::{Decoder, DecoderCache};
use super::encoder::{EncoderCache, EncoderTower, FeatureBundle};
use crate::fusion::{plain_concat, plain_concat_backward, FeatureMaximizer, FmCache};
use crate::nn::attention::AttentionRecord;
use crate::nn::functional::{silu, silu_backward};
use crate::nn::layers::Linear;
use crate::nn::params::{fork_rng, Grads, ParamStore};
use crate::nn::Scalar;
use crate::{Error, Result};

pub struct Generator {
    pub cfg: GeneratorConfig,
    pub se: EncoderTower,
    pub de: EncoderTower,
    pub fm: Option<FeatureMaximizer>,
    z1: Linear,
    z2: Linear,
    pub decoder: Decoder,
}

pub struct GenCache<F: Scalar> {
    z_in: Array2<F>,
    z_mid: Array2<F>,
    z_silu: Array2<F>,
    se_bundle: FeatureBundle<F>,
    se_cache: EncoderCache<F>,
    de_cache: EncoderCache<F>,
    fm_cache: Option<FmCache<F>>,
    dec_cache: DecoderCache<F>,
}

pub struct GenForward<F: Scalar> {
    /// Estimate of the clean target in [-1, 1].
    pub x0_hat: Array4<F>,
    /// Decoder attention records, forward order.
    pub records: Vec<AttentionRecord<F>>,
    pub cache: GenCache<F>,
}

impl Generator {
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
        cfg: &GeneratorConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        // Fixed fork order; ablation flags must not reshuffle sibling inits.
        let mut r_se = fork_rng(rng);
        let mut r_de = fork_rng(rng);
        let mut r_fm = fork_rng(rng);
        let mut r_z = fork_rng(rng);
        let mut r_dec = fork_rng(rng);
        let se = EncoderTower::new(store, &mut r_se, "g.se", cfg.in_channels_cond, None, false, cfg);
        let de = EncoderTower::new(
            store,
            &mut r_de,
            "g.de",
            cfg.in_channels_target,
            Some(cfg.time_embed_dim),
            true,
            cfg,
        );
        let fm = (!cfg.no_fm).then(|| {
            FeatureMaximizer::new(store, &mut r_fm, "g.fm", cfg.channels_at(cfg.bottom()), cfg.fm_join)
        });
        let z1 = Linear::new(store, &mut r_z, "g.zmlp.fc1", cfg.z_dim, cfg.time_embed_dim, true);
        let z2 =
            Linear::new(store, &mut r_z, "g.zmlp.fc2", cfg.time_embed_dim, cfg.time_embed_dim, true);
        let decoder = Decoder::new(
            store,
            &mut r_dec,
            "g.dec",
            cfg.in_channels_target,
            Some(cfg.time_embed_dim),
            2,
            2,
            cfg,
        );
        Ok(Self { cfg: cfg.clone(), se, de, fm, z1, z2, decoder })
    }

    fn check_inputs<F: Scalar>(
        &self,
        x_t: &Array4<F>,
        y: &Array4<F>,
        z: &Array2<F>,
        ts: &[usize],
    ) -> Result<()> {
        let c = &self.cfg;
        let b = x_t.dim().0;
        let want_x = (b, c.in_channels_target, c.image_size, c.image_size);
        let want_y = (b, c.in_channels_cond, c.image_size, c.image_size);
        if x_t.dim() != want_x {
            return Err(Error::ShapeMismatch(format!("x_t {:?}, want {:?}", x_t.dim(), want_x)));
        }
        if y.dim() != want_y {
            return Err(Error::ShapeMismatch(format!("y {:?}, want {:?}", y.dim(), want_y)));
        }
        if z.dim() != (b, c.z_dim) {
            return Err(Error::ShapeMismatch(format!("z {:?}, want {:?}", z.dim(), (b, c.z_dim))));
        }
        if ts.len() != b {
            return Err(Error::ShapeMismatch(format!("{} step indices for batch {b}", ts.len())));
        }
        Ok(())
    }

    /// Per-sample conditioning vector: sinusoidal step embedding plus the
    /// latent noise pushed through a two-layer SiLU network.
    fn cond_vector<F: Scalar>(
        &self,
        store: &ParamStore<F>,
        z: &Array2<F>,
        ts: &[usize],
    ) -> Result<(Array2<F>, Array2<F>, Array2<F>)> {
        let t_emb = time_embed_batch(ts, self.cfg.time_embed_dim)?;
        let z_mid = self.z1.forward(store, z);
        let z_silu = silu(&z_mid);
        let z_out = self.z2.forward(store, &z_silu);
        Ok((t_emb + &z_out, z_mid, z_silu))
    }

    pub fn forward<F: Scalar>(
        &self,
        store: &ParamStore<F>,
        x_t: &Array4<F>,
        y: &Array4<F>,
        z: &Array2<F>,
        ts: &[usize],
    ) -> Result<GenForward<F>> {
        self.check_inputs(x_t, y, z, ts)?;
        let (cond, z_mid, z_silu) = self.cond_vector(store, z, ts)?;
        let (se_bundle, se_cache) = self.se.forward(store, y, None, None);
        let guidance = (!self.cfg.no_multiscale).then_some(se_bundle.skips.as_slice());
        let (de_bundle, de_cache) = self.de.forward(store, x_t, Some(&cond), guidance);

        let (z_i, fm_cache) = match &self.fm {
            Some(fm) => {
                let fwd = fm.fuse(store, &de_bundle.bottleneck, &se_bundle.bottleneck);
                (fwd.z_i, Some(fwd.cache))
            }
            None => (plain_concat(&de_bundle.bottleneck, &se_bundle.bottleneck), None),
        };

        let se_for_decoder = if self.cfg.no_multiscale {
            FeatureBundle {
                skips: se_bundle.skips.iter().map(|s| Array4::zeros(s.raw_dim())).collect(),
                bottleneck: Array4::zeros(se_bundle.bottleneck.raw_dim()),
            }
        } else {
            FeatureBundle {
                skips: se_bundle.skips.clone(),
                bottleneck: se_bundle.bottleneck.clone(),
            }
        };
        let (x0_hat, records, dec_cache) =
            self.decoder.forward(store, &z_i, &[&de_bundle, &se_for_decoder], Some(&cond));
        Ok(GenForward {
            x0_hat,
            records,
            cache: GenCache {
                z_in: z.clone(),
                z_mid,
                z_silu,
                se_bundle,
                se_cache,
                de_cache,
                fm_cache,
                dec_cache,
            },
        })
    }

    /// `g_records` pairs with `GenForward::records`. Returns gradients for
    /// the noisy target input and the condition images.
    pub fn backward<F: Scalar>(
        &self,
        store: &ParamStore<F>,
        grads: &mut Grads<F>,
        cache: &GenCache<F>,
        g_x0: &Array4<F>,
        g_records: Option<&[Array4<F>]>,
    ) -> (Array4<F>, Array4<F>) {
        let ted = self.cfg.time_embed_dim;
        let b = g_x0.dim().0;
        let mut g_cond: Array2<F> = Array2::zeros((b, ted));
        let (g_z_i, g_dec_skips) = self.decoder.backward(
            store,
            grads,
            &cache.dec_cache,
            g_x0,
            g_records,
            Some(&mut g_cond),
        );

        let (g_de_bn, g_se_bn) = match (&self.fm, &cache.fm_cache) {
            (Some(fm), Some(fc)) => fm.backward(store, grads, fc, &g_z_i),
            _ => plain_concat_backward(&g_z_i, self.cfg.channels_at(self.cfg.bottom())),
        };

        // Diffusive-encoder skip gradients: scales below the bottom come from
        // the decoder, the bottom from the fusion stage.
        let kb = self.cfg.bottom();
        let mut g_de_skips: Vec<Array4<F>> = g_dec_skips[0].clone();
        g_de_skips.push(g_de_bn);
        debug_assert_eq!(g_de_skips.len(), self.cfg.num_scales);
        let (g_x_t, g_guidance) =
            self.de.backward(store, grads, &cache.de_cache, &g_de_skips, Some(&mut g_cond));

        // Semantic-encoder skip gradients: decoder skips and per-scale
        // guidance vanish under the multiscale ablation (those paths saw
        // zeros); the bottleneck fusion path always contributes.
        let mut g_se_skips: Vec<Array4<F>> = if self.cfg.no_multiscale {
            cache.se_bundle.skips.iter().map(|s| Array4::zeros(s.raw_dim())).collect()
        } else {
            let mut acc: Vec<Array4<F>> = g_dec_skips[1].clone();
            acc.push(Array4::zeros(cache.se_bundle.skips[kb].raw_dim()));
            let g_guidance = g_guidance.expect("diffusive encoder always has fusion layers");
            for (a, g) in acc.iter_mut().zip(g_guidance.iter()) {
                *a += g;
            }
            acc
        };
        g_se_skips[kb] += &g_se_bn;
        let (g_y, _) = self.se.backward(store, grads, &cache.se_cache, &g_se_skips, None);

        // Latent path: cond = t_emb + z2(silu(z1(z))).
        let g_z_silu = self.z2.backward(store, grads, &cache.z_silu, &g_cond);
        let g_z_mid = silu_backward(&g_z_silu, &cache.z_mid);
        let _g_z = self.z1.backward(store, grads, &cache.z_in, &g_z_mid);

        (g_x_t, g_y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn tiny_cfg() -> GeneratorConfig {
        GeneratorConfig {
            image_size: 8,
            in_channels_target: 1,
            in_channels_cond: 2,
            base_channels: 4,
            num_scales: 2,
            resnet_blocks_per_scale: 1,
            attention_resolution: 4,
            time_embed_dim: 8,
            z_dim: 4,
            heads: 2,
            ..Default::default()
        }
    }

    fn build(cfg: &GeneratorConfig, seed: u64) -> (ParamStore<f64>, Generator, ChaCha8Rng) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = Generator::new(&mut store, &mut rng, cfg).unwrap();
        (store, g, rng)
    }

    fn inputs(
        rng: &mut ChaCha8Rng,
        b: usize,
        cfg: &GeneratorConfig,
    ) -> (Array4<f64>, Array4<f64>, Array2<f64>, Vec<usize>) {
        let s = cfg.image_size;
        let x_t = Array4::from_shape_fn((b, cfg.in_channels_target, s, s), |_| rng.gen::<f64>() - 0.5);
        let y = Array4::from_shape_fn((b, cfg.in_channels_cond, s, s), |_| rng.gen::<f64>() - 0.5);
        let z = Array2::from_shape_fn((b, cfg.z_dim), |_| rng.gen::<f64>() - 0.5);
        let ts = (0..b).map(|i| 1 + (i % 4)).collect();
        (x_t, y, z, ts)
    }

    #[test]
    fn forward_shape_bounds_and_records() {
        let cfg = tiny_cfg();
        let (store, g, mut rng) = build(&cfg, 1);
        let (x_t, y, z, ts) = inputs(&mut rng, 2, &cfg);
        let f = g.forward(&store, &x_t, &y, &z, &ts).unwrap();
        assert_eq!(f.x0_hat.dim(), (2, 1, 8, 8));
        assert!(f.x0_hat.iter().all(|&v| (-1.0..=1.0).contains(&v)));
        assert_eq!(f.records.len(), 1);
        assert_eq!(f.records[0].h * f.records[0].w, 16);
    }

    #[test]
    fn construction_is_seed_deterministic() {
        let cfg = tiny_cfg();
        let (a, _, _) = build(&cfg, 7);
        let (b, _, _) = build(&cfg, 7);
        let (c, _, _) = build(&cfg, 8);
        assert_eq!(a.hash_hex(), b.hash_hex());
        assert_ne!(a.hash_hex(), c.hash_hex());
    }

    #[test]
    fn ablation_flags_leave_shared_parameter_inits_untouched() {
        let (full, _, _) = build(&tiny_cfg(), 42);
        let (no_fm, _, _) = build(&GeneratorConfig { no_fm: true, ..tiny_cfg() }, 42);
        let (single, _, _) =
            build(&GeneratorConfig { in_channels_cond: 1, ..tiny_cfg() }, 42);
        for (name, v) in full.iter() {
            if name.starts_with("g.fm") {
                continue;
            }
            let other = no_fm.id_by_name(name).expect("shared param must exist");
            assert_eq!(v, no_fm.value(other), "{name} differs between full and no_fm");
            if !name.starts_with("g.se.stem") {
                let other = single.id_by_name(name).expect("shared param must exist");
                assert_eq!(v, single.value(other), "{name} differs between cond widths");
            }
        }
    }

    #[test]
    fn condition_images_change_the_output() {
        let cfg = tiny_cfg();
        let (store, g, mut rng) = build(&cfg, 2);
        let (x_t, y, z, ts) = inputs(&mut rng, 1, &cfg);
        let y2 = Array4::from_shape_fn(y.raw_dim(), |_| rng.gen::<f64>() - 0.5);
        let a = g.forward(&store, &x_t, &y, &z, &ts).unwrap().x0_hat;
        let b = g.forward(&store, &x_t, &y2, &z, &ts).unwrap().x0_hat;
        let gap = (&a - &b).iter().map(|v| v * v).sum::<f64>();
        assert!(gap > 0.0, "different conditions must steer the estimate");
    }

    #[test]
    fn different_conditions_separate_the_bottlenecks() {
        let cfg = tiny_cfg();
        let (store, g, mut rng) = build(&cfg, 3);
        let (_, y, _, _) = inputs(&mut rng, 1, &cfg);
        let y2 = Array4::from_shape_fn(y.raw_dim(), |_| rng.gen::<f64>() - 0.5);
        let (ba, _) = g.se.forward(&store, &y, None, None);
        let (bb, _) = g.se.forward(&store, &y2, None, None);
        let gap = (&ba.bottleneck - &bb.bottleneck).iter().map(|v| v * v).sum::<f64>();
        assert!(gap > 0.0);
    }

    #[test]
    fn step_and_latent_are_inert_at_init_then_active_after_perturbation() {
        let cfg = tiny_cfg();
        let (mut store, g, mut rng) = build(&cfg, 4);
        let (x_t, y, z, _) = inputs(&mut rng, 1, &cfg);
        let z2 = Array2::from_shape_fn(z.raw_dim(), |_| rng.gen::<f64>());
        let a = g.forward(&store, &x_t, &y, &z, &[1]).unwrap().x0_hat;
        let b = g.forward(&store, &x_t, &y, &z2, &[3]).unwrap().x0_hat;
        let gap0 = (&a - &b).iter().map(|v| v.abs()).fold(0.0, f64::max);
        assert!(gap0 < 1e-14, "zero-init modulation must ignore t and z, gap {gap0}");

        for pid in store.ids().collect::<Vec<_>>() {
            if store.name(pid).contains(".mod.") {
                store.value_mut(pid).mapv_inplace(|_| rng.gen::<f64>() * 0.2 - 0.1);
            }
        }
        let a = g.forward(&store, &x_t, &y, &z, &[1]).unwrap().x0_hat;
        let b = g.forward(&store, &x_t, &y, &z2, &[3]).unwrap().x0_hat;
        let gap1 = (&a - &b).iter().map(|v| v * v).sum::<f64>();
        assert!(gap1 > 0.0, "modulation must react to t and z once weights move");
    }

    #[test]
    fn bad_shapes_are_rejected() {
        let cfg = tiny_cfg();
        let (store, g, mut rng) = build(&cfg, 5);
        let (x_t, y, z, ts) = inputs(&mut rng, 2, &cfg);
        let bad_y = Array4::<f64>::zeros((2, 1, 8, 8));
        assert!(g.forward(&store, &x_t, &bad_y, &z, &ts).is_err());
        let bad_z = Array2::<f64>::zeros((2, 3));
        assert!(g.forward(&store, &x_t, &y, &bad_z, &ts).is_err());
        assert!(g.forward(&store, &x_t, &y, &z, &[1]).is_err());
    }

    #[test]
    fn no_fm_drops_fusion_params_and_still_runs() {
        let cfg = GeneratorConfig { no_fm: true, ..tiny_cfg() };
        let (store, g, mut rng) = build(&cfg, 6);
        assert!(store.iter().all(|(n, _)| !n.starts_with("g.fm")));
        let (x_t, y, z, ts) = inputs(&mut rng, 1, &cfg);
        let f = g.forward(&store, &x_t, &y, &z, &ts).unwrap();
        assert_eq!(f.x0_hat.dim(), (1, 1, 8, 8));
    }

    #[test]
    fn no_multiscale_still_sees_conditions_through_the_bottleneck() {
        let cfg = GeneratorConfig { no_multiscale: true, ..tiny_cfg() };
        let (store, g, mut rng) = build(&cfg, 7);
        let (x_t, y, z, ts) = inputs(&mut rng, 1, &cfg);
        let y2 = Array4::from_shape_fn(y.raw_dim(), |_| rng.gen::<f64>() - 0.5);
        let a = g.forward(&store, &x_t, &y, &z, &ts).unwrap().x0_hat;
        let b = g.forward(&store, &x_t, &y2, &z, &ts).unwrap().x0_hat;
        let gap = (&a - &b).iter().map(|v| v * v).sum::<f64>();
        assert!(gap > 0.0, "bottleneck fusion path must stay alive");
    }

    #[test]
    fn generator_gradients_match_finite_differences() {
        for cfg in [tiny_cfg(), GeneratorConfig { no_fm: true, no_multiscale: true, ..tiny_cfg() }] {
            let (mut store, g, mut rng) = build(&cfg, 8);
            // Enable the modulation path so its gradients are nontrivial.
            for pid in store.ids().collect::<Vec<_>>() {
                if store.name(pid).contains(".mod.") {
                    store.value_mut(pid).mapv_inplace(|_| rng.gen::<f64>() * 0.1 - 0.05);
                }
            }
            let (x_t, y, z, ts) = inputs(&mut rng, 1, &cfg);
            let gy = Array4::from_shape_fn((1, 1, 8, 8), |_| rng.gen::<f64>() - 0.5);
            let g_raw = vec![Array4::from_shape_fn((1, 2, 16, 16), |_| rng.gen::<f64>() * 0.1)];

            let loss = |store: &ParamStore<f64>, x_t: &Array4<f64>, y: &Array4<f64>| {
                let f = g.forward(store, x_t, y, &z, &ts).unwrap();
                let mut l = (&f.x0_hat * &gy).sum();
                for (r, gr) in f.records.iter().zip(g_raw.iter()) {
                    l += (&r.raw * gr).sum();
                }
                l
            };

            let f = g.forward(&store, &x_t, &y, &z, &ts).unwrap();
            let mut grads = Grads::zeros_like(&store);
            let (g_x_t, g_y) =
                g.backward(&store, &mut grads, &f.cache, &gy, Some(&g_raw));

            let eps = 1e-6;
            let check = |fd: f64, want: f64, what: &str| {
                let rel = (fd - want).abs() / want.abs().max(1e-8);
                assert!(rel < 1e-3, "{what}: fd={fd} analytic={want} rel={rel}");
            };
            for (bi, c, yy, xx) in [(0usize, 0usize, 2usize, 6usize), (0, 0, 7, 1)] {
                let mut p = x_t.clone();
                let mut m = x_t.clone();
                p[[bi, c, yy, xx]] += eps;
                m[[bi, c, yy, xx]] -= eps;
                check((loss(&store, &p, &y) - loss(&store, &m, &y)) / (2.0 * eps), g_x_t[[bi, c, yy, xx]], "x_t");
            }
            for (bi, c, yy, xx) in [(0usize, 1usize, 4usize, 4usize)] {
                let mut p = y.clone();
                let mut m = y.clone();
                p[[bi, c, yy, xx]] += eps;
                m[[bi, c, yy, xx]] -= eps;
                check((loss(&store, &x_t, &p) - loss(&store, &x_t, &m)) / (2.0 * eps), g_y[[bi, c, yy, xx]], "y");
            }
            let probe: Vec<&str> = if cfg.no_fm {
                vec!["g.se.stem.w", "g.de.l0.fuse.w", "g.zmlp.fc1.w", "g.dec.head.conv.w"]
            } else {
                vec!["g.se.stem.w", "g.de.l0.fuse.w", "g.fm.mix.w", "g.zmlp.fc1.w", "g.dec.l1.attn.wv", "g.de.l0.b0.mod.w"]
            };
            for pname in probe {
                let pid = store.id_by_name(pname).unwrap();
                let flat = store.value(pid).len() / 2;
                let orig = store.value(pid).as_slice().unwrap()[flat];
                let want = grads.get(pid).as_slice().unwrap()[flat];
                store.value_mut(pid).as_slice_mut().unwrap()[flat] = orig + eps;
                let lp = loss(&store, &x_t, &y);
                store.value_mut(pid).as_slice_mut().unwrap()[flat] = orig - eps;
                let lm = loss(&store, &x_t, &y);
                store.value_mut(pid).as_slice_mut().unwrap()[flat] = orig;
                check((lp - lm) / (2.0 * eps), want, pname);
            }
        }
    }

    #[test]
    fn three_scale_gradients_match_finite_differences() {
        // With two consumed skip scales the decoder-to-encoder gradient
        // routing is order-sensitive; two-scale configs cannot catch swaps.
        let cfg = GeneratorConfig {
            image_size: 16,
            num_scales: 3,
            attention_resolution: 4,
            ..tiny_cfg()
        };
        let (store, g, mut rng) = build(&cfg, 21);
        let (x_t, y, z, ts) = inputs(&mut rng, 1, &cfg);
        let gy = Array4::from_shape_fn((1, 1, 16, 16), |_| rng.gen::<f64>() - 0.5);

        let loss = |store: &ParamStore<f64>, x_t: &Array4<f64>, y: &Array4<f64>| {
            (&g.forward(store, x_t, y, &z, &ts).unwrap().x0_hat * &gy).sum()
        };
        let f = g.forward(&store, &x_t, &y, &z, &ts).unwrap();
        let mut grads = Grads::zeros_like(&store);
        let (g_x_t, g_y) = g.backward(&store, &mut grads, &f.cache, &gy, None);

        let eps = 1e-6;
        let check = |fd: f64, want: f64, what: &str| {
            let rel = (fd - want).abs() / want.abs().max(1e-8);
            assert!(rel < 1e-3, "{what}: fd={fd} analytic={want} rel={rel}");
        };
        {
            let mut p = x_t.clone();
            let mut m = x_t.clone();
            p[[0, 0, 11, 3]] += eps;
            m[[0, 0, 11, 3]] -= eps;
            check((loss(&store, &p, &y) - loss(&store, &m, &y)) / (2.0 * eps), g_x_t[[0, 0, 11, 3]], "x_t");
        }
        {
            let mut p = y.clone();
            let mut m = y.clone();
            p[[0, 1, 6, 12]] += eps;
            m[[0, 1, 6, 12]] -= eps;
            check((loss(&store, &x_t, &p) - loss(&store, &x_t, &m)) / (2.0 * eps), g_y[[0, 1, 6, 12]], "y");
        }
    }
}
