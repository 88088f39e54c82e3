//! Bottleneck feature fusion: each of the two encoder bottlenecks runs
//! through a local conv path and a gated global-context path, the gated sums
//! are joined, and a 1x1 mix maps to the decoder input width. The mix is
//! zero-initialized and added on top of the plain channel concat of the raw
//! bottlenecks, so a fresh fusion is an exact pass-through and training only
//! ever adds refinement to it.

use ndarray::{s, Array2, Array4, Axis};
use rand_chacha::ChaCha8Rng;

use crate::networks::FmJoin;
use crate::nn::functional::{
    broadcast_spatial, global_avg_pool, global_avg_pool_backward, sigmoid_array,
    sigmoid_backward, silu, silu_backward,
};
use crate::nn::layers::{Conv2d, Linear};
use crate::nn::params::{Grads, ParamStore};
use crate::nn::Scalar;

/// One gated extraction path (the unit is instantiated once per encoder).
pub struct FmPath {
    local1: Conv2d,
    local2: Conv2d,
    global1: Conv2d,
    global2: Conv2d,
    gate1: Linear,
    gate2: Linear,
}

pub struct FmPathCache<F: Scalar> {
    f: Array4<F>,
    a1: Array4<F>,
    s1: Array4<F>,
    a2: Array4<F>,
    b1: Array4<F>,
    t1: Array4<F>,
    b2: Array4<F>,
    pooled: Array2<F>,
    g1: Array2<F>,
    gs: Array2<F>,
    gate: Array2<F>,
}

impl FmPath {
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
        name: &str,
        channels: usize,
    ) -> Self {
        let c = channels;
        Self {
            local1: Conv2d::new(store, rng, &format!("{name}.local1"), c, c, 3, 1, 1),
            local2: Conv2d::new(store, rng, &format!("{name}.local2"), c, c, 3, 1, 1),
            global1: Conv2d::new(store, rng, &format!("{name}.global1"), c, c, 3, 1, 1),
            global2: Conv2d::new(store, rng, &format!("{name}.global2"), c, c, 3, 1, 1),
            gate1: Linear::new(store, rng, &format!("{name}.gate1"), c, c, true),
            gate2: Linear::new(store, rng, &format!("{name}.gate2"), c, c, true),
        }
    }

    /// Two 3x3 convs with SiLU; spatial detail branch.
    pub fn local_extract<F: Scalar>(&self, store: &ParamStore<F>, f: &Array4<F>) -> Array4<F> {
        let a1 = self.local1.forward(store, f);
        let s1 = silu(&a1);
        let a2 = self.local2.forward(store, &s1);
        silu(&a2)
    }

    /// Convs, SiLU, then global average pooling broadcast back over space.
    /// Returns the spatially constant map and the pooled [B, C] vector.
    pub fn global_extract<F: Scalar>(
        &self,
        store: &ParamStore<F>,
        f: &Array4<F>,
    ) -> (Array4<F>, Array2<F>) {
        let (_, _, h, w) = f.dim();
        let b1 = self.global1.forward(store, f);
        let t1 = silu(&b1);
        let b2 = self.global2.forward(store, &t1);
        let pooled = global_avg_pool(&silu(&b2));
        (broadcast_spatial(&pooled, h, w), pooled)
    }

    /// Per-channel gates in (0, 1) from the pooled global features.
    pub fn feature_adapt<F: Scalar>(&self, store: &ParamStore<F>, pooled: &Array2<F>) -> Array2<F> {
        let g1 = self.gate1.forward(store, pooled);
        let gs = silu(&g1);
        sigmoid_array(&self.gate2.forward(store, &gs))
    }

    /// Gated sum: broadcast(pooled * gate) + local.
    pub fn forward<F: Scalar>(
        &self,
        store: &ParamStore<F>,
        f: &Array4<F>,
    ) -> (Array4<F>, FmPathCache<F>) {
        let (_, _, h, w) = f.dim();
        let a1 = self.local1.forward(store, f);
        let s1 = silu(&a1);
        let a2 = self.local2.forward(store, &s1);
        let local = silu(&a2);

        let b1 = self.global1.forward(store, f);
        let t1 = silu(&b1);
        let b2 = self.global2.forward(store, &t1);
        let pooled = global_avg_pool(&silu(&b2));

        let g1 = self.gate1.forward(store, &pooled);
        let gs = silu(&g1);
        let gate = sigmoid_array(&self.gate2.forward(store, &gs));

        let mut out = broadcast_spatial(&(&pooled * &gate), h, w);
        out += &local;
        let cache = FmPathCache { f: f.clone(), a1, s1, a2, b1, t1, b2, pooled, g1, gs, gate };
        (out, cache)
    }

    pub fn backward<F: Scalar>(
        &self,
        store: &ParamStore<F>,
        grads: &mut Grads<F>,
        cache: &FmPathCache<F>,
        g_out: &Array4<F>,
    ) -> Array4<F> {
        let (_, _, h, w) = cache.f.dim();
        // Broadcast backward: sum over space.
        let g_pg = g_out.sum_axis(Axis(3)).sum_axis(Axis(2));
        let g_gate = &g_pg * &cache.pooled;
        let mut g_pooled = &g_pg * &cache.gate;

        let g_logits = sigmoid_backward(&g_gate, &cache.gate);
        let g_gs = self.gate2.backward(store, grads, &cache.gs, &g_logits);
        let g_g1 = silu_backward(&g_gs, &cache.g1);
        g_pooled += &self.gate1.backward(store, grads, &cache.pooled, &g_g1);

        let g_gfeat = global_avg_pool_backward(&g_pooled, h, w);
        let g_b2 = silu_backward(&g_gfeat, &cache.b2);
        let g_t1 = self.global2.backward(store, grads, &cache.t1, &g_b2);
        let g_b1 = silu_backward(&g_t1, &cache.b1);
        let mut g_f = self.global1.backward(store, grads, &cache.f, &g_b1);

        let g_a2 = silu_backward(g_out, &cache.a2);
        let g_s1 = self.local2.backward(store, grads, &cache.s1, &g_a2);
        let g_a1 = silu_backward(&g_s1, &cache.a1);
        g_f += &self.local1.backward(store, grads, &cache.f, &g_a1);
        g_f
    }
}

pub struct FeatureMaximizer {
    pub path_de: FmPath,
    pub path_se: FmPath,
    mix: Conv2d,
    pub join: FmJoin,
    pub channels: usize,
}

pub struct FmCache<F: Scalar> {
    de: FmPathCache<F>,
    se: FmPathCache<F>,
    joined: Array4<F>,
}

pub struct FmForward<F: Scalar> {
    pub z_i: Array4<F>,
    pub cache: FmCache<F>,
}

impl FeatureMaximizer {
    /// `channels` is the bottleneck width of each encoder; the output is
    /// always twice that, so the decoder geometry does not depend on `join`.
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
        name: &str,
        channels: usize,
        join: FmJoin,
    ) -> Self {
        let mix_in = match join {
            FmJoin::Concat => 2 * channels,
            FmJoin::Add => channels,
        };
        Self {
            path_de: FmPath::new(store, rng, &format!("{name}.de"), channels),
            path_se: FmPath::new(store, rng, &format!("{name}.se"), channels),
            mix: Conv2d::new_zero_init(store, &format!("{name}.mix"), mix_in, 2 * channels, 1, 1, 0),
            join,
            channels,
        }
    }

    pub fn fuse<F: Scalar>(
        &self,
        store: &ParamStore<F>,
        de_bottleneck: &Array4<F>,
        se_bottleneck: &Array4<F>,
    ) -> FmForward<F> {
        let (out_de, c_de) = self.path_de.forward(store, de_bottleneck);
        let (out_se, c_se) = self.path_se.forward(store, se_bottleneck);
        let joined = join_maps(self.join, &out_de, &out_se);
        let mut z_i = self.mix.forward(store, &joined);
        z_i += &plain_concat(de_bottleneck, se_bottleneck);
        FmForward { z_i, cache: FmCache { de: c_de, se: c_se, joined } }
    }

    /// Returns gradients for the two bottleneck inputs, (de, se).
    pub fn backward<F: Scalar>(
        &self,
        store: &ParamStore<F>,
        grads: &mut Grads<F>,
        cache: &FmCache<F>,
        g_z: &Array4<F>,
    ) -> (Array4<F>, Array4<F>) {
        let g_joined = self.mix.backward(store, grads, &cache.joined, g_z);
        let c = self.channels;
        let (g_de_out, g_se_out) = match self.join {
            FmJoin::Concat => (
                g_joined.slice(s![.., ..c, .., ..]).to_owned(),
                g_joined.slice(s![.., c.., .., ..]).to_owned(),
            ),
            FmJoin::Add => (g_joined.clone(), g_joined),
        };
        let mut g_de = self.path_de.backward(store, grads, &cache.de, &g_de_out);
        let mut g_se = self.path_se.backward(store, grads, &cache.se, &g_se_out);
        let (g_de_skip, g_se_skip) = plain_concat_backward(g_z, c);
        g_de += &g_de_skip;
        g_se += &g_se_skip;
        (g_de, g_se)
    }
}

fn join_maps<F: Scalar>(join: FmJoin, a: &Array4<F>, b: &Array4<F>) -> Array4<F> {
    match join {
        FmJoin::Concat => ndarray::concatenate(Axis(1), &[a.view(), b.view()]).unwrap(),
        FmJoin::Add => a + b,
    }
}

/// Fusion used when the maximizer is ablated away: plain channel concat of
/// the two bottlenecks, no parameters.
pub fn plain_concat<F: Scalar>(de: &Array4<F>, se: &Array4<F>) -> Array4<F> {
    ndarray::concatenate(Axis(1), &[de.view(), se.view()]).unwrap()
}

/// Gradient split matching `plain_concat`.
pub fn plain_concat_backward<F: Scalar>(g: &Array4<F>, c: usize) -> (Array4<F>, Array4<F>) {
    (g.slice(s![.., ..c, .., ..]).to_owned(), g.slice(s![.., c.., .., ..]).to_owned())
}
