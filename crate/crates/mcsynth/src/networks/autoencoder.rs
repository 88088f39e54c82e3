//! Attention autoencoder over clean target images. Its decoder mirrors the
//! generator decoder's attention placement so the two record lists align
//! layer for layer; the records drive the attention supervision loss.

use ndarray::Array4;
use rand_chacha::ChaCha8Rng;

use super::config::GeneratorConfig;
use super::decoder::{Decoder, DecoderCache};
use super::encoder::{EncoderCache, EncoderTower};
use crate::nn::attention::AttentionRecord;
use crate::nn::params::{Grads, ParamStore};
use crate::nn::Scalar;
use crate::Result;

pub struct Autoencoder {
    pub cfg: GeneratorConfig,
    pub enc: EncoderTower,
    pub dec: Decoder,
}

pub struct AeCache<F: Scalar> {
    enc: EncoderCache<F>,
    dec: DecoderCache<F>,
}

pub struct AeForward<F: Scalar> {
    pub recon: Array4<F>,
    /// Decoder attention records, forward order.
    pub records: Vec<AttentionRecord<F>>,
    pub cache: AeCache<F>,
}

impl Autoencoder {
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
        cfg: &GeneratorConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let enc =
            EncoderTower::new(store, rng, "ae.enc", cfg.in_channels_target, None, false, cfg);
        let dec =
            Decoder::new(store, rng, "ae.dec", cfg.in_channels_target, None, 1, 1, cfg);
        Ok(Self { cfg: cfg.clone(), enc, dec })
    }

    pub fn forward<F: Scalar>(&self, store: &ParamStore<F>, x: &Array4<F>) -> Result<AeForward<F>> {
        let want = (x.dim().0, self.cfg.in_channels_target, self.cfg.image_size, self.cfg.image_size);
        if x.dim() != want {
            return Err(crate::Error::ShapeMismatch(format!("{:?}, want {:?}", x.dim(), want)));
        }
        let (bundle, enc_cache) = self.enc.forward(store, x, None, None);
        let (recon, records, dec_cache) =
            self.dec.forward(store, &bundle.bottleneck, &[&bundle], None);
        Ok(AeForward { recon, records, cache: AeCache { enc: enc_cache, dec: dec_cache } })
    }

    /// Backpropagates a reconstruction gradient; returns the input gradient.
    pub fn backward<F: Scalar>(
        &self,
        store: &ParamStore<F>,
        grads: &mut Grads<F>,
        cache: &AeCache<F>,
        g_recon: &Array4<F>,
    ) -> Array4<F> {
        let (g_bn, g_skips) =
            self.dec.backward(store, grads, &cache.dec, g_recon, None, None);
        // The bottleneck doubles as the deepest skip, so its gradient folds
        // into the last slot.
        let mut g_enc_skips: Vec<Array4<F>> = g_skips[0].clone();
        g_enc_skips.push(g_bn);
        debug_assert_eq!(g_enc_skips.len(), self.cfg.num_scales);
        let (g_x, _) = self.enc.backward(store, grads, &cache.enc, &g_enc_skips, None);
        g_x
    }
}
