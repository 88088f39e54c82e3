//! Adversarial training of the few-step denoiser: alternating discriminator
//! and generator updates on chain-consistent transition pairs, a frozen
//! attention autoencoder supplying saliency targets, Adam optimization, and
//! epoch-level checkpointing with bit-exact resume.

use std::io::Write as IoWrite;
use std::path::Path;

use ndarray::{s, Array1, Array2, Array4, ArrayD, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::data::denormalize;
use crate::diffusion::{forward_pair, randn4, reverse_sample_loop, NoiseSchedule};
use crate::losses::{
    d_loss_grads, fa_loss_with_grads, g_adv_grads, l1_grads, r1_penalty, total_generator_loss,
};
use crate::metrics::{psnr_batch, ssim_batch};
use crate::networks::{Autoencoder, Discriminator, Generator, GeneratorConfig};
use crate::nn::params::{fork_rng, Grads, ParamStore};
use crate::nn::Scalar;
use crate::{Error, Result};

const AE_SALT: u64 = 0xae5e_ed00_0000_0001;
const EVAL_SALT: u64 = 0xe7a1_5eed_0000_0002;
const SHUFFLE_SALT: u64 = 0x5aff_1e00_0000_0003;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub ae_epochs: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub t_max: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub r1_gamma: f64,
    pub batch_size: usize,
    pub seed: u64,
    #[serde(default)]
    pub no_fm: bool,
    #[serde(default)]
    pub no_fa_loss: bool,
    #[serde(default)]
    pub no_multiscale: bool,
    #[serde(default)]
    pub single_contrast: bool,
    #[serde(default)]
    pub no_adv: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            ae_epochs: 40,
            lr: 1e-3,
            beta1: 0.5,
            beta2: 0.9,
            t_max: 4,
            beta_min: 0.1,
            beta_max: 20.0,
            lambda1: 100.0,
            lambda2: 200.0,
            r1_gamma: 1.0,
            batch_size: 4,
            seed: 0,
            no_fm: false,
            no_fa_loss: false,
            no_multiscale: false,
            single_contrast: false,
            no_adv: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr < 0.0 || !self.lr.is_finite() {
            return Err(Error::Config(format!("learning rate {} out of range", self.lr)));
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("{name} {v} must be in [0, 1)")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        for (name, v) in
            [("lambda1", self.lambda1), ("lambda2", self.lambda2), ("r1_gamma", self.r1_gamma)]
        {
            if v < 0.0 || !v.is_finite() {
                return Err(Error::Config(format!("{name} {v} must be non-negative")));
            }
        }
        NoiseSchedule::new(self.t_max, self.beta_min, self.beta_max)?;
        Ok(())
    }

    /// Architecture implied by the run flags.
    pub fn generator_config(&self, base: &GeneratorConfig) -> GeneratorConfig {
        GeneratorConfig {
            no_fm: self.no_fm,
            no_multiscale: self.no_multiscale,
            in_channels_cond: if self.single_contrast { 1 } else { base.in_channels_cond },
            ..base.clone()
        }
    }
}

/// Adam with bias correction; moment buffers align with parameter ids.
pub struct Adam<F: Scalar> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<ArrayD<F>>,
    v: Vec<ArrayD<F>>,
}

impl<F: Scalar> Adam<F> {
    pub fn new(store: &ParamStore<F>, lr: f64, beta1: f64, beta2: f64) -> Self {
        let m = store.ids().map(|id| ArrayD::zeros(store.value(id).raw_dim())).collect();
        let v = store.ids().map(|id| ArrayD::zeros(store.value(id).raw_dim())).collect();
        Self { lr, beta1, beta2, eps: 1e-8, step: 0, m, v }
    }

    pub fn step(&mut self, store: &mut ParamStore<F>, grads: &Grads<F>) {
        self.step += 1;
        let t = self.step as f64;
        let b1 = F::from_f64(self.beta1);
        let b2 = F::from_f64(self.beta2);
        let one = F::one();
        let bc1 = F::from_f64(1.0 - self.beta1.powf(t));
        let bc2 = F::from_f64(1.0 - self.beta2.powf(t));
        let lr = F::from_f64(self.lr);
        let eps = F::from_f64(self.eps);
        for (i, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let g = grads.get(id);
            ndarray::Zip::from(&mut self.m[i]).and(g).for_each(|m, &gv| {
                *m = b1 * *m + (one - b1) * gv;
            });
            ndarray::Zip::from(&mut self.v[i]).and(g).for_each(|v, &gv| {
                *v = b2 * *v + (one - b2) * gv * gv;
            });
            let p = store.value_mut(id);
            ndarray::Zip::from(p).and(&self.m[i]).and(&self.v[i]).for_each(|p, &m, &v| {
                let mhat = m / bc1;
                let vhat = v / bc2;
                *p = *p - lr * mhat / (vhat.sqrt() + eps);
            });
        }
    }

    /// Moment buffers as named tensors for checkpointing.
    pub fn state_tensors(&self, store: &ParamStore<F>, prefix: &str) -> Vec<(String, ArrayD<f32>)> {
        let mut out = Vec::with_capacity(2 * self.m.len());
        for (i, id) in store.ids().enumerate() {
            let name = store.name(id);
            out.push((format!("{prefix}.m.{name}"), self.m[i].mapv(|v| v.as_f64() as f32)));
            out.push((format!("{prefix}.v.{name}"), self.v[i].mapv(|v| v.as_f64() as f32)));
        }
        out
    }

    pub fn restore(
        &mut self,
        store: &ParamStore<F>,
        prefix: &str,
        step: u64,
        tensors: &[(String, ArrayD<f32>)],
    ) -> Result<()> {
        self.step = step;
        for (i, id) in store.ids().enumerate() {
            let name = store.name(id);
            for (slot, key) in
                [(&mut self.m[i], format!("{prefix}.m.{name}")), (&mut self.v[i], format!("{prefix}.v.{name}"))]
            {
                let found = tensors
                    .iter()
                    .find(|(n, _)| *n == key)
                    .ok_or_else(|| Error::Format(format!("missing optimizer tensor {key}")))?;
                if found.1.shape() != slot.shape() {
                    return Err(Error::ShapeMismatch(format!("optimizer tensor {key}")));
                }
                slot.assign(&found.1.mapv(|v| F::from_f64(v as f64)));
            }
        }
        Ok(())
    }
}

/// PSNR of predicting the training mean image for every validation target,
/// in the [0, 1] intensity domain.
pub fn mean_image_baseline(train: &Array4<f32>, val: &Array4<f32>) -> Result<f64> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::ShapeMismatch("empty baseline inputs".into()));
    }
    if train.dim().1 != val.dim().1 || train.dim().2 != val.dim().2 || train.dim().3 != val.dim().3
    {
        return Err(Error::ShapeMismatch("baseline image shapes differ".into()));
    }
    let inv = 1.0 / train.dim().0 as f32;
    let mean = train.sum_axis(Axis(0)).mapv(|v| v * inv);
    let mut pred = Array4::zeros(val.raw_dim());
    for bi in 0..val.dim().0 {
        pred.slice_mut(s![bi, .., .., ..]).assign(&mean);
    }
    let vals = psnr_batch(&pred, val, 1.0)?;
    Ok(vals.iter().sum::<f64>() / vals.len() as f64)
}

/// L1 autoencoder pretraining on normalized targets. Returns per-epoch mean
/// losses; fails on divergence (non-finite loss).
pub fn pretrain_autoencoder(
    ae: &Autoencoder,
    store: &mut ParamStore<f32>,
    opt: &mut Adam<f32>,
    x: &Array4<f32>,
    batch_size: usize,
    epochs: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let n = x.dim().0;
    if n == 0 || batch_size == 0 {
        return Err(Error::Config("autoencoder pretraining needs data and a batch size".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ AE_SALT);
    let mut losses = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        let mut order: Vec<usize> = (0..n).collect();
        shuffle(&mut order, &mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(batch_size) {
            if chunk.len() < batch_size && batches > 0 {
                break; // drop ragged tail once at least one batch ran
            }
            let xb = gather(x, chunk);
            let fwd = ae.forward(store, &xb)?;
            let (loss, g) = l1_grads(&fwd.recon, &xb)?;
            if !(loss as f64).is_finite() {
                return Err(Error::NonFinite("autoencoder loss diverged".into()));
            }
            let mut grads = Grads::zeros_like(store);
            ae.backward(store, &mut grads, &fwd.cache, &g);
            opt.step(store, &grads);
            epoch_loss += loss as f64;
            batches += 1;
        }
        losses.push(epoch_loss / batches.max(1) as f64);
    }
    Ok(losses)
}

/// Fisher-Yates with draws from the given stream.
fn shuffle(order: &mut [usize], rng: &mut ChaCha8Rng) {
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
}

/// Rows of `x` selected by index, preserving order.
pub fn gather(x: &Array4<f32>, idx: &[usize]) -> Array4<f32> {
    let (_, c, h, w) = x.dim();
    let mut out = Array4::zeros((idx.len(), c, h, w));
    for (row, &i) in idx.iter().enumerate() {
        out.slice_mut(s![row, .., .., ..]).assign(&x.slice(s![i, .., .., ..]));
    }
    out
}

#[derive(Debug, Clone, Copy, Default)]
pub struct StepReport {
    pub d_loss: f64,
    pub r1: f64,
    pub g_adv: f64,
    pub l1: f64,
    pub fa: f64,
    pub g_total: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct EpochLog {
    pub epoch: usize,
    pub d_loss: f64,
    pub r1: f64,
    pub g_adv: f64,
    pub l1: f64,
    pub fa: f64,
    pub g_total: f64,
    pub val_psnr: f64,
    pub val_ssim: f64,
}

pub const EPOCH_CSV_HEADER: &str = "epoch,d_loss,r1,g_adv,l1,fa,g_total,val_psnr,val_ssim";

impl EpochLog {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.4},{:.6}",
            self.epoch, self.d_loss, self.r1, self.g_adv, self.l1, self.fa, self.g_total,
            self.val_psnr, self.val_ssim
        )
    }
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub gen_cfg: GeneratorConfig,
    pub schedule: NoiseSchedule,
    pub g_store: ParamStore<f32>,
    pub d_store: ParamStore<f32>,
    pub ae_store: ParamStore<f32>,
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub autoencoder: Autoencoder,
    pub g_opt: Adam<f32>,
    pub d_opt: Adam<f32>,
    pub rng: ChaCha8Rng,
    pub step: u64,
    pub epoch: usize,
}

impl Trainer {
    /// Builds fresh networks. The autoencoder starts untrained; pretrain it
    /// (or load weights) before relying on the attention supervision term.
    pub fn new(cfg: &TrainConfig, base: &GeneratorConfig) -> Result<Self> {
        cfg.validate()?;
        let gen_cfg = cfg.generator_config(base);
        gen_cfg.validate()?;
        let schedule = NoiseSchedule::new(cfg.t_max, cfg.beta_min, cfg.beta_max)?;

        // One stream per network, so architecture flags that change the
        // generator's draw count cannot reshuffle the other two inits.
        let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut r_g = fork_rng(&mut init_rng);
        let mut r_d = fork_rng(&mut init_rng);
        let mut r_ae = fork_rng(&mut init_rng);
        let mut g_store = ParamStore::new();
        let generator = Generator::new(&mut g_store, &mut r_g, &gen_cfg)?;
        let mut d_store = ParamStore::new();
        let discriminator = Discriminator::new(&mut d_store, &mut r_d, &gen_cfg, false)?;
        let mut ae_store = ParamStore::new();
        let autoencoder = Autoencoder::new(&mut ae_store, &mut r_ae, &gen_cfg)?;

        let g_opt = Adam::new(&g_store, cfg.lr, cfg.beta1, cfg.beta2);
        let d_opt = Adam::new(&d_store, cfg.lr, cfg.beta1, cfg.beta2);
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Ok(Self {
            cfg: cfg.clone(),
            gen_cfg,
            schedule,
            g_store,
            d_store,
            ae_store,
            generator,
            discriminator,
            autoencoder,
            g_opt,
            d_opt,
            rng,
            step: 0,
            epoch: 0,
        })
    }

    /// Samples the learned reverse transition per element: posterior mean of
    /// (clean estimate, current state) plus step-dependent noise. Returns the
    /// sample and the per-element clean-estimate coefficient for backprop.
    fn sample_fake_prev(
        &mut self,
        x0_hat: &Array4<f32>,
        x_t: &Array4<f32>,
        ts: &[usize],
    ) -> Result<(Array4<f32>, Vec<f32>)> {
        let mut out = Array4::zeros(x0_hat.raw_dim());
        let mut c0s = Vec::with_capacity(ts.len());
        let eps = randn4::<f32>(x0_hat.dim(), &mut self.rng);
        for (bi, &t) in ts.iter().enumerate() {
            let (c0, c1, var) = self.schedule.posterior_coeffs(t)?;
            let (c0f, c1f, sd) = (c0 as f32, c1 as f32, var.sqrt() as f32);
            let mut row = out.slice_mut(s![bi, .., .., ..]);
            ndarray::Zip::from(&mut row)
                .and(x0_hat.slice(s![bi, .., .., ..]))
                .and(x_t.slice(s![bi, .., .., ..]))
                .and(eps.slice(s![bi, .., .., ..]))
                .for_each(|o, &xh, &xt, &e| {
                    *o = c0f * xh + c1f * xt + sd * e;
                });
            c0s.push(c0f);
        }
        Ok((out, c0s))
    }

    /// One discriminator update on a batch of normalized targets/conditions.
    pub fn d_step(&mut self, x0: &Array4<f32>, y: &Array4<f32>, ts: &[usize]) -> Result<(f64, f64)> {
        let b = x0.dim().0;
        let (x_prev_real, x_t) = forward_pair(&self.schedule, x0, ts, &mut self.rng)?;
        let z = latent(&mut self.rng, b, self.gen_cfg.z_dim);
        let g_fwd = self.generator.forward(&self.g_store, &x_t, y, &z, ts)?;
        let (x_prev_fake, _) = self.sample_fake_prev(&g_fwd.x0_hat, &x_t, ts)?;

        let (real_logits, real_cache) =
            self.discriminator.forward(&self.d_store, &x_prev_real, &x_t, None, ts)?;
        let (fake_logits, fake_cache) =
            self.discriminator.forward(&self.d_store, &x_prev_fake, &x_t, None, ts)?;
        let (loss, g_real, g_fake) = d_loss_grads(&real_logits, &fake_logits)?;

        let mut grads = Grads::zeros_like(&self.d_store);
        self.discriminator.backward(&self.d_store, &mut grads, &real_cache, &g_real);
        self.discriminator.backward(&self.d_store, &mut grads, &fake_cache, &g_fake);

        let mut r1 = 0.0;
        if self.cfg.r1_gamma > 0.0 {
            r1 = self.accumulate_r1(&mut grads, &x_prev_real, &x_t, ts)?;
        }
        self.d_opt.step(&mut self.d_store, &grads);
        Ok((loss as f64, r1))
    }

    /// Adds the gradient-penalty contribution to `grads` and returns the
    /// penalty value. The penalty's parameter gradient is a Hessian-vector
    /// product, estimated by central differences along the input gradient.
    fn accumulate_r1(
        &mut self,
        grads: &mut Grads<f32>,
        x_prev: &Array4<f32>,
        x_t: &Array4<f32>,
        ts: &[usize],
    ) -> Result<f64> {
        let b = x_prev.dim().0;
        let gmap = self.discriminator.grad_wrt_x_prev(&self.d_store, x_prev, x_t, None, ts)?;
        let r1 = r1_penalty(&gmap, self.cfg.r1_gamma) as f64;

        let norm = gmap.iter().map(|v| (*v as f64) * (*v as f64)).sum::<f64>().sqrt();
        if norm < 1e-12 {
            return Ok(r1);
        }
        let eps_fd = 1e-3 * (gmap.len() as f64).sqrt() / norm;
        let delta = gmap.mapv(|v| v * eps_fd as f32);
        let ones = Array1::from_elem(b, 1.0_f32);

        let mut plus = Grads::zeros_like(&self.d_store);
        let xp = x_prev + &delta;
        let (_, cache) = self.discriminator.forward(&self.d_store, &xp, x_t, None, ts)?;
        self.discriminator.backward(&self.d_store, &mut plus, &cache, &ones);

        let mut minus = Grads::zeros_like(&self.d_store);
        let xm = x_prev - &delta;
        let (_, cache) = self.discriminator.forward(&self.d_store, &xm, x_t, None, ts)?;
        self.discriminator.backward(&self.d_store, &mut minus, &cache, &ones);

        let scale = (self.cfg.r1_gamma / b as f64 / (2.0 * eps_fd)) as f32;
        for id in self.d_store.ids().collect::<Vec<_>>() {
            let p = plus.get(id).clone();
            let m = minus.get(id);
            let sink = grads.slot_mut(id);
            ndarray::Zip::from(sink).and(&p).and(m).for_each(|s, &pv, &mv| {
                *s += scale * (pv - mv);
            });
        }
        Ok(r1)
    }

    /// One generator update; returns the loss report.
    pub fn g_step(&mut self, x0: &Array4<f32>, y: &Array4<f32>, ts: &[usize]) -> Result<StepReport> {
        let b = x0.dim().0;
        let (_, x_t) = forward_pair(&self.schedule, x0, ts, &mut self.rng)?;
        let z = latent(&mut self.rng, b, self.gen_cfg.z_dim);
        let g_fwd = self.generator.forward(&self.g_store, &x_t, y, &z, ts)?;

        let (l1, g_l1) = l1_grads(&g_fwd.x0_hat, x0)?;
        let lambda1 = self.cfg.lambda1 as f32;
        let mut g_x0 = g_l1.mapv(|v| v * lambda1);

        let mut adv = 0.0_f32;
        if !self.cfg.no_adv {
            let (x_prev_fake, c0s) = self.sample_fake_prev(&g_fwd.x0_hat, &x_t, ts)?;
            let (fake_logits, d_cache) =
                self.discriminator.forward(&self.d_store, &x_prev_fake, &x_t, None, ts)?;
            let (a, g_logits) = g_adv_grads(&fake_logits)?;
            adv = a;
            let mut scratch = Grads::zeros_like(&self.d_store);
            let (g_xprev, _) =
                self.discriminator.backward(&self.d_store, &mut scratch, &d_cache, &g_logits);
            for (bi, &c0) in c0s.iter().enumerate() {
                let mut row = g_x0.slice_mut(s![bi, .., .., ..]);
                ndarray::Zip::from(&mut row)
                    .and(g_xprev.slice(s![bi, .., .., ..]))
                    .for_each(|o, &g| *o += c0 * g);
            }
        }

        let mut fa = 0.0_f32;
        let mut g_records: Option<Vec<Array4<f32>>> = None;
        if !self.cfg.no_fa_loss {
            let ae_fwd = self.autoencoder.forward(&self.ae_store, x0)?;
            let side = self.gen_cfg.image_size;
            let (f, g_raws) = fa_loss_with_grads(&g_fwd.records, &ae_fwd.records, side, side)?;
            fa = f;
            let lambda2 = self.cfg.lambda2 as f32;
            g_records = Some(g_raws.into_iter().map(|g| g.mapv(|v| v * lambda2)).collect());
        }

        let mut grads = Grads::zeros_like(&self.g_store);
        self.generator.backward(
            &self.g_store,
            &mut grads,
            &g_fwd.cache,
            &g_x0,
            g_records.as_deref(),
        );
        self.g_opt.step(&mut self.g_store, &grads);

        let report = total_generator_loss(adv, l1, fa, self.cfg.lambda1, self.cfg.lambda2);
        Ok(StepReport {
            d_loss: 0.0,
            r1: 0.0,
            g_adv: report.adv as f64,
            l1: report.l1 as f64,
            fa: report.fa as f64,
            g_total: report.total as f64,
        })
    }

    /// One full alternating step: discriminator first, then generator, each
    /// with its own step indices drawn per element.
    pub fn train_step(&mut self, x0: &Array4<f32>, y: &Array4<f32>) -> Result<StepReport> {
        let b = x0.dim().0;
        let ts: Vec<usize> = (0..b).map(|_| self.rng.gen_range(1..=self.cfg.t_max)).collect();
        let mut d_loss = 0.0;
        let mut r1 = 0.0;
        if !self.cfg.no_adv {
            let (dl, r) = self.d_step(x0, y, &ts)?;
            d_loss = dl;
            r1 = r;
        }
        let mut report = self.g_step(x0, y, &ts)?;
        report.d_loss = d_loss;
        report.r1 = r1;
        self.step += 1;
        Ok(report)
    }

    /// Synthesizes targets for the given conditions from pure noise with a
    /// dedicated seed; the training stream is untouched.
    pub fn synthesize(&self, y: &Array4<f32>, seed: u64) -> Result<Array4<f32>> {
        synthesize(
            &self.generator,
            &self.g_store,
            &self.schedule,
            &self.gen_cfg,
            y,
            seed,
        )
    }

    /// Per-sample PSNR/SSIM of seeded synthesis against targets, in [0, 1].
    pub fn validate_per_sample(
        &self,
        x0: &Array4<f32>,
        y: &Array4<f32>,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        let n = x0.dim().0;
        let bs = self.cfg.batch_size.max(1);
        let mut psnrs = Vec::with_capacity(n);
        let mut ssims = Vec::with_capacity(n);
        let mut start = 0;
        while start < n {
            let end = (start + bs).min(n);
            let xb = x0.slice(s![start..end, .., .., ..]).to_owned();
            let yb = y.slice(s![start..end, .., .., ..]).to_owned();
            let synth = self.synthesize(&yb, self.cfg.seed ^ EVAL_SALT ^ start as u64)?;
            let pred = denormalize(&synth);
            let truth = denormalize(&xb);
            psnrs.extend(psnr_batch(&pred, &truth, 1.0)?);
            ssims.extend(ssim_batch(&pred, &truth, 1.0)?);
            start = end;
        }
        Ok((psnrs, ssims))
    }

    /// Mean PSNR/SSIM over [`Self::validate_per_sample`].
    pub fn validate(&self, x0: &Array4<f32>, y: &Array4<f32>) -> Result<(f64, f64)> {
        let (psnrs, ssims) = self.validate_per_sample(x0, y)?;
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
        Ok((mean(&psnrs), mean(&ssims)))
    }

    /// Runs epochs until `self.epoch == target_epochs`, checkpointing and
    /// logging per epoch when `out_dir` is given.
    #[allow(clippy::too_many_arguments)]
    pub fn fit(
        &mut self,
        train_x0: &Array4<f32>,
        train_y: &Array4<f32>,
        val_x0: &Array4<f32>,
        val_y: &Array4<f32>,
        target_epochs: usize,
        out_dir: Option<&Path>,
        quiet: bool,
    ) -> Result<Vec<EpochLog>> {
        let n = train_x0.dim().0;
        if n < self.cfg.batch_size {
            return Err(Error::Config(format!(
                "{} training samples cannot fill a batch of {}",
                n, self.cfg.batch_size
            )));
        }
        if let Some(dir) = out_dir {
            std::fs::create_dir_all(dir)?;
        }
        let mut logs = Vec::new();
        while self.epoch < target_epochs {
            let mut order: Vec<usize> = (0..n).collect();
            let mut shuffle_rng = ChaCha8Rng::seed_from_u64(
                self.cfg.seed ^ SHUFFLE_SALT ^ (self.epoch as u64).wrapping_mul(0x9e3779b97f4a7c15),
            );
            shuffle(&mut order, &mut shuffle_rng);
            let mut sums = StepReport::default();
            let mut batches = 0usize;
            for chunk in order.chunks(self.cfg.batch_size) {
                if chunk.len() < self.cfg.batch_size {
                    break;
                }
                let xb = gather(train_x0, chunk);
                let yb = gather(train_y, chunk);
                let r = self.train_step(&xb, &yb)?;
                sums.d_loss += r.d_loss;
                sums.r1 += r.r1;
                sums.g_adv += r.g_adv;
                sums.l1 += r.l1;
                sums.fa += r.fa;
                sums.g_total += r.g_total;
                batches += 1;
            }
            self.epoch += 1;
            let inv = 1.0 / batches.max(1) as f64;
            let (val_psnr, val_ssim) = self.validate(val_x0, val_y)?;
            let log = EpochLog {
                epoch: self.epoch,
                d_loss: sums.d_loss * inv,
                r1: sums.r1 * inv,
                g_adv: sums.g_adv * inv,
                l1: sums.l1 * inv,
                fa: sums.fa * inv,
                g_total: sums.g_total * inv,
                val_psnr,
                val_ssim,
            };
            if !quiet {
                println!("{}", log.csv_row());
            }
            if let Some(dir) = out_dir {
                self.save_state(&dir.join(format!("epoch_{:04}.ckpt", self.epoch)))?;
                self.save_state(&dir.join("latest.ckpt"))?;
                append_csv(&dir.join("train_log.csv"), &log)?;
            }
            logs.push(log);
        }
        Ok(logs)
    }

    pub fn save_state(&self, path: &Path) -> Result<()> {
        let mut tensors = checkpoint::params_to_tensors(&self.g_store);
        tensors.extend(checkpoint::params_to_tensors(&self.d_store));
        tensors.extend(checkpoint::params_to_tensors(&self.ae_store));
        tensors.extend(self.g_opt.state_tensors(&self.g_store, "opt.g"));
        tensors.extend(self.d_opt.state_tensors(&self.d_store, "opt.d"));
        let meta = serde_json::json!({
            "config": self.cfg,
            "gen_cfg": self.gen_cfg,
            "step": self.step,
            "epoch": self.epoch,
            "rng_word_pos": self.rng.get_word_pos().to_string(),
            "g_opt_step": self.g_opt.step,
            "d_opt_step": self.d_opt.step,
        });
        checkpoint::save(path, "train_state", meta, &tensors)
    }

    pub fn load_state(path: &Path) -> Result<Self> {
        let (header, tensors) = checkpoint::load(path)?;
        if header.kind != "train_state" {
            return Err(Error::Format(format!("checkpoint kind {} is not train_state", header.kind)));
        }
        let cfg: TrainConfig = serde_json::from_value(header.meta["config"].clone())?;
        let gen_cfg: GeneratorConfig = serde_json::from_value(header.meta["gen_cfg"].clone())?;
        let mut t = Trainer::new(&cfg, &gen_cfg)?;
        t.gen_cfg = gen_cfg;
        checkpoint::tensors_into_params(&tensors, &mut t.g_store)?;
        checkpoint::tensors_into_params(&tensors, &mut t.d_store)?;
        checkpoint::tensors_into_params(&tensors, &mut t.ae_store)?;
        let g_step = header.meta["g_opt_step"].as_u64().unwrap_or(0);
        let d_step = header.meta["d_opt_step"].as_u64().unwrap_or(0);
        t.g_opt.restore(&t.g_store, "opt.g", g_step, &tensors)?;
        t.d_opt.restore(&t.d_store, "opt.d", d_step, &tensors)?;
        t.step = header.meta["step"].as_u64().unwrap_or(0);
        t.epoch = header.meta["epoch"].as_u64().unwrap_or(0) as usize;
        let pos: u128 = header.meta["rng_word_pos"]
            .as_str()
            .ok_or_else(|| Error::Format("missing rng position".into()))?
            .parse()
            .map_err(|_| Error::Format("bad rng position".into()))?;
        t.rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        t.rng.set_word_pos(pos);
        Ok(t)
    }
}

fn append_csv(path: &Path, log: &EpochLog) -> Result<()> {
    let new = !path.exists();
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    if new {
        writeln!(f, "{EPOCH_CSV_HEADER}")?;
    }
    writeln!(f, "{}", log.csv_row())?;
    Ok(())
}

fn latent(rng: &mut ChaCha8Rng, b: usize, z_dim: usize) -> Array2<f32> {
    Array2::from_shape_vec(
        (b, z_dim),
        (0..b * z_dim)
            .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal) as f32)
            .collect(),
    )
    .expect("shape/product mismatch")
}

/// Seeded reverse-chain synthesis for a batch of normalized conditions.
pub fn synthesize(
    generator: &Generator,
    store: &ParamStore<f32>,
    schedule: &NoiseSchedule,
    gen_cfg: &GeneratorConfig,
    y: &Array4<f32>,
    seed: u64,
) -> Result<Array4<f32>> {
    let b = y.dim().0;
    let shape = (b, gen_cfg.in_channels_target, gen_cfg.image_size, gen_cfg.image_size);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut denoise = |x_t: &Array4<f32>, z: &Array2<f32>, t: usize| {
        let ts = vec![t; b];
        Ok(generator.forward(store, x_t, y, z, &ts)?.x0_hat)
    };
    reverse_sample_loop(schedule, shape, gen_cfg.z_dim, &mut denoise, &mut rng)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_gen_cfg() -> GeneratorConfig {
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

    fn tiny_train_cfg() -> TrainConfig {
        TrainConfig { batch_size: 2, seed: 11, ..Default::default() }
    }

    fn toy_batch(rng: &mut ChaCha8Rng, n: usize) -> (Array4<f32>, Array4<f32>) {
        // Target is a deterministic function of the conditions plus detail,
        // so conditioning genuinely helps.
        let mut y = Array4::zeros((n, 2, 8, 8));
        let mut x0 = Array4::zeros((n, 1, 8, 8));
        for bi in 0..n {
            let cx = rng.gen::<f32>() * 4.0 + 2.0;
            let cy = rng.gen::<f32>() * 4.0 + 2.0;
            for yy in 0..8 {
                for xx in 0..8 {
                    let d2 = (yy as f32 - cy).powi(2) + (xx as f32 - cx).powi(2);
                    let blob = (-d2 / 6.0).exp();
                    y[[bi, 0, yy, xx]] = blob * 2.0 - 1.0;
                    y[[bi, 1, yy, xx]] = -blob * 2.0 + 1.0 - 1.0;
                    x0[[bi, 0, yy, xx]] = blob * 1.6 - 0.8;
                }
            }
        }
        (x0, y)
    }

    #[test]
    fn config_validation_rejects_bad_settings() {
        let mut c = tiny_train_cfg();
        c.lr = -1.0;
        assert!(c.validate().is_err());
        let mut c = tiny_train_cfg();
        c.beta1 = 1.0;
        assert!(c.validate().is_err());
        let mut c = tiny_train_cfg();
        c.batch_size = 0;
        assert!(c.validate().is_err());
        let mut c = tiny_train_cfg();
        c.t_max = 0;
        assert!(c.validate().is_err());
        assert!(tiny_train_cfg().validate().is_ok());
    }

    #[test]
    fn adam_matches_a_hand_rolled_quadratic_descent() {
        // One parameter tensor [2], loss = x0^2 + x1^2, grad = 2x.
        let mut store: ParamStore<f64> = ParamStore::new();
        let id = store.register(
            "x",
            ndarray::ArrayD::from_shape_vec(ndarray::IxDyn(&[2]), vec![1.0, -3.0]).unwrap(),
        );
        let mut opt = Adam::new(&store, 0.1, 0.5, 0.9);

        let (b1, b2, lr, eps) = (0.5, 0.9, 0.1, 1e-8);
        let mut hand = [1.0_f64, -3.0];
        let mut m = [0.0_f64; 2];
        let mut v = [0.0_f64; 2];
        for t in 1..=3 {
            let mut grads = Grads::zeros_like(&store);
            {
                let x = store.value(id);
                let g = grads.slot_mut(id);
                g[[0]] = 2.0 * x[[0]];
                g[[1]] = 2.0 * x[[1]];
            }
            opt.step(&mut store, &grads);

            for i in 0..2 {
                let g = 2.0 * hand[i];
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                let mhat = m[i] / (1.0 - b1.powi(t));
                let vhat = v[i] / (1.0 - b2.powi(t));
                hand[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
            let x = store.value(id);
            for i in 0..2 {
                assert!((x[[i]] - hand[i]).abs() < 1e-10, "step {t} slot {i}: {} vs {}", x[[i]], hand[i]);
            }
        }
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_bit_identical() {
        let cfg = TrainConfig { lr: 0.0, ..tiny_train_cfg() };
        let mut t = Trainer::new(&cfg, &tiny_gen_cfg()).unwrap();
        let before_g = t.g_store.hash_hex();
        let before_d = t.d_store.hash_hex();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (x0, y) = toy_batch(&mut rng, 2);
        t.train_step(&x0, &y).unwrap();
        assert_eq!(t.g_store.hash_hex(), before_g);
        assert_eq!(t.d_store.hash_hex(), before_d);
    }

    #[test]
    fn train_step_updates_both_networks_and_freezes_the_autoencoder() {
        let mut t = Trainer::new(&tiny_train_cfg(), &tiny_gen_cfg()).unwrap();
        let g0 = t.g_store.hash_hex();
        let d0 = t.d_store.hash_hex();
        let ae0 = t.ae_store.hash_hex();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (x0, y) = toy_batch(&mut rng, 2);
        let r = t.train_step(&x0, &y).unwrap();
        assert!(r.d_loss.is_finite() && r.g_total.is_finite());
        assert!(r.l1 > 0.0);
        assert_ne!(t.g_store.hash_hex(), g0, "generator must move");
        assert_ne!(t.d_store.hash_hex(), d0, "discriminator must move");
        assert_eq!(t.ae_store.hash_hex(), ae0, "autoencoder must stay frozen");
    }

    #[test]
    fn d_step_leaves_generator_untouched_and_vice_versa() {
        let mut t = Trainer::new(&tiny_train_cfg(), &tiny_gen_cfg()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (x0, y) = toy_batch(&mut rng, 2);
        let ts = vec![2usize, 4];

        let g0 = t.g_store.hash_hex();
        t.d_step(&x0, &y, &ts).unwrap();
        assert_eq!(t.g_store.hash_hex(), g0, "discriminator step leaked into the generator");

        let d0 = t.d_store.hash_hex();
        t.g_step(&x0, &y, &ts).unwrap();
        assert_eq!(t.d_store.hash_hex(), d0, "generator step leaked into the discriminator");
    }

    #[test]
    fn ablation_flags_change_structure_and_losses() {
        let cfg = TrainConfig {
            no_adv: true,
            no_fa_loss: true,
            no_fm: true,
            single_contrast: true,
            ..tiny_train_cfg()
        };
        let mut t = Trainer::new(&cfg, &tiny_gen_cfg()).unwrap();
        assert!(t.g_store.iter().all(|(n, _)| !n.starts_with("g.fm")));
        assert_eq!(t.gen_cfg.in_channels_cond, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (x0, y2) = toy_batch(&mut rng, 2);
        let y = y2.slice(s![.., 0..1, .., ..]).to_owned();
        let d0 = t.d_store.hash_hex();
        let r = t.train_step(&x0, &y).unwrap();
        assert_eq!(r.d_loss, 0.0);
        assert_eq!(r.g_adv, 0.0);
        assert_eq!(r.fa, 0.0);
        // The trainer composes the total in f32, so compare after f32 rounding.
        assert_eq!(r.g_total, (cfg.lambda1 as f32 * r.l1 as f32) as f64);
        assert_eq!(t.d_store.hash_hex(), d0, "no_adv must skip discriminator updates");
    }

    #[test]
    fn pretraining_halves_the_autoencoder_loss() {
        let gen_cfg = tiny_gen_cfg();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ae = Autoencoder::new(&mut store, &mut rng, &gen_cfg).unwrap();
        let mut opt = Adam::new(&store, 2e-3, 0.9, 0.999);
        let (x0, _) = toy_batch(&mut rng, 8);
        let losses = pretrain_autoencoder(&ae, &mut store, &mut opt, &x0, 4, 40, 9).unwrap();
        let first = losses[0];
        let last = *losses.last().unwrap();
        assert!(
            last < 0.5 * first,
            "reconstruction loss must at least halve: {first} -> {last}"
        );
    }

    #[test]
    fn mean_baseline_matches_a_hand_computed_case() {
        // Train set: two constant images 0.2 and 0.6 -> mean 0.4.
        let mut train = Array4::zeros((2, 1, 2, 2));
        train.slice_mut(s![0, .., .., ..]).fill(0.2);
        train.slice_mut(s![1, .., .., ..]).fill(0.6);
        // Val: constant 0.5 -> MSE = 0.01 -> PSNR = 20 dB.
        let val = Array4::from_elem((1, 1, 2, 2), 0.5);
        let p = mean_image_baseline(&train, &val).unwrap();
        assert!((p - 20.0).abs() < 1e-4, "got {p}");
    }

    #[test]
    fn synthesis_is_seed_deterministic() {
        let t = Trainer::new(&tiny_train_cfg(), &tiny_gen_cfg()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (_, y) = toy_batch(&mut rng, 2);
        let a = t.synthesize(&y, 42).unwrap();
        let b = t.synthesize(&y, 42).unwrap();
        let c = t.synthesize(&y, 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn resume_reproduces_training_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (x0, y) = toy_batch(&mut rng, 4);

        let cfg = tiny_train_cfg();
        let mut t = Trainer::new(&cfg, &tiny_gen_cfg()).unwrap();
        t.train_step(&x0, &y).unwrap();
        let ckpt = dir.path().join("mid.ckpt");
        t.save_state(&ckpt).unwrap();
        t.train_step(&x0, &y).unwrap();
        let straight_g = t.g_store.hash_hex();
        let straight_d = t.d_store.hash_hex();

        let mut resumed = Trainer::load_state(&ckpt).unwrap();
        resumed.train_step(&x0, &y).unwrap();
        assert_eq!(resumed.g_store.hash_hex(), straight_g, "generator diverged after resume");
        assert_eq!(resumed.d_store.hash_hex(), straight_d, "discriminator diverged after resume");
    }

    #[test]
    fn fit_logs_checkpoints_and_improves_over_start() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (x0, y) = toy_batch(&mut rng, 8);
        let (vx, vy) = toy_batch(&mut rng, 2);
        let cfg = TrainConfig { batch_size: 4, seed: 3, ..Default::default() };
        let mut t = Trainer::new(&cfg, &tiny_gen_cfg()).unwrap();
        let logs = t.fit(&x0, &y, &vx, &vy, 2, Some(dir.path()), true).unwrap();
        assert_eq!(logs.len(), 2);
        assert!(dir.path().join("epoch_0001.ckpt").exists());
        assert!(dir.path().join("epoch_0002.ckpt").exists());
        assert!(dir.path().join("latest.ckpt").exists());
        let csv = std::fs::read_to_string(dir.path().join("train_log.csv")).unwrap();
        assert!(csv.starts_with(EPOCH_CSV_HEADER));
        assert_eq!(csv.lines().count(), 3);
        assert!(logs[1].l1 < logs[0].l1, "pixel loss should drop over two epochs");
    }
}
