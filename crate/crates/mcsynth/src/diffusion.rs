//! Noise schedule and forward/reverse diffusion utilities for a short-step
//! (typically 4-step) denoising chain. The schedule is computed and stored in
//! f64; callers pick the tensor precision.
//!
//! Conventions: steps are 1-based (`t` in `1..=t_max`), images live in
//! `[B, C, H, W]` arrays, and `alpha_bar(0) == 1`.

use ndarray::Array4;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::nn::functional::all_finite;
use crate::nn::Scalar;
use crate::{Error, Result};

/// Variance-preserving schedule with
/// `beta_t = 1 - exp(-beta_min/T - (beta_max-beta_min)*(2t-1)/(2T^2))`.
///
/// Because each `alpha_t` is a pure exponential, the terminal product has the
/// closed form `alpha_bar(T) = exp(-(beta_min+beta_max)/2)`, which the tests
/// pin down.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    pub t_max: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    betas: Vec<f64>,      // index 0 holds t=1
    alphas: Vec<f64>,     // 1 - beta
    alpha_bars: Vec<f64>, // cumulative product of alphas
}

impl NoiseSchedule {
    pub fn new(t_max: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        if t_max == 0 {
            return Err(Error::InvalidSchedule("step count must be at least 1".into()));
        }
        if !(beta_min > 0.0) || !beta_min.is_finite() {
            return Err(Error::InvalidSchedule(format!(
                "beta_min must be positive and finite, got {beta_min}"
            )));
        }
        if !(beta_max >= beta_min) || !beta_max.is_finite() {
            return Err(Error::InvalidSchedule(format!(
                "beta_max must be finite and >= beta_min, got {beta_max}"
            )));
        }
        let tf = t_max as f64;
        let mut betas = Vec::with_capacity(t_max);
        let mut alphas = Vec::with_capacity(t_max);
        let mut alpha_bars = Vec::with_capacity(t_max);
        let mut abar = 1.0f64;
        for t in 1..=t_max {
            let expo = beta_min / tf + (beta_max - beta_min) * (2 * t - 1) as f64 / (2.0 * tf * tf);
            let alpha = (-expo).exp();
            let beta = 1.0 - alpha;
            if !(beta > 0.0 && beta < 1.0) {
                return Err(Error::InvalidSchedule(format!(
                    "beta_{t} = {beta} escapes (0, 1)"
                )));
            }
            abar *= alpha;
            betas.push(beta);
            alphas.push(alpha);
            alpha_bars.push(abar);
        }
        Ok(Self { t_max, beta_min, beta_max, betas, alphas, alpha_bars })
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.t_max {
            Err(Error::StepOutOfRange { t, t_max: self.t_max })
        } else {
            Ok(())
        }
    }

    pub fn beta(&self, t: usize) -> f64 {
        assert!(t >= 1 && t <= self.t_max, "step {t} outside 1..={}", self.t_max);
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        assert!(t >= 1 && t <= self.t_max, "step {t} outside 1..={}", self.t_max);
        self.alphas[t - 1]
    }

    /// `alpha_bar(0)` is defined as 1.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        assert!(t <= self.t_max, "step {t} outside 0..={}", self.t_max);
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    /// Coefficients of the reverse-step distribution given a clean estimate:
    /// `mean = c0 * x0_hat + c1 * x_t`, plus its variance. At `t = 1` the
    /// returned triple is exactly `(1, 0, 0)` so the final step passes the
    /// estimate through unchanged.
    pub fn posterior_coeffs(&self, t: usize) -> Result<(f64, f64, f64)> {
        self.check_t(t)?;
        if t == 1 {
            return Ok((1.0, 0.0, 0.0));
        }
        let beta = self.beta(t);
        let alpha = self.alpha(t);
        let abar_t = self.alpha_bar(t);
        let abar_prev = self.alpha_bar(t - 1);
        let denom = 1.0 - abar_t;
        let c0 = abar_prev.sqrt() * beta / denom;
        let c1 = alpha.sqrt() * (1.0 - abar_prev) / denom;
        let var = (1.0 - abar_prev) * beta / denom;
        Ok((c0, c1, var))
    }
}

/// Convenience constructor mirroring the CLI-facing name.
pub fn build_schedule(t_max: usize, beta_min: f64, beta_max: f64) -> Result<NoiseSchedule> {
    NoiseSchedule::new(t_max, beta_min, beta_max)
}

/// Fills an array with standard normal draws. Samples are drawn as f64 and
/// then cast, so the draw sequence is precision-independent.
pub fn randn4<F: Scalar>(
    shape: (usize, usize, usize, usize),
    rng: &mut ChaCha8Rng,
) -> Array4<F> {
    let n = shape.0 * shape.1 * shape.2 * shape.3;
    let data: Vec<F> =
        (0..n).map(|_| F::from_f64(rng.sample::<f64, _>(StandardNormal))).collect();
    Array4::from_shape_vec(shape, data).expect("shape/product mismatch")
}

/// Diffuses `x0` to step `t` with the given noise: `sqrt(abar_t) x0 +
/// sqrt(1-abar_t) eps`. `t = 0` returns `x0` unchanged.
pub fn q_sample<F: Scalar>(
    sched: &NoiseSchedule,
    x0: &Array4<F>,
    t: usize,
    eps: &Array4<F>,
) -> Result<Array4<F>> {
    if t == 0 {
        return Ok(x0.clone());
    }
    if t > sched.t_max {
        return Err(Error::StepOutOfRange { t, t_max: sched.t_max });
    }
    if x0.dim() != eps.dim() {
        return Err(Error::ShapeMismatch(format!(
            "q_sample: x0 {:?} vs eps {:?}",
            x0.dim(),
            eps.dim()
        )));
    }
    let abar = sched.alpha_bar(t);
    let a = F::from_f64(abar.sqrt());
    let b = F::from_f64((1.0 - abar).sqrt());
    let mut out = x0.clone();
    ndarray::Zip::from(&mut out).and(eps).for_each(|o, &e| *o = *o * a + e * b);
    Ok(out)
}

/// Per-sample variant of [`q_sample`]: element `i` of the batch is diffused
/// to `ts[i]` (0 means "leave clean").
pub fn q_sample_per<F: Scalar>(
    sched: &NoiseSchedule,
    x0: &Array4<F>,
    ts: &[usize],
    eps: &Array4<F>,
) -> Result<Array4<F>> {
    let b = x0.dim().0;
    if ts.len() != b {
        return Err(Error::ShapeMismatch(format!(
            "q_sample_per: {} steps for batch of {b}",
            ts.len()
        )));
    }
    if x0.dim() != eps.dim() {
        return Err(Error::ShapeMismatch(format!(
            "q_sample_per: x0 {:?} vs eps {:?}",
            x0.dim(),
            eps.dim()
        )));
    }
    let mut out = x0.clone();
    for (bi, &t) in ts.iter().enumerate() {
        if t > sched.t_max {
            return Err(Error::StepOutOfRange { t, t_max: sched.t_max });
        }
        if t == 0 {
            continue;
        }
        let abar = sched.alpha_bar(t);
        let a = F::from_f64(abar.sqrt());
        let c = F::from_f64((1.0 - abar).sqrt());
        let mut sl = out.slice_mut(ndarray::s![bi, .., .., ..]);
        ndarray::Zip::from(&mut sl)
            .and(eps.slice(ndarray::s![bi, .., .., ..]))
            .for_each(|o, &e| *o = *o * a + e * c);
    }
    Ok(out)
}

/// One forward transition from an already-diffused `x_prev` at step `t-1` to
/// step `t`: `sqrt(alpha_t) x_prev + sqrt(beta_t) eps`.
pub fn forward_step<F: Scalar>(
    sched: &NoiseSchedule,
    x_prev: &Array4<F>,
    t: usize,
    eps: &Array4<F>,
) -> Result<Array4<F>> {
    if t == 0 || t > sched.t_max {
        return Err(Error::StepOutOfRange { t, t_max: sched.t_max });
    }
    let a = F::from_f64(sched.alpha(t).sqrt());
    let b = F::from_f64(sched.beta(t).sqrt());
    let mut out = x_prev.clone();
    ndarray::Zip::from(&mut out).and(eps).for_each(|o, &e| *o = *o * a + e * b);
    Ok(out)
}

/// Draws a chain-consistent training pair per batch element: `x_prev` at step
/// `ts[i]-1` via the closed-form marginal, then `x_t` one transition later.
/// Both noises come from `rng` in a fixed order (all of eps1, then eps2).
pub fn forward_pair<F: Scalar>(
    sched: &NoiseSchedule,
    x0: &Array4<F>,
    ts: &[usize],
    rng: &mut ChaCha8Rng,
) -> Result<(Array4<F>, Array4<F>)> {
    for &t in ts {
        if t == 0 || t > sched.t_max {
            return Err(Error::StepOutOfRange { t, t_max: sched.t_max });
        }
    }
    let eps1 = randn4::<F>(x0.dim(), rng);
    let eps2 = randn4::<F>(x0.dim(), rng);
    let ts_prev: Vec<usize> = ts.iter().map(|&t| t - 1).collect();
    let x_prev = q_sample_per(sched, x0, &ts_prev, &eps1)?;
    let mut x_t = x_prev.clone();
    for (bi, &t) in ts.iter().enumerate() {
        let a = F::from_f64(sched.alpha(t).sqrt());
        let b = F::from_f64(sched.beta(t).sqrt());
        let mut sl = x_t.slice_mut(ndarray::s![bi, .., .., ..]);
        ndarray::Zip::from(&mut sl)
            .and(eps2.slice(ndarray::s![bi, .., .., ..]))
            .for_each(|o, &e| *o = *o * a + e * b);
    }
    Ok((x_prev, x_t))
}

/// Reverse-step distribution for one whole-batch step.
#[derive(Debug, Clone)]
pub struct PosteriorParams<F: Scalar> {
    pub mean: Array4<F>,
    pub variance: f64,
    /// `variance.ln()`; `-inf` at the deterministic final step.
    pub log_variance: f64,
}

/// Reverse-step mean and variance given a clean estimate, same step for the
/// whole batch.
pub fn posterior_params<F: Scalar>(
    sched: &NoiseSchedule,
    x0_hat: &Array4<F>,
    x_t: &Array4<F>,
    t: usize,
) -> Result<PosteriorParams<F>> {
    if x0_hat.dim() != x_t.dim() {
        return Err(Error::ShapeMismatch(format!(
            "posterior_params: x0_hat {:?} vs x_t {:?}",
            x0_hat.dim(),
            x_t.dim()
        )));
    }
    let (c0, c1, var) = sched.posterior_coeffs(t)?;
    if t == 1 {
        // exact passthrough, no coefficient arithmetic
        return Ok(PosteriorParams {
            mean: x0_hat.clone(),
            variance: 0.0,
            log_variance: f64::NEG_INFINITY,
        });
    }
    let c0 = F::from_f64(c0);
    let c1 = F::from_f64(c1);
    let mut mean = x0_hat.clone();
    ndarray::Zip::from(&mut mean).and(x_t).for_each(|m, &xt| *m = *m * c0 + xt * c1);
    Ok(PosteriorParams { mean, variance: var, log_variance: var.ln() })
}

/// Runs the full reverse chain from pure noise. `denoiser(x_t, z_t, t)` must
/// return a clean estimate with the same shape; `z_t` is a fresh `[B, z_dim]`
/// standard normal latent drawn per step (callers that want a latent-free
/// sampler simply ignore it). The final step is deterministic (variance 0).
pub fn reverse_sample_loop<F, D>(
    sched: &NoiseSchedule,
    shape: (usize, usize, usize, usize),
    z_dim: usize,
    denoiser: &mut D,
    rng: &mut ChaCha8Rng,
) -> Result<Array4<F>>
where
    F: Scalar,
    D: FnMut(&Array4<F>, &ndarray::Array2<F>, usize) -> Result<Array4<F>>,
{
    let mut x = randn4::<F>(shape, rng);
    for t in (1..=sched.t_max).rev() {
        let z: ndarray::Array2<F> = ndarray::Array2::from_shape_vec(
            (shape.0, z_dim),
            (0..shape.0 * z_dim)
                .map(|_| F::from_f64(rng.sample::<f64, _>(StandardNormal)))
                .collect(),
        )
        .expect("shape/product mismatch");
        let x0_hat = denoiser(&x, &z, t)?;
        if x0_hat.dim() != shape {
            return Err(Error::ShapeMismatch(format!(
                "denoiser returned {:?}, expected {:?}",
                x0_hat.dim(),
                shape
            )));
        }
        if !all_finite(&x0_hat) {
            return Err(Error::NonFinite(format!("denoiser output at step {t}")));
        }
        let post = posterior_params(sched, &x0_hat, &x, t)?;
        x = if post.variance > 0.0 {
            let z = randn4::<F>(shape, rng);
            let sd = F::from_f64(post.variance.sqrt());
            let mut next = post.mean;
            ndarray::Zip::from(&mut next).and(&z).for_each(|m, &zv| *m += zv * sd);
            next
        } else {
            post.mean
        };
    }
    Ok(x)
}

/// Many-step ancestral baseline: the same posterior recursion as
/// [`reverse_sample_loop`] but with the per-step latent pinned to zero, so the
/// only stochasticity is the chain noise. Used to time step-count scaling
/// against the few-step sampler on an identical network.
pub fn ancestral_sample_loop<F, D>(
    sched: &NoiseSchedule,
    shape: (usize, usize, usize, usize),
    z_dim: usize,
    denoiser: &mut D,
    rng: &mut ChaCha8Rng,
) -> Result<Array4<F>>
where
    F: Scalar,
    D: FnMut(&Array4<F>, &ndarray::Array2<F>, usize) -> Result<Array4<F>>,
{
    let z = ndarray::Array2::zeros((shape.0, z_dim));
    let mut x = randn4::<F>(shape, rng);
    for t in (1..=sched.t_max).rev() {
        let x0_hat = denoiser(&x, &z, t)?;
        if x0_hat.dim() != shape {
            return Err(Error::ShapeMismatch(format!(
                "denoiser returned {:?}, expected {:?}",
                x0_hat.dim(),
                shape
            )));
        }
        if !all_finite(&x0_hat) {
            return Err(Error::NonFinite(format!("denoiser output at step {t}")));
        }
        let post = posterior_params(sched, &x0_hat, &x, t)?;
        x = if post.variance > 0.0 {
            let noise = randn4::<F>(shape, rng);
            let sd = F::from_f64(post.variance.sqrt());
            let mut next = post.mean;
            ndarray::Zip::from(&mut next).and(&noise).for_each(|m, &nv| *m += nv * sd);
            next
        } else {
            post.mean
        };
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn sched4() -> NoiseSchedule {
        NoiseSchedule::new(4, 0.1, 20.0).unwrap()
    }

    // Frozen oracle values for (T=4, beta_min=0.1, beta_max=20), computed
    // independently from the closed-form exponents.
    const BETAS_4: [f64; 4] =
        [0.47632027847762359, 0.84902258154408539, 0.95647305032673802, 0.9874511343005119];
    const ABARS_4: [f64; 4] =
        [0.52367972152237641, 0.079063812453160673, 0.0034414065856249515, 4.3185749060341322e-5];

    #[test]
    fn schedule_matches_frozen_oracle() {
        let s = sched4();
        for t in 1..=4 {
            assert!((s.beta(t) - BETAS_4[t - 1]).abs() < 1e-15, "beta_{t}");
            assert!(
                (s.alpha_bar(t) - ABARS_4[t - 1]).abs() < 1e-15 * ABARS_4[t - 1].max(1.0),
                "abar_{t}"
            );
        }
        assert_eq!(s.alpha_bar(0), 1.0);
    }

    #[test]
    fn terminal_alpha_bar_has_closed_form() {
        let s = sched4();
        let expect = (-(0.1f64 + 20.0) / 2.0).exp();
        assert!((s.alpha_bar(4) - expect).abs() < 1e-9 * expect.max(1.0));
        // also holds for other step counts
        for t_max in [1, 2, 7, 100] {
            let s = NoiseSchedule::new(t_max, 0.1, 20.0).unwrap();
            assert!(
                (s.alpha_bar(t_max) - expect).abs() < 1e-12,
                "T={t_max}: {} vs {expect}",
                s.alpha_bar(t_max)
            );
        }
    }

    #[test]
    fn invalid_parameters_are_rejected() {
        assert!(matches!(NoiseSchedule::new(0, 0.1, 20.0), Err(Error::InvalidSchedule(_))));
        assert!(matches!(NoiseSchedule::new(4, 0.0, 20.0), Err(Error::InvalidSchedule(_))));
        assert!(matches!(NoiseSchedule::new(4, -1.0, 20.0), Err(Error::InvalidSchedule(_))));
        assert!(matches!(NoiseSchedule::new(4, 5.0, 1.0), Err(Error::InvalidSchedule(_))));
        assert!(matches!(
            NoiseSchedule::new(4, 0.1, f64::NAN),
            Err(Error::InvalidSchedule(_))
        ));
    }

    #[test]
    fn step_bounds_are_enforced() {
        let s = sched4();
        let x = Array4::<f32>::zeros((1, 1, 2, 2));
        let e = Array4::<f32>::zeros((1, 1, 2, 2));
        assert!(matches!(
            q_sample(&s, &x, 5, &e),
            Err(Error::StepOutOfRange { t: 5, t_max: 4 })
        ));
        assert!(matches!(s.posterior_coeffs(0), Err(Error::StepOutOfRange { .. })));
        assert!(matches!(s.posterior_coeffs(9), Err(Error::StepOutOfRange { .. })));
    }

    #[test]
    fn q_sample_statistics_match_marginal() {
        let s = sched4();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let c = 0.6f64;
        let x0 = Array4::<f64>::from_elem((1, 1, 1, 1), c);
        let t = 2;
        let n = 40_000;
        let mut vals = Vec::with_capacity(n);
        for _ in 0..n {
            let eps = randn4::<f64>((1, 1, 1, 1), &mut rng);
            vals.push(q_sample(&s, &x0, t, &eps).unwrap()[[0, 0, 0, 0]]);
        }
        let mean: f64 = vals.iter().sum::<f64>() / n as f64;
        let var: f64 =
            vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
        let abar = s.alpha_bar(t);
        let (em, ev) = (abar.sqrt() * c, 1.0 - abar);
        let se_mean = ev.sqrt() / (n as f64).sqrt();
        let se_var = ev * (2.0 / (n as f64 - 1.0)).sqrt();
        assert!((mean - em).abs() < 3.0 * se_mean, "mean {mean} vs {em}");
        assert!((var - ev).abs() < 3.0 * se_var, "var {var} vs {ev}");
    }

    #[test]
    fn forward_pair_marginal_matches_q_sample_marginal() {
        // chaining t-1 then one transition must reproduce the step-t marginal
        let s = sched4();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let c = -0.3f64;
        let x0 = Array4::<f64>::from_elem((1, 1, 1, 1), c);
        let t = 3;
        let n = 40_000;
        let mut vals = Vec::with_capacity(n);
        for _ in 0..n {
            let (_, xt) = forward_pair(&s, &x0, &[t], &mut rng).unwrap();
            vals.push(xt[[0, 0, 0, 0]]);
        }
        let mean: f64 = vals.iter().sum::<f64>() / n as f64;
        let var: f64 =
            vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
        let abar = s.alpha_bar(t);
        let (em, ev) = (abar.sqrt() * c, 1.0 - abar);
        let se_mean = ev.sqrt() / (n as f64).sqrt();
        let se_var = ev * (2.0 / (n as f64 - 1.0)).sqrt();
        assert!((mean - em).abs() < 3.0 * se_mean, "mean {mean} vs {em}");
        assert!((var - ev).abs() < 3.0 * se_var, "var {var} vs {ev}");
    }

    #[test]
    fn posterior_matches_scalar_bayes_oracle() {
        // Independent 1-D conjugate-Gaussian computation in precision form.
        let s = sched4();
        let (x0, xt) = (0.37f64, -1.21f64);
        for t in 2..=4 {
            let abar_prev = s.alpha_bar(t - 1);
            let (alpha, beta) = (s.alpha(t), s.beta(t));
            let tau = 1.0 / (1.0 - abar_prev) + alpha / beta;
            let mu_oracle =
                (abar_prev.sqrt() * x0 / (1.0 - abar_prev) + alpha.sqrt() * xt / beta) / tau;
            let var_oracle = 1.0 / tau;
            let (c0, c1, var) = s.posterior_coeffs(t).unwrap();
            let mu = c0 * x0 + c1 * xt;
            assert!((mu - mu_oracle).abs() < 1e-8, "t={t}: {mu} vs {mu_oracle}");
            assert!((var - var_oracle).abs() < 1e-8, "t={t}: {var} vs {var_oracle}");
        }
    }

    #[test]
    fn final_step_is_exact_passthrough() {
        let s = sched4();
        let x0_hat = Array4::<f32>::from_shape_fn((1, 2, 3, 3), |(_, c, y, x)| {
            (c + y + x) as f32 * 0.1 - 0.3
        });
        let x1 = Array4::<f32>::from_elem((1, 2, 3, 3), 9.9);
        let post = posterior_params(&s, &x0_hat, &x1, 1).unwrap();
        assert_eq!(post.mean, x0_hat);
        assert_eq!(post.variance, 0.0);
        assert_eq!(post.log_variance, f64::NEG_INFINITY);
    }

    #[test]
    fn posterior_coefficients_sum_to_one_for_small_beta() {
        // early in a fine schedule both beta and 1-abar are tiny, so c0 + c1 ~ 1
        let s = NoiseSchedule::new(1000, 0.1, 20.0).unwrap();
        let (c0, c1, _) = s.posterior_coeffs(2).unwrap();
        assert!((c0 + c1 - 1.0).abs() < 1e-3, "{}", c0 + c1);
    }

    #[test]
    fn zero_noise_q_sample_scales_by_signal_rate() {
        let s = sched4();
        let x0 = Array4::<f64>::from_elem((1, 1, 2, 2), 0.8);
        let eps = Array4::<f64>::zeros((1, 1, 2, 2));
        for t in 1..=4 {
            let out = q_sample(&s, &x0, t, &eps).unwrap();
            let expect = s.alpha_bar(t).sqrt() * 0.8;
            assert!((out[[0, 0, 0, 0]] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn reverse_loop_with_oracle_denoiser_returns_its_estimate() {
        let s = sched4();
        let truth = Array4::<f32>::from_shape_fn((2, 1, 4, 4), |(b, _, y, x)| {
            (b * 16 + y * 4 + x) as f32 / 32.0 - 0.5
        });
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let t_cloned = truth.clone();
        let mut denoiser =
            move |_: &Array4<f32>, _: &ndarray::Array2<f32>, _: usize| Ok(t_cloned.clone());
        let out = reverse_sample_loop(&s, truth.dim(), 8, &mut denoiser, &mut rng).unwrap();
        assert_eq!(out, truth);
    }

    #[test]
    fn single_step_chain_calls_denoiser_once_and_passes_through() {
        let s = NoiseSchedule::new(1, 0.1, 20.0).unwrap();
        let mut calls = 0usize;
        let mut denoiser = |x: &Array4<f32>, _: &ndarray::Array2<f32>, t: usize| {
            calls += 1;
            assert_eq!(t, 1);
            Ok(x.mapv(|v| v * 0.25))
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let out = reverse_sample_loop(&s, (1, 1, 3, 3), 4, &mut denoiser, &mut rng).unwrap();
        assert_eq!(calls, 1);
        assert!(out.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn ancestral_loop_zeroes_latents_and_visits_every_step() {
        let s = NoiseSchedule::new(25, 0.1, 20.0).unwrap();
        let mut seen = Vec::new();
        let mut denoiser = |x: &Array4<f32>, z: &ndarray::Array2<f32>, t: usize| {
            assert!(z.iter().all(|&v| v == 0.0), "latent must be pinned to zero");
            seen.push(t);
            Ok(x.mapv(|v| v * 0.5))
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let out = ancestral_sample_loop(&s, (1, 1, 4, 4), 8, &mut denoiser, &mut rng).unwrap();
        assert_eq!(seen, (1..=25).rev().collect::<Vec<_>>());
        assert!(out.iter().all(|v| v.is_finite()));

        let mut r1 = ChaCha8Rng::seed_from_u64(3);
        let mut r2 = ChaCha8Rng::seed_from_u64(3);
        let mut d = |x: &Array4<f32>, _: &ndarray::Array2<f32>, _: usize| Ok(x.mapv(|v| v * 0.5));
        let a = ancestral_sample_loop(&s, (1, 1, 4, 4), 8, &mut d, &mut r1).unwrap();
        let b = ancestral_sample_loop(&s, (1, 1, 4, 4), 8, &mut d, &mut r2).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn reverse_loop_is_seed_deterministic() {
        let s = sched4();
        let mut denoiser = |x: &Array4<f32>, z: &ndarray::Array2<f32>, _t: usize| {
            Ok(x.mapv(|v| (v * 0.5 + z[[0, 0]] * 0.01).tanh()))
        };
        let mut r1 = ChaCha8Rng::seed_from_u64(99);
        let a = reverse_sample_loop(&s, (1, 1, 4, 4), 8, &mut denoiser, &mut r1).unwrap();
        let mut r2 = ChaCha8Rng::seed_from_u64(99);
        let b = reverse_sample_loop(&s, (1, 1, 4, 4), 8, &mut denoiser, &mut r2).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn reverse_loop_rejects_non_finite_estimates() {
        let s = sched4();
        let mut denoiser = |_: &Array4<f32>, _: &ndarray::Array2<f32>, _: usize| {
            Ok(Array4::<f32>::from_elem((1, 1, 2, 2), f32::NAN))
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = reverse_sample_loop(&s, (1, 1, 2, 2), 8, &mut denoiser, &mut rng);
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(48))]

        #[test]
        fn schedule_invariants_hold_for_valid_ranges(
            t_max in 1usize..40,
            beta_min in 0.01f64..1.0,
            spread in 0.01f64..25.0,
        ) {
            let s = NoiseSchedule::new(t_max, beta_min, beta_min + spread).unwrap();
            for t in 1..=t_max {
                proptest::prop_assert!(s.beta(t) > 0.0 && s.beta(t) < 1.0);
                if t > 1 {
                    proptest::prop_assert!(s.beta(t) > s.beta(t - 1), "beta not increasing");
                    proptest::prop_assert!(
                        s.alpha_bar(t) < s.alpha_bar(t - 1),
                        "alpha_bar not decreasing"
                    );
                }
            }
        }
    }

    #[test]
    fn per_sample_steps_diffuse_independently() {
        let s = sched4();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x0 = Array4::<f64>::from_elem((3, 1, 2, 2), 0.5);
        let eps = randn4::<f64>((3, 1, 2, 2), &mut rng);
        let out = q_sample_per(&s, &x0, &[0, 1, 4], &eps).unwrap();
        // t=0 row untouched
        assert_eq!(out.slice(ndarray::s![0, .., .., ..]), x0.slice(ndarray::s![0, .., .., ..]));
        // t=1 row matches the whole-batch call on that row
        let row1 = q_sample(
            &s,
            &x0.slice(ndarray::s![1..2, .., .., ..]).to_owned(),
            1,
            &eps.slice(ndarray::s![1..2, .., .., ..]).to_owned(),
        )
        .unwrap();
        assert_eq!(out.slice(ndarray::s![1..2, .., .., ..]), row1);
        let bad = q_sample_per(&s, &x0, &[1, 2], &eps);
        assert!(matches!(bad, Err(Error::ShapeMismatch(_))));
    }
}
