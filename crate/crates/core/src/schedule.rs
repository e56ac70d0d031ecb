//! Variance schedule, closed-form forward corruption, posterior algebra and
//! the ancestral (DDPM) sampler.
//!
//! Timesteps are 1-based throughout: `t ∈ 1..=T`, with `ᾱ_0 = 1`.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, dim_err, usage_err, Result};
use crate::numcore::{no_grad, Scalar, Tensor};
use crate::seed::{derive_seed, rng_from};

/// Serializable description of a schedule; the full tables are rebuilt
/// from it on load.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleParams {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        Self { steps: 100, beta_start: 1e-4, beta_end: 0.02 }
    }
}

impl ScheduleParams {
    pub fn build(&self) -> Result<DiffusionSchedule> {
        make_linear_schedule(self.steps, self.beta_start, self.beta_end)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    params: ScheduleParams,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    posterior_betas: Vec<f64>,
}

/// Linearly spaced `β` from `beta_start` to `beta_end` inclusive.
pub fn make_linear_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<DiffusionSchedule> {
    if steps == 0 {
        return Err(config_err!("schedule needs at least one step"));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(config_err!(
            "schedule bounds must satisfy 0 < beta_start <= beta_end < 1, got {beta_start} and {beta_end}"
        ));
    }
    let betas = if steps == 1 {
        vec![beta_start]
    } else {
        let span = (steps - 1) as f64;
        (0..steps).map(|i| beta_start + (beta_end - beta_start) * i as f64 / span).collect()
    };
    Ok(DiffusionSchedule::from_betas_unchecked(ScheduleParams { steps, beta_start, beta_end }, betas))
}

impl DiffusionSchedule {
    fn from_betas_unchecked(params: ScheduleParams, betas: Vec<f64>) -> Self {
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        let posterior_betas = (0..betas.len())
            .map(|i| {
                let prev = if i == 0 { 1.0 } else { alpha_bars[i - 1] };
                (1.0 - prev) / (1.0 - alpha_bars[i]) * betas[i]
            })
            .collect();
        Self { params, betas, alphas, alpha_bars, posterior_betas }
    }

    pub fn params(&self) -> ScheduleParams {
        self.params
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn posterior_betas(&self) -> &[f64] {
        &self.posterior_betas
    }

    fn check_t(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.steps() {
            return Err(usage_err!("timestep {t} outside 1..={}", self.steps()));
        }
        Ok(t - 1)
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        Ok(self.betas[self.check_t(t)?])
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        Ok(self.alpha_bars[self.check_t(t)?])
    }

    /// `ᾱ_{t−1}` with `ᾱ_0 = 1`.
    pub fn alpha_bar_prev(&self, t: usize) -> Result<f64> {
        let i = self.check_t(t)?;
        Ok(if i == 0 { 1.0 } else { self.alpha_bars[i - 1] })
    }

    /// `β̃_t`; zero at `t = 1`.
    pub fn posterior_beta(&self, t: usize) -> Result<f64> {
        let i = self.check_t(t)?;
        Ok(if i == 0 { 0.0 } else { self.posterior_betas[i] })
    }

    /// Coefficients `(c_x0, c_xt)` of the posterior mean
    /// `μ̃_t = c_x0·x0 + c_xt·x_t`.
    pub fn posterior_coefficients(&self, t: usize) -> Result<(f64, f64)> {
        let i = self.check_t(t)?;
        if i == 0 {
            return Ok((1.0, 0.0));
        }
        let ab = self.alpha_bars[i];
        let ab_prev = self.alpha_bars[i - 1];
        let c_x0 = ab_prev.sqrt() * self.betas[i] / (1.0 - ab);
        let c_xt = self.alphas[i].sqrt() * (1.0 - ab_prev) / (1.0 - ab);
        Ok((c_x0, c_xt))
    }

    /// `√ᾱ_t·x0 + √(1−ᾱ_t)·ε`.
    pub fn forward_sample<T: Scalar>(&self, x0: &Tensor<T>, t: usize, eps: &Tensor<T>) -> Result<Tensor<T>> {
        let ab = self.alpha_bar(t)?;
        if x0.shape() != eps.shape() {
            return Err(dim_err!("forward_sample: x0 {:?} and noise {:?} differ", x0.shape(), eps.shape()));
        }
        let a = crate::numcore::scale(x0, T::from_f64_lossy(ab.sqrt()));
        let b = crate::numcore::scale(eps, T::from_f64_lossy((1.0 - ab).sqrt()));
        crate::numcore::add(&a, &b)
    }

    /// Per-sample forward corruption; `ts[i]` is the timestep of sample `i`.
    pub fn forward_sample_batch<T: Scalar>(&self, x0: &Tensor<T>, ts: &[usize], eps: &Tensor<T>) -> Result<Tensor<T>> {
        if x0.shape() != eps.shape() {
            return Err(dim_err!("forward_sample: x0 {:?} and noise {:?} differ", x0.shape(), eps.shape()));
        }
        let n = x0.shape()[0];
        if ts.len() != n {
            return Err(dim_err!("forward_sample: {} timesteps for batch {n}", ts.len()));
        }
        let per = x0.numel() / n;
        let mut signal = Vec::with_capacity(x0.numel());
        let mut noise = Vec::with_capacity(x0.numel());
        for &t in ts {
            let ab = self.alpha_bar(t)?;
            signal.extend(std::iter::repeat_n(T::from_f64_lossy(ab.sqrt()), per));
            noise.extend(std::iter::repeat_n(T::from_f64_lossy((1.0 - ab).sqrt()), per));
        }
        let signal = Tensor::from_vec(x0.shape(), signal)?;
        let noise = Tensor::from_vec(x0.shape(), noise)?;
        crate::numcore::add(&crate::numcore::mul(x0, &signal)?, &crate::numcore::mul(eps, &noise)?)
    }

    /// Inverts the forward marginal: `(x_t − √(1−ᾱ_t)·ε̂)/√ᾱ_t`.
    pub fn estimate_x0<T: Scalar>(&self, xt: &Tensor<T>, eps_hat: &Tensor<T>, t: usize) -> Result<Tensor<T>> {
        if xt.shape() != eps_hat.shape() {
            return Err(dim_err!("estimate_x0: x_t {:?} and noise estimate {:?} differ", xt.shape(), eps_hat.shape()));
        }
        let ab = self.alpha_bar(t)?;
        let data = estimate_x0_values(&xt.data(), &eps_hat.data(), ab, None);
        Tensor::from_vec(xt.shape(), data)
    }

    /// Posterior mean `μ̃_t(x_t, x0)` and variance `β̃_t`.
    pub fn posterior_params<T: Scalar>(&self, xt: &Tensor<T>, x0: &Tensor<T>, t: usize) -> Result<(Tensor<T>, f64)> {
        if xt.shape() != x0.shape() {
            return Err(dim_err!("posterior_params: x_t {:?} and x0 {:?} differ", xt.shape(), x0.shape()));
        }
        let (c0, ct) = self.posterior_coefficients(t)?;
        let (c0, ct) = (T::from_f64_lossy(c0), T::from_f64_lossy(ct));
        let mean = x0.data().iter().zip(xt.data().iter()).map(|(a, b)| c0 * *a + ct * *b).collect();
        Ok((Tensor::from_vec(xt.shape(), mean)?, self.posterior_beta(t)?))
    }

    /// One reverse step `x_t → x_{t−1}` using the clamped `x̂0` estimate and
    /// posterior variance `β̃_t`. `noise` must be zero (or absent) at `t = 1`.
    pub fn ddpm_step<T: Scalar>(
        &self,
        xt: &Tensor<T>,
        eps_hat: &Tensor<T>,
        t: usize,
        noise: Option<&Tensor<T>>,
    ) -> Result<Tensor<T>> {
        if xt.shape() != eps_hat.shape() {
            return Err(dim_err!("ddpm_step: x_t {:?} and noise estimate {:?} differ", xt.shape(), eps_hat.shape()));
        }
        if let Some(z) = noise {
            if z.shape() != xt.shape() {
                return Err(dim_err!("ddpm_step: noise {:?} vs x_t {:?}", z.shape(), xt.shape()));
            }
            if t == 1 && z.data().iter().any(|v| *v != T::zero()) {
                return Err(usage_err!("the final reverse step (t = 1) is noiseless"));
            }
        }
        let ab = self.alpha_bar(t)?;
        let (c0, ct) = self.posterior_coefficients(t)?;
        let sigma = self.posterior_beta(t)?.sqrt();
        let x0_hat = estimate_x0_values(&xt.data(), &eps_hat.data(), ab, Some(1.0));
        let (c0, ct, sigma) = (T::from_f64_lossy(c0), T::from_f64_lossy(ct), T::from_f64_lossy(sigma));
        let xt_data = xt.data();
        let mut out: Vec<T> = x0_hat.iter().zip(xt_data.iter()).map(|(x0, x)| c0 * *x0 + ct * *x).collect();
        if let Some(z) = noise {
            out.iter_mut().zip(z.data().iter()).for_each(|(o, z)| *o = *o + sigma * *z);
        }
        Tensor::from_vec(xt.shape(), out)
    }
}

fn estimate_x0_values<T: Scalar>(xt: &[T], eps: &[T], alpha_bar: f64, clamp: Option<f64>) -> Vec<T> {
    let inv_sqrt = T::from_f64_lossy(1.0 / alpha_bar.sqrt());
    let noise_scale = T::from_f64_lossy((1.0 - alpha_bar).sqrt());
    let bound = clamp.map(T::from_f64_lossy);
    xt.iter()
        .zip(eps)
        .map(|(x, e)| {
            let v = (*x - noise_scale * *e) * inv_sqrt;
            match bound {
                Some(b) => v.max(-b).min(b),
                None => v,
            }
        })
        .collect()
}

/// An `ε_θ(x_t | cond, t)` noise predictor.
pub trait NoisePredictor<T: Scalar> {
    fn predict_noise(&self, noisy: &Tensor<T>, cond: &Tensor<T>, t: usize) -> Result<Tensor<T>>;
}

/// Child seed used for sample `index` by [`sample`].
pub fn sample_seed(seed: u64, index: usize) -> u64 {
    derive_seed(seed, index as u64)
}

/// Runs the full reverse chain from Gaussian noise. Each sample in the
/// batch draws from its own random stream, so results do not depend on how
/// samples are grouped into batches.
pub fn sample<T: Scalar, D: NoisePredictor<T> + ?Sized>(
    denoiser: &D,
    schedule: &DiffusionSchedule,
    cond: &Tensor<T>,
    shape: &[usize],
    seed: u64,
) -> Result<Tensor<T>> {
    let n = *shape.first().ok_or_else(|| dim_err!("sample shape must include a batch axis"))?;
    let seeds: Vec<u64> = (0..n).map(|i| sample_seed(seed, i)).collect();
    sample_with_seeds(denoiser, schedule, cond, shape, &seeds)
}

/// [`sample`] with an explicit seed per batch element.
pub fn sample_with_seeds<T: Scalar, D: NoisePredictor<T> + ?Sized>(
    denoiser: &D,
    schedule: &DiffusionSchedule,
    cond: &Tensor<T>,
    shape: &[usize],
    seeds: &[u64],
) -> Result<Tensor<T>> {
    let n = *shape.first().ok_or_else(|| dim_err!("sample shape must include a batch axis"))?;
    if seeds.len() != n {
        return Err(dim_err!("{} seeds for a batch of {n}", seeds.len()));
    }
    if cond.shape().first() != Some(&n) {
        return Err(dim_err!("conditioning batch {:?} does not match sample batch {n}", cond.shape().first()));
    }
    let _guard = no_grad();
    let per: usize = shape[1..].iter().product();
    let mut rngs: Vec<_> = seeds.iter().map(|s| rng_from(*s)).collect();
    let draw = |rngs: &mut [rand_chacha::ChaCha8Rng]| -> Vec<T> {
        let mut v = Vec::with_capacity(n * per);
        for rng in rngs.iter_mut() {
            v.extend((0..per).map(|_| gaussian::<T, _>(rng)));
        }
        v
    };
    let mut x = Tensor::from_vec(shape, draw(&mut rngs))?;
    for t in (1..=schedule.steps()).rev() {
        let eps_hat = denoiser.predict_noise(&x, cond, t)?;
        if eps_hat.shape() != shape {
            return Err(dim_err!("denoiser returned {:?}, expected {shape:?}", eps_hat.shape()));
        }
        let noise = if t > 1 { Some(Tensor::from_vec(shape, draw(&mut rngs))?) } else { None };
        x = schedule.ddpm_step(&x, &eps_hat, t, noise.as_ref())?;
    }
    let one = T::one();
    let clamped = x.data().iter().map(|v| v.max(-one).min(one)).collect();
    let out = Tensor::from_vec(shape, clamped)?;
    if !out.all_finite() {
        return Err(crate::Error::NonFinite("sampler produced a non-finite value".into()));
    }
    Ok(out)
}

fn gaussian<T: Scalar, R: Rng + ?Sized>(rng: &mut R) -> T {
    let v: f64 = StandardNormal.sample(rng);
    T::from_f64_lossy(v)
}
