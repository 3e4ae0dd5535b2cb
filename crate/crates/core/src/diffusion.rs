//! Diffusion mathematics: noise schedules, forward noising, learned reverse
//! steps, ancestral sampling, the noise-prediction objective, and truncated
//! restoration (diffuse an input to step N < T, then denoise back).
//!
//! Images live in [0,1]; the diffusion process runs in the network domain
//! [-1,1]. The affine map is applied exactly at the boundary and inverted on
//! output; only final restorations are clamped back to [0,1].

use crate::error::{Error, Result};
use crate::rng::stream;
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha12Rng;

/// Anything that predicts the noise component of a diffused image.
pub trait NoisePredictor: Sync {
    fn predict_noise(&self, x: &Tensor, t: usize) -> Result<Tensor>;

    /// Batched variant over `[N,C,H,W]` with per-element timesteps; the
    /// default loops the single-image path.
    fn predict_noise_batch(&self, x: &Tensor, ts: &[usize]) -> Result<Tensor> {
        let imgs = x.unstack()?;
        if imgs.len() != ts.len() {
            return Err(Error::shape(&[ts.len()], &[imgs.len()]));
        }
        let mut outs = Vec::with_capacity(imgs.len());
        for (img, &t) in imgs.iter().zip(ts) {
            outs.push(self.predict_noise(img, t)?);
        }
        Tensor::stack(&outs)
    }
}

/// Serializable description of a schedule; derived arrays are recomputed on
/// load, never stored.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ScheduleDescriptor {
    pub family: String,
    pub t: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl ScheduleDescriptor {
    pub fn build(&self) -> Result<NoiseSchedule> {
        if self.family != "linear" {
            return Err(Error::InvalidSchedule(format!(
                "unknown schedule family `{}`",
                self.family
            )));
        }
        make_linear_schedule(self.t, self.beta_start, self.beta_end)
    }
}

/// Per-step variances β_1..β_T and their signal-retention products
/// ᾱ_t = Π_{s<=t} (1-β_s).
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas_bar: Vec<f64>,
    descriptor: Option<ScheduleDescriptor>,
}

impl NoiseSchedule {
    /// Build from explicit per-step variances.
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::InvalidSchedule("need at least one step".into()));
        }
        if let Some(bad) = betas.iter().find(|&&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::InvalidSchedule(format!("beta {bad} outside (0, 1)")));
        }
        let mut alphas_bar = Vec::with_capacity(betas.len());
        let mut prod = 1.0;
        for &b in &betas {
            prod *= 1.0 - b;
            alphas_bar.push(prod);
        }
        Ok(NoiseSchedule {
            betas,
            alphas_bar,
            descriptor: None,
        })
    }

    /// Number of diffusion steps T.
    pub fn t_max(&self) -> usize {
        self.betas.len()
    }

    /// β_t, 1-based.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// ᾱ_t, 1-based; ᾱ_0 = 1 by the clean-image boundary convention.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alphas_bar[t - 1]
        }
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas_bar(&self) -> &[f64] {
        &self.alphas_bar
    }

    pub fn descriptor(&self) -> Option<&ScheduleDescriptor> {
        self.descriptor.as_ref()
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t < 1 || t > self.t_max() {
            return Err(Error::InvalidTimestep {
                t,
                lo: 1,
                hi: self.t_max(),
            });
        }
        Ok(())
    }
}

/// Linear interpolation from `beta_start` to `beta_end` inclusive over T steps.
pub fn make_linear_schedule(t: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if t < 1 {
        return Err(Error::InvalidSchedule("T must be >= 1".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::InvalidSchedule(format!(
            "need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )));
    }
    let betas = if t == 1 {
        vec![beta_start]
    } else {
        (0..t)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (t - 1) as f64)
            .collect()
    };
    let mut s = NoiseSchedule::from_betas(betas)?;
    s.descriptor = Some(ScheduleDescriptor {
        family: "linear".into(),
        t,
        beta_start,
        beta_end,
    });
    Ok(s)
}

/// The 1000-step reference endpoints (1e-4, 0.02) rescaled by 1000/T so the
/// total noise budget is preserved at short step counts.
pub fn scaled_linear_schedule(t: usize) -> Result<NoiseSchedule> {
    let f = 1000.0 / t as f64;
    make_linear_schedule(t, 1e-4 * f, 0.02 * f)
}

/// One forward Markov step: sqrt(1-β_t)·x_prev + sqrt(β_t)·noise.
pub fn forward_step(
    x_prev: &Tensor,
    t: usize,
    noise: &Tensor,
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    schedule.check_t(t)?;
    x_prev.check_same_shape(noise)?;
    let b = schedule.beta(t);
    x_prev.scale((1.0 - b).sqrt()).axpy(b.sqrt(), noise)
}

/// Closed-form marginal: sqrt(ᾱ_t)·x0 + sqrt(1-ᾱ_t)·noise; t = 0 is x0.
pub fn forward_marginal(
    x0: &Tensor,
    t: usize,
    noise: &Tensor,
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    if t > schedule.t_max() {
        return Err(Error::InvalidTimestep {
            t,
            lo: 0,
            hi: schedule.t_max(),
        });
    }
    x0.check_same_shape(noise)?;
    let ab = schedule.alpha_bar(t);
    x0.scale(ab.sqrt()).axpy((1.0 - ab).sqrt(), noise)
}

/// One learned reverse step with the ε-parameterized mean and σ_t² = β_t;
/// the final step (t = 1) is deterministic, `noise` is ignored there.
pub fn reverse_step(
    net: &dyn NoisePredictor,
    x_t: &Tensor,
    t: usize,
    schedule: &NoiseSchedule,
    noise: &Tensor,
) -> Result<Tensor> {
    schedule.check_t(t)?;
    x_t.check_same_shape(noise)?;
    let eps_hat = net.predict_noise(x_t, t)?;
    x_t.check_same_shape(&eps_hat)?;
    let b = schedule.beta(t);
    let ab = schedule.alpha_bar(t);
    let coef = b / (1.0 - ab).sqrt();
    let mean = x_t.axpy(-coef, &eps_hat)?.scale(1.0 / (1.0 - b).sqrt());
    if t == 1 {
        Ok(mean)
    } else {
        mean.axpy(b.sqrt(), noise)
    }
}

/// Source of reverse-process noise; lets tests inject explicit streams.
pub trait NoiseSource {
    fn draw(&mut self, shape: &[usize]) -> Tensor;
}

/// Seeded unit-Gaussian source.
pub struct GaussianSource(pub ChaCha12Rng);

impl GaussianSource {
    pub fn from_seed(seed: u64) -> Self {
        GaussianSource(stream(seed))
    }
}

impl NoiseSource for GaussianSource {
    fn draw(&mut self, shape: &[usize]) -> Tensor {
        Tensor::randn(shape, &mut self.0)
    }
}

/// All-zeros source; sampling paths follow the learned means exactly.
pub struct ZeroSource;

impl NoiseSource for ZeroSource {
    fn draw(&mut self, shape: &[usize]) -> Tensor {
        Tensor::zeros(shape)
    }
}

/// Apply reverse steps from `x_start` at timestep `n_start` down to x_0.
/// Noise is drawn once per step with t > 1, in descending-t order.
pub fn reverse_chain(
    net: &dyn NoisePredictor,
    x_start: Tensor,
    n_start: usize,
    schedule: &NoiseSchedule,
    source: &mut dyn NoiseSource,
) -> Result<Tensor> {
    schedule.check_t(n_start)?;
    let mut x = x_start;
    for t in (1..=n_start).rev() {
        let noise = if t > 1 {
            source.draw(x.shape())
        } else {
            Tensor::zeros(x.shape())
        };
        x = reverse_step(net, &x, t, schedule, &noise)?;
    }
    Ok(x)
}

/// Draw x_T from the unit Gaussian and denoise to x_0; output is mapped back
/// from the network domain but not clamped.
pub fn ancestral_sample(
    net: &dyn NoisePredictor,
    shape: &[usize],
    schedule: &NoiseSchedule,
    rng_seed: u64,
) -> Result<Tensor> {
    let mut source = GaussianSource::from_seed(rng_seed);
    ancestral_sample_with(net, shape, schedule, &mut source)
}

pub fn ancestral_sample_with(
    net: &dyn NoisePredictor,
    shape: &[usize],
    schedule: &NoiseSchedule,
    source: &mut dyn NoiseSource,
) -> Result<Tensor> {
    let x_t = source.draw(shape);
    let x0 = reverse_chain(net, x_t, schedule.t_max(), schedule, source)?;
    Ok(from_net_domain(&x0))
}

/// Truncated restoration: diffuse `y0` to step N via the closed-form
/// marginal, then denoise back. Deterministic given the seed; the output is
/// clamped to [0,1].
pub fn restore(
    net: &dyn NoisePredictor,
    y0: &Tensor,
    n_trunc: usize,
    schedule: &NoiseSchedule,
    rng_seed: u64,
) -> Result<Tensor> {
    let mut source = GaussianSource::from_seed(rng_seed);
    restore_with(net, y0, n_trunc, schedule, &mut source)
}

pub fn restore_with(
    net: &dyn NoisePredictor,
    y0: &Tensor,
    n_trunc: usize,
    schedule: &NoiseSchedule,
    source: &mut dyn NoiseSource,
) -> Result<Tensor> {
    if n_trunc < 1 || n_trunc >= schedule.t_max() {
        return Err(Error::InvalidTimestep {
            t: n_trunc,
            lo: 1,
            hi: schedule.t_max().saturating_sub(1),
        });
    }
    let z0 = to_net_domain(y0);
    let noise = source.draw(z0.shape());
    let x_n = forward_marginal(&z0, n_trunc, &noise, schedule)?;
    let x0 = reverse_chain(net, x_n, n_trunc, schedule, source)?;
    Ok(from_net_domain(&x0).clamp(0.0, 1.0))
}

/// Default truncation step: ceil(T/4).
pub fn default_truncation(t_max: usize) -> usize {
    t_max.div_ceil(4).max(1)
}

/// [0,1] image intensities to the [-1,1] network domain.
pub fn to_net_domain(x: &Tensor) -> Tensor {
    x.map(|v| 2.0 * v - 1.0)
}

/// Inverse of [`to_net_domain`]; no clamping.
pub fn from_net_domain(x: &Tensor) -> Tensor {
    x.map(|v| 0.5 * (v + 1.0))
}

/// Inputs of one ε-prediction objective evaluation: diffused batch, per-image
/// timesteps and the injected noise, all drawn deterministically from `rng`.
pub struct LossDraws {
    pub x_t: Tensor,
    pub ts: Vec<usize>,
    pub eps: Tensor,
}

/// Draw (t, ε) per batch element and form x_t from images in [0,1].
/// Draw order is fixed: per element, first t then ε.
pub fn sample_loss_inputs(
    x0_batch: &[Tensor],
    schedule: &NoiseSchedule,
    rng: &mut ChaCha12Rng,
) -> Result<LossDraws> {
    if x0_batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let t_max = schedule.t_max();
    let mut ts = Vec::with_capacity(x0_batch.len());
    let mut xts = Vec::with_capacity(x0_batch.len());
    let mut eps = Vec::with_capacity(x0_batch.len());
    for x0 in x0_batch {
        let t = rng.gen_range(1..=t_max);
        let e = Tensor::randn(x0.shape(), rng);
        let z0 = to_net_domain(x0);
        xts.push(forward_marginal(&z0, t, &e, schedule)?);
        eps.push(e);
        ts.push(t);
    }
    Ok(LossDraws {
        x_t: Tensor::stack(&xts)?,
        ts,
        eps: Tensor::stack(&eps)?,
    })
}

/// Mean squared error between injected and predicted noise over a batch of
/// [0,1] images; deterministic given the seed.
pub fn training_loss(
    net: &dyn NoisePredictor,
    x0_batch: &[Tensor],
    schedule: &NoiseSchedule,
    rng_seed: u64,
) -> Result<f64> {
    let mut rng = stream(rng_seed);
    let draws = sample_loss_inputs(x0_batch, schedule, &mut rng)?;
    let pred = net.predict_noise_batch(&draws.x_t, &draws.ts)?;
    let diff = pred.sub(&draws.eps)?;
    Ok(diff.data().iter().map(|v| v * v).sum::<f64>() / diff.numel() as f64)
}
