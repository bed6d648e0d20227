//! Forward noising, training-pair construction and the guided ancestral
//! sampler.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::denoiser::{DenoiseInput, Denoiser, ImageLatent};
use crate::error::{Error, Result};
use crate::lora::ActiveLoras;
use crate::nn::Bound;
use crate::scalar::Scalar;
use crate::tensor::{Graph, ParamStore, Tensor};
use crate::text::{PromptTokens, TextEmbedding};

pub const DEFAULT_TIMESTEPS: usize = 200;
pub const DEFAULT_SAMPLING_STEPS: usize = 50;
pub const DEFAULT_GUIDANCE: f64 = 7.5;
/// Probability of replacing a training prompt by the empty prompt.
pub const DEFAULT_UNCOND_PROB: f64 = 0.1;

/// Linear β schedule with cumulative products `ᾱ_t = Π_{s≤t} (1 − β_s)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ScheduleSpec", into = "ScheduleSpec")]
pub struct DiffusionSchedule {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScheduleSpec {
    steps: usize,
    beta_start: f64,
    beta_end: f64,
}

impl TryFrom<ScheduleSpec> for DiffusionSchedule {
    type Error = Error;

    fn try_from(s: ScheduleSpec) -> Result<Self> {
        Self::linear(s.steps, s.beta_start, s.beta_end)
    }
}

impl From<DiffusionSchedule> for ScheduleSpec {
    fn from(s: DiffusionSchedule) -> Self {
        ScheduleSpec {
            steps: s.steps,
            beta_start: s.beta_start,
            beta_end: s.beta_end,
        }
    }
}

impl Default for DiffusionSchedule {
    fn default() -> Self {
        Self::linear(DEFAULT_TIMESTEPS, 1e-4, 0.02).expect("default schedule is valid")
    }
}

impl DiffusionSchedule {
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps < 2 || !(0.0 < beta_start && beta_start < beta_end && beta_end < 1.0) {
            return Err(Error::Config(format!(
                "invalid schedule: {steps} steps, beta {beta_start}..{beta_end}"
            )));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|t| beta_start + (beta_end - beta_start) * t as f64 / (steps - 1) as f64)
            .collect();
        let mut alpha_bars = Vec::with_capacity(steps);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        Ok(DiffusionSchedule {
            steps,
            beta_start,
            beta_end,
            betas,
            alpha_bars,
        })
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.betas[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t >= self.steps {
            return Err(Error::TimestepOutOfRange {
                t,
                steps: self.steps,
            });
        }
        Ok(())
    }

    /// `n` evenly strided timesteps, ascending, starting at 0.
    pub fn strided(&self, n: usize) -> Result<Vec<usize>> {
        if n == 0 || n > self.steps {
            return Err(Error::Config(format!(
                "{n} sampling steps requested, schedule has {}",
                self.steps
            )));
        }
        Ok((0..n).map(|i| i * self.steps / n).collect())
    }
}

/// `z_t = √ᾱ·z₀ + √(1−ᾱ)·ε` for an explicit ᾱ.
pub fn noise_with<T: Scalar>(z0: &[T], eps: &[T], alpha_bar: f64) -> Result<Vec<T>> {
    if z0.len() != eps.len() {
        return Err(Error::LengthMismatch {
            expected: z0.len(),
            got: eps.len(),
        });
    }
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    Ok(z0
        .iter()
        .zip(eps)
        .map(|(&x, &e)| T::of(a * x.as_f64() + b * e.as_f64()))
        .collect())
}

/// One training pair for the diffusion loss. The conditioning embedding is
/// computed from `tokens` with the current text encoder at loss time.
#[derive(Clone, Debug, PartialEq)]
pub struct NoisySample<T> {
    pub z_t: ImageLatent<T>,
    pub t: usize,
    pub eps: ImageLatent<T>,
    pub tokens: PromptTokens,
}

pub fn q_sample<T: Scalar>(
    schedule: &DiffusionSchedule,
    z0: &ImageLatent<T>,
    t: usize,
    eps: &ImageLatent<T>,
    tokens: PromptTokens,
) -> Result<NoisySample<T>> {
    schedule.check_t(t)?;
    if z0.shape() != eps.shape() {
        return Err(Error::shape(
            "q_sample",
            format!("{:?} vs {:?}", z0.shape(), eps.shape()),
        ));
    }
    let z_t = noise_with(z0.data(), eps.data(), schedule.alpha_bar(t))?;
    Ok(NoisySample {
        z_t: Tensor::new(z0.shape().to_vec(), z_t)?,
        t,
        eps: eps.clone(),
        tokens,
    })
}

pub fn standard_normal<T: Scalar, R: Rng + ?Sized>(rng: &mut R, shape: &[usize]) -> Tensor<T> {
    Tensor::from_fn(shape, |_| {
        let z: f64 = StandardNormal.sample(rng);
        T::of(z)
    })
}

/// Draws `batch` samples: a uniformly chosen item, uniform `t`, fresh
/// standard-normal ε, and the empty prompt with probability `uncond_prob`.
pub fn make_training_batch<T: Scalar, R: Rng + ?Sized>(
    items: &[(ImageLatent<T>, PromptTokens)],
    batch: usize,
    schedule: &DiffusionSchedule,
    uncond_prob: f64,
    rng: &mut R,
) -> Result<Vec<NoisySample<T>>> {
    if items.is_empty() {
        return Err(Error::Empty("training item set"));
    }
    (0..batch)
        .map(|_| {
            let (img, tokens) = &items[rng.random_range(0..items.len())];
            let t = rng.random_range(0..schedule.steps);
            let eps = standard_normal(rng, img.shape());
            let drop = rng.random::<f64>() < uncond_prob;
            let tokens = if drop { PromptTokens::empty() } else { *tokens };
            q_sample(schedule, img, t, &eps, tokens)
        })
        .collect()
}

/// `ε_u + s·(ε_c − ε_u)`.
pub fn guided_noise<T: Scalar>(eps_cond: &[T], eps_uncond: &[T], scale: f64) -> Vec<T> {
    eps_cond
        .iter()
        .zip(eps_uncond)
        .map(|(&c, &u)| T::of(u.as_f64() + scale * (c.as_f64() - u.as_f64())))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    pub steps: usize,
    pub guidance: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            steps: DEFAULT_SAMPLING_STEPS,
            guidance: DEFAULT_GUIDANCE,
        }
    }
}

/// Everything the sampler needs about the model.
pub struct SamplingModel<'a, T> {
    pub denoiser: &'a Denoiser,
    pub base: &'a ParamStore<T>,
    pub loras: Vec<&'a ParamStore<T>>,
    pub schedule: &'a DiffusionSchedule,
}

/// Conditional and unconditional prompt embeddings.
pub struct Conditioning<'a, T> {
    pub tokens: &'a PromptTokens,
    pub cond: &'a TextEmbedding<T>,
    pub uncond: &'a TextEmbedding<T>,
}

/// DDPM ancestral sampling over a strided timestep subset with
/// classifier-free guidance, one image per seed. Output is clamped to
/// `[-1, 1]`. Each image depends only on its own seed.
pub fn sample<T: Scalar>(
    model: &SamplingModel<'_, T>,
    cond: &Conditioning<'_, T>,
    config: SamplerConfig,
    seeds: &[u64],
) -> Result<Vec<ImageLatent<T>>> {
    let SamplingModel {
        denoiser,
        base,
        schedule,
        ..
    } = model;
    if denoiser.is_untrained(base) {
        log::warn!("sampling from a model with an all-zero output head");
    }
    let ts = schedule.strided(config.steps)?;
    let size = denoiser.config.image_size;
    let px = size * size;
    let empty = PromptTokens::empty();

    let mut rngs: Vec<ChaCha8Rng> = seeds
        .iter()
        .map(|&s| ChaCha8Rng::seed_from_u64(s))
        .collect();
    let mut xs: Vec<Vec<f64>> = rngs
        .iter_mut()
        .map(|r| (0..px).map(|_| StandardNormal.sample(r)).collect())
        .collect();

    for (k, &t) in ts.iter().enumerate().rev() {
        let g = Graph::<T>::new();
        let bound = Bound::bind(&g, base, false);
        let lb: Vec<Bound> = model
            .loras
            .iter()
            .map(|p| Bound::bind(&g, p, false))
            .collect();
        let active = ActiveLoras::new(lb.iter().collect());
        let c = g.constant(cond.cond.values());
        let u = g.constant(cond.uncond.values());
        let zs: Vec<Vec<T>> = xs
            .iter()
            .map(|x| x.iter().map(|&v| T::of(v)).collect())
            .collect();
        let mut inputs = Vec::with_capacity(2 * xs.len());
        for z in &zs {
            inputs.push(DenoiseInput {
                z_t: z,
                t,
                cond: c,
                tokens: cond.tokens,
            });
            inputs.push(DenoiseInput {
                z_t: z,
                t,
                cond: u,
                tokens: &empty,
            });
        }
        let out = denoiser.forward(&g, &inputs, &bound, &active, None)?;
        let eps_all = g.value(out);

        let ab_t = schedule.alpha_bar(t);
        let ab_prev = if k > 0 {
            schedule.alpha_bar(ts[k - 1])
        } else {
            1.0
        };
        let beta = 1.0 - ab_t / ab_prev;
        let c_x0 = ab_prev.sqrt() * beta / (1.0 - ab_t);
        let c_xt = (1.0 - beta).sqrt() * (1.0 - ab_prev) / (1.0 - ab_t);
        let sigma = (beta * (1.0 - ab_prev) / (1.0 - ab_t)).max(0.0).sqrt();

        for (i, (x, rng)) in xs.iter_mut().zip(rngs.iter_mut()).enumerate() {
            let ec = &eps_all[2 * i * px..(2 * i + 1) * px];
            let eu = &eps_all[(2 * i + 1) * px..(2 * i + 2) * px];
            let eps = guided_noise(ec, eu, config.guidance);
            for (xv, e) in x.iter_mut().zip(&eps) {
                let x0 = ((*xv - (1.0 - ab_t).sqrt() * e.as_f64()) / ab_t.sqrt()).clamp(-1.0, 1.0);
                let mean = c_x0 * x0 + c_xt * *xv;
                *xv = if k > 0 {
                    let z: f64 = StandardNormal.sample(rng);
                    mean + sigma * z
                } else {
                    mean
                };
            }
        }
    }
    xs.into_iter()
        .map(|x| {
            Tensor::new(
                vec![size, size],
                x.into_iter().map(|v| T::of(v.clamp(-1.0, 1.0))).collect(),
            )
        })
        .collect()
}
