//! Diffusion process: linear β schedule, forward noising, ε-prediction loss,
//! DDPM and DDIM reverse steps, classifier-free guidance and the closed-form
//! denoiser for Gaussian data used as a test oracle.
//!
//! Timesteps are 1-based (`t ∈ 1..=T`); `ᾱ_0 ≡ 1` marks the data endpoint.

use alloc::vec::Vec;

use crate::error::{invalid, shape_err, Error, Result};
use crate::numerics::{Rng, Scalar, Tensor};

pub const DEFAULT_TRAIN_STEPS: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;
pub const DEFAULT_INFERENCE_STEPS: usize = 20;
pub const DEFAULT_CFG_SCALE: f32 = 7.5;

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    beta_start: f64,
    beta_end: f64,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear β from `beta_start` to `beta_end` over `steps` timesteps.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 || !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(invalid("build_schedule", "need T ≥ 1 and 0 < beta_start ≤ beta_end < 1"));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut acc = 1.0;
        let alpha_bars = alphas
            .iter()
            .map(|a| {
                acc *= a;
                acc
            })
            .collect();
        Ok(Self {
            beta_start,
            beta_end,
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn default_training() -> Self {
        Self::linear(DEFAULT_TRAIN_STEPS, DEFAULT_BETA_START, DEFAULT_BETA_END).expect("valid defaults")
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }
    pub fn beta_start(&self) -> f64 {
        self.beta_start
    }
    pub fn beta_end(&self) -> f64 {
        self.beta_end
    }

    fn check(&self, op: &'static str, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::Timestep {
                op,
                t,
                max: self.steps(),
            });
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }
    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }
    /// `ᾱ_t`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }
    /// Signal coefficient of the forward process, `√ᾱ_t`.
    pub fn signal(&self, t: usize) -> f64 {
        libm::sqrt(self.alpha_bar(t))
    }
    /// Noise coefficient of the forward process, `√(1−ᾱ_t)`.
    pub fn noise(&self, t: usize) -> f64 {
        libm::sqrt(1.0 - self.alpha_bar(t))
    }
}

fn same_shape<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err(op, a.shape(), b.shape()));
    }
    Ok(())
}

/// `√ᾱ_t·x0 + √(1−ᾱ_t)·ε`.
pub fn q_sample<T: Scalar>(x0: &Tensor<T>, t: usize, eps: &Tensor<T>, sched: &NoiseSchedule) -> Result<Tensor<T>> {
    sched.check("q_sample", t)?;
    same_shape("q_sample", x0, eps)?;
    let (s, n) = (T::of(sched.signal(t)), T::of(sched.noise(t)));
    x0.zip_map(eps, |x, e| s * x + n * e)
}

/// Mean squared error between predicted and true noise (`w_t ≡ 1`).
pub fn eps_loss<T: Scalar>(eps_pred: &Tensor<T>, eps: &Tensor<T>) -> Result<f64> {
    same_shape("eps_loss", eps_pred, eps)?;
    let s: f64 = eps_pred
        .data()
        .iter()
        .zip(eps.data())
        .map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2))
        .sum();
    Ok(s / eps.len() as f64)
}

/// Ancestral DDPM step with an explicit noise tensor `z` (ignored at `t = 1`).
pub fn ddpm_step_with_noise<T: Scalar>(x_t: &Tensor<T>, eps_hat: &Tensor<T>, t: usize, sched: &NoiseSchedule, z: &Tensor<T>) -> Result<Tensor<T>> {
    sched.check("ddpm_step", t)?;
    same_shape("ddpm_step", x_t, eps_hat)?;
    same_shape("ddpm_step", x_t, z)?;
    let inv_sqrt_alpha = 1.0 / libm::sqrt(sched.alpha(t));
    let coef = (1.0 - sched.alpha(t)) / sched.noise(t);
    let sigma = if t > 1 { libm::sqrt(sched.beta(t)) } else { 0.0 };
    let mut out = Tensor::zeros(x_t.shape());
    for (((o, &x), &e), &zz) in out.data_mut().iter_mut().zip(x_t.data()).zip(eps_hat.data()).zip(z.data()) {
        let mean = inv_sqrt_alpha * (x.as_f64() - coef * e.as_f64());
        *o = T::of(mean + sigma * zz.as_f64());
    }
    Ok(out)
}

/// `x_{t−1} = (x_t − (1−α_t)/√(1−ᾱ_t)·ε̂)/√α_t + σ_t·z`, `σ_t² = β_t`, `σ_1 = 0`.
pub fn ddpm_step<T: Scalar>(x_t: &Tensor<T>, eps_hat: &Tensor<T>, t: usize, sched: &NoiseSchedule, rng: &mut Rng) -> Result<Tensor<T>> {
    let z = if t > 1 {
        rng.normal_tensor(x_t.shape())
    } else {
        Tensor::zeros(x_t.shape())
    };
    ddpm_step_with_noise(x_t, eps_hat, t, sched, &z)
}

/// Deterministic DDIM (η = 0) step from `t` to `t_prev < t`.
pub fn ddim_step<T: Scalar>(x_t: &Tensor<T>, eps_hat: &Tensor<T>, t: usize, t_prev: usize, sched: &NoiseSchedule) -> Result<Tensor<T>> {
    sched.check("ddim_step", t)?;
    if t_prev >= t {
        return Err(invalid("ddim_step", "t_prev must precede t"));
    }
    same_shape("ddim_step", x_t, eps_hat)?;
    let (s, n) = (sched.signal(t), sched.noise(t));
    let (sp, np) = (sched.signal(t_prev), sched.noise(t_prev));
    x_t.zip_map(eps_hat, |x, e| {
        let (x, e) = (x.as_f64(), e.as_f64());
        let x0 = (x - n * e) / s;
        T::of(sp * x0 + np * e)
    })
}

/// Re-derives `ε̂` from the clean estimate `x̂_0 = (x_t − σ_t ε̂)/α_t`
/// clamped to `[lo, hi]`, so any sampler step built on the result lands on
/// a clean estimate inside the data range.
pub fn clip_eps<T: Scalar>(x_t: &Tensor<T>, eps_hat: &Tensor<T>, t: usize, sched: &NoiseSchedule, lo: f64, hi: f64) -> Result<Tensor<T>> {
    sched.check("clip_eps", t)?;
    same_shape("clip_eps", x_t, eps_hat)?;
    if !(lo <= hi) {
        return Err(invalid("clip_eps", "empty clamp range"));
    }
    let (s, n) = (sched.signal(t), sched.noise(t));
    x_t.zip_map(eps_hat, |x, e| {
        let (x, e) = (x.as_f64(), e.as_f64());
        let x0 = ((x - n * e) / s).clamp(lo, hi);
        T::of((x - s * x0) / n)
    })
}

/// `ε_uncond + s·(ε_cond − ε_uncond)`.
pub fn cfg_combine<T: Scalar>(eps_uncond: &Tensor<T>, eps_cond: &Tensor<T>, scale: f32) -> Result<Tensor<T>> {
    same_shape("cfg_combine", eps_uncond, eps_cond)?;
    let s = T::of(scale as f64);
    eps_uncond.zip_map(eps_cond, |u, c| u + s * (c - u))
}

/// `E[ε | x_t]` for data distributed as `N(μ, var·I)`.
pub fn gaussian_oracle<T: Scalar>(x_t: &Tensor<T>, t: usize, mu: f64, var: f64, sched: &NoiseSchedule) -> Result<Tensor<T>> {
    sched.check("gaussian_oracle", t)?;
    if var < 0.0 {
        return Err(invalid("gaussian_oracle", "variance must be non-negative"));
    }
    let ab = sched.alpha_bar(t);
    let (s, n) = (libm::sqrt(ab), libm::sqrt(1.0 - ab));
    let denom = ab * var + 1.0 - ab;
    Ok(x_t.map(|x| T::of(n * (x.as_f64() - s * mu) / denom)))
}

/// Guidance strength for classifier-free guidance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GuidanceConfig {
    pub scale: f32,
}

impl GuidanceConfig {
    pub fn new(scale: f32) -> Result<Self> {
        if !(scale >= 0.0) || !scale.is_finite() {
            return Err(invalid("GuidanceConfig", "scale must be finite and ≥ 0"));
        }
        Ok(Self { scale })
    }

    /// Scale 1 disables the unconditional pass.
    pub fn is_unguided(&self) -> bool {
        self.scale == 1.0
    }
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            scale: DEFAULT_CFG_SCALE,
        }
    }
}

/// Reverse-process discretization.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sampler {
    /// `steps` uniformly spaced deterministic DDIM steps ending at `ᾱ_0 = 1`.
    Ddim { steps: usize },
    /// Every training timestep, ancestral noise.
    Ddpm,
}

impl Default for Sampler {
    fn default() -> Self {
        Sampler::Ddim {
            steps: DEFAULT_INFERENCE_STEPS,
        }
    }
}

impl Sampler {
    /// `(t, t_prev)` pairs from `T` down to the data endpoint.
    pub fn timesteps(&self, sched: &NoiseSchedule) -> Result<Vec<(usize, usize)>> {
        let big_t = sched.steps();
        match *self {
            Sampler::Ddpm => Ok((1..=big_t).rev().map(|t| (t, t - 1)).collect()),
            Sampler::Ddim { steps } => {
                if steps == 0 || steps > big_t {
                    return Err(invalid("Sampler", "inference steps must lie in 1..=T"));
                }
                let ts: Vec<usize> = (0..steps).map(|i| big_t - (i * big_t) / steps).collect();
                Ok(ts
                    .iter()
                    .enumerate()
                    .map(|(i, &t)| (t, ts.get(i + 1).copied().unwrap_or(0)))
                    .collect())
            }
        }
    }

    /// Advances `x_t` to `t_prev`. `rng` supplies ancestral noise (DDPM only).
    pub fn step<T: Scalar>(&self, x_t: &Tensor<T>, eps_hat: &Tensor<T>, t: usize, t_prev: usize, sched: &NoiseSchedule, rng: &mut Rng) -> Result<Tensor<T>> {
        match self {
            Sampler::Ddim { .. } => ddim_step(x_t, eps_hat, t, t_prev, sched),
            Sampler::Ddpm => ddpm_step(x_t, eps_hat, t, sched, rng),
        }
    }
}

/// Runs `n` independent scalar reverse chains of `sampler` driven by the
/// exact noise predictor of `N(mu, var)` data, starting from the exact
/// marginal `q(x_T)`. Returns the sample mean and variance of `x_0`.
pub fn oracle_chains(sampler: Sampler, sched: &NoiseSchedule, mu: f64, var: f64, n: usize, seed: u64) -> Result<(f64, f64)> {
    if n < 2 {
        return Err(invalid("oracle_chains", "need at least two chains"));
    }
    let ab = sched.alpha_bar(sched.steps());
    let mut rng = Rng::new(seed, 0);
    let z: Tensor<f64> = rng.normal_tensor(&[n]);
    let mut x = z.map(|v| libm::sqrt(ab) * mu + libm::sqrt(ab * var + 1.0 - ab) * v);
    for (t, t_prev) in sampler.timesteps(sched)? {
        let e = gaussian_oracle(&x, t, mu, var, sched)?;
        x = sampler.step(&x, &e, t, t_prev, sched, &mut rng)?;
    }
    let m = x.mean_f64();
    let v = x.data().iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n as f64;
    Ok((m, v))
}
