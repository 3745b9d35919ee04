//! Forward corruption and generator-based reverse sampling.
//!
//! The network predicts clean mels directly; sampling alternates that
//! prediction with re-corruption to the next lower noise level.

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSchedule {
    betas: Vec<f64>,
    alphas_bar: Vec<f64>,
}

impl Default for DiffusionSchedule {
    fn default() -> Self {
        Self::linear(8, 1e-4, 0.9).expect("default schedule is valid")
    }
}

impl DiffusionSchedule {
    /// Betas spaced linearly from `beta_min` to `beta_max` over `steps`.
    pub fn linear(steps: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config("diffusion.t_steps must be at least 1".into()));
        }
        let betas: Vec<f64> = if steps == 1 {
            vec![beta_max]
        } else {
            (0..steps)
                .map(|i| beta_min + (beta_max - beta_min) * i as f64 / (steps - 1) as f64)
                .collect()
        };
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() || betas.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::Config("every beta must lie in (0, 1)".into()));
        }
        let mut acc = 1.0;
        let alphas_bar: Vec<f64> = betas
            .iter()
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect();
        Ok(Self { betas, alphas_bar })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    /// Cumulative signal retention, index 0 holds step 1.
    pub fn alphas_bar(&self) -> &[f64] {
        &self.alphas_bar
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::StepOutOfRange { t, max: self.steps() });
        }
        Ok(())
    }

    /// Cumulative retention at 1-based step `t`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.check_step(t)?;
        Ok(self.alphas_bar[t - 1])
    }

    pub fn snr(&self, t: usize) -> Result<f64> {
        let a = self.alpha_bar(t)?;
        Ok(a / (1.0 - a))
    }
}

/// `sqrt(a_t) * x0 + sqrt(1 - a_t) * noise` on equally shaped tensors.
pub fn forward_diffuse(x0: &Tensor, t: usize, noise: &Tensor, s: &DiffusionSchedule) -> Result<Tensor> {
    let a = s.alpha_bar(t)?;
    if x0.dims() != noise.dims() {
        return Err(Error::Shape(format!(
            "noise {:?} does not match x0 {:?}",
            noise.dims(),
            x0.dims()
        )));
    }
    Ok(((x0 * a.sqrt())? + (noise * (1.0 - a).sqrt())?)?)
}

/// Per-row steps: row `b` of `[B, ...]` is corrupted to `steps[b]`.
pub fn forward_diffuse_rows(x0: &Tensor, steps: &[usize], noise: &Tensor, s: &DiffusionSchedule) -> Result<Tensor> {
    let b = x0.dim(0)?;
    if steps.len() != b || x0.dims() != noise.dims() {
        return Err(Error::Shape(format!(
            "{} steps / noise {:?} for x0 {:?}",
            steps.len(),
            noise.dims(),
            x0.dims()
        )));
    }
    let mut shape = vec![1usize; x0.rank()];
    shape[0] = b;
    let mut sa = Vec::with_capacity(b);
    let mut sn = Vec::with_capacity(b);
    for &t in steps {
        let a = s.alpha_bar(t)?;
        sa.push(a.sqrt() as f32);
        sn.push((1.0 - a).sqrt() as f32);
    }
    let sa = Tensor::from_vec(sa, shape.as_slice(), x0.device())?.to_dtype(x0.dtype())?;
    let sn = Tensor::from_vec(sn, shape.as_slice(), x0.device())?.to_dtype(x0.dtype())?;
    Ok((x0.broadcast_mul(&sa)? + noise.broadcast_mul(&sn)?)?)
}

/// Standard normal tensor drawn from `rng`.
pub fn gaussian(shape: &[usize], rng: &mut ChaCha8Rng, device: &Device) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let data: Vec<f32> = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z as f32
        })
        .collect();
    Ok(Tensor::from_vec(data, shape, device)?)
}

/// Reverse process from pure noise at `T` down to step 1.
///
/// `f(x_t, t)` must return a clean-signal estimate shaped like `x_t`; it is
/// called exactly `T` times with `t = T, T-1, ..., 1`. Conditioning is
/// whatever the closure captures.
pub fn sample<F>(mut f: F, shape: &[usize], s: &DiffusionSchedule, seed: u64, device: &Device) -> Result<Tensor>
where
    F: FnMut(&Tensor, usize) -> Result<Tensor>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x_t = gaussian(shape, &mut rng, device)?;
    let mut x0 = None;
    for t in (1..=s.steps()).rev() {
        let pred = f(&x_t, t)?;
        if pred.dims() != shape {
            return Err(Error::Shape(format!(
                "denoiser returned {:?} at step {t}, expected {shape:?}",
                pred.dims()
            )));
        }
        let values = pred.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "denoiser output at step {t}, element {i} = {}",
                values[i]
            )));
        }
        if t > 1 {
            let noise = gaussian(shape, &mut rng, device)?;
            x_t = forward_diffuse(&pred, t - 1, &noise, s)?;
        }
        x0 = Some(pred);
    }
    x0.ok_or_else(|| Error::Invalid("schedule has no steps".into()))
}

/// Affine map of log-mels onto [-1, 1] using dataset extrema.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MelNorm {
    pub min: f32,
    pub max: f32,
}

impl MelNorm {
    pub fn new(min: f32, max: f32) -> Result<Self> {
        if !(min.is_finite() && max.is_finite() && max > min) {
            return Err(Error::Invalid(format!("mel range {min}..{max} is empty")));
        }
        Ok(Self { min, max })
    }

    pub fn normalize(&self, v: f32) -> f32 {
        2.0 * (v - self.min) / (self.max - self.min) - 1.0
    }

    pub fn denormalize(&self, v: f32) -> f32 {
        (v + 1.0) * 0.5 * (self.max - self.min) + self.min
    }
}
