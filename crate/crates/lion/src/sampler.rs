//! Diffusion noise schedule and deterministic DDIM sampling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adapter::AdapterSet;
use crate::error::{LionError, Result};
use crate::model::DiT;
use crate::multifuse::{fused_predict_eps, FusedContext};
use crate::scaling::ScalingToken;
use crate::tensor::{Scalar, Tensor};

/// Linear-beta schedule with cached cumulative alpha products.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    alpha_bars: Vec<f64>,
}

pub const BETA_START: f64 = 1e-4;
pub const BETA_END: f64 = 0.02;

impl NoiseSchedule {
    pub fn linear(train_steps: usize) -> Self {
        let mut alpha_bars = Vec::with_capacity(train_steps);
        let mut prod = 1.0;
        for t in 0..train_steps {
            let beta = BETA_START + (BETA_END - BETA_START) * t as f64 / (train_steps - 1) as f64;
            prod *= 1.0 - beta;
            alpha_bars.push(prod);
        }
        NoiseSchedule { alpha_bars }
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    pub fn len(&self) -> usize {
        self.alpha_bars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha_bars.is_empty()
    }
}

/// `x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps`.
pub fn add_noise<T: Scalar>(x0: &Tensor<T>, eps: &Tensor<T>, alpha_bar: f64) -> Result<Tensor<T>> {
    let a = T::from_f64(alpha_bar.sqrt());
    let b = T::from_f64((1.0 - alpha_bar).sqrt());
    x0.scale(a).add(&eps.scale(b))
}

/// What conditions the sampler beyond the first frame.
pub enum Conditioning<'a, T: Scalar> {
    /// Base model only.
    Base,
    /// One adapter set, optionally with its scaling token.
    Single { adapters: &'a AdapterSet<T>, token: Option<&'a ScalingToken<T>> },
    /// Partitioned-attention fusion of several adapters.
    Fused(&'a FusedContext<T>),
}

/// Deterministic DDIM generation (`eta = 0`): `steps` evenly spaced
/// timesteps, epsilon prediction at each, final clean estimate clamped to
/// `[0, 1]`. Identical seeds give identical clips.
pub fn ddim_sample<T: Scalar>(
    model: &DiT<T>,
    cond_frame: &Tensor<T>,
    steps: usize,
    conditioning: &Conditioning<'_, T>,
    seed: u64,
) -> Result<Tensor<T>> {
    if steps == 0 {
        return Err(LionError::Config("ddim needs at least one step".into()));
    }
    let cfg = &model.cfg;
    if steps > cfg.diffusion_steps {
        return Err(LionError::Config(format!(
            "{} sampling steps exceed the {}-step schedule",
            steps, cfg.diffusion_steps
        )));
    }
    let schedule = NoiseSchedule::linear(cfg.diffusion_steps);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Tensor::<T>::randn(
        vec![cfg.frames, cfg.frame_size, cfg.frame_size],
        T::one(),
        &mut rng,
    );

    // Evenly spaced decreasing timesteps, starting at the top of the
    // schedule: e.g. T=200, steps=50 -> 199, 195, ..., 3.
    let stride = cfg.diffusion_steps / steps;
    let timesteps: Vec<usize> = (0..steps).map(|i| cfg.diffusion_steps - 1 - i * stride).collect();

    let mut x0_hat = x.clone();
    for (i, &t) in timesteps.iter().enumerate() {
        let eps = predict(model, &x, cond_frame, t, conditioning)?;
        let abar_t = schedule.alpha_bar(t);
        let sqrt_ab = abar_t.sqrt();
        let sqrt_1m = (1.0 - abar_t).sqrt();
        // x0 estimate from the epsilon prediction
        x0_hat = x
            .sub(&eps.scale(T::from_f64(sqrt_1m)))?
            .scale(T::from_f64(1.0 / sqrt_ab));

        if i + 1 < timesteps.len() {
            let abar_prev = schedule.alpha_bar(timesteps[i + 1]);
            x = x0_hat
                .scale(T::from_f64(abar_prev.sqrt()))
                .add(&eps.scale(T::from_f64((1.0 - abar_prev).sqrt())))?;
        }
    }
    Ok(x0_hat.map(|v| {
        if v < T::zero() {
            T::zero()
        } else if v > T::one() {
            T::one()
        } else {
            v
        }
    }))
}

fn predict<T: Scalar>(
    model: &DiT<T>,
    x: &Tensor<T>,
    cond: &Tensor<T>,
    t: usize,
    conditioning: &Conditioning<'_, T>,
) -> Result<Tensor<T>> {
    match conditioning {
        Conditioning::Base => model.predict_eps(x, cond, t, None, None),
        Conditioning::Single { adapters, token } => {
            model.predict_eps(x, cond, t, Some(adapters), *token)
        }
        Conditioning::Fused(ctx) => fused_predict_eps(model, x, cond, t, ctx),
    }
}
