//! Forward corruption process, the noise-prediction training objective, and
//! the DDPM/DDIM reverse steps.

use crate::denoiser::ConditionEmbedding;
use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;
use crate::tensor::ImageTensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Anything that maps (noisy image, timestep, condition) to predicted noise.
pub trait NoisePredictor {
    fn predict_noise(
        &self,
        x_t: &ImageTensor,
        t: usize,
        cond: &ConditionEmbedding,
    ) -> Result<ImageTensor>;
}

/// A latent mid-way through reverse sampling. `steps_remaining` counts down
/// from the number of inference steps to 0.
#[derive(Debug, Clone)]
pub struct DiffusionState {
    pub z: ImageTensor,
    pub steps_remaining: usize,
}

pub fn sample_standard_normal(
    channels: usize,
    height: usize,
    width: usize,
    rng: &mut ChaCha8Rng,
) -> ImageTensor {
    ImageTensor::from_fn(channels, height, width, |_, _, _| rng.sample(StandardNormal))
}

/// Forward marginal: `sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) noise`.
pub fn q_sample(
    x0: &ImageTensor,
    t: usize,
    noise: &ImageTensor,
    sched: &NoiseSchedule,
) -> Result<ImageTensor> {
    if t >= sched.num_train_steps {
        return Err(Error::TimestepOutOfRange {
            t,
            max: sched.num_train_steps,
        });
    }
    x0.same_shape(noise)?;
    let a = sched.alpha_bar[t];
    let mut out = x0.map(|v| a.sqrt() * v);
    out.scaled_add((1.0 - a).sqrt(), noise);
    Ok(out)
}

/// Squared-error noise-prediction loss at a fixed timestep with fixed noise.
/// Mean over elements.
pub fn denoising_loss_at(
    model: &dyn NoisePredictor,
    x0: &ImageTensor,
    cond: &ConditionEmbedding,
    t: usize,
    noise: &ImageTensor,
    sched: &NoiseSchedule,
) -> Result<f64> {
    let x_t = q_sample(x0, t, noise, sched)?;
    let pred = model.predict_noise(&x_t, t, cond)?;
    pred.same_shape(noise)?;
    let n = noise.data.len() as f64;
    Ok((&pred - noise).sq_norm() / n)
}

/// The training objective: noise-prediction MSE at a uniformly sampled
/// timestep with fresh standard-normal noise.
pub fn denoising_loss(
    model: &dyn NoisePredictor,
    x0: &ImageTensor,
    cond: &ConditionEmbedding,
    sched: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let t = rng.gen_range(0..sched.num_train_steps);
    let (c, h, w) = x0.shape();
    let noise = sample_standard_normal(c, h, w, rng);
    denoising_loss_at(model, x0, cond, t, &noise, sched)
}

/// Index bookkeeping shared by both reverse steps: the current training
/// timestep and the alpha_bar of the step below (1.0 past the final step).
fn step_coords(
    state: &DiffusionState,
    sched: &NoiseSchedule,
    inference_ts: &[usize],
) -> Result<(usize, f64, f64)> {
    if state.steps_remaining == 0 || state.steps_remaining > inference_ts.len() {
        return Err(Error::NoStepsRemaining);
    }
    let idx = inference_ts.len() - state.steps_remaining;
    let t_cur = inference_ts[idx];
    let a_t = sched.alpha_bar[t_cur];
    let a_prev = if state.steps_remaining >= 2 {
        sched.alpha_bar[inference_ts[idx + 1]]
    } else {
        1.0
    };
    Ok((t_cur, a_t, a_prev))
}

/// One DDIM reverse step. `eta = 0` is fully deterministic; the final step
/// lands on the model's clean estimate.
pub fn ddim_step(
    state: &DiffusionState,
    eps_pred: &ImageTensor,
    sched: &NoiseSchedule,
    inference_ts: &[usize],
    eta: f64,
    rng: &mut ChaCha8Rng,
) -> Result<DiffusionState> {
    let (_, a_t, a_prev) = step_coords(state, sched, inference_ts)?;
    state.z.same_shape(eps_pred)?;

    let sigma = eta * ((1.0 - a_prev) / (1.0 - a_t)).sqrt() * (1.0 - a_t / a_prev).sqrt();
    let x0_coef = a_prev.sqrt() / a_t.sqrt();
    let dir_coef = (1.0 - a_prev - sigma * sigma).max(0.0).sqrt();

    // sqrt(a_prev) * x0_hat + dir * eps, with x0_hat = (z - sqrt(1-a_t) eps) / sqrt(a_t)
    let mut z = state.z.map(|v| x0_coef * v);
    z.scaled_add(dir_coef - x0_coef * (1.0 - a_t).sqrt(), eps_pred);
    if sigma > 0.0 {
        let (c, h, w) = z.shape();
        z.scaled_add(sigma, &sample_standard_normal(c, h, w, rng));
    }
    Ok(DiffusionState {
        z,
        steps_remaining: state.steps_remaining - 1,
    })
}

/// One ancestral DDPM reverse step generalized to a strided schedule: the
/// effective beta between adjacent inference steps replaces the per-step
/// beta, and the final step adds no noise.
pub fn ddpm_step(
    state: &DiffusionState,
    eps_pred: &ImageTensor,
    sched: &NoiseSchedule,
    inference_ts: &[usize],
    rng: &mut ChaCha8Rng,
) -> Result<DiffusionState> {
    let (_, a_t, a_prev) = step_coords(state, sched, inference_ts)?;
    state.z.same_shape(eps_pred)?;

    let beta_eff = 1.0 - a_t / a_prev;
    let alpha_eff = a_t / a_prev;
    let mean_scale = 1.0 / alpha_eff.sqrt();
    let eps_scale = -mean_scale * beta_eff / (1.0 - a_t).sqrt();

    let mut z = state.z.map(|v| mean_scale * v);
    z.scaled_add(eps_scale, eps_pred);

    let var = beta_eff * (1.0 - a_prev) / (1.0 - a_t);
    if var > 0.0 {
        let (c, h, w) = z.shape();
        z.scaled_add(var.sqrt(), &sample_standard_normal(c, h, w, rng));
    }
    Ok(DiffusionState {
        z,
        steps_remaining: state.steps_remaining - 1,
    })
}

/// The ideal noise predictor for a dataset containing exactly one image:
/// inverts the forward marginal analytically.
pub struct OraclePointDenoiser {
    pub x0: ImageTensor,
    pub sched: NoiseSchedule,
}

impl NoisePredictor for OraclePointDenoiser {
    fn predict_noise(
        &self,
        x_t: &ImageTensor,
        t: usize,
        _cond: &ConditionEmbedding,
    ) -> Result<ImageTensor> {
        let a = self.sched.alpha_bar[t];
        let mut eps = x_t.clone();
        eps.scaled_add(-a.sqrt(), &self.x0);
        Ok(eps.map(|v| v / (1.0 - a).sqrt()))
    }
}
