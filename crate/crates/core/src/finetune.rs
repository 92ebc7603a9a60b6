//! Pair finetuning: alternating adapter-only optimization on the (source
//! image, source condition) and (driving image, driving condition) examples.

use crate::denoiser::DenoiserModel;
use crate::diffusion::sample_standard_normal;
use crate::error::{Error, Result};
use crate::nn::Adam;
use crate::rng::rng_for;
use crate::schedule::NoiseSchedule;
use crate::tensor::ImageTensor;
use crate::train::loss_and_grads;
use rand::Rng;

/// The two training examples of a pair plus their codes. The target code is
/// derived: source subject performing the driving action.
#[derive(Debug, Clone)]
pub struct PairSpec {
    pub source_image: ImageTensor,
    pub driving_image: ImageTensor,
    pub source_code: (usize, usize),
    pub driving_code: (usize, usize),
}

impl PairSpec {
    pub fn target_code(&self) -> (usize, usize) {
        (self.source_code.0, self.driving_code.1)
    }
}

#[derive(Debug, Clone)]
pub struct FinetuneOptions {
    pub n_tr: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for FinetuneOptions {
    fn default() -> Self {
        Self {
            n_tr: 500,
            lr: 1e-4,
            seed: 0,
        }
    }
}

/// Runs `n_tr` iterations, each taking one adapter gradient step on the
/// source example and one on the driving example (independent timestep and
/// noise draws). Base parameters are never updated; condition dropout is
/// disabled. Errors if the model has no adapters attached.
pub fn finetune_pair(
    model: &mut DenoiserModel,
    pair: &PairSpec,
    opts: &FinetuneOptions,
    sched: &NoiseSchedule,
) -> Result<()> {
    if !model.has_adapters() {
        return Err(Error::NoAdapters);
    }
    let src = pair.source_image.to_model_range();
    let drv = pair.driving_image.to_model_range();
    // Embedding tables are frozen here, so the condition vectors are fixed.
    let e_src = model.embed_condition(Some(pair.source_code))?;
    let e_drv = model.embed_condition(Some(pair.driving_code))?;

    let mut adam = Adam::new(opts.lr);
    let trainable = |name: &str| name.contains(".lora_");
    let (c, h, w) = src.shape();

    for i in 0..opts.n_tr {
        for (stream, image, cond) in [("ft-source", &src, &e_src), ("ft-driving", &drv, &e_drv)] {
            let mut r = rng_for(opts.seed, stream, i as u64);
            let t = r.gen_range(0..sched.num_train_steps);
            let noise = sample_standard_normal(c, h, w, &mut r);
            let (_, grads) = loss_and_grads(model, image, cond, t, &noise, sched)?;
            adam.step(&grads, &trainable, |f| model.for_each_param_mut(f));
        }
    }
    Ok(())
}

/// Mean noise-prediction loss of one example over a fixed set of seeded
/// (timestep, noise) draws; comparable before/after finetuning.
pub fn reconstruction_loss(
    model: &DenoiserModel,
    image: &ImageTensor,
    code: (usize, usize),
    sched: &NoiseSchedule,
    eval_seed: u64,
    draws: usize,
) -> Result<f64> {
    let x0 = image.to_model_range();
    let cond = model.embed_condition(Some(code))?;
    let (c, h, w) = x0.shape();
    let mut total = 0.0;
    for d in 0..draws {
        let mut r = rng_for(eval_seed, "recon-eval", d as u64);
        let t = r.gen_range(0..sched.num_train_steps);
        let noise = sample_standard_normal(c, h, w, &mut r);
        total += crate::diffusion::denoising_loss_at(model, &x0, &cond, t, &noise, sched)?;
    }
    Ok(total / draws as f64)
}
