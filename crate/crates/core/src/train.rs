//! Base-model training: batched noise-prediction objective over the sprite
//! vocabulary with condition dropout for classifier-free guidance.
//!
//! Per-sample randomness is derived from (seed, epoch, position), never from
//! shared mutable RNG state, so gradients can be computed in parallel and
//! summed in a fixed order — training is bit-deterministic for a fixed seed
//! regardless of thread count.

use crate::denoiser::{ConditionEmbedding, DenoiserModel};
use crate::diffusion::{q_sample, sample_standard_normal};
use crate::error::Result;
use crate::nn::{Adam, GradStore};
use crate::rng::rng_for;
use crate::schedule::NoiseSchedule;
use crate::tensor::ImageTensor;
use rand::Rng;
use rayon::prelude::*;

/// Loss and parameter gradients of the noise-prediction objective at a fixed
/// timestep and noise draw. `x0` is expected in model range ([-1, 1]).
pub fn loss_and_grads(
    model: &DenoiserModel,
    x0: &ImageTensor,
    cond: &ConditionEmbedding,
    t: usize,
    noise: &ImageTensor,
    sched: &NoiseSchedule,
) -> Result<(f64, GradStore)> {
    let x_t = q_sample(x0, t, noise, sched)?;
    let (pred, tape) = model.forward_with_tape(&x_t, t, cond)?;
    let n = pred.data.len() as f64;
    let diff = &pred - noise;
    let loss = diff.sq_norm() / n;
    let dout = diff.map(|d| 2.0 * d / n);
    Ok((loss, model.backward(&tape, &dout)))
}

/// One training example: an image in [0,1] plus its (subject, action) code.
#[derive(Debug, Clone)]
pub struct TrainItem {
    pub image: ImageTensor,
    pub code: (usize, usize),
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TrainOptions {
    pub batch_size: usize,
    pub lr: f64,
    /// Probability of replacing the condition with the null embedding,
    /// enabling classifier-free guidance at inference.
    pub cond_dropout: f64,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            batch_size: 16,
            lr: 1e-3,
            cond_dropout: 0.1,
            seed: 0,
        }
    }
}

/// Optimizer state plus the epoch counter; holding these outside the loop
/// makes stop-and-resume exactly reproduce an uninterrupted run.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub adam: Adam,
    pub epochs_done: usize,
    pub opts: TrainOptions,
}

impl Trainer {
    pub fn new(opts: TrainOptions) -> Self {
        Self {
            adam: Adam::new(opts.lr),
            epochs_done: 0,
            opts,
        }
    }

    /// Runs `n_epochs` more epochs; returns the mean training loss of each.
    pub fn run_epochs(
        &mut self,
        model: &mut DenoiserModel,
        data: &[TrainItem],
        sched: &NoiseSchedule,
        n_epochs: usize,
        mut on_epoch: impl FnMut(usize, f64),
    ) -> Result<Vec<f64>> {
        let mut losses = Vec::with_capacity(n_epochs);
        for _ in 0..n_epochs {
            let epoch = self.epochs_done;
            let loss = self.run_one_epoch(model, data, sched, epoch)?;
            self.epochs_done += 1;
            on_epoch(epoch, loss);
            losses.push(loss);
        }
        Ok(losses)
    }

    fn run_one_epoch(
        &mut self,
        model: &mut DenoiserModel,
        data: &[TrainItem],
        sched: &NoiseSchedule,
        epoch: usize,
    ) -> Result<f64> {
        let seed = self.opts.seed;
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut shuffle_rng = rng_for(seed, "shuffle", epoch as u64);
        for i in (1..order.len()).rev() {
            let j = shuffle_rng.gen_range(0..=i);
            order.swap(i, j);
        }

        let mut epoch_loss = 0.0;
        for (batch_idx, batch) in order.chunks(self.opts.batch_size).enumerate() {
            let base = batch_idx * self.opts.batch_size;
            let results: Vec<Result<(f64, GradStore)>> = batch
                .par_iter()
                .enumerate()
                .map(|(j, &di)| {
                    let item = &data[di];
                    let mut r = rng_for(
                        seed,
                        "draw",
                        (epoch * data.len() + base + j) as u64,
                    );
                    let t = r.gen_range(0..sched.num_train_steps);
                    let dropped: f64 = r.gen();
                    let code = if dropped < self.opts.cond_dropout {
                        None
                    } else {
                        Some(item.code)
                    };
                    let cond = model.embed_condition(code)?;
                    let (c, h, w) = item.image.shape();
                    let noise = sample_standard_normal(c, h, w, &mut r);
                    loss_and_grads(model, &item.image.to_model_range(), &cond, t, &noise, sched)
                })
                .collect();

            let mut grads = GradStore::new();
            let mut batch_loss = 0.0;
            for res in results {
                let (loss, g) = res?;
                batch_loss += loss;
                grads.merge(&g);
            }
            grads.scale(1.0 / batch.len() as f64);
            epoch_loss += batch_loss;
            self.adam
                .step(&grads, &|_| true, |f| model.for_each_param_mut(f));
        }
        Ok(epoch_loss / data.len() as f64)
    }
}
