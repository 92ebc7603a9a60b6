// Temporary calibration harness; not part of the deliverable.
use posegraft_core::denoiser::{ArchConfig, DenoiserModel};
use posegraft_core::diffusion::{q_sample, sample_standard_normal, NoisePredictor};
use posegraft_core::guidance::{stepwise_sample, GuidanceConfig, SamplerKind};
use posegraft_core::metrics::oracle_target_error;
use posegraft_core::rng::{derive_seed, rng_for};
use posegraft_core::schedule::{make_schedule, ScheduleKind};
use posegraft_core::sprites::{actions, render, subjects};
use posegraft_core::train::{TrainItem, TrainOptions, Trainer};
use std::time::Instant;

fn main() {
    let sched = make_schedule(1000, ScheduleKind::Linear).unwrap();
    let subs = subjects();
    let acts = actions();
    let data: Vec<TrainItem> = (0..8)
        .flat_map(|s| (0..15).map(move |a| (s, a)))
        .map(|(s, a)| TrainItem {
            image: render(&subs[s], &acts[a], derive_seed(99, "train-jitter", (s * 15 + a) as u64)),
            code: (s, a),
        })
        .collect();

    for (tag, batch, lr) in [("b16-lr1e3", 16usize, 1e-3), ("b8-lr2e3", 8, 2e-3)] {
        let mut model = DenoiserModel::new(ArchConfig::default(), &mut rng_for(7, "model-init", 0)).unwrap();
        let mut trainer = Trainer::new(TrainOptions { batch_size: batch, lr, cond_dropout: 0.1, seed: 7 });
        let t0 = Instant::now();
        for round in 0..8 {
            let losses = trainer.run_epochs(&mut model, &data, &sched, 5, |_, _| {}).unwrap();
            println!("[{tag}] epoch {}: train loss {:.4}  [{:.0}s]", (round + 1) * 5, losses.last().unwrap(), t0.elapsed().as_secs_f64());
        }
        // x0-reconstruction PSNR at several t on a training image
        let item = &data[17];
        let x0 = item.image.to_model_range();
        let cond = model.embed_condition(Some(item.code)).unwrap();
        for t in [100usize, 400, 800] {
            let mut r = rng_for(1, "diag-noise", t as u64);
            let noise = sample_standard_normal(3, 64, 64, &mut r);
            let x_t = q_sample(&x0, t, &noise, &sched).unwrap();
            let eps = model.predict_noise(&x_t, t, &cond).unwrap();
            let a = sched.alpha_bar[t];
            let mut x0_hat = x_t.clone();
            x0_hat.scaled_add(-(1.0 - a).sqrt(), &eps);
            let x0_hat = x0_hat.map(|v| v / a.sqrt());
            let psnr = oracle_target_error(&x0_hat.to_unit_range(), &item.image).unwrap();
            println!("[{tag}] x0-recon t={t}: PSNR {psnr:.2} dB");
        }
        // plain conditional DDIM sample of a known combo
        for cfg_scale in [1.0, 3.0] {
            let gcfg = GuidanceConfig::from_pair(&item.image, &item.image, 0.0, 0.0, 0, 50, cfg_scale).unwrap();
            let out = stepwise_sample(&model, item.code, item.code, &gcfg, &sched, SamplerKind::default(), 5).unwrap();
            let canon = render(&subs[item.code.0], &acts[item.code.1], derive_seed(99, "train-jitter", (item.code.0 * 15 + item.code.1) as u64));
            let psnr = oracle_target_error(&out, &canon).unwrap();
            let mean: f64 = out.data.iter().sum::<f64>() / out.data.len() as f64;
            let lo = out.data.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = out.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            println!("[{tag}] base sample cfg={cfg_scale}: PSNR {psnr:.2} dB (mean {mean:.3}, range [{lo:.2},{hi:.2}])");
        }
    }
}
