//! The four pipeline commands. Each is callable in-process (the binary and
//! the test suite share these) and returns the paths it wrote.

use crate::config::RunConfig;
use anyhow::{bail, Context, Result};
use posegraft_core::checkpoint::{load_model, load_train_state, save_model, save_train_state};
use posegraft_core::denoiser::{attach_adapters, DenoiserModel};
use posegraft_core::finetune::{finetune_pair, FinetuneOptions};
use posegraft_core::guidance::{stepwise_sample, GuidanceConfig};
use posegraft_core::metrics::{
    run_ablation_grid, standard_ablation_configs, EvalReport, GridOptions,
};
use posegraft_core::rng::{derive_seed, rng_for};
use posegraft_core::schedule::{make_schedule, NoiseSchedule};
use posegraft_core::sprites::{
    load_dataset, load_train_split, make_benchmark, make_train_split, write_dataset,
    write_png, write_train_split, RenderedTriple,
};
use posegraft_core::train::{TrainItem, TrainOptions, Trainer};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

pub struct GenDatasetOutput {
    pub manifest: PathBuf,
    pub train_manifest: PathBuf,
    pub n_triples: usize,
}

/// Renders the benchmark triples plus the base-training split into
/// `out_dir`.
pub fn gen_dataset(cfg: &RunConfig, out_dir: &Path) -> Result<GenDatasetOutput> {
    let triples = make_benchmark(cfg.n_subjects, cfg.n_actions, cfg.seed)?;
    let manifest = write_dataset(out_dir, &triples)?;
    let split = make_train_split(cfg.n_subjects, cfg.n_actions, cfg.seed)?;
    let train_manifest = write_train_split(out_dir, &split)?;
    println!(
        "dataset: {} triples + {} training renders -> {}",
        triples.len(),
        split.len(),
        out_dir.display()
    );
    Ok(GenDatasetOutput {
        manifest,
        train_manifest,
        n_triples: triples.len(),
    })
}

fn schedule_of(cfg: &RunConfig) -> Result<NoiseSchedule> {
    Ok(make_schedule(cfg.train_steps, cfg.schedule)?)
}

fn dataset_manifest(dataset_dir: &Path) -> Result<PathBuf> {
    let p = dataset_dir.join("manifest.jsonl");
    if !p.exists() {
        bail!("dataset manifest not found: {}", p.display());
    }
    Ok(p)
}

pub struct TrainBaseOutput {
    pub checkpoint: PathBuf,
    pub loss_log: PathBuf,
    pub final_loss: f64,
}

/// Trains (or resumes) the base model on the dataset's training split and
/// writes the checkpoint, optimizer state, and a per-epoch loss log.
pub fn train_base(
    cfg: &RunConfig,
    dataset_dir: &Path,
    out_checkpoint: &Path,
    resume: bool,
) -> Result<TrainBaseOutput> {
    let train_manifest = dataset_dir.join("train").join("train_manifest.jsonl");
    if !train_manifest.exists() {
        bail!(
            "training split not found: {} (run gen-dataset first)",
            train_manifest.display()
        );
    }
    let split = load_train_split(&train_manifest)?;
    let data: Vec<TrainItem> = split
        .into_iter()
        .map(|(rec, image)| TrainItem {
            image,
            code: (rec.subject_id, rec.action_id),
        })
        .collect();

    let sched = schedule_of(cfg)?;
    let state_path = out_checkpoint.with_extension("train_state");
    let loss_log = out_checkpoint.with_extension("loss.txt");

    let (mut model, mut trainer, mut log_lines) = if resume && out_checkpoint.exists() {
        let model = load_model(out_checkpoint)?;
        let trainer = load_train_state(&state_path).with_context(|| {
            format!(
                "resume requested but optimizer state unreadable at {}",
                state_path.display()
            )
        })?;
        let existing = std::fs::read_to_string(&loss_log).unwrap_or_default();
        println!("resuming at epoch {}", trainer.epochs_done);
        (model, trainer, existing)
    } else {
        let model = DenoiserModel::new(cfg.arch(), &mut rng_for(cfg.seed, "model-init", 0))?;
        let trainer = Trainer::new(TrainOptions {
            batch_size: cfg.batch_size,
            lr: cfg.lr,
            cond_dropout: cfg.cond_dropout,
            seed: cfg.seed,
        });
        (model, trainer, String::new())
    };

    if trainer.epochs_done >= cfg.epochs {
        bail!(
            "nothing to do: {} epochs already trained (target {})",
            trainer.epochs_done,
            cfg.epochs
        );
    }
    let remaining = cfg.epochs - trainer.epochs_done;
    let t0 = Instant::now();
    let mut final_loss = f64::NAN;
    trainer.run_epochs(&mut model, &data, &sched, remaining, |epoch, loss| {
        log_lines.push_str(&format!("{epoch}\t{loss:.6}\n"));
        final_loss = loss;
        if epoch % 10 == 0 || epoch + 1 == cfg.epochs {
            println!(
                "epoch {epoch}: loss {loss:.4} ({:.1}s elapsed)",
                t0.elapsed().as_secs_f64()
            );
        }
    })?;

    if let Some(parent) = out_checkpoint.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)
                .with_context(|| format!("creating {}", parent.display()))?;
        }
    }
    save_model(out_checkpoint, &model)?;
    save_train_state(&state_path, &trainer)?;
    std::fs::write(&loss_log, &log_lines)
        .with_context(|| format!("writing {}", loss_log.display()))?;
    println!("checkpoint -> {}", out_checkpoint.display());
    Ok(TrainBaseOutput {
        checkpoint: out_checkpoint.to_path_buf(),
        loss_log,
        final_loss,
    })
}

fn find_pair(triples: &[RenderedTriple], pair_id: usize) -> Result<&RenderedTriple> {
    triples
        .iter()
        .find(|t| t.pair_id == pair_id)
        .with_context(|| format!("unknown pair id {pair_id} (dataset has {})", triples.len()))
}

pub struct TransferOutput {
    pub image: PathBuf,
    pub sidecar: PathBuf,
    pub adapters: PathBuf,
}

/// The full per-pair pipeline: attach adapters, finetune on the pair, then
/// run the guided sampler. Writes the PNG, a key=value sidecar recording
/// every setting used, and the finetuned checkpoint.
pub fn transfer(
    cfg: &RunConfig,
    checkpoint: &Path,
    dataset_dir: &Path,
    pair_id: usize,
    out_png: &Path,
) -> Result<TransferOutput> {
    let t0 = Instant::now();
    let triples = load_dataset(&dataset_manifest(dataset_dir)?)?;
    let triple = find_pair(&triples, pair_id)?;
    let sched = schedule_of(cfg)?;
    let mut model = load_model(checkpoint)?;

    attach_adapters(
        &mut model,
        cfg.adapter_rank,
        &cfg.adapter_targets(),
        &mut rng_for(cfg.seed, "transfer-lora", pair_id as u64),
    )?;
    finetune_pair(
        &mut model,
        &triple.pair_spec(),
        &FinetuneOptions {
            n_tr: cfg.n_tr,
            lr: cfg.finetune_lr,
            seed: derive_seed(cfg.seed, "transfer-finetune", pair_id as u64),
        },
        &sched,
    )?;
    let finetune_secs = t0.elapsed().as_secs_f64();

    let gcfg = GuidanceConfig::from_pair(
        &triple.source_img,
        &triple.driving_img,
        cfg.s_a,
        cfg.s_p,
        cfg.k,
        cfg.t_steps,
        cfg.cfg_scale,
    )?;
    let sample_seed = derive_seed(cfg.seed, "transfer-sample", pair_id as u64);
    let image = stepwise_sample(
        &model,
        triple.driving_code,
        triple.target_code(),
        &gcfg,
        &sched,
        cfg.sampler_kind()?,
        sample_seed,
    )?;

    if let Some(parent) = out_png.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)
                .with_context(|| format!("creating {}", parent.display()))?;
        }
    }
    write_png(out_png, &image)?;

    let adapters_path = out_png.with_extension("finetuned.ckpt");
    save_model(&adapters_path, &model)?;

    let sidecar = out_png.with_extension("png.meta");
    let mut f = std::fs::File::create(&sidecar)
        .with_context(|| format!("creating {}", sidecar.display()))?;
    for (k, v) in cfg.as_key_values() {
        writeln!(f, "{k}={v}")?;
    }
    writeln!(f, "pair_id={pair_id}")?;
    writeln!(f, "sample_seed={sample_seed}")?;
    writeln!(
        f,
        "source_code={},{}",
        triple.source_code.0, triple.source_code.1
    )?;
    writeln!(
        f,
        "driving_code={},{}",
        triple.driving_code.0, triple.driving_code.1
    )?;
    writeln!(
        f,
        "target_code={},{}",
        triple.target_code().0,
        triple.target_code().1
    )?;

    println!(
        "pair {pair_id}: finetune {:.1}s, total {:.1}s -> {}",
        finetune_secs,
        t0.elapsed().as_secs_f64(),
        out_png.display()
    );
    Ok(TransferOutput {
        image: out_png.to_path_buf(),
        sidecar,
        adapters: adapters_path,
    })
}

pub struct EvaluateOutput {
    pub report: PathBuf,
    pub table: PathBuf,
    pub eval_report: EvalReport,
}

/// Runs the ablation grid (full method plus the four ablations) over the
/// first `eval_pairs` triples and `eval_seeds` seeds, writing the records
/// and a rendered table.
pub fn evaluate(
    cfg: &RunConfig,
    checkpoint: &Path,
    dataset_dir: &Path,
    out_dir: &Path,
) -> Result<EvaluateOutput> {
    if !checkpoint.exists() {
        bail!("missing checkpoint: {}", checkpoint.display());
    }
    let triples = load_dataset(&dataset_manifest(dataset_dir)?)?;
    let n_pairs = if cfg.eval_pairs == 0 {
        triples.len()
    } else {
        cfg.eval_pairs.min(triples.len())
    };
    let subset = &triples[..n_pairs];
    let model = load_model(checkpoint)?;
    let sched = schedule_of(cfg)?;

    let configs = standard_ablation_configs(cfg.k, cfg.s_a, cfg.s_p);
    let seeds: Vec<u64> = (0..cfg.eval_seeds)
        .map(|i| derive_seed(cfg.seed, "eval-seed", i as u64))
        .collect();
    let opts = GridOptions {
        n_tr: cfg.n_tr,
        finetune_lr: cfg.finetune_lr,
        num_steps: cfg.t_steps,
        cfg_scale: cfg.cfg_scale,
        adapter_rank: cfg.adapter_rank,
        adapter_targets: cfg.adapter_targets(),
        sampler: cfg.sampler_kind()?,
        root_seed: cfg.seed,
    };

    let t0 = Instant::now();
    let report = run_ablation_grid(subset, &model, &configs, &seeds, &sched, &opts)?;
    println!(
        "grid: {} pairs x {} configs x {} seeds = {} records in {:.1}s",
        n_pairs,
        configs.len(),
        seeds.len(),
        report.records.len(),
        t0.elapsed().as_secs_f64()
    );

    std::fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let report_path = out_dir.join("report.jsonl");
    report.write_jsonl(&report_path)?;
    let table = report.render_table();
    let table_path = out_dir.join("report_table.txt");
    std::fs::write(&table_path, &table)
        .with_context(|| format!("writing {}", table_path.display()))?;
    print!("{table}");
    print_directional_summary(&report);
    Ok(EvaluateOutput {
        report: report_path,
        table: table_path,
        eval_report: report,
    })
}

/// Prints how the full method orders against the ablations on each metric.
fn print_directional_summary(report: &EvalReport) {
    let get = |name: &str| report.aggregates.iter().find(|a| a.config == name);
    let (Some(full), Some(k0), Some(nog)) =
        (get("full"), get("no_stepwise"), get("no_guidance"))
    else {
        return;
    };
    println!(
        "orderings: phase(full>no_stepwise)={} fidelity(no_stepwise>full)={} psnr(full>no_stepwise)={} psnr(full>no_guidance)={}",
        full.mean_phase_score > k0.mean_phase_score,
        k0.mean_subject_fidelity > full.mean_subject_fidelity,
        full.mean_oracle_psnr > k0.mean_oracle_psnr,
        full.mean_oracle_psnr > nog.mean_oracle_psnr,
    );
}
