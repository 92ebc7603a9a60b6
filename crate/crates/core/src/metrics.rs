//! Evaluation: phase score against the driving image, colour-histogram
//! subject fidelity against the source, PSNR against the oracle target
//! render, and the ablation grid runner that produces a per-configuration
//! report.

use crate::denoiser::{attach_adapters, DenoiserModel};
use crate::error::{Error, Result};
use crate::finetune::{finetune_pair, FinetuneOptions};
use crate::fourier::phase_score;
use crate::guidance::{stepwise_sample, GuidanceConfig, SamplerKind};
use crate::rng::{derive_seed, rng_for};
use crate::schedule::NoiseSchedule;
use crate::sprites::{figure_mask, RenderedTriple};
use crate::tensor::ImageTensor;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::Path;
use std::sync::Arc;

const HIST_BINS: usize = 16;

/// Joint RGB histogram (16 bins per channel) over figure pixels, normalized
/// to sum to one. None when the mask is empty.
fn figure_histogram(img: &ImageTensor) -> Option<Vec<f64>> {
    let mask = figure_mask(img);
    let (_, h, w) = img.shape();
    let mut hist = vec![0.0; HIST_BINS * HIST_BINS * HIST_BINS];
    let mut count = 0.0;
    for y in 0..h {
        for x in 0..w {
            if !mask[[y, x]] {
                continue;
            }
            let bin = |v: f64| ((v.clamp(0.0, 1.0) * HIST_BINS as f64) as usize).min(HIST_BINS - 1);
            let idx = (bin(img.data[[0, y, x]]) * HIST_BINS + bin(img.data[[1, y, x]]))
                * HIST_BINS
                + bin(img.data[[2, y, x]]);
            hist[idx] += 1.0;
            count += 1.0;
        }
    }
    if count == 0.0 {
        return None;
    }
    for v in hist.iter_mut() {
        *v /= count;
    }
    Some(hist)
}

/// Histogram-intersection similarity of figure-pixel colour distributions,
/// in [0, 1]. An empty figure mask on either side scores 0.
pub fn subject_fidelity(generated: &ImageTensor, source: &ImageTensor) -> Result<f64> {
    generated.same_shape(source)?;
    let (Some(hg), Some(hs)) = (figure_histogram(generated), figure_histogram(source)) else {
        return Ok(0.0);
    };
    Ok(hg.iter().zip(hs.iter()).map(|(a, b)| a.min(*b)).sum())
}

/// Peak signal-to-noise ratio in dB against the ground-truth render, for
/// images in [0,1]. Identical inputs (and anything above it) cap at 99 dB.
pub fn oracle_target_error(generated: &ImageTensor, target: &ImageTensor) -> Result<f64> {
    generated.same_shape(target)?;
    let mse = (generated - target).sq_norm() / generated.data.len() as f64;
    if mse == 0.0 {
        return Ok(99.0);
    }
    Ok((-10.0 * mse.log10()).min(99.0))
}

/// One sampling configuration of the grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationConfig {
    pub name: String,
    pub k: usize,
    pub s_a: f64,
    pub s_p: f64,
}

/// The full method plus the four standard ablations: no stepwise prompting,
/// no guidance at all, no phase guidance, no amplitude guidance.
pub fn standard_ablation_configs(k: usize, s_a: f64, s_p: f64) -> Vec<AblationConfig> {
    vec![
        AblationConfig {
            name: "full".into(),
            k,
            s_a,
            s_p,
        },
        AblationConfig {
            name: "no_stepwise".into(),
            k: 0,
            s_a,
            s_p,
        },
        AblationConfig {
            name: "no_guidance".into(),
            k,
            s_a: 0.0,
            s_p: 0.0,
        },
        AblationConfig {
            name: "no_phase".into(),
            k,
            s_a,
            s_p: 0.0,
        },
        AblationConfig {
            name: "no_amp".into(),
            k,
            s_a: 0.0,
            s_p,
        },
    ]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRecord {
    pub pair_id: usize,
    pub config: String,
    pub seed: u64,
    pub phase_score_driving: f64,
    pub subject_fidelity: f64,
    pub oracle_psnr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub config: String,
    pub n: usize,
    pub mean_phase_score: f64,
    pub std_phase_score: f64,
    pub mean_subject_fidelity: f64,
    pub std_subject_fidelity: f64,
    pub mean_oracle_psnr: f64,
    pub std_oracle_psnr: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub records: Vec<EvalRecord>,
    pub aggregates: Vec<AggregateRow>,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() < 2 {
        0.0
    } else {
        values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)
    };
    (mean, var.sqrt())
}

impl EvalReport {
    pub fn from_records(records: Vec<EvalRecord>) -> Self {
        let aggregates = Self::aggregate(&records);
        Self {
            records,
            aggregates,
        }
    }

    /// Aggregates grouped by configuration, in order of first appearance.
    pub fn aggregate(records: &[EvalRecord]) -> Vec<AggregateRow> {
        let mut order: Vec<String> = Vec::new();
        let mut groups: HashMap<String, Vec<&EvalRecord>> = HashMap::new();
        for r in records {
            if !groups.contains_key(&r.config) {
                order.push(r.config.clone());
            }
            groups.entry(r.config.clone()).or_default().push(r);
        }
        order
            .into_iter()
            .map(|config| {
                let rs = &groups[&config];
                let (mp, sp) = mean_std(&rs.iter().map(|r| r.phase_score_driving).collect::<Vec<_>>());
                let (mf, sf) = mean_std(&rs.iter().map(|r| r.subject_fidelity).collect::<Vec<_>>());
                let (mo, so) = mean_std(&rs.iter().map(|r| r.oracle_psnr).collect::<Vec<_>>());
                AggregateRow {
                    config,
                    n: rs.len(),
                    mean_phase_score: mp,
                    std_phase_score: sp,
                    mean_subject_fidelity: mf,
                    std_subject_fidelity: sf,
                    mean_oracle_psnr: mo,
                    std_oracle_psnr: so,
                }
            })
            .collect()
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        for r in &self.records {
            let line = serde_json::to_string(r)
                .map_err(|e| Error::Config(format!("record encode: {e}")))?;
            writeln!(f, "{line}").map_err(|e| Error::io(path.display().to_string(), e))?;
        }
        Ok(())
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut records = Vec::new();
        for line in std::io::BufReader::new(f).lines() {
            let line = line.map_err(|e| Error::io(path.display().to_string(), e))?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(
                serde_json::from_str(&line)
                    .map_err(|e| Error::Config(format!("record parse: {e}")))?,
            );
        }
        Ok(Self::from_records(records))
    }

    /// Plain-text table with one row per configuration.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<14} {:>4} {:>22} {:>22} {:>22}\n",
            "config", "n", "phase_score(driving)", "subject_fidelity", "oracle_psnr_db"
        ));
        for a in &self.aggregates {
            out.push_str(&format!(
                "{:<14} {:>4} {:>14.4} ±{:>6.4} {:>14.4} ±{:>6.4} {:>14.2} ±{:>6.2}\n",
                a.config,
                a.n,
                a.mean_phase_score,
                a.std_phase_score,
                a.mean_subject_fidelity,
                a.std_subject_fidelity,
                a.mean_oracle_psnr,
                a.std_oracle_psnr,
            ));
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct GridOptions {
    pub n_tr: usize,
    pub finetune_lr: f64,
    pub num_steps: usize,
    pub cfg_scale: f64,
    pub adapter_rank: usize,
    pub adapter_targets: Vec<String>,
    pub sampler: SamplerKind,
    pub root_seed: u64,
}

/// Finetunes adapters once per pair, then samples every (config, seed) cell
/// and scores it. Pairs run in parallel on cloned models; the record order
/// (pair, config, seed) and all seed derivations are scheduler-independent.
/// The same seed gives every config the same starting latent, so
/// configuration effects are paired.
pub fn run_ablation_grid(
    triples: &[RenderedTriple],
    base_model: &DenoiserModel,
    configs: &[AblationConfig],
    seeds: &[u64],
    sched: &NoiseSchedule,
    opts: &GridOptions,
) -> Result<EvalReport> {
    let per_pair: Vec<Result<Vec<EvalRecord>>> = triples
        .par_iter()
        .map(|triple| {
            let mut model = base_model.clone();
            attach_adapters(
                &mut model,
                opts.adapter_rank,
                &opts.adapter_targets,
                &mut rng_for(opts.root_seed, "grid-lora", triple.pair_id as u64),
            )?;
            finetune_pair(
                &mut model,
                &triple.pair_spec(),
                &FinetuneOptions {
                    n_tr: opts.n_tr,
                    lr: opts.finetune_lr,
                    seed: derive_seed(opts.root_seed, "grid-finetune", triple.pair_id as u64),
                },
                sched,
            )?;

            let mut records = Vec::with_capacity(configs.len() * seeds.len());
            for config in configs {
                let gcfg = GuidanceConfig::from_pair(
                    &triple.source_img,
                    &triple.driving_img,
                    config.s_a,
                    config.s_p,
                    config.k,
                    opts.num_steps,
                    opts.cfg_scale,
                )?;
                for &seed in seeds {
                    let sample_seed = derive_seed(seed, "grid-sample", triple.pair_id as u64);
                    let generated = stepwise_sample(
                        &model,
                        triple.driving_code,
                        triple.target_code(),
                        &gcfg,
                        sched,
                        opts.sampler,
                        sample_seed,
                    )?;
                    records.push(EvalRecord {
                        pair_id: triple.pair_id,
                        config: config.name.clone(),
                        seed,
                        phase_score_driving: phase_score(&generated, &triple.driving_img)?,
                        subject_fidelity: subject_fidelity(&generated, &triple.source_img)?,
                        oracle_psnr: oracle_target_error(&generated, &triple.target_img)?,
                    });
                }
            }
            Ok(records)
        })
        .collect();

    let mut records = Vec::new();
    for r in per_pair {
        records.extend(r?);
    }
    Ok(EvalReport::from_records(records))
}

/// An externally supplied scorer: (generated, reference, text) -> value.
pub type ExternalMetric = Arc<dyn Fn(&ImageTensor, &ImageTensor, &str) -> f64 + Send + Sync>;

/// Registry for metrics that need models this crate does not ship (feature
/// embeddings, text alignment). Lookups of unregistered names fail loudly.
#[derive(Default, Clone)]
pub struct MetricRegistry {
    entries: HashMap<String, ExternalMetric>,
}

impl MetricRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, metric: ExternalMetric) {
        self.entries.insert(name.to_string(), metric);
    }

    pub fn get(&self, name: &str) -> Result<ExternalMetric> {
        self.entries
            .get(name)
            .cloned()
            .ok_or_else(|| Error::MetricNotAvailable(name.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{ArchConfig, DenoiserModel, ADAPTER_TARGETS};
    use crate::schedule::{make_schedule, ScheduleKind};
    use crate::sprites::{actions, make_benchmark, render, subjects};

    #[test]
    fn fidelity_of_identical_images_is_one() {
        let img = render(&subjects()[0], &actions()[0], 0);
        let f = subject_fidelity(&img, &img).unwrap();
        assert!((f - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fidelity_discriminates_subjects_and_ignores_actions() {
        let subs = subjects();
        let acts = actions();
        // Same subject, different action: high.
        for s in &subs {
            for (i, a1) in acts.iter().enumerate() {
                for a2 in &acts[i + 1..] {
                    let f = subject_fidelity(&render(s, a1, 0), &render(s, a2, 0)).unwrap();
                    assert!(f > 0.9, "subject {} actions {},{}: {f}", s.subject_id, a1.action_id, a2.action_id);
                }
            }
        }
        // Different subject, same action: low.
        for (i, s1) in subs.iter().enumerate() {
            for s2 in &subs[i + 1..] {
                let f = subject_fidelity(&render(s1, &acts[0], 0), &render(s2, &acts[0], 0)).unwrap();
                assert!(f < 0.5, "subjects {},{}: {f}", s1.subject_id, s2.subject_id);
            }
        }
    }

    #[test]
    fn fidelity_empty_mask_scores_zero() {
        let flat = ImageTensor::from_fn(3, 64, 64, |c, _, _| crate::sprites::BACKGROUND[c]);
        let sprite = render(&subjects()[0], &actions()[0], 0);
        assert_eq!(subject_fidelity(&flat, &sprite).unwrap(), 0.0);
    }

    #[test]
    fn psnr_identical_capped() {
        let img = render(&subjects()[1], &actions()[1], 0);
        assert_eq!(oracle_target_error(&img, &img).unwrap(), 99.0);
    }

    #[test]
    fn psnr_uniform_offset_closed_form() {
        let target = ImageTensor::from_fn(3, 8, 8, |_, _, _| 0.5);
        let generated = target.map(|v| v + 0.1);
        let psnr = oracle_target_error(&generated, &target).unwrap();
        assert!((psnr - 20.0).abs() < 1e-9, "{psnr}");
    }

    #[test]
    fn psnr_of_noise_is_low() {
        use rand::Rng;
        let target = render(&subjects()[2], &actions()[3], 0);
        let mut rng = rng_for(5, "noise-img", 0);
        let noise = ImageTensor::from_fn(3, 64, 64, |_, _, _| rng.gen_range(0.0..1.0));
        assert!(oracle_target_error(&noise, &target).unwrap() < 10.0);
    }

    #[test]
    fn report_aggregates_match_recomputation() {
        let records = vec![
            EvalRecord {
                pair_id: 0,
                config: "full".into(),
                seed: 1,
                phase_score_driving: 0.5,
                subject_fidelity: 0.8,
                oracle_psnr: 15.0,
            },
            EvalRecord {
                pair_id: 1,
                config: "full".into(),
                seed: 1,
                phase_score_driving: 0.7,
                subject_fidelity: 0.6,
                oracle_psnr: 17.0,
            },
            EvalRecord {
                pair_id: 0,
                config: "no_stepwise".into(),
                seed: 1,
                phase_score_driving: 0.4,
                subject_fidelity: 0.9,
                oracle_psnr: 12.0,
            },
        ];
        let report = EvalReport::from_records(records);
        let again = EvalReport::aggregate(&report.records);
        assert_eq!(report.aggregates, again);
        let full = &report.aggregates[0];
        assert_eq!(full.n, 2);
        assert!((full.mean_phase_score - 0.6).abs() < 1e-9);
        assert!((full.mean_oracle_psnr - 16.0).abs() < 1e-9);
    }

    #[test]
    fn report_round_trips_through_jsonl() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.jsonl");
        let report = EvalReport::from_records(vec![EvalRecord {
            pair_id: 3,
            config: "full".into(),
            seed: 9,
            phase_score_driving: 0.123456789,
            subject_fidelity: 0.5,
            oracle_psnr: 21.25,
        }]);
        report.write_jsonl(&path).unwrap();
        let back = EvalReport::read_jsonl(&path).unwrap();
        assert_eq!(back.records.len(), 1);
        assert_eq!(back.records[0].phase_score_driving, 0.123456789);
        assert_eq!(back.aggregates, report.aggregates);
    }

    fn tiny_arch() -> ArchConfig {
        ArchConfig {
            in_channels: 3,
            height: 64,
            width: 64,
            widths: [4, 8, 16],
            emb_dim: 16,
            sin_dim: 8,
            cond_dim: 8,
            n_subjects: 8,
            n_actions: 15,
            groups: 2,
        }
    }

    #[test]
    fn grid_produces_one_record_per_cell() {
        let sched = make_schedule(100, ScheduleKind::Linear).unwrap();
        let model = DenoiserModel::new(tiny_arch(), &mut rng_for(1, "init", 0)).unwrap();
        let triples = &make_benchmark(2, 2, 5).unwrap()[..2];
        let configs = standard_ablation_configs(2, 1e-6, 1e-3);
        let opts = GridOptions {
            n_tr: 2,
            finetune_lr: 1e-4,
            num_steps: 4,
            cfg_scale: 1.0,
            adapter_rank: 2,
            adapter_targets: ADAPTER_TARGETS.iter().map(|s| s.to_string()).collect(),
            sampler: SamplerKind::default(),
            root_seed: 11,
        };
        let report =
            run_ablation_grid(triples, &model, &configs, &[100, 200], &sched, &opts).unwrap();
        assert_eq!(report.records.len(), 2 * 2 * 5);
        assert_eq!(report.aggregates.len(), 5);
        for a in &report.aggregates {
            assert_eq!(a.n, 4);
        }
        // Deterministic rerun.
        let again =
            run_ablation_grid(triples, &model, &configs, &[100, 200], &sched, &opts).unwrap();
        for (a, b) in report.records.iter().zip(again.records.iter()) {
            assert_eq!(a.phase_score_driving, b.phase_score_driving);
            assert_eq!(a.oracle_psnr, b.oracle_psnr);
        }
    }

    #[test]
    fn plugin_lookup_without_registration_fails() {
        let reg = MetricRegistry::new();
        assert!(matches!(
            reg.get("clip"),
            Err(Error::MetricNotAvailable(_))
        ));
    }

    #[test]
    fn plugin_round_trip_and_dispatch() {
        let mut reg = MetricRegistry::new();
        reg.register(
            "stub",
            Arc::new(|gen_img: &ImageTensor, _r: &ImageTensor, text: &str| {
                gen_img.data[[0, 0, 0]] + text.len() as f64
            }),
        );
        let metric = reg.get("stub").unwrap();
        let a = ImageTensor::from_fn(1, 2, 2, |_, _, _| 0.25);
        let b = ImageTensor::zeros(1, 2, 2);
        assert_eq!(metric(&a, &b, "abc"), 3.25);
    }

    use crate::rng::rng_for;

    #[test]
    fn table_renders_every_config() {
        let report = EvalReport::from_records(vec![
            EvalRecord {
                pair_id: 0,
                config: "full".into(),
                seed: 0,
                phase_score_driving: 0.7,
                subject_fidelity: 0.9,
                oracle_psnr: 18.0,
            },
            EvalRecord {
                pair_id: 0,
                config: "no_amp".into(),
                seed: 0,
                phase_score_driving: 0.6,
                subject_fidelity: 0.8,
                oracle_psnr: 14.0,
            },
        ]);
        let table = report.render_table();
        assert!(table.contains("full") && table.contains("no_amp"));
        assert!(table.contains("phase_score"));
    }
}
