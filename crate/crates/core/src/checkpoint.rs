//! Little-endian binary checkpoints.
//!
//! Model file layout:
//!
//! ```text
//! magic  8 bytes  "PGCKPT01"
//! u32    header length, then that many bytes of JSON
//!        { "arch": ArchConfig, "adapter_spec": AdapterSpec | null }
//! block section: base parameters
//! block section: adapter parameters (empty when none attached)
//! ```
//!
//! Each block section is a u32 count followed by blocks of
//! `u32 name_len | name bytes | u64 value_count | f64-LE values`.
//! Training-state files ("PGTRST01") reuse the block encoding for the
//! optimizer moments.

use crate::denoiser::{attach_adapters, AdapterSpec, ArchConfig, DenoiserModel};
use crate::error::{Error, Result};
use crate::nn::Adam;
use crate::rng::rng_for;
use crate::train::{TrainOptions, Trainer};
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MODEL_MAGIC: &[u8; 8] = b"PGCKPT01";
const TRAIN_MAGIC: &[u8; 8] = b"PGTRST01";

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |e| Error::io(path.display().to_string(), e)
}

fn write_block(w: &mut impl Write, name: &str, values: &[f64]) -> std::io::Result<()> {
    w.write_all(&(name.len() as u32).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    w.write_all(&(values.len() as u64).to_le_bytes())?;
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn write_section(w: &mut impl Write, blocks: &IndexMap<String, Vec<f64>>) -> std::io::Result<()> {
    w.write_all(&(blocks.len() as u32).to_le_bytes())?;
    for (name, values) in blocks {
        write_block(w, name, values)?;
    }
    Ok(())
}

fn read_exact_array<const N: usize>(r: &mut impl Read) -> std::io::Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    Ok(u32::from_le_bytes(read_exact_array::<4>(r)?))
}

fn read_u64(r: &mut impl Read) -> std::io::Result<u64> {
    Ok(u64::from_le_bytes(read_exact_array::<8>(r)?))
}

fn read_section(r: &mut impl Read) -> Result<IndexMap<String, Vec<f64>>> {
    let convert = |e: std::io::Error| Error::CheckpointFormat(format!("truncated section: {e}"));
    let count = read_u32(r).map_err(convert)?;
    let mut out = IndexMap::new();
    for _ in 0..count {
        let name_len = read_u32(r).map_err(convert)? as usize;
        let mut name_buf = vec![0u8; name_len];
        r.read_exact(&mut name_buf).map_err(convert)?;
        let name = String::from_utf8(name_buf)
            .map_err(|e| Error::CheckpointFormat(format!("block name not utf8: {e}")))?;
        let n = read_u64(r).map_err(convert)? as usize;
        let mut values = vec![0.0f64; n];
        for v in values.iter_mut() {
            *v = f64::from_le_bytes(read_exact_array::<8>(r).map_err(convert)?);
        }
        out.insert(name, values);
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct ModelHeader {
    arch: ArchConfig,
    adapter_spec: Option<AdapterSpec>,
}

pub fn save_model(path: &Path, model: &DenoiserModel) -> Result<()> {
    let header = serde_json::to_vec(&ModelHeader {
        arch: model.arch.clone(),
        adapter_spec: model.adapter_spec.clone(),
    })
    .map_err(|e| Error::CheckpointFormat(format!("header encode: {e}")))?;

    let mut base = IndexMap::new();
    let mut adapters = IndexMap::new();
    model.for_each_param(&mut |name, values| {
        if name.contains(".lora_") {
            adapters.insert(name.to_string(), values.to_vec());
        } else {
            base.insert(name.to_string(), values.to_vec());
        }
    });

    let file = std::fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    (|| -> std::io::Result<()> {
        w.write_all(MODEL_MAGIC)?;
        w.write_all(&(header.len() as u32).to_le_bytes())?;
        w.write_all(&header)?;
        write_section(&mut w, &base)?;
        write_section(&mut w, &adapters)?;
        w.flush()
    })()
    .map_err(io_err(path))
}

pub fn load_model(path: &Path) -> Result<DenoiserModel> {
    let file = std::fs::File::open(path).map_err(io_err(path))?;
    let mut r = BufReader::new(file);
    let magic = read_exact_array::<8>(&mut r)
        .map_err(|e| Error::CheckpointFormat(format!("missing magic: {e}")))?;
    if &magic != MODEL_MAGIC {
        return Err(Error::CheckpointFormat(format!(
            "bad magic {:?}, expected {:?}",
            magic, MODEL_MAGIC
        )));
    }
    let header_len = read_u32(&mut r)
        .map_err(|e| Error::CheckpointFormat(format!("missing header length: {e}")))? as usize;
    let mut header_buf = vec![0u8; header_len];
    r.read_exact(&mut header_buf)
        .map_err(|e| Error::CheckpointFormat(format!("truncated header: {e}")))?;
    let header: ModelHeader = serde_json::from_slice(&header_buf)
        .map_err(|e| Error::CheckpointFormat(format!("header parse: {e}")))?;

    let base = read_section(&mut r)?;
    let adapters = read_section(&mut r)?;

    // Values are overwritten below, so the init rng is irrelevant.
    let mut model = DenoiserModel::new(header.arch, &mut rng_for(0, "ckpt-load", 0))?;
    if let Some(spec) = &header.adapter_spec {
        attach_adapters(
            &mut model,
            spec.rank,
            &spec.targets,
            &mut rng_for(0, "ckpt-load", 1),
        )?;
    }

    let mut blocks = base;
    for (k, v) in adapters {
        blocks.insert(k, v);
    }
    let mut missing = Vec::new();
    model.for_each_param_mut(&mut |name, values| {
        match blocks.shift_remove(name) {
            Some(stored) if stored.len() == values.len() => {
                values.copy_from_slice(&stored);
            }
            Some(stored) => missing.push(format!(
                "{name}: stored {} values, model wants {}",
                stored.len(),
                values.len()
            )),
            None => missing.push(format!("{name}: absent from checkpoint")),
        }
    });
    if !missing.is_empty() {
        return Err(Error::CheckpointFormat(missing.join("; ")));
    }
    if !blocks.is_empty() {
        let extra: Vec<&String> = blocks.keys().collect();
        return Err(Error::CheckpointFormat(format!(
            "unknown parameter blocks {extra:?}"
        )));
    }
    Ok(model)
}

#[derive(Serialize, Deserialize)]
struct TrainHeader {
    opts: TrainOptions,
    epochs_done: usize,
    adam_step_count: u64,
}

pub fn save_train_state(path: &Path, trainer: &Trainer) -> Result<()> {
    let header = serde_json::to_vec(&TrainHeader {
        opts: trainer.opts.clone(),
        epochs_done: trainer.epochs_done,
        adam_step_count: trainer.adam.step_count,
    })
    .map_err(|e| Error::CheckpointFormat(format!("header encode: {e}")))?;

    let mut blocks = IndexMap::new();
    for (name, v) in &trainer.adam.m {
        blocks.insert(format!("m.{name}"), v.clone());
    }
    for (name, v) in &trainer.adam.v {
        blocks.insert(format!("v.{name}"), v.clone());
    }

    let file = std::fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    (|| -> std::io::Result<()> {
        w.write_all(TRAIN_MAGIC)?;
        w.write_all(&(header.len() as u32).to_le_bytes())?;
        w.write_all(&header)?;
        write_section(&mut w, &blocks)?;
        w.flush()
    })()
    .map_err(io_err(path))
}

pub fn load_train_state(path: &Path) -> Result<Trainer> {
    let file = std::fs::File::open(path).map_err(io_err(path))?;
    let mut r = BufReader::new(file);
    let magic = read_exact_array::<8>(&mut r)
        .map_err(|e| Error::CheckpointFormat(format!("missing magic: {e}")))?;
    if &magic != TRAIN_MAGIC {
        return Err(Error::CheckpointFormat(format!(
            "bad magic {:?}, expected {:?}",
            magic, TRAIN_MAGIC
        )));
    }
    let header_len = read_u32(&mut r)
        .map_err(|e| Error::CheckpointFormat(format!("missing header length: {e}")))? as usize;
    let mut header_buf = vec![0u8; header_len];
    r.read_exact(&mut header_buf)
        .map_err(|e| Error::CheckpointFormat(format!("truncated header: {e}")))?;
    let header: TrainHeader = serde_json::from_slice(&header_buf)
        .map_err(|e| Error::CheckpointFormat(format!("header parse: {e}")))?;

    let blocks = read_section(&mut r)?;
    let mut adam = Adam::new(header.opts.lr);
    adam.step_count = header.adam_step_count;
    for (name, values) in blocks {
        if let Some(stripped) = name.strip_prefix("m.") {
            adam.m.insert(stripped.to_string(), values);
        } else if let Some(stripped) = name.strip_prefix("v.") {
            adam.v.insert(stripped.to_string(), values);
        } else {
            return Err(Error::CheckpointFormat(format!(
                "unknown train-state block {name:?}"
            )));
        }
    }
    Ok(Trainer {
        adam,
        epochs_done: header.epochs_done,
        opts: header.opts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::ADAPTER_TARGETS;
    use crate::schedule::{make_schedule, ScheduleKind};
    use crate::tensor::ImageTensor;
    use crate::train::TrainItem;
    use rand::Rng;

    fn tiny_arch() -> ArchConfig {
        ArchConfig {
            in_channels: 3,
            height: 8,
            width: 8,
            widths: [4, 8, 16],
            emb_dim: 16,
            sin_dim: 8,
            cond_dim: 8,
            n_subjects: 2,
            n_actions: 3,
            groups: 2,
        }
    }

    #[test]
    fn model_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = DenoiserModel::new(tiny_arch(), &mut rng_for(1, "init", 0)).unwrap();
        save_model(&path, &model).unwrap();
        let loaded = load_model(&path).unwrap();

        let mut orig = Vec::new();
        model.for_each_param(&mut |name, v| orig.push((name.to_string(), v.to_vec())));
        let mut back = Vec::new();
        loaded.for_each_param(&mut |name, v| back.push((name.to_string(), v.to_vec())));
        assert_eq!(orig, back);
        assert_eq!(loaded.arch, model.arch);
    }

    #[test]
    fn model_with_adapters_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut model = DenoiserModel::new(tiny_arch(), &mut rng_for(2, "init", 0)).unwrap();
        let targets: Vec<String> = ADAPTER_TARGETS.iter().map(|s| s.to_string()).collect();
        attach_adapters(&mut model, 2, &targets, &mut rng_for(3, "lora", 0)).unwrap();
        let mut rng = rng_for(4, "fill", 0);
        model.for_each_param_mut(&mut |name, v| {
            if name.contains(".lora_") {
                for x in v.iter_mut() {
                    *x = rng.gen_range(-0.2..0.2);
                }
            }
        });
        save_model(&path, &model).unwrap();
        let loaded = load_model(&path).unwrap();
        assert!(loaded.has_adapters());
        assert_eq!(loaded.adapter_spec, model.adapter_spec);

        let x = ImageTensor::from_fn(3, 8, 8, |c, y, xx| (c + y + xx) as f64 / 20.0 - 0.5);
        let cond = model.embed_condition(Some((1, 2))).unwrap();
        use crate::diffusion::NoisePredictor;
        assert_eq!(
            model.predict_noise(&x, 3, &cond).unwrap(),
            loaded.predict_noise(&x, 3, &cond).unwrap()
        );
    }

    #[test]
    fn saving_twice_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        let model = DenoiserModel::new(tiny_arch(), &mut rng_for(5, "init", 0)).unwrap();
        save_model(&p1, &model).unwrap();
        save_model(&p2, &model).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn wrong_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bogus.ckpt");
        std::fs::write(&path, b"NOTMAGIC................").unwrap();
        assert!(matches!(
            load_model(&path),
            Err(Error::CheckpointFormat(_))
        ));
    }

    #[test]
    fn truncated_file_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = DenoiserModel::new(tiny_arch(), &mut rng_for(6, "init", 0)).unwrap();
        save_model(&path, &model).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(load_model(&path).is_err());
    }

    #[test]
    fn train_state_round_trip_resumes_exactly() {
        let sched = make_schedule(50, ScheduleKind::Linear).unwrap();
        let data: Vec<TrainItem> = (0..4)
            .map(|i| TrainItem {
                image: ImageTensor::from_fn(3, 8, 8, |c, y, x| {
                    ((c + y * x + i) % 7) as f64 / 7.0
                }),
                code: (i % 2, i % 3),
            })
            .collect();
        let opts = TrainOptions {
            batch_size: 2,
            lr: 1e-3,
            cond_dropout: 0.1,
            seed: 9,
        };

        // Uninterrupted run.
        let mut m1 = DenoiserModel::new(tiny_arch(), &mut rng_for(7, "init", 0)).unwrap();
        let mut t1 = Trainer::new(opts.clone());
        t1.run_epochs(&mut m1, &data, &sched, 4, |_, _| {}).unwrap();

        // Run two epochs, round-trip everything through disk, run two more.
        let dir = tempfile::tempdir().unwrap();
        let mpath = dir.path().join("model.ckpt");
        let tpath = dir.path().join("train.state");
        let mut m2 = DenoiserModel::new(tiny_arch(), &mut rng_for(7, "init", 0)).unwrap();
        let mut t2 = Trainer::new(opts);
        t2.run_epochs(&mut m2, &data, &sched, 2, |_, _| {}).unwrap();
        save_model(&mpath, &m2).unwrap();
        save_train_state(&tpath, &t2).unwrap();

        let mut m3 = load_model(&mpath).unwrap();
        let mut t3 = load_train_state(&tpath).unwrap();
        assert_eq!(t3.epochs_done, 2);
        t3.run_epochs(&mut m3, &data, &sched, 2, |_, _| {}).unwrap();

        assert_eq!(m1.base_param_checksum(), m3.base_param_checksum());
    }
}
