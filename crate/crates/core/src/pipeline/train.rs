use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::config::Config;
use super::model::{forward, named_gradients, LossValues, Model, StepSeeds};
use super::optim::{poly_lr, AdamW};
use super::synth::{write_json, Dataset};
use crate::error::{Error, Result};
use crate::params::derive_seed;
use crate::tensor::Tape;

pub const LOSSES_FILE: &str = "losses.csv";
pub const CKPT_DIR: &str = "ckpt";
pub const NAN_DUMP_FILE: &str = "nan_dump.json";

pub const LOSS_COLUMNS: [&str; 9] = ["iter", "lr", "warm", "total", "cls", "dis", "aff", "seg", "reg"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossRow {
    pub iter: usize,
    pub lr: f64,
    pub warm: bool,
    pub total: f64,
    pub parts: LossValues,
}

impl LossRow {
    fn record(&self) -> Vec<String> {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        vec![
            self.iter.to_string(),
            self.lr.to_string(),
            (self.warm as u8).to_string(),
            self.total.to_string(),
            self.parts.cls.to_string(),
            opt(self.parts.dis),
            opt(self.parts.aff),
            self.parts.seg.to_string(),
            self.parts.reg.to_string(),
        ]
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub losses: Vec<LossRow>,
    pub checkpoint: PathBuf,
}

/// Image order: a fresh seeded permutation per epoch.
pub fn schedule(count: usize, iterations: usize, seed: u64) -> Vec<usize> {
    let mut order = Vec::with_capacity(iterations);
    let mut epoch = 0u64;
    while order.len() < iterations {
        let mut perm: Vec<usize> = (0..count).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed ^ 0x5eed, epoch)));
        order.extend(perm);
        epoch += 1;
    }
    order.truncate(iterations);
    order
}

fn check_dataset(cfg: &Config, data: &Dataset) -> Result<()> {
    if data.num_classes != cfg.encoder.num_classes {
        return Err(Error::Data(format!(
            "dataset has {} classes, config expects {}",
            data.num_classes, cfg.encoder.num_classes
        )));
    }
    let s = cfg.encoder.image_size;
    for sample in &data.samples {
        if sample.image.shape() != [3, s, s] {
            return Err(Error::Data(format!(
                "{}: image {:?} does not match image_size {s}",
                sample.stem,
                &sample.image.shape()[1..]
            )));
        }
    }
    Ok(())
}

/// Train from `cfg.data_dir`, writing `losses.csv` and `ckpt/` under
/// `cfg.out_dir`.
pub fn train(cfg: &Config) -> Result<TrainOutcome> {
    let data = Dataset::load(&cfg.data_dir)?;
    train_on(cfg, &data)
}

pub fn train_on(cfg: &Config, data: &Dataset) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_dataset(cfg, data)?;
    let out = &cfg.out_dir;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let ckpt = out.join(CKPT_DIR);
    let mut model = Model::init(cfg)?;
    let mut opt = AdamW::new(cfg.weight_decay);
    let csv_path = out.join(LOSSES_FILE);
    let mut csv = csv::Writer::from_path(&csv_path)?;
    csv.write_record(LOSS_COLUMNS)?;
    let order = schedule(data.samples.len(), cfg.iterations, cfg.seed);
    let mut losses = Vec::with_capacity(cfg.iterations);
    log::info!(
        "training {} iterations on {} images (warm from iteration {})",
        cfg.iterations,
        data.samples.len(),
        cfg.warmup_iter()
    );
    for (iter, &idx) in order.iter().enumerate() {
        let sample = &data.samples[idx];
        let warm = cfg.is_warm(iter);
        let tape = Tape::new();
        let p = model.params.bind(&tape);
        let fwd = forward(cfg, &p, &sample.image, &sample.labels, warm, StepSeeds::for_iter(cfg.seed, iter), None)?;
        let total = fwd.total.item();
        if !total.is_finite() || !fwd.values.is_finite() {
            dump_non_finite(out, iter, &sample.stem, total, &fwd.values)?;
            return Err(Error::NonFinite {
                iter,
                parts: serde_json::to_string(&fwd.values)?,
            });
        }
        let grads = tape.backward(fwd.total)?;
        let named = named_gradients(&model.params, &p, &grads)?;
        let lr = poly_lr(cfg.lr, iter, cfg.iterations, cfg.poly_power);
        let row = LossRow {
            iter,
            lr,
            warm,
            total,
            parts: fwd.values,
        };
        drop(fwd);
        drop(p);
        opt.step(&mut model.params, &named, lr)?;
        csv.write_record(row.record())?;
        losses.push(row);
        if iter % 100 == 0 || iter + 1 == cfg.iterations {
            log::info!("iter {iter} lr {lr:.3e} total {total:.5}");
        }
        if cfg.checkpoint_every > 0 && (iter + 1) % cfg.checkpoint_every == 0 {
            model.save(&ckpt)?;
        }
    }
    csv.flush().map_err(|e| Error::io(&csv_path, e))?;
    model.save(&ckpt)?;
    Ok(TrainOutcome {
        model,
        losses,
        checkpoint: ckpt,
    })
}

fn dump_non_finite(out: &Path, iter: usize, stem: &str, total: f64, parts: &LossValues) -> Result<()> {
    let path = out.join(NAN_DUMP_FILE);
    log::error!("non-finite loss at iteration {iter} on {stem}; parts written to {}", path.display());
    write_json(
        &path,
        &serde_json::json!({
            "iter": iter,
            "image": stem,
            "total": total.to_string(),
            "parts": {
                "cls": parts.cls.to_string(),
                "dis": parts.dis.map(|v| v.to_string()),
                "aff": parts.aff.map(|v| v.to_string()),
                "seg": parts.seg.to_string(),
                "reg": parts.reg.to_string(),
            },
        }),
    )
}
