//! Plain SGD training with decoupled weight decay and deterministic seeding.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::data::{self, Case};
use crate::diffcore::{NdArray, Tape};
use crate::error::{Error, Result};
use crate::network::{self, Model, ModelConfig};
use crate::rng::SplitMix64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub steps: usize,
    /// None trains on full volumes.
    pub crop_size: Option<[usize; 3]>,
    pub seed: u64,
    pub data_dir: String,
    pub ckpt_dir: String,
    /// Periodic checkpoint interval; 0 writes only the final checkpoint.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            lr: 1e-2,
            weight_decay: 1e-5,
            batch_size: 1,
            steps: 200,
            crop_size: None,
            seed: 0,
            data_dir: "data".into(),
            ckpt_dir: "ckpt".into(),
            checkpoint_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("lr must be finite and >= 0".into()));
        }
        if self.steps == 0 {
            return Err(Error::Config("steps must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug)]
pub struct TrainReport {
    pub model: Model,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub log: Vec<String>,
    pub final_checkpoint: PathBuf,
}

fn first_nan_diagnostic(model: &Model, grads: &IndexMap<String, NdArray>) -> String {
    for (name, arr) in model.store.iter() {
        if arr.data().iter().any(|v| v.is_nan()) {
            return format!("parameter {name} is NaN");
        }
    }
    for (name, g) in grads {
        if g.data().iter().any(|v| v.is_nan()) {
            return format!("gradient of {name} is NaN");
        }
    }
    "no NaN parameter located".into()
}

fn batch_item(case: &Case, crop: Option<[usize; 3]>, crop_seed: u64) -> Result<Case> {
    match crop {
        Some([h, w, d]) => data::random_crop(case, (h, w, d), crop_seed),
        None => Ok(case.clone()),
    }
}

/// One forward/backward on a fresh tape; returns (loss, grads by name).
fn item_grads(model: &Model, item: &Case) -> Result<(f64, IndexMap<String, NdArray>)> {
    let mut tape = Tape::new();
    let x = tape.input("volume", item.image.clone());
    let (_, loss) = network::build_loss(&mut tape, model, x, Arc::new(item.labels.clone()))?;
    let loss_v = tape.value(loss).value();
    let grads = tape.backward(loss, &NdArray::scalar(1.0))?;
    Ok((loss_v, grads.into_store()))
}

/// SGD with decoupled weight decay: theta <- theta - lr * (g + wd * theta).
/// Per-step log lines go through `on_log` and into the returned report.
pub fn train(config: &TrainConfig, on_log: impl FnMut(&str)) -> Result<TrainReport> {
    config.validate()?;
    let model = network::build_model(&config.model, config.seed)?;
    train_from(model, config, on_log)
}

/// Same loop starting from an existing model (e.g. a loaded checkpoint).
pub fn train_from(
    mut model: Model,
    config: &TrainConfig,
    mut on_log: impl FnMut(&str),
) -> Result<TrainReport> {
    config.validate()?;
    let data_dir = Path::new(&config.data_dir);
    let ids = data::list_cases(data_dir)?;
    if ids.is_empty() {
        return Err(Error::Data(format!(
            "no cases found in {}",
            data_dir.display()
        )));
    }
    let cases: Vec<Case> = ids
        .iter()
        .map(|id| data::load_case(data_dir, id))
        .collect::<Result<_>>()?;
    let ckpt_dir = Path::new(&config.ckpt_dir);
    std::fs::create_dir_all(ckpt_dir)
        .map_err(|e| Error::io(ckpt_dir.display().to_string(), e))?;
    let mut rng = SplitMix64::new(config.seed);
    let mut log = Vec::with_capacity(config.steps);
    let mut initial_loss = f64::NAN;
    let mut final_loss = f64::NAN;
    for step in 1..=config.steps {
        let started = Instant::now();
        let mut batch_loss = 0.0;
        let mut acc: IndexMap<String, NdArray> = IndexMap::new();
        for _ in 0..config.batch_size {
            let case = &cases[rng.below(cases.len())];
            let crop_seed = rng.next_u64();
            let item = batch_item(case, config.crop_size, crop_seed)?;
            if item.image.shape()[0] != config.model.in_channels {
                return Err(Error::Config(format!(
                    "case {} has {} modalities, model expects {}",
                    item.id,
                    item.image.shape()[0],
                    config.model.in_channels
                )));
            }
            let (loss, grads) = item_grads(&model, &item)?;
            batch_loss += loss;
            // fixed item order keeps the sum deterministic
            for (name, g) in grads {
                match acc.get_mut(&name) {
                    Some(slot) => {
                        for (s, v) in slot.data_mut().iter_mut().zip(g.data()) {
                            *s += v;
                        }
                    }
                    None => {
                        acc.insert(name, g);
                    }
                }
            }
        }
        let loss = batch_loss / config.batch_size as f64;
        if loss.is_nan() {
            return Err(Error::Training(format!(
                "NaN loss at step {step}: {}",
                first_nan_diagnostic(&model, &acc)
            )));
        }
        if step == 1 {
            initial_loss = loss;
        }
        final_loss = loss;
        let scale = 1.0 / config.batch_size as f64;
        for (name, theta) in model.store.iter_mut() {
            let g = acc
                .get(name)
                .ok_or_else(|| Error::Training(format!("no gradient for parameter {name}")))?;
            for (t, gv) in theta.data_mut().iter_mut().zip(g.data()) {
                *t -= config.lr * (gv * scale + config.weight_decay * *t);
            }
        }
        let ms = started.elapsed().as_secs_f64() * 1e3;
        let line = format!("step={step} loss={loss} ms={ms:.3}");
        on_log(&line);
        log.push(line);
        if config.checkpoint_every > 0 && step % config.checkpoint_every == 0 {
            let path = ckpt_dir.join(format!("step{step}.ssfc"));
            network::save_checkpoint(&path, &model, step as u64, config.seed)?;
        }
    }
    let final_checkpoint = ckpt_dir.join("final.ssfc");
    network::save_checkpoint(&final_checkpoint, &model, config.steps as u64, config.seed)?;
    Ok(TrainReport {
        model,
        initial_loss,
        final_loss,
        log,
        final_checkpoint,
    })
}
