use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::field::{FieldConfig, FieldParams};
use crate::pyramid::FeaturePyramid;
use crate::scene::SceneDataset;

use super::adam::{adam_step, AdamState};
use super::batch::{sample_training_batch, RngStreams, TrainingRay};
use super::step::{batch_loss_and_grad, LossBreakdown};
use super::{lr_at, RunConfig};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLog {
    pub step: u64,
    pub rgb: f64,
    pub lang: f64,
    pub dino: f64,
    pub lr: f64,
}

impl StepLog {
    pub fn total(&self) -> f64 {
        self.rgb + self.lang + self.dino
    }
}

pub struct TrainState {
    /// Number of completed optimizer steps.
    pub step: u64,
    pub params: FieldParams,
    pub adam: AdamState,
    pub streams: RngStreams,
}

impl TrainState {
    pub fn new(field: FieldConfig, seed: u64) -> Result<Self> {
        let params = FieldParams::init(field, seed)?;
        Ok(Self {
            step: 0,
            adam: AdamState::new(&params),
            params,
            streams: RngStreams::new(seed),
        })
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub params: FieldParams,
    pub log: Vec<StepLog>,
}

/// Runs `config.train.max_steps` optimizer steps. `on_step` sees every log
/// entry together with the updated state and may abort by returning an
/// error.
pub fn train(
    dataset: &SceneDataset,
    pyramid: Option<&FeaturePyramid>,
    config: &RunConfig,
    field: FieldConfig,
    mut on_step: impl FnMut(&StepLog, &TrainState) -> Result<()>,
) -> Result<TrainOutcome> {
    config.train.validate()?;
    config.render.validate()?;
    field.validate()?;
    if config.train.language_losses {
        let p = pyramid.ok_or_else(|| Error::InvalidArgument("language losses need a feature pyramid".into()))?;
        if p.embed_dim != field.embed_dim() || p.dino_dim != field.dino_dim() {
            return Err(Error::Config(format!(
                "field heads output {}/{} dims, embeddings are {}/{}",
                field.embed_dim(),
                field.dino_dim(),
                p.embed_dim,
                p.dino_dim
            )));
        }
    }
    let pyramid = if config.train.language_losses { pyramid } else { None };
    let mut state = TrainState::new(field, config.train.rng_seed)?;
    let mut log = Vec::with_capacity(config.train.max_steps as usize);
    while state.step < config.train.max_steps {
        let entry = train_step(dataset, pyramid, config, &mut state)?;
        on_step(&entry, &state)?;
        log.push(entry);
    }
    Ok(TrainOutcome {
        params: state.params,
        log,
    })
}

/// One optimizer step. Non-finite losses or gradients abort with the
/// offending rays listed.
pub fn train_step(
    dataset: &SceneDataset,
    pyramid: Option<&FeaturePyramid>,
    config: &RunConfig,
    state: &mut TrainState,
) -> Result<StepLog> {
    let step = state.step;
    let batch = sample_training_batch(dataset, pyramid, &mut state.streams, config.train.rays_per_step)?;
    let eval = batch_loss_and_grad(
        &state.params,
        &config.render,
        &config.train,
        dataset,
        &batch,
        &state.streams,
        step,
    )?;
    if !eval.loss.is_finite() || !eval.grads.is_finite() {
        return Err(Error::Diverged {
            step,
            detail: dump_batch(&batch, &eval.per_ray),
        });
    }
    let lr = lr_at(step, &config.train);
    adam_step(&mut state.params, &mut state.adam, &eval.grads, lr, &config.train).map_err(|e| Error::Diverged {
        step,
        detail: e.to_string(),
    })?;
    state.step += 1;
    Ok(StepLog {
        step,
        rgb: eval.loss.rgb,
        lang: eval.loss.lang,
        dino: eval.loss.dino,
        lr,
    })
}

fn dump_batch(batch: &[TrainingRay], losses: &[LossBreakdown]) -> String {
    let bad: Vec<String> = batch
        .iter()
        .zip(losses)
        .filter(|(_, l)| !l.is_finite())
        .take(8)
        .map(|(r, l)| {
            format!(
                "frame {} pixel ({}, {}) s_img {:.4}: rgb {} lang {} dino {}",
                r.frame, r.ray.pixel.0, r.ray.pixel.1, r.s_img, l.rgb, l.lang, l.dino
            )
        })
        .collect();
    if bad.is_empty() {
        "non-finite gradient with finite per-ray losses".into()
    } else {
        format!("non-finite loss on {} ray(s): {}", bad.len(), bad.join("; "))
    }
}

/// Writes `step,rgb,lang,dino,lr` rows with a header.
pub fn write_loss_csv(path: &Path, log: &[StepLog]) -> Result<()> {
    let mut out = Vec::new();
    writeln!(out, "step,rgb,lang,dino,lr").unwrap();
    for l in log {
        writeln!(out, "{},{},{},{},{}", l.step, l.rgb, l.lang, l.dino, l.lr).unwrap();
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
