//! Joint optimization of the radiance and language fields.

mod adam;
mod batch;
mod step;
mod trainer;

pub use adam::{adam_step, AdamState};
pub use batch::{sample_training_batch, RngStreams, TrainingRay};
pub use step::{batch_loss_and_grad, ray_loss_and_grad, BatchEvaluation, LossBreakdown};
pub use trainer::{train, train_step, write_loss_csv, StepLog, TrainOutcome, TrainState};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::FieldConfig;
use crate::pyramid::PyramidConfig;
use crate::render::RenderConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lambda_lang: f64,
    pub lambda_dino: f64,
    pub lr_start: f64,
    pub lr_end: f64,
    pub lr_warm_steps: u64,
    pub max_steps: u64,
    pub rays_per_step: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub rng_seed: u64,
    /// Disables the language and DINO losses entirely.
    pub language_losses: bool,
    /// Steps between checkpoints; 0 writes only the final one.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_lang: 0.01,
            lambda_dino: 1.0,
            lr_start: 1e-2,
            lr_end: 1e-3,
            lr_warm_steps: 5000,
            max_steps: 30_000,
            rays_per_step: 1024,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-15,
            weight_decay: 1e-9,
            rng_seed: 0,
            language_losses: true,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_lang > 0.0) || self.lambda_dino < 0.0 {
            return Err(Error::Config("lambda_lang must be positive and lambda_dino non-negative".into()));
        }
        if !(self.lr_start > self.lr_end && self.lr_end > 0.0) {
            return Err(Error::Config(format!(
                "need lr_start > lr_end > 0 (got {} and {})",
                self.lr_start, self.lr_end
            )));
        }
        if self.lr_warm_steps == 0 || self.rays_per_step == 0 {
            return Err(Error::Config("lr_warm_steps and rays_per_step must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || !(self.adam_eps > 0.0) {
            return Err(Error::Config("adam betas must be in [0, 1) and eps positive".into()));
        }
        Ok(())
    }
}

/// Everything a training run needs besides data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(flatten)]
    pub train: TrainConfig,
    #[serde(default)]
    pub render: RenderConfig,
    #[serde(default)]
    pub pyramid: PyramidConfig,
    /// Defaults to [`FieldConfig::desk`] sized to the embedding file.
    #[serde(default)]
    pub field: Option<FieldConfig>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            render: RenderConfig::default(),
            pyramid: PyramidConfig::default(),
            field: None,
        }
    }
}

/// Exponential decay from `lr_start` to `lr_end` over the warm-up window,
/// constant afterwards.
pub fn lr_at(step: u64, config: &TrainConfig) -> f64 {
    let warm = config.lr_warm_steps.max(1);
    let progress = step.min(warm) as f64 / warm as f64;
    config.lr_start * (config.lr_end / config.lr_start).powf(progress)
}

fn check_unit(v: &[f64], what: &str) -> Result<()> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if (n - 1.0).abs() > 1e-3 {
        return Err(Error::InvalidArgument(format!("{what} has norm {n:.6}, expected unit")));
    }
    Ok(())
}

/// `−λ φ·φ_gt` for unit embeddings.
pub fn language_loss(rendered: &[f64], target: &[f64], lambda: f64) -> Result<f64> {
    if rendered.len() != target.len() {
        return Err(Error::InvalidArgument("embedding dims differ".into()));
    }
    check_unit(rendered, "rendered embedding")?;
    check_unit(target, "target embedding")?;
    Ok(-lambda * rendered.iter().zip(target).map(|(a, b)| a * b).sum::<f64>())
}

/// `λ · mean((φ − φ_gt)²)`.
pub fn dino_loss(rendered: &[f64], target: &[f64], lambda: f64) -> Result<f64> {
    if rendered.len() != target.len() || rendered.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "dino dims differ ({} vs {})",
            rendered.len(),
            target.len()
        )));
    }
    let mse = rendered.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / rendered.len() as f64;
    Ok(lambda * mse)
}

/// Mean squared error over every channel of every ray.
pub fn rgb_loss(colors: &[[f64; 3]], targets: &[[f64; 3]]) -> Result<f64> {
    if colors.len() != targets.len() || colors.is_empty() {
        return Err(Error::InvalidArgument("color batch sizes differ".into()));
    }
    let sum: f64 = colors
        .iter()
        .zip(targets)
        .flat_map(|(c, t)| (0..3).map(move |k| (c[k] - t[k]) * (c[k] - t[k])))
        .sum();
    Ok(sum / (3 * colors.len()) as f64)
}
