use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::losses::{LossWeights, DEFAULT_TAU};
use crate::model::ModelConfig;
use crate::numerics::Aggregation;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Cosine decay of the learning rate to zero over `epochs`.
    pub cosine_schedule: bool,
    pub weights: LossWeights,
    pub tau: f64,
    pub seed: u64,
    /// Evaluate on the test split every this many epochs (and after the last).
    pub eval_every: usize,
    pub eval_trials: usize,
    /// Add the MSE term to the image and text losses.
    pub enable_mse: bool,
    /// Build the reconstruction and cycle terms.
    pub enable_rec_cyc: bool,
    /// L2-normalize flattened grids before the contrastive term.
    pub normalize_clip: bool,
    pub aggregation: Aggregation,
    /// Also run the reverse cycle, from the synthesized partner signal back
    /// into the source subject.
    pub symmetric_cycle: bool,
    /// Treat the source embedding as a constant inside the cycle.
    pub stop_grad_cycle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 600,
            batch_size: 50,
            lr: 1e-4,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            cosine_schedule: false,
            weights: LossWeights::default(),
            tau: DEFAULT_TAU,
            seed: 0,
            eval_every: 1,
            eval_trials: 50,
            enable_mse: true,
            enable_rec_cyc: true,
            normalize_clip: true,
            aggregation: Aggregation::Max,
            symmetric_cycle: false,
            stop_grad_cycle: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("weight_decay must be finite and >= 0"));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if self.adam_eps.is_nan() || self.adam_eps <= 0.0 {
            return Err(Error::config("adam_eps must be positive"));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::config(format!("tau must be positive, got {}", self.tau)));
        }
        if self.eval_every == 0 || self.eval_trials == 0 {
            return Err(Error::config("eval_every and eval_trials must be at least 1"));
        }
        self.weights.validate()
    }

    /// Learning rate at `step` of `total_steps`.
    pub fn lr_at(&self, step: u64, total_steps: u64) -> f64 {
        if !self.cosine_schedule || total_steps == 0 {
            return self.lr;
        }
        let progress = (step as f64 / total_steps as f64).min(1.0);
        0.5 * self.lr * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FinetuneStrategy {
    /// Fresh embedder and builder for the new subject, translator frozen.
    #[default]
    Reset,
    /// Fresh embedder and builder, translator trained as well.
    Full,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptConfig {
    pub epochs: usize,
    pub strategy: FinetuneStrategy,
    /// Reconstruction and cycle terms on the new subject's data plus
    /// signals converted from previously trained subjects.
    pub pseudo_augment: bool,
    /// Also apply the image and text terms to converted signals, using the
    /// source subject's targets.
    pub pseudo_supervised: bool,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            strategy: FinetuneStrategy::Reset,
            pseudo_augment: true,
            pseudo_supervised: false,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("adapt epochs must be at least 1"));
        }
        if self.pseudo_supervised && !self.pseudo_augment {
            return Err(Error::config("pseudo_supervised requires pseudo_augment"));
        }
        Ok(())
    }
}

/// SHA-256 over the canonical JSON of the configuration. The epoch budget is
/// left out (unless it shapes the learning-rate schedule) so a run can be
/// resumed with a longer budget.
pub fn fingerprint(model: &ModelConfig, train: &TrainConfig, adapt: Option<&AdaptConfig>) -> String {
    let mut train = train.clone();
    if !train.cosine_schedule {
        train.epochs = 0;
    }
    let adapt = adapt.map(|a| AdaptConfig { epochs: 0, ..a.clone() });
    let value = serde_json::json!({ "model": model, "train": train, "adapt": adapt });
    hex::encode(Sha256::digest(value.to_string().as_bytes()))
}
