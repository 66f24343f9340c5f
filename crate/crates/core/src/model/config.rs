use crate::error::{Result, StedrError};
use crate::nn::OptimizerKind;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeKind {
    #[default]
    Continuous,
    Binary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum IptwMode {
    /// `pr_t / t̂ + (1 - pr_t) / (1 - t̂)` for every sample.
    #[default]
    LiteralSum,
    /// Stabilized weight of the sample's own arm only.
    TreatmentConditional,
}

/// Quantity watched for early stopping on the validation split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Monitor {
    #[default]
    TotalLoss,
    FactualError,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Number of latent subgroups.
    pub k: usize,
    /// Strength of the interval-overlap penalty.
    pub alpha: f64,
    /// Permits `alpha` outside `[0.1, 0.5]`.
    pub allow_alpha_outside_range: bool,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    /// Transformer width.
    pub hidden: usize,
    /// Width of code, time and visit embeddings.
    pub embed_dim: usize,
    /// Dimension of the global and subgroup latent Gaussians.
    pub latent_dim: usize,
    pub transformer_layers: usize,
    pub heads: usize,
    /// Hidden layers in each prediction head.
    pub head_layers: usize,
    pub outcome_kind: OutcomeKind,
    pub iptw_mode: IptwMode,
    pub propensity_clip: f64,
    pub ablate_gmm: bool,
    pub ablate_attention: bool,
    pub seed: u64,
    /// Train, validation and test fractions.
    pub split: [f64; 3],
    /// Latent samples per step for the mixture divergence.
    pub mc_samples: usize,
    /// Visit window; longer histories keep their most recent visits.
    pub max_visits: usize,
    pub optimizer: OptimizerKind,
    pub monitor: Monitor,
    /// Standardize continuous outcomes on the training split.
    pub standardize_outcome: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            k: 3,
            alpha: 0.3,
            allow_alpha_outside_range: false,
            learning_rate: 0.001,
            batch_size: 128,
            max_epochs: 300,
            patience: 30,
            hidden: 50,
            embed_dim: 16,
            latent_dim: 16,
            transformer_layers: 1,
            heads: 2,
            head_layers: 2,
            outcome_kind: OutcomeKind::Continuous,
            iptw_mode: IptwMode::LiteralSum,
            propensity_clip: 0.05,
            ablate_gmm: false,
            ablate_attention: false,
            seed: 0,
            split: [0.6, 0.2, 0.2],
            mc_samples: 1,
            max_visits: 50,
            optimizer: OptimizerKind::Adam,
            monitor: Monitor::TotalLoss,
            standardize_outcome: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(StedrError::InvalidConfig(m));
        if self.k == 0 {
            return bad("k must be at least 1".into());
        }
        if !self.alpha.is_finite() || self.alpha < 0.0 {
            return bad(format!("alpha {} must be finite and non-negative", self.alpha));
        }
        if !self.allow_alpha_outside_range && !(0.1..=0.5).contains(&self.alpha) {
            return bad(format!(
                "alpha {} outside [0.1, 0.5]; set allow_alpha_outside_range to override",
                self.alpha
            ));
        }
        if !(self.propensity_clip > 0.0 && self.propensity_clip < 0.5) {
            return bad(format!("propensity_clip {} outside (0, 0.5)", self.propensity_clip));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive".into());
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return bad("batch_size and max_epochs must be positive".into());
        }
        if self.hidden == 0 || self.embed_dim == 0 || self.latent_dim == 0 {
            return bad("layer widths must be positive".into());
        }
        if self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            return bad(format!("hidden {} not divisible by {} heads", self.hidden, self.heads));
        }
        if self.transformer_layers == 0 {
            return bad("at least one transformer layer is required".into());
        }
        if self.mc_samples == 0 || self.max_visits == 0 {
            return bad("mc_samples and max_visits must be positive".into());
        }
        let s: f64 = self.split.iter().sum();
        if self.split.iter().any(|v| !(*v >= 0.0)) || (s - 1.0).abs() > 1e-9 || self.split[0] <= 0.0 {
            return bad(format!("split {:?} must be non-negative and sum to 1", self.split));
        }
        Ok(())
    }

    /// Number of subgroups the model actually distinguishes.
    pub fn effective_k(&self) -> usize {
        if self.ablate_gmm {
            1
        } else {
            self.k
        }
    }
}
