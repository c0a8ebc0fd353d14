use serde::{Deserialize, Serialize};

use super::AdamParams;
use crate::error::{Error, Result};
use crate::featurenet::{Activation, NetArch};
use crate::objectives::SeparationWeights;
use crate::uncertainty::BayesMode;

/// Every hyperparameter of a run. Missing fields deserialize to their
/// defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// K, number of class labels.
    pub classes: usize,
    /// p, raw input dimension.
    pub input_dim: usize,
    /// d, kernel feature dimension.
    pub feature_dim: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub lambda: f64,
    pub alpha: f64,
    pub margin: f64,
    /// M, posterior draws per LL estimate.
    pub draws: usize,
    pub batch_source: usize,
    pub batch_target: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    /// Alternation rounds.
    pub steps: usize,
    pub seed: u64,
    pub bayes_error_mode: BayesMode,
    /// Posterior (variational-inference) updates per round.
    pub inference_updates: usize,
    /// Feature-net (model-selection) updates per round.
    pub model_updates: usize,
    /// Repetitions of the generator-only step of the discrepancy baseline.
    pub mcda_n: usize,
    /// Log accuracies every this many rounds; 0 logs only the last round.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            classes: 2,
            input_dim: 2,
            feature_dim: 16,
            hidden: vec![64, 64],
            activation: Activation::Tanh,
            lambda: 50.0,
            alpha: 2.0,
            margin: 1.0,
            draws: 50,
            batch_source: 32,
            batch_target: 32,
            lr: 0.0002,
            beta1: 0.5,
            beta2: 0.999,
            adam_epsilon: 1e-8,
            steps: 2000,
            seed: 0,
            bayes_error_mode: BayesMode::AsWritten,
            inference_updates: 1,
            model_updates: 1,
            mcda_n: 4,
            eval_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let nonneg = [
            ("lambda", self.lambda),
            ("alpha", self.alpha),
            ("lr", self.lr),
            ("beta1", self.beta1),
            ("beta2", self.beta2),
            ("adam_epsilon", self.adam_epsilon),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be a nonnegative real, got {v}")));
            }
        }
        if !self.margin.is_finite() {
            return Err(Error::invalid("margin must be finite"));
        }
        if self.beta1 >= 1.0 || self.beta2 >= 1.0 {
            return Err(Error::invalid("Adam betas must be below 1"));
        }
        if self.batch_source == 0 || self.batch_target == 0 {
            return Err(Error::invalid("batch sizes must be at least 1"));
        }
        if self.draws == 0 {
            return Err(Error::invalid("M (draws) must be at least 1"));
        }
        if self.classes < 2 {
            return Err(Error::invalid("need at least two classes"));
        }
        if self.inference_updates == 0 && self.model_updates == 0 && self.steps > 0 {
            return Err(Error::invalid("a round must update something"));
        }
        self.arch().map(|_| ())
    }

    pub fn arch(&self) -> Result<NetArch> {
        let mut sizes = Vec::with_capacity(self.hidden.len() + 2);
        sizes.push(self.input_dim);
        sizes.extend(&self.hidden);
        sizes.push(self.feature_dim);
        NetArch::new(sizes, self.activation)
    }

    pub fn adam(&self) -> AdamParams {
        AdamParams {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_epsilon,
        }
    }

    pub fn separation(&self) -> SeparationWeights {
        SeparationWeights {
            lambda: self.lambda,
            alpha: self.alpha,
            margin: self.margin,
        }
    }

    /// Smaller relu network, larger step size and batches and fewer draws,
    /// tuned on the rotated two-moons task. Everything else keeps its
    /// default.
    pub fn toy() -> Self {
        Self {
            hidden: vec![32, 32],
            feature_dim: 8,
            activation: Activation::Relu,
            lr: 0.005,
            batch_source: 64,
            batch_target: 64,
            draws: 10,
            ..Self::default()
        }
    }

    /// Stable JSON form, used for digests and checkpoints.
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }
}
