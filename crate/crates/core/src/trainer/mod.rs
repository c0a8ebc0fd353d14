//! Alternating optimization of the variational posterior and the feature
//! net, evaluation, history logging and checkpoints.
//!
//! Each round draws one source and one target mini-batch, then
//!
//! * step A: Adam on `(m, log s)` against `−LL + KL`, feature net frozen;
//! * step B: Adam on the feature-net parameters against
//!   `−LL + KL + λ·MS`, posterior frozen.
//!
//! The two steps keep separate Adam states.

mod adam;
pub mod checkpoint;
mod config;
mod history;

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use adam::{adam_update, adam_update_ranges, AdamParams, AdamState};
pub use checkpoint::CheckpointError;
pub use config::TrainConfig;
pub use history::{TrainHistory, TrainRecord, HISTORY_HEADER};

use crate::datagen::{select_rows, DomainDataset, LabeledSet};
use crate::diffmath::{Mat, ParamVector};
use crate::error::{Error, Result};
use crate::featurenet::FeatureNet;
use crate::gp_head::{NoiseBatch, PosteriorMoments, VariationalPosterior};
use crate::objectives::{step_value_and_grad, LossBreakdown, StepBatch, StepKind};

/// A feature net and the variational posterior over its linear read-out.
#[derive(Debug, Clone, PartialEq)]
pub struct GpdaModel {
    pub net: FeatureNet,
    pub q: VariationalPosterior,
}

impl GpdaModel {
    /// Glorot-initialized net and the prior as posterior.
    pub fn init<R: Rng + ?Sized>(config: &TrainConfig, rng: &mut R) -> Result<Self> {
        let net = FeatureNet::init(config.arch()?, rng);
        let q = VariationalPosterior::prior(config.classes, config.feature_dim);
        Ok(Self { net, q })
    }

    pub fn classes(&self) -> usize {
        self.q.classes()
    }

    pub fn moments(&self, x: &Mat) -> Result<Vec<PosteriorMoments>> {
        let phi = self.net.features(x)?;
        (0..phi.rows()).map(|i| self.q.moments(phi.row(i))).collect()
    }

    pub fn predict(&self, x: &Mat) -> Result<Vec<usize>> {
        let phi = self.net.features(x)?;
        (0..phi.rows()).map(|i| self.q.predict(phi.row(i))).collect()
    }
}

/// Fraction of samples whose MAP prediction equals the label.
pub fn evaluate(model: &GpdaModel, set: &LabeledSet) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let pred = model.predict(&set.x)?;
    Ok(accuracy(&pred, &set.y))
}

pub(crate) fn accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    let hits = pred.iter().zip(truth).filter(|(p, t)| p == t).count();
    hits as f64 / truth.len() as f64
}

/// Draws mini-batches without replacement; reshuffles once the remaining
/// indices cannot fill a batch.
#[derive(Debug, Clone)]
pub(crate) struct BatchSampler {
    order: Vec<usize>,
    cursor: usize,
}

impl BatchSampler {
    pub(crate) fn new<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Self {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        Self { order, cursor: 0 }
    }

    pub(crate) fn next<R: Rng + ?Sized>(&mut self, batch: usize, rng: &mut R) -> Vec<usize> {
        let batch = batch.min(self.order.len());
        if self.cursor + batch > self.order.len() {
            self.order.shuffle(rng);
            self.cursor = 0;
        }
        let out = self.order[self.cursor..self.cursor + batch].to_vec();
        self.cursor += batch;
        out
    }
}

pub(crate) fn check_data(config: &TrainConfig, data: &DomainDataset) -> Result<()> {
    if data.source.is_empty() {
        return Err(Error::Empty("source domain"));
    }
    if data.target_train.rows() == 0 {
        return Err(Error::Empty("target domain"));
    }
    if data.input_dim != config.input_dim {
        return Err(Error::Dimension {
            context: "dataset input vs config",
            expected: config.input_dim,
            found: data.input_dim,
        });
    }
    if data.classes != config.classes {
        return Err(Error::invalid(format!(
            "dataset has {} classes, config expects {}",
            data.classes, config.classes
        )));
    }
    if let Some(&label) = data.source.y.iter().find(|&&l| l >= config.classes) {
        return Err(Error::LabelOutOfRange {
            label,
            classes: config.classes,
        });
    }
    Ok(())
}

pub(crate) fn diverged(round: usize) -> impl Fn(Error) -> Error {
    move |e| Error::Diverged {
        round,
        detail: e.to_string(),
    }
}

fn due(config: &TrainConfig, round: usize) -> bool {
    round == config.steps || (config.eval_every > 0 && round % config.eval_every == 0)
}

/// Runs `config.steps` alternation rounds. Deterministic given the config
/// (including its seed) and the data.
pub fn train(config: &TrainConfig, data: &DomainDataset) -> Result<(GpdaModel, TrainHistory)> {
    config.validate()?;
    check_data(config, data)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = GpdaModel::init(config, &mut rng)?;
    let mut history = TrainHistory::new();
    let mut src = BatchSampler::new(data.source.len(), &mut rng);
    let mut tgt = BatchSampler::new(data.target_train.rows(), &mut rng);
    let mut adam_q = AdamState::for_params(model.q.params());
    let mut adam_net = AdamState::for_params(model.net.params());
    let hp = config.adam();
    let weights = config.separation();
    let (k, d) = (config.classes, config.feature_dim);

    for round in 1..=config.steps {
        let fail = diverged(round);
        let s_idx = src.next(config.batch_source, &mut rng);
        let t_idx = tgt.next(config.batch_target, &mut rng);
        let sb = data.source.subset(&s_idx);
        let tx = select_rows(&data.target_train, &t_idx);
        let batch = StepBatch {
            source_x: &sb.x,
            source_y: &sb.y,
            source_total: data.source.len(),
            target_x: &tx,
        };

        let mut logged: Option<LossBreakdown> = None;
        for _ in 0..config.inference_updates {
            let noise = NoiseBatch::sample(config.draws, k, d, &mut rng);
            let (losses, g) = step_value_and_grad(StepKind::Inference, &model.q, &model.net, &batch, &noise, &weights).map_err(&fail)?;
            adam_update(model.q.params_mut(), &g, &mut adam_q, &hp).map_err(&fail)?;
            logged = Some(losses);
        }
        let mut model_logged = None;
        for _ in 0..config.model_updates {
            let noise = NoiseBatch::sample(config.draws, k, d, &mut rng);
            let (losses, g) = step_value_and_grad(StepKind::Model, &model.q, &model.net, &batch, &noise, &weights).map_err(&fail)?;
            adam_update(model.net.params_mut(), &g, &mut adam_net, &hp).map_err(&fail)?;
            model_logged.get_or_insert(losses);
        }
        let losses = model_logged.or(logged).expect("validated: a round updates something");
        if !losses.is_finite() {
            return Err(fail(Error::invalid("non-finite loss")));
        }
        let mut rec = TrainRecord::from_losses(round, &losses);
        if due(config, round) {
            rec.src_acc = Some(evaluate(&model, &data.source).map_err(&fail)?);
            if !data.target_test.is_empty() {
                rec.tgt_acc = Some(evaluate(&model, &data.target_test).map_err(&fail)?);
            }
        }
        history.push(rec);
    }
    Ok((model, history))
}

fn gpda_params(model: &GpdaModel) -> ParamVector {
    ParamVector::concat(&[("net.", model.net.params()), ("q.", model.q.params())])
}

/// Version-tagged, checksummed binary checkpoint.
pub fn save_checkpoint(model: &GpdaModel, config: &TrainConfig, path: &Path) -> Result<()> {
    let bytes = checkpoint::encode(checkpoint::GPDA_MAGIC, &config.to_json(), &gpda_params(model));
    checkpoint::write_file(path, &bytes)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(GpdaModel, TrainConfig)> {
    let c = checkpoint::read_file(checkpoint::GPDA_MAGIC, path)?;
    let config: TrainConfig =
        serde_json::from_str(&c.config_json).map_err(|e| CheckpointError::Format(format!("config: {e}")))?;
    let net = FeatureNet::from_params(config.arch()?, c.params.extract("net."))?;
    let q = VariationalPosterior::from_params(c.params.extract("q."))?;
    if q.classes() != config.classes || q.dim() != config.feature_dim {
        return Err(CheckpointError::Format("posterior shape disagrees with config".into()).into());
    }
    Ok((GpdaModel { net, q }, config))
}
