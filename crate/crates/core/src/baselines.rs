//! Comparison methods: source-only training and the three-step maximum
//! classifier discrepancy algorithm (MCDA).
//!
//! MCDA keeps one parameter vector with three prefixed parts: the shared
//! generator `g.` and the linear softmax heads `h1.` and `h2.`. Each round
//! runs, on one fresh source and target batch,
//!
//! 1. all parameters against the source cross-entropy `L_S` of both heads;
//! 2. heads only against `L_S − L_adv`, where `L_adv` is the mean target
//!    discrepancy;
//! 3. generator only against `L_adv`, repeated `n` times.
//!
//! Every step has its own Adam state. Predictions come from head `h1`.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::datagen::{select_rows, DomainDataset, LabeledSet};
use crate::diffmath::{argmax, value_and_grad, Binding, DiffError, Gradient, Mat, ParamVector, Tape, Var};
use crate::error::{Error, Result};
use crate::featurenet::{Activation, NetArch};
use crate::trainer::checkpoint::{self, CheckpointError};
use crate::trainer::{
    accuracy, adam_update_ranges, check_data, diverged, AdamParams, AdamState, BatchSampler, GpdaModel, TrainConfig,
    TrainHistory, TrainRecord,
};
use crate::uncertainty::{score_probabilities, scored, Histogram, UncertaintyRecord};

pub const GENERATOR: &str = "g.";
pub const HEAD1: &str = "h1.";
pub const HEAD2: &str = "h2.";

/// `‖p − p′‖₁ / K` for two probability vectors.
pub fn mcda_discrepancy(p: &[f64], p_prime: &[f64]) -> Result<f64> {
    if p.len() != p_prime.len() {
        return Err(Error::Dimension {
            context: "discrepancy operands",
            expected: p.len(),
            found: p_prime.len(),
        });
    }
    check_distribution(p)?;
    check_distribution(p_prime)?;
    let l1: f64 = p.iter().zip(p_prime).map(|(a, b)| (a - b).abs()).sum();
    Ok(l1 / p.len() as f64)
}

fn check_distribution(p: &[f64]) -> Result<()> {
    if p.is_empty() {
        return Err(Error::Empty("probability vector"));
    }
    if p.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
        return Err(Error::invalid("probabilities must be finite and nonnegative"));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!("probabilities sum to {total}, not 1")));
    }
    Ok(())
}

/// Shared generator and two linear softmax heads.
#[derive(Debug, Clone, PartialEq)]
pub struct McdaModel {
    generator: NetArch,
    head: NetArch,
    params: ParamVector,
    /// Repetitions of the generator-only step.
    pub n: usize,
}

impl McdaModel {
    pub fn init<R: Rng + ?Sized>(config: &TrainConfig, rng: &mut R) -> Result<Self> {
        let generator = config.arch()?;
        let head = head_arch(config)?;
        let b = generator.push_params(ParamVector::builder(), GENERATOR, rng);
        let b = head.push_params(b, HEAD1, rng);
        let params = head.push_params(b, HEAD2, rng).build();
        Ok(Self {
            generator,
            head,
            params,
            n: config.mcda_n,
        })
    }

    pub fn from_params(config: &TrainConfig, params: ParamVector) -> Result<Self> {
        let generator = config.arch()?;
        let head = head_arch(config)?;
        generator.check_params(&params, GENERATOR)?;
        head.check_params(&params, HEAD1)?;
        head.check_params(&params, HEAD2)?;
        if params.layout().segments().len() != 2 * (generator.num_layers() + 2) {
            return Err(Error::invalid("unexpected segments in MCDA parameters"));
        }
        Ok(Self {
            generator,
            head,
            params,
            n: config.mcda_n,
        })
    }

    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamVector {
        &mut self.params
    }

    pub fn classes(&self) -> usize {
        self.head.output_dim()
    }

    fn check_input(&self, x: &Mat) -> Result<()> {
        if x.cols() != self.generator.input_dim() {
            return Err(Error::Dimension {
                context: "generator input",
                expected: self.generator.input_dim(),
                found: x.cols(),
            });
        }
        Ok(())
    }

    fn logits<'t>(&self, tape: &'t Tape, p: Binding<'_>, x: &Mat) -> Result<(Var<'t>, Var<'t>), DiffError> {
        let feat = self.generator.forward(tape, p, GENERATOR, tape.constant(x.clone()))?;
        Ok((self.head.forward(tape, p, HEAD1, feat)?, self.head.forward(tape, p, HEAD2, feat)?))
    }

    /// Class probabilities of head `h1` (`second = false`) or `h2`.
    pub fn probabilities(&self, x: &Mat, second: bool) -> Result<Mat> {
        self.check_input(x)?;
        let tape = Tape::new();
        let (a, b) = self.logits(&tape, Binding::Frozen(&self.params), x)?;
        let p = softmax_rows(if second { b } else { a });
        if let Some(op) = tape.non_finite_op() {
            return Err(DiffError::NonFinite { op }.into());
        }
        let v = p.value();
        Ok((*v).clone())
    }

    pub fn predict(&self, x: &Mat) -> Result<Vec<usize>> {
        let p = self.probabilities(x, false)?;
        Ok((0..p.rows()).map(|i| argmax(p.row(i))).collect())
    }
}

fn head_arch(config: &TrainConfig) -> Result<NetArch> {
    NetArch::new(vec![config.feature_dim, config.classes], Activation::Tanh)
}

fn softmax_rows(logits: Var<'_>) -> Var<'_> {
    logits.add_col(logits.log_sum_exp_rows().neg()).exp()
}

/// Mean cross-entropy `−log p(y)` of a head over a labeled batch.
fn cross_entropy<'t>(logits: Var<'t>, y: &[usize]) -> Var<'t> {
    crate::gp_head::log_softmax_at(logits, y).mean().neg()
}

/// Mean over the batch of `‖p1 − p2‖₁ / K`.
fn discrepancy<'t>(a: Var<'t>, b: Var<'t>, classes: usize) -> Var<'t> {
    softmax_rows(a).sub(softmax_rows(b)).abs().sum_rows().mean().scale(1.0 / classes as f64)
}

/// Source and target mini-batch for one MCDA round.
#[derive(Debug, Clone, Copy)]
pub struct McdaBatch<'a> {
    pub source_x: &'a Mat,
    pub source_y: &'a [usize],
    pub target_x: &'a Mat,
}

/// The three MCDA steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum McdaStep {
    /// All parameters against `L_S`.
    Source,
    /// Heads only against `L_S − L_adv`.
    Heads,
    /// Generator only against `L_adv`.
    Generator,
}

/// `(L_S, L_adv)` at the model's current parameters.
pub fn mcda_losses(model: &McdaModel, batch: &McdaBatch<'_>) -> Result<(f64, f64)> {
    check_batch(model, batch)?;
    let tape = Tape::new();
    let (ls, ladv) = record_mcda(&tape, model, Binding::Frozen(&model.params), batch)?;
    if let Some(op) = tape.non_finite_op() {
        return Err(DiffError::NonFinite { op }.into());
    }
    Ok((ls.scalar(), ladv.scalar()))
}

pub(crate) fn record_mcda<'t>(tape: &'t Tape, model: &McdaModel, p: Binding<'_>, batch: &McdaBatch<'_>) -> Result<(Var<'t>, Var<'t>), DiffError> {
    let (s1, s2) = model.logits(tape, p, batch.source_x)?;
    let ls = cross_entropy(s1, batch.source_y).add(cross_entropy(s2, batch.source_y));
    let (t1, t2) = model.logits(tape, p, batch.target_x)?;
    Ok((ls, discrepancy(t1, t2, model.classes())))
}

fn check_batch(model: &McdaModel, batch: &McdaBatch<'_>) -> Result<()> {
    if batch.source_y.is_empty() {
        return Err(Error::Empty("source batch"));
    }
    if batch.target_x.rows() == 0 {
        return Err(Error::Empty("target batch"));
    }
    if batch.source_x.rows() != batch.source_y.len() {
        return Err(Error::invalid("source inputs and labels differ in count"));
    }
    model.check_input(batch.source_x)?;
    model.check_input(batch.target_x)?;
    if let Some(&label) = batch.source_y.iter().find(|&&l| l >= model.classes()) {
        return Err(Error::LabelOutOfRange {
            label,
            classes: model.classes(),
        });
    }
    Ok(())
}

/// Separate Adam states for the three steps.
#[derive(Debug, Clone, PartialEq)]
pub struct McdaOptimizer {
    hp: AdamParams,
    states: [AdamState; 3],
}

impl McdaOptimizer {
    pub fn new(model: &McdaModel, hp: AdamParams) -> Self {
        let s = AdamState::for_params(&model.params);
        Self {
            hp,
            states: [s.clone(), s.clone(), s],
        }
    }

    /// Runs one step on `batch`; returns the step's objective before the
    /// update.
    pub fn step(&mut self, model: &mut McdaModel, which: McdaStep, batch: &McdaBatch<'_>) -> Result<f64> {
        check_batch(model, batch)?;
        let objective = crate::diffmath::objective(|tape, p| {
            let (ls, ladv) = record_mcda(tape, model, p, batch)?;
            Ok(match which {
                McdaStep::Source => ls,
                McdaStep::Heads => ls.sub(ladv),
                McdaStep::Generator => ladv,
            })
        });
        let (value, grad): (f64, Gradient) = value_and_grad(objective, &model.params)?;
        let (idx, ranges) = match which {
            McdaStep::Source => (0, vec![0..model.params.len()]),
            McdaStep::Heads => {
                let mut r = model.params.ranges_with_prefix(HEAD1);
                r.extend(model.params.ranges_with_prefix(HEAD2));
                (1, r)
            }
            McdaStep::Generator => (2, model.params.ranges_with_prefix(GENERATOR)),
        };
        adam_update_ranges(&mut model.params, &grad, &mut self.states[idx], &self.hp, &ranges)?;
        Ok(value)
    }
}

pub fn evaluate_mcda(model: &McdaModel, set: &LabeledSet) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    Ok(accuracy(&model.predict(&set.x)?, &set.y))
}

/// Trains MCDA with `config.mcda_n` generator repetitions.
///
/// History columns: `ll` is `−L_S`, `kl` is 0, `ms` is `L_adv`,
/// `total_inference` is `L_S` and `total_model` is `L_S − L_adv`, all taken
/// before the round's first update.
pub fn train_mcda(config: &TrainConfig, data: &DomainDataset) -> Result<(McdaModel, TrainHistory)> {
    run_mcda(config, data, true)
}

/// The generator and head `h1` trained on source cross-entropy alone.
pub fn train_source_only_softmax(config: &TrainConfig, data: &DomainDataset) -> Result<(McdaModel, TrainHistory)> {
    run_mcda(config, data, false)
}

fn run_mcda(config: &TrainConfig, data: &DomainDataset, adversarial: bool) -> Result<(McdaModel, TrainHistory)> {
    config.validate()?;
    check_data(config, data)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = McdaModel::init(config, &mut rng)?;
    let mut opt = McdaOptimizer::new(&model, config.adam());
    let mut history = TrainHistory::new();
    let mut src = BatchSampler::new(data.source.len(), &mut rng);
    let mut tgt = BatchSampler::new(data.target_train.rows(), &mut rng);

    for round in 1..=config.steps {
        let fail = diverged(round);
        let sb = data.source.subset(&src.next(config.batch_source, &mut rng));
        let tx = select_rows(&data.target_train, &tgt.next(config.batch_target, &mut rng));
        let batch = McdaBatch {
            source_x: &sb.x,
            source_y: &sb.y,
            target_x: &tx,
        };
        let (ls, ladv) = mcda_losses(&model, &batch).map_err(&fail)?;
        opt.step(&mut model, McdaStep::Source, &batch).map_err(&fail)?;
        if adversarial {
            opt.step(&mut model, McdaStep::Heads, &batch).map_err(&fail)?;
            for _ in 0..model.n {
                opt.step(&mut model, McdaStep::Generator, &batch).map_err(&fail)?;
            }
        }
        let mut rec = TrainRecord {
            round,
            ll: -ls,
            kl: 0.0,
            ms: ladv,
            total_inference: ls,
            total_model: ls - ladv,
            src_acc: None,
            tgt_acc: None,
        };
        if round == config.steps || (config.eval_every > 0 && round % config.eval_every == 0) {
            rec.src_acc = Some(evaluate_mcda(&model, &data.source).map_err(&fail)?);
            if !data.target_test.is_empty() {
                rec.tgt_acc = Some(evaluate_mcda(&model, &data.target_test).map_err(&fail)?);
            }
        }
        history.push(rec);
    }
    Ok((model, history))
}

/// The GPDA model trained with the separation weight set to zero, so the
/// target batch has no influence on any update.
pub fn train_source_only(config: &TrainConfig, data: &DomainDataset) -> Result<(GpdaModel, TrainHistory)> {
    let config = TrainConfig { lambda: 0.0, ..config.clone() };
    crate::trainer::train(&config, data)
}

/// Per-sample pseudo-distance records of head `h1` and their histogram.
pub fn mcda_report(model: &McdaModel, set: &LabeledSet) -> Result<(Vec<UncertaintyRecord>, Histogram)> {
    if set.is_empty() {
        return Err(Error::Empty("report set"));
    }
    let p = model.probabilities(&set.x, false)?;
    let records = (0..p.rows())
        .map(|i| score_probabilities(i, p.row(i), Some(set.y[i])))
        .collect::<Result<Vec<_>>>()?;
    let hist = Histogram::build(&scored(&records, |r| r.bpd));
    Ok((records, hist))
}

pub fn save_mcda_checkpoint(model: &McdaModel, config: &TrainConfig, path: &Path) -> Result<()> {
    let bytes = checkpoint::encode(checkpoint::MCDA_MAGIC, &config.to_json(), &model.params);
    checkpoint::write_file(path, &bytes)?;
    Ok(())
}

pub fn load_mcda_checkpoint(path: &Path) -> Result<(McdaModel, TrainConfig)> {
    let c = checkpoint::read_file(checkpoint::MCDA_MAGIC, path)?;
    let config: TrainConfig =
        serde_json::from_str(&c.config_json).map_err(|e| CheckpointError::Format(format!("config: {e}")))?;
    Ok((McdaModel::from_params(&config, c.params)?, config))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::two_moons_shift;
    use crate::gp_head::{log_likelihood_softmax, WeightSample};

    fn small() -> TrainConfig {
        TrainConfig {
            hidden: vec![8],
            feature_dim: 4,
            steps: 4,
            lr: 0.01,
            ..Default::default()
        }
    }

    #[test]
    fn discrepancy_examples() {
        assert_eq!(mcda_discrepancy(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
        assert_eq!(mcda_discrepancy(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 1.0);
        let (p, q) = ([0.2, 0.5, 0.3], [0.6, 0.1, 0.3]);
        let d = mcda_discrepancy(&p, &q).unwrap();
        assert!(d <= 2.0 / 3.0);
        assert_eq!(d, mcda_discrepancy(&q, &p).unwrap());
        assert!(mcda_discrepancy(&[0.5, 0.6], &[0.5, 0.5]).is_err());
        assert!(mcda_discrepancy(&[1.0], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn cross_entropy_is_negated_log_likelihood() {
        let logits = Mat::from_rows(&[vec![0.3, -1.2, 2.0]]);
        let tape = Tape::new();
        let ce = cross_entropy(tape.constant(logits.clone()), &[1]).scalar();
        // Identity features turn the weight rows into the logits.
        let w = WeightSample { w: Mat::from_rows(&[vec![0.3], vec![-1.2], vec![2.0]]) };
        let ll = log_likelihood_softmax(&w, &[1.0], 1).unwrap();
        assert!((ce + ll).abs() < 1e-12);
    }

    fn round_batch(data: &DomainDataset) -> (LabeledSet, Mat) {
        let idx: Vec<usize> = (0..16).collect();
        (data.source.subset(&idx), select_rows(&data.target_train, &idx))
    }

    #[test]
    fn steps_respect_fix_rules() {
        let data = two_moons_shift(40, 30.0, 0.1, 2).unwrap();
        let cfg = small();
        let mut model = McdaModel::init(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let mut opt = McdaOptimizer::new(&model, cfg.adam());
        let (sb, tx) = round_batch(&data);
        let batch = McdaBatch {
            source_x: &sb.x,
            source_y: &sb.y,
            target_x: &tx,
        };
        let part = |m: &McdaModel, prefix: &str| m.params().extract(prefix).values().to_vec();

        opt.step(&mut model, McdaStep::Source, &batch).unwrap();
        let before = model.clone();
        opt.step(&mut model, McdaStep::Heads, &batch).unwrap();
        assert_eq!(part(&before, GENERATOR), part(&model, GENERATOR));
        assert_ne!(part(&before, HEAD1), part(&model, HEAD1));

        let before = model.clone();
        opt.step(&mut model, McdaStep::Generator, &batch).unwrap();
        assert_eq!(part(&before, HEAD1), part(&model, HEAD1));
        assert_eq!(part(&before, HEAD2), part(&model, HEAD2));
        assert_ne!(part(&before, GENERATOR), part(&model, GENERATOR));
    }

    #[test]
    fn identical_heads_have_no_discrepancy() {
        let data = two_moons_shift(40, 30.0, 0.1, 2).unwrap();
        let mut model = McdaModel::init(&small(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let h1 = model.params().extract(HEAD1).values().to_vec();
        for r in model.params().ranges_with_prefix(HEAD2) {
            let off = r.start - model.params().ranges_with_prefix(HEAD2)[0].start;
            let len = r.len();
            model.params_mut().values_mut()[r].copy_from_slice(&h1[off..off + len]);
        }
        let (sb, tx) = round_batch(&data);
        let batch = McdaBatch {
            source_x: &sb.x,
            source_y: &sb.y,
            target_x: &tx,
        };
        assert_eq!(mcda_losses(&model, &batch).unwrap().1, 0.0);
    }

    #[test]
    fn mcda_is_deterministic_and_logs_every_round() {
        let data = two_moons_shift(40, 30.0, 0.1, 2).unwrap();
        for n in [0, 2] {
            let cfg = TrainConfig { mcda_n: n, ..small() };
            let a = train_mcda(&cfg, &data).unwrap();
            assert_eq!(a, train_mcda(&cfg, &data).unwrap());
            assert_eq!(a.1.len(), 4);
            assert!(a.1.records().iter().all(|r| r.ms.is_finite() && r.total_model.is_finite()));
        }
    }

    #[test]
    fn source_only_ignores_target_inputs() {
        let data = two_moons_shift(40, 30.0, 0.1, 2).unwrap();
        let mut moved = data.clone();
        moved.target_train = moved.target_train.map(|v| v * 3.0 + 1.0);
        let cfg = TrainConfig { draws: 4, ..small() };
        let a = train_source_only(&cfg, &data).unwrap().0;
        let b = train_source_only(&cfg, &moved).unwrap().0;
        assert_eq!(a, b);
    }

    #[test]
    fn checkpoint_round_trip() {
        let data = two_moons_shift(40, 30.0, 0.1, 2).unwrap();
        let cfg = small();
        let (model, _) = train_mcda(&cfg, &data).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.mcda");
        save_mcda_checkpoint(&model, &cfg, &path).unwrap();
        let (back, _) = load_mcda_checkpoint(&path).unwrap();
        assert_eq!(back, model);
        let (records, hist) = mcda_report(&back, &data.target_test).unwrap();
        assert_eq!(hist.total(), records.len());
        assert!(records.iter().all(|r| r.bpd.unwrap() >= 0.0));
    }
}
