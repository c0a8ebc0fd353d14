//! Prediction-certainty scores and correct-vs-incorrect cohort reports.

use std::io::Write;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::datagen::LabeledSet;
use crate::diffmath::{argmax, argmax_excluding};
use crate::error::{Error, Result};
use crate::trainer::GpdaModel;

/// Number of histogram bins.
pub const HIST_BINS: usize = 50;
/// Posterior standard deviations are floored here before scoring, so a
/// zero feature vector still yields finite scores.
pub const SIGMA_FLOOR: f64 = 1e-12;
pub const REPORT_HEADER: [&str; 8] = ["id", "pred", "runner_up", "true", "correct", "bd", "bayes_err", "bpd"];
pub const HISTOGRAM_HEADER: [&str; 4] = ["bin_lo", "bin_hi", "count_correct", "count_incorrect"];

/// Threshold used by [`bayes_error`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BayesMode {
    /// `D = (μ* − μ†) / sqrt((σ*² + σ†²)/2)`.
    #[default]
    AsWritten,
    /// Equal-cost crossing point `D = (σ†μ* + σ*μ†) / (σ* + σ†)`.
    Midpoint,
}

impl FromStr for BayesMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "as-written" | "as_written" => Ok(Self::AsWritten),
            "midpoint" => Ok(Self::Midpoint),
            other => Err(Error::invalid(format!("unknown Bayes-error mode `{other}` (as-written|midpoint)"))),
        }
    }
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

fn check_sigma(s: f64) -> Result<()> {
    if s > 0.0 && s.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("standard deviation must be positive, got {s}")))
    }
}

/// Bhattacharyya distance between `N(μ1, σ1²)` and `N(μ2, σ2²)`.
pub fn bhattacharyya(mu1: f64, sigma1: f64, mu2: f64, sigma2: f64) -> Result<f64> {
    check_sigma(sigma1)?;
    check_sigma(sigma2)?;
    let (v1, v2) = (sigma1 * sigma1, sigma2 * sigma2);
    let d = mu1 - mu2;
    let bd = 0.25 * (0.25 * (v1 / v2 + v2 / v1 + 2.0)).ln() + 0.25 * d * d / (v1 + v2);
    Ok(bd.max(0.0))
}

/// Error rate of thresholding at `D` between the top posterior
/// `N(μ*, σ*²)` and the runner-up `N(μ†, σ†²)`.
pub fn bayes_error(mu_star: f64, sigma_star: f64, mu_dag: f64, sigma_dag: f64, mode: BayesMode) -> Result<f64> {
    check_sigma(sigma_star)?;
    check_sigma(sigma_dag)?;
    if !(mu_star >= mu_dag) {
        return Err(Error::invalid(format!("top mean {mu_star} is below the runner-up mean {mu_dag}")));
    }
    let d = match mode {
        BayesMode::AsWritten => (mu_star - mu_dag) / ((sigma_star.powi(2) + sigma_dag.powi(2)) / 2.0).sqrt(),
        BayesMode::Midpoint => (sigma_dag * mu_star + sigma_star * mu_dag) / (sigma_star + sigma_dag),
    };
    let rate = 0.5 * (normal_cdf((mu_dag - d) / sigma_dag) + normal_cdf((d - mu_star) / sigma_star));
    Ok(rate.clamp(0.0, 1.0))
}

/// `log p(j*) − log p(j†)` over the two largest probabilities.
pub fn bpd(probs: &[f64]) -> Result<f64> {
    if probs.len() < 2 {
        return Err(Error::invalid("need at least two class probabilities"));
    }
    if probs.iter().any(|p| !(*p >= 0.0) || !p.is_finite()) {
        return Err(Error::invalid("probabilities must be finite and nonnegative"));
    }
    let total: f64 = probs.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!("probabilities sum to {total}, not 1")));
    }
    let top = argmax(probs);
    let second = argmax_excluding(probs, top);
    if probs[second] <= 0.0 {
        return Err(Error::invalid("the two largest probabilities must be positive"));
    }
    Ok(probs[top].ln() - probs[second].ln())
}

/// Certainty scores of one prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyRecord {
    pub id: usize,
    pub pred: usize,
    pub runner_up: usize,
    pub truth: Option<usize>,
    pub correct: bool,
    pub bd: Option<f64>,
    pub bayes_err: Option<f64>,
    pub bpd: Option<f64>,
}

/// Scores one sample from its posterior moments.
pub fn score_moments(id: usize, mu: &[f64], sigma: &[f64], truth: Option<usize>, mode: BayesMode) -> Result<UncertaintyRecord> {
    if mu.len() < 2 || mu.len() != sigma.len() {
        return Err(Error::invalid("moments need matching lengths of at least two"));
    }
    let pred = argmax(mu);
    let runner_up = argmax_excluding(mu, pred);
    let (ss, sd) = (sigma[pred].max(SIGMA_FLOOR), sigma[runner_up].max(SIGMA_FLOOR));
    Ok(UncertaintyRecord {
        id,
        pred,
        runner_up,
        truth,
        correct: truth == Some(pred),
        bd: Some(bhattacharyya(mu[pred], ss, mu[runner_up], sd)?),
        bayes_err: Some(bayes_error(mu[pred], ss, mu[runner_up], sd, mode)?),
        bpd: None,
    })
}

/// Scores one sample of a point-estimate classifier from its probabilities.
pub fn score_probabilities(id: usize, probs: &[f64], truth: Option<usize>) -> Result<UncertaintyRecord> {
    let value = bpd(probs)?;
    let pred = argmax(probs);
    Ok(UncertaintyRecord {
        id,
        pred,
        runner_up: argmax_excluding(probs, pred),
        truth,
        correct: truth == Some(pred),
        bd: None,
        bayes_err: None,
        bpd: Some(value),
    })
}

/// Fixed-width histogram of one score, split by correctness.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub correct: Vec<usize>,
    pub incorrect: Vec<usize>,
}

impl Histogram {
    /// [`HIST_BINS`] bins over `[0, p99]` of the pooled values; larger values
    /// fall in the last bin.
    pub fn build(values: &[(f64, bool)]) -> Self {
        Self::with_bins(values, HIST_BINS)
    }

    pub fn with_bins(values: &[(f64, bool)], bins: usize) -> Self {
        let bins = bins.max(1);
        let mut sorted: Vec<f64> = values.iter().map(|v| v.0).collect();
        sorted.sort_by(f64::total_cmp);
        let upper = if sorted.is_empty() {
            0.0
        } else {
            let rank = ((0.99 * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
            sorted[rank - 1]
        };
        let width = if upper > 0.0 { upper / bins as f64 } else { 1.0 };
        let edges = (0..=bins).map(|i| i as f64 * width).collect();
        let mut correct = vec![0; bins];
        let mut incorrect = vec![0; bins];
        for &(v, ok) in values {
            let b = ((v.max(0.0) / width) as usize).min(bins - 1);
            if ok {
                correct[b] += 1;
            } else {
                incorrect[b] += 1;
            }
        }
        Self { edges, correct, incorrect }
    }

    pub fn total(&self) -> usize {
        self.correct.iter().chain(&self.incorrect).sum()
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), csv::Error> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(writer);
        w.write_record(HISTOGRAM_HEADER)?;
        for b in 0..self.correct.len() {
            w.write_record([
                self.edges[b].to_string(),
                self.edges[b + 1].to_string(),
                self.correct[b].to_string(),
                self.incorrect[b].to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Pairs of (score, correct) for the records that carry the score.
pub fn scored(records: &[UncertaintyRecord], score: impl Fn(&UncertaintyRecord) -> Option<f64>) -> Vec<(f64, bool)> {
    records.iter().filter_map(|r| score(r).map(|v| (v, r.correct))).collect()
}

/// Median of the score over the correct (`correct = true`) or incorrect
/// cohort; `None` when the cohort is empty.
pub fn cohort_median(records: &[UncertaintyRecord], correct: bool, score: impl Fn(&UncertaintyRecord) -> Option<f64>) -> Option<f64> {
    let mut v: Vec<f64> = scored(records, score)
        .into_iter()
        .filter(|&(_, c)| c == correct)
        .map(|(x, _)| x)
        .collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

/// Per-sample records plus the BD and Bayes-error histograms.
#[derive(Debug, Clone, PartialEq)]
pub struct CohortReport {
    pub records: Vec<UncertaintyRecord>,
    pub bd_histogram: Histogram,
    pub bayes_histogram: Histogram,
}

impl CohortReport {
    pub fn median_bd(&self, correct: bool) -> Option<f64> {
        cohort_median(&self.records, correct, |r| r.bd)
    }
}

/// Scores every sample of a labeled set under the model's posterior.
pub fn cohort_report(model: &GpdaModel, set: &LabeledSet, mode: BayesMode) -> Result<CohortReport> {
    if set.is_empty() {
        return Err(Error::Empty("report set"));
    }
    let moments = model.moments(&set.x)?;
    let records = moments
        .par_iter()
        .enumerate()
        .map(|(i, m)| score_moments(i, &m.mu, &m.sigma, Some(set.y[i]), mode))
        .collect::<Result<Vec<_>>>()?;
    Ok(CohortReport {
        bd_histogram: Histogram::build(&scored(&records, |r| r.bd)),
        bayes_histogram: Histogram::build(&scored(&records, |r| r.bayes_err)),
        records,
    })
}

pub fn write_report_csv<W: Write>(records: &[UncertaintyRecord], writer: W) -> Result<(), csv::Error> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(writer);
    w.write_record(REPORT_HEADER)?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in records {
        w.write_record([
            r.id.to_string(),
            r.pred.to_string(),
            r.runner_up.to_string(),
            r.truth.map(|t| t.to_string()).unwrap_or_default(),
            u8::from(r.correct).to_string(),
            opt(r.bd),
            opt(r.bayes_err),
            opt(r.bpd),
        ])?;
    }
    w.flush()?;
    Ok(())
}
