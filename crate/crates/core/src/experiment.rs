//! Multi-seed method comparisons and hyperparameter sweeps.
//!
//! Runs are independent and execute in parallel; results always come back
//! in input order.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{evaluate_mcda, train_mcda, train_source_only, train_source_only_softmax};
use crate::datagen::DomainDataset;
use crate::error::{Error, Result};
use crate::trainer::{evaluate, train, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Gpda,
    SourceOnly,
    SourceOnlySoftmax,
    Mcda,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Gpda, Method::Mcda, Method::SourceOnly, Method::SourceOnlySoftmax];

    pub fn name(self) -> &'static str {
        match self {
            Method::Gpda => "gpda",
            Method::SourceOnly => "source-only",
            Method::SourceOnlySoftmax => "source-only-softmax",
            Method::Mcda => "mcda",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown method `{s}`")))
    }
}

/// Accuracies of one trained model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub method: Method,
    pub seed: u64,
    pub source_acc: f64,
    pub target_acc: f64,
}

/// Trains `method` with `config` and scores it on the source set and the
/// held-out target set.
pub fn run(method: Method, config: &TrainConfig, data: &DomainDataset) -> Result<RunResult> {
    if data.target_test.is_empty() {
        return Err(Error::Empty("target test set"));
    }
    let (source_acc, target_acc) = match method {
        Method::Gpda | Method::SourceOnly => {
            let (model, _) = if method == Method::Gpda {
                train(config, data)?
            } else {
                train_source_only(config, data)?
            };
            (evaluate(&model, &data.source)?, evaluate(&model, &data.target_test)?)
        }
        Method::Mcda | Method::SourceOnlySoftmax => {
            let (model, _) = if method == Method::Mcda {
                train_mcda(config, data)?
            } else {
                train_source_only_softmax(config, data)?
            };
            (evaluate_mcda(&model, &data.source)?, evaluate_mcda(&model, &data.target_test)?)
        }
    };
    Ok(RunResult {
        method,
        seed: config.seed,
        source_acc,
        target_acc,
    })
}

/// Every method at every seed, method-major.
pub fn compare(methods: &[Method], config: &TrainConfig, data: &DomainDataset, seeds: &[u64]) -> Result<Vec<RunResult>> {
    if methods.is_empty() || seeds.is_empty() {
        return Err(Error::invalid("compare needs at least one method and one seed"));
    }
    let jobs: Vec<(Method, u64)> = methods.iter().flat_map(|&m| seeds.iter().map(move |&s| (m, s))).collect();
    jobs.par_iter()
        .map(|&(m, seed)| run(m, &TrainConfig { seed, ..config.clone() }, data))
        .collect()
}

/// Mean target accuracy per method, in first-appearance order.
pub fn mean_target_accuracy(results: &[RunResult]) -> Vec<(Method, f64)> {
    let mut out: Vec<(Method, f64, usize)> = Vec::new();
    for r in results {
        match out.iter_mut().find(|e| e.0 == r.method) {
            Some(e) => {
                e.1 += r.target_acc;
                e.2 += 1;
            }
            None => out.push((r.method, r.target_acc, 1)),
        }
    }
    out.into_iter().map(|(m, s, n)| (m, s / n as f64)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepParam {
    Lambda,
    Alpha,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::Lambda => "lambda",
            SweepParam::Alpha => "alpha",
        }
    }

    fn apply(self, config: &TrainConfig, value: f64) -> TrainConfig {
        match self {
            SweepParam::Lambda => TrainConfig { lambda: value, ..config.clone() },
            SweepParam::Alpha => TrainConfig { alpha: value, ..config.clone() },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub param: SweepParam,
    pub value: f64,
    pub seed: u64,
    pub target_acc: f64,
}

/// One GPDA run per grid value and seed, grid-major.
pub fn ablate(param: SweepParam, grid: &[f64], config: &TrainConfig, data: &DomainDataset, seeds: &[u64]) -> Result<Vec<SweepRow>> {
    if grid.is_empty() {
        return Err(Error::invalid(format!("empty {} grid", param.name())));
    }
    if seeds.is_empty() {
        return Err(Error::invalid("ablation needs at least one seed"));
    }
    let jobs: Vec<(f64, u64)> = grid.iter().flat_map(|&v| seeds.iter().map(move |&s| (v, s))).collect();
    jobs.par_iter()
        .map(|&(value, seed)| {
            let cfg = TrainConfig { seed, ..param.apply(config, value) };
            let r = run(Method::Gpda, &cfg, data)?;
            Ok(SweepRow {
                param,
                value,
                seed,
                target_acc: r.target_acc,
            })
        })
        .collect()
}

/// Mean target accuracy per grid value, in grid order.
pub fn sweep_means(rows: &[SweepRow]) -> Vec<(f64, f64)> {
    let mut out: Vec<(f64, f64, usize)> = Vec::new();
    for r in rows {
        match out.iter_mut().find(|e| e.0 == r.value) {
            Some(e) => {
                e.1 += r.target_acc;
                e.2 += 1;
            }
            None => out.push((r.value, r.target_acc, 1)),
        }
    }
    out.into_iter().map(|(v, s, n)| (v, s / n as f64)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::two_moons_shift;

    fn tiny() -> TrainConfig {
        TrainConfig {
            hidden: vec![6],
            feature_dim: 3,
            draws: 2,
            steps: 3,
            ..Default::default()
        }
    }

    #[test]
    fn compare_is_ordered_and_deterministic() {
        let data = two_moons_shift(30, 30.0, 0.1, 0).unwrap();
        let methods = [Method::Gpda, Method::SourceOnly, Method::Mcda];
        let a = compare(&methods, &tiny(), &data, &[3, 4]).unwrap();
        assert_eq!(a.len(), 6);
        assert_eq!((a[0].method, a[0].seed), (Method::Gpda, 3));
        assert_eq!((a[5].method, a[5].seed), (Method::Mcda, 4));
        assert_eq!(a, compare(&methods, &tiny(), &data, &[3, 4]).unwrap());
        assert_eq!(mean_target_accuracy(&a).len(), 3);
    }

    #[test]
    fn ablate_shapes_and_errors() {
        let data = two_moons_shift(30, 30.0, 0.1, 0).unwrap();
        let rows = ablate(SweepParam::Lambda, &[0.0, 50.0], &tiny(), &data, &[1, 2]).unwrap();
        assert_eq!(rows.len(), 4);
        assert_eq!(sweep_means(&rows).len(), 2);
        assert!(ablate(SweepParam::Alpha, &[], &tiny(), &data, &[1]).is_err());
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
    }
}
