//! Flag, config-file and default merging.

use std::path::{Path, PathBuf};

use gpda_core::datagen::DatasetSpec;
use gpda_core::TrainConfig;
use serde::Deserialize;
use toml::{Table, Value};

use crate::args::{DataArgs, DatasetKind, HyperArgs, Preset};
use crate::failure::{CmdResult, Failure};

/// Everything a config file may hold. Run manifests parse as config files,
/// so their bookkeeping keys are accepted and ignored.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub train: Option<Table>,
    pub dataset: Option<Table>,
    pub method: Option<String>,
    pub methods: Option<Vec<String>>,
    pub seeds: Option<Vec<u64>>,
    pub lambda_grid: Option<Vec<f64>>,
    pub alpha_grid: Option<Vec<f64>>,
    #[serde(rename = "checkpoint")]
    _checkpoint: Option<Value>,
    #[serde(rename = "split")]
    _split: Option<Value>,
    #[serde(rename = "tool")]
    _tool: Option<Value>,
    #[serde(rename = "version")]
    _version: Option<Value>,
    #[serde(rename = "command")]
    _command: Option<Value>,
    #[serde(rename = "seed")]
    _seed: Option<Value>,
    #[serde(rename = "duration_s")]
    _duration_s: Option<Value>,
    #[serde(rename = "provenance")]
    _provenance: Option<Value>,
    #[serde(rename = "outputs")]
    _outputs: Option<Value>,
}

pub fn load_config(path: Option<&Path>) -> CmdResult<ConfigFile> {
    let Some(path) = path else {
        return Ok(ConfigFile::default());
    };
    let text = std::fs::read_to_string(path).map_err(|e| Failure::usage(format!("--config {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| Failure::usage(format!("--config {}: {e}", path.display())))
}

fn kind_name(kind: DatasetKind) -> &'static str {
    match kind {
        DatasetKind::TwoMoons => "two-moons",
        DatasetKind::Blobs => "blobs",
        DatasetKind::Csv => "csv",
    }
}

fn default_table(kind: DatasetKind) -> Table {
    let spec = match kind {
        DatasetKind::TwoMoons => DatasetSpec::default(),
        DatasetKind::Blobs => DatasetSpec::Blobs {
            classes: 3,
            n_per_class: 200,
            shift: vec![2.0, 2.0],
            scale: 1.0,
            seed: 0,
        },
        DatasetKind::Csv => {
            let mut t = Table::new();
            t.insert("kind".into(), "csv".into());
            return t;
        }
    };
    to_table(&spec)
}

fn to_table<T: serde::Serialize>(v: &T) -> Table {
    match Value::try_from(v) {
        Ok(Value::Table(t)) => t,
        _ => unreachable!("structs serialize to tables"),
    }
}

/// Dataset from defaults, the file's `[dataset]` table and data flags.
pub fn resolve_dataset(flags: &DataArgs, file: Option<&Table>) -> CmdResult<DatasetSpec> {
    let file_kind = file.and_then(|t| t.get("kind")).and_then(Value::as_str);
    let mut table = match (flags.dataset, file) {
        (Some(k), Some(t)) if file_kind == Some(kind_name(k)) => t.clone(),
        (Some(k), _) => default_table(k),
        (None, Some(t)) => t.clone(),
        (None, None) => default_table(DatasetKind::TwoMoons),
    };
    let kind = table.get("kind").and_then(Value::as_str).unwrap_or("").to_owned();

    let path_value = |p: &PathBuf| Value::String(p.to_string_lossy().into_owned());
    let overrides: [(&str, &str, Option<Value>, &[&str]); 11] = [
        ("--n", "n", flags.n.map(|v| Value::Integer(v as i64)), &["two-moons"]),
        ("--rotation", "rotation", flags.rotation.map(Value::Float), &["two-moons"]),
        ("--noise-sd", "noise_sd", flags.noise_sd.map(Value::Float), &["two-moons"]),
        ("--data-seed", "seed", flags.data_seed.map(|v| Value::Integer(v as i64)), &["two-moons", "blobs"]),
        ("--classes", "classes", flags.classes.map(|v| Value::Integer(v as i64)), &["blobs", "csv"]),
        ("--n-per-class", "n_per_class", flags.n_per_class.map(|v| Value::Integer(v as i64)), &["blobs"]),
        (
            "--shift",
            "shift",
            flags.shift.as_ref().map(|s| Value::Array(s.iter().map(|&v| Value::Float(v)).collect())),
            &["blobs"],
        ),
        ("--scale", "scale", flags.scale.map(Value::Float), &["blobs"]),
        ("--source", "source", flags.source.as_ref().map(path_value), &["csv"]),
        ("--target-train", "target_train", flags.target_train.as_ref().map(path_value), &["csv"]),
        ("--target-test", "target_test", flags.target_test.as_ref().map(path_value), &["csv"]),
    ];
    for (flag, key, value, kinds) in overrides {
        let Some(value) = value else { continue };
        if !kinds.contains(&kind.as_str()) {
            return Err(Failure::usage(format!("{flag} does not apply to `{kind}` datasets")));
        }
        table.insert(key.into(), value);
    }
    if kind == "csv" {
        for (flag, key) in [("--source", "source"), ("--target-train", "target_train"), ("--target-test", "target_test")] {
            if !table.contains_key(key) {
                return Err(Failure::usage(format!("the csv dataset needs {flag} <PATH>")));
            }
        }
    }
    Value::Table(table)
        .try_into()
        .map_err(|e| Failure::usage(format!("dataset configuration: {e}")))
}

/// Training configuration from the preset, the file's `[train]` table and
/// hyperparameter flags.
pub fn resolve_train(flags: &HyperArgs, file: Option<&Table>) -> CmdResult<TrainConfig> {
    let base = match flags.preset.unwrap_or(Preset::Default) {
        Preset::Default => TrainConfig::default(),
        Preset::Toy => TrainConfig::toy(),
    };
    let mut table = to_table(&base);
    if let Some(file) = file {
        for (k, v) in file {
            table.insert(k.clone(), v.clone());
        }
    }
    let mut c: TrainConfig = Value::Table(table)
        .try_into()
        .map_err(|e| Failure::usage(format!("[train] configuration: {e}")))?;

    macro_rules! set {
        ($($field:ident <- $flag:ident),* $(,)?) => {
            $(if let Some(v) = flags.$flag.clone() { c.$field = v; })*
        };
    }
    set!(
        steps <- steps,
        seed <- seed,
        lambda <- lambda,
        alpha <- alpha,
        margin <- margin,
        draws <- draws,
        lr <- lr,
        beta1 <- beta1,
        beta2 <- beta2,
        batch_source <- batch_source,
        batch_target <- batch_target,
        mcda_n <- mcda_n,
        hidden <- hidden,
        feature_dim <- feature_dim,
        eval_every <- eval_every,
    );
    if let Some(m) = &flags.bayes_mode {
        c.bayes_error_mode = m.parse().map_err(|e| Failure::usage(format!("--bayes-mode: {e}")))?;
    }
    if let Some(a) = &flags.activation {
        c.activation = a.parse().map_err(|e| Failure::usage(format!("--activation: {e}")))?;
    }
    Ok(c)
}
