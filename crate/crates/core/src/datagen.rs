//! Covariate-shifted source/target datasets: two synthetic generators and a
//! CSV loader/writer.
//!
//! CSV schema: header `f0,...,f{p-1},label`, one sample per row, decimal
//! reals, label blank for unlabeled rows (always blank in target-train files).

use std::f64::consts::PI;
use std::fs::File;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffmath::Mat;

/// Radius of the circle the blob centers sit on.
pub const BLOB_RADIUS: f64 = 4.0;
/// Per-coordinate standard deviation of every blob.
pub const BLOB_SD: f64 = 1.0;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid generator parameter: {0}")]
    InvalidParameter(String),
    #[error("{path}: line {line}: malformed value `{value}`")]
    Malformed { path: PathBuf, line: u64, value: String },
    #[error("{path}: line {line}: label `{label}` out of range")]
    LabelOutOfRange { path: PathBuf, line: u64, label: String },
    #[error("{path}: line {line}: expected {expected} fields, found {found}")]
    Width {
        path: PathBuf,
        line: u64,
        expected: usize,
        found: usize,
    },
    #[error("{path}: line {line}: target-train rows must not carry a label")]
    LabeledTarget { path: PathBuf, line: u64 },
    #[error("{path}: line {line}: missing label")]
    MissingLabel { path: PathBuf, line: u64 },
    #[error("{path}: bad header: {detail}")]
    Header { path: PathBuf, detail: String },
    #[error("{path} has no samples")]
    Empty { path: PathBuf },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
}

/// Inputs with labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    pub x: Mat,
    pub y: Vec<usize>,
}

impl LabeledSet {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> LabeledSet {
        LabeledSet {
            x: select_rows(&self.x, idx),
            y: idx.iter().map(|&i| self.y[i]).collect(),
        }
    }
}

pub fn select_rows(x: &Mat, idx: &[usize]) -> Mat {
    let mut data = Vec::with_capacity(idx.len() * x.cols());
    for &i in idx {
        data.extend_from_slice(x.row(i));
    }
    Mat::from_vec(idx.len(), x.cols(), data)
}

/// Where a dataset came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub generator: String,
    pub params: String,
    pub seed: Option<u64>,
}

/// Labeled source samples, unlabeled target-train samples and a labeled,
/// held-out target-test set. Target-train labels are never stored.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainDataset {
    pub source: LabeledSet,
    pub target_train: Mat,
    pub target_test: LabeledSet,
    pub input_dim: usize,
    pub classes: usize,
    pub provenance: Provenance,
}

fn invalid(msg: impl Into<String>) -> DataError {
    DataError::InvalidParameter(msg.into())
}

fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

/// Two interleaved half circles, `ceil(n/2)` of class 0 and `floor(n/2)` of
/// class 1, in shuffled order.
fn moons<R: Rng + ?Sized>(n: usize, noise_sd: f64, rng: &mut R) -> LabeledSet {
    let mut rows = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % 2;
        let t = rng.random_range(0.0..PI);
        let (x, y) = if label == 0 {
            (t.cos(), t.sin())
        } else {
            (1.0 - t.cos(), 0.5 - t.sin())
        };
        rows.push(([x + noise_sd * normal(rng), y + noise_sd * normal(rng)], label));
    }
    rows.shuffle(rng);
    LabeledSet {
        x: Mat::from_rows(&rows.iter().map(|r| r.0).collect::<Vec<_>>()),
        y: rows.iter().map(|r| r.1).collect(),
    }
}

fn rotate(x: &Mat, degrees: f64) -> Mat {
    let (s, c) = degrees.to_radians().sin_cos();
    let mut out = x.clone();
    for i in 0..x.rows() {
        let (a, b) = (x.get(i, 0), x.get(i, 1));
        out.set(i, 0, c * a - s * b);
        out.set(i, 1, s * a + c * b);
    }
    out
}

/// Shuffled 50/50 split of a labeled target sample into unlabeled-train and
/// labeled-test parts.
fn split_target<R: Rng + ?Sized>(target: LabeledSet, rng: &mut R) -> (Mat, LabeledSet) {
    let mut idx: Vec<usize> = (0..target.len()).collect();
    idx.shuffle(rng);
    let half = target.len() / 2;
    let train = select_rows(&target.x, &idx[..half]);
    (train, target.subset(&idx[half..]))
}

fn domain_rngs(seed: u64) -> (ChaCha8Rng, ChaCha8Rng) {
    let src = ChaCha8Rng::seed_from_u64(seed);
    let mut tgt = ChaCha8Rng::seed_from_u64(seed);
    tgt.set_stream(1);
    (src, tgt)
}

/// Two-moons source and the same generator rotated by `rotation_deg` about
/// the origin as target. Each domain has `n_per_domain` samples; the target
/// is split evenly into unlabeled train and labeled test halves.
pub fn two_moons_shift(n_per_domain: usize, rotation_deg: f64, noise_sd: f64, seed: u64) -> Result<DomainDataset, DataError> {
    if n_per_domain < 2 {
        return Err(invalid("two_moons_shift needs n >= 2"));
    }
    if !(noise_sd >= 0.0 && noise_sd.is_finite()) {
        return Err(invalid("noise_sd must be a nonnegative real"));
    }
    if !rotation_deg.is_finite() {
        return Err(invalid("rotation must be finite"));
    }
    let (mut src_rng, mut tgt_rng) = domain_rngs(seed);
    let source = moons(n_per_domain, noise_sd, &mut src_rng);
    let mut target = moons(n_per_domain, noise_sd, &mut tgt_rng);
    target.x = rotate(&target.x, rotation_deg);
    let (target_train, target_test) = split_target(target, &mut tgt_rng);
    Ok(DomainDataset {
        source,
        target_train,
        target_test,
        input_dim: 2,
        classes: 2,
        provenance: Provenance {
            generator: "two-moons".into(),
            params: format!("n={n_per_domain},rotation={rotation_deg},noise_sd={noise_sd}"),
            seed: Some(seed),
        },
    })
}

/// Center of blob `k` of `classes`: on a circle of radius [`BLOB_RADIUS`] in
/// the first two coordinates, zero elsewhere.
pub fn blob_center(k: usize, classes: usize, dim: usize) -> Vec<f64> {
    let angle = 2.0 * PI * k as f64 / classes as f64;
    let mut c = vec![0.0; dim];
    c[0] = BLOB_RADIUS * angle.cos();
    c[1] = BLOB_RADIUS * angle.sin();
    c
}

fn blobs<R: Rng + ?Sized>(classes: usize, n_per_class: usize, dim: usize, rng: &mut R) -> LabeledSet {
    let mut rows = Vec::with_capacity(classes * n_per_class);
    for k in 0..classes {
        let center = blob_center(k, classes, dim);
        for _ in 0..n_per_class {
            let x: Vec<f64> = center.iter().map(|c| c + BLOB_SD * normal(rng)).collect();
            rows.push((x, k));
        }
    }
    rows.shuffle(rng);
    LabeledSet {
        x: Mat::from_rows(&rows.iter().map(|r| r.0.as_slice()).collect::<Vec<_>>()),
        y: rows.iter().map(|r| r.1).collect(),
    }
}

/// `classes` isotropic Gaussian blobs as source; the target draws the same
/// blobs and maps every point `x ↦ scale·x + mean_shift`. The input
/// dimension is `mean_shift.len()` (at least 2).
pub fn gaussian_blobs_shift(
    classes: usize,
    n_per_class: usize,
    mean_shift: &[f64],
    scale: f64,
    seed: u64,
) -> Result<DomainDataset, DataError> {
    if classes < 2 {
        return Err(invalid("gaussian_blobs_shift needs at least two classes"));
    }
    if n_per_class < 1 {
        return Err(invalid("n_per_class must be positive"));
    }
    let dim = mean_shift.len();
    if dim < 2 {
        return Err(invalid("mean shift must have at least two coordinates"));
    }
    if !(scale > 0.0 && scale.is_finite()) || mean_shift.iter().any(|v| !v.is_finite()) {
        return Err(invalid("scale must be positive and the shift finite"));
    }
    let (mut src_rng, mut tgt_rng) = domain_rngs(seed);
    let source = blobs(classes, n_per_class, dim, &mut src_rng);
    let mut target = blobs(classes, n_per_class, dim, &mut tgt_rng);
    for i in 0..target.x.rows() {
        for (v, s) in target.x.row_mut(i).iter_mut().zip(mean_shift) {
            *v = scale * *v + s;
        }
    }
    let (target_train, target_test) = split_target(target, &mut tgt_rng);
    Ok(DomainDataset {
        source,
        target_train,
        target_test,
        input_dim: dim,
        classes,
        provenance: Provenance {
            generator: "blobs".into(),
            params: format!("classes={classes},n_per_class={n_per_class},shift={mean_shift:?},scale={scale}"),
            seed: Some(seed),
        },
    })
}

/// Writes samples in the CSV schema; `labels = None` leaves the label
/// column blank.
pub fn write_csv<W: Write>(writer: W, x: &Mat, labels: Option<&[usize]>) -> Result<(), csv::Error> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(writer);
    let mut header: Vec<String> = (0..x.cols()).map(|j| format!("f{j}")).collect();
    header.push("label".into());
    w.write_record(&header)?;
    for i in 0..x.rows() {
        let mut rec: Vec<String> = x.row(i).iter().map(|v| v.to_string()).collect();
        rec.push(labels.map(|l| l[i].to_string()).unwrap_or_default());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `source.csv`, `target_train.csv` and `target_test.csv` into `dir`.
pub fn write_dataset(data: &DomainDataset, dir: &Path) -> Result<[PathBuf; 3], DataError> {
    let paths = [
        dir.join("source.csv"),
        dir.join("target_train.csv"),
        dir.join("target_test.csv"),
    ];
    let parts: [(&Mat, Option<&[usize]>); 3] = [
        (&data.source.x, Some(&data.source.y)),
        (&data.target_train, None),
        (&data.target_test.x, Some(&data.target_test.y)),
    ];
    for (path, (x, y)) in paths.iter().zip(parts) {
        let file = File::create(path).map_err(|source| DataError::Io {
            path: path.clone(),
            source,
        })?;
        write_csv(file, x, y).map_err(|source| DataError::Csv {
            path: path.clone(),
            source,
        })?;
    }
    Ok(paths)
}

#[derive(Clone, Copy, PartialEq)]
enum LabelRule {
    Required,
    Forbidden,
}

struct ParsedCsv {
    x: Mat,
    y: Vec<usize>,
}

fn parse_csv<R: Read>(reader: R, path: &Path, rule: LabelRule, width: Option<usize>) -> Result<ParsedCsv, DataError> {
    let csv_err = |source| DataError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut rdr = csv::ReaderBuilder::new().flexible(true).has_headers(true).from_reader(reader);
    let header = rdr.headers().map_err(csv_err)?.clone();
    let p = header.len().checked_sub(1).filter(|&p| p > 0).ok_or_else(|| DataError::Header {
        path: path.to_path_buf(),
        detail: "need at least one feature column and a label column".into(),
    })?;
    for (j, name) in header.iter().enumerate() {
        let expected = if j == p { "label".to_string() } else { format!("f{j}") };
        if name.trim() != expected {
            return Err(DataError::Header {
                path: path.to_path_buf(),
                detail: format!("column {j} is `{name}`, expected `{expected}`"),
            });
        }
    }
    if let Some(w) = width {
        if w != p {
            return Err(DataError::Width {
                path: path.to_path_buf(),
                line: 1,
                expected: w + 1,
                found: p + 1,
            });
        }
    }
    let mut data = Vec::new();
    let mut y = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(csv_err)?;
        let line = rec.position().map_or(0, |pos| pos.line());
        if rec.len() != p + 1 {
            return Err(DataError::Width {
                path: path.to_path_buf(),
                line,
                expected: p + 1,
                found: rec.len(),
            });
        }
        for cell in rec.iter().take(p) {
            let v: f64 = cell.trim().parse().map_err(|_| DataError::Malformed {
                path: path.to_path_buf(),
                line,
                value: cell.to_string(),
            })?;
            if !v.is_finite() {
                return Err(DataError::Malformed {
                    path: path.to_path_buf(),
                    line,
                    value: cell.to_string(),
                });
            }
            data.push(v);
        }
        let label = rec[p].trim();
        match (rule, label.is_empty()) {
            (LabelRule::Forbidden, false) => {
                return Err(DataError::LabeledTarget {
                    path: path.to_path_buf(),
                    line,
                })
            }
            (LabelRule::Forbidden, true) => {}
            (LabelRule::Required, true) => {
                return Err(DataError::MissingLabel {
                    path: path.to_path_buf(),
                    line,
                })
            }
            (LabelRule::Required, false) => {
                let parsed: i64 = label.parse().map_err(|_| DataError::Malformed {
                    path: path.to_path_buf(),
                    line,
                    value: label.to_string(),
                })?;
                let l = usize::try_from(parsed).map_err(|_| DataError::LabelOutOfRange {
                    path: path.to_path_buf(),
                    line,
                    label: label.to_string(),
                })?;
                y.push((l, line));
            }
        }
    }
    let n = data.len() / p;
    if n == 0 {
        return Err(DataError::Empty { path: path.to_path_buf() });
    }
    Ok(ParsedCsv {
        x: Mat::from_vec(n, p, data),
        y: y.into_iter().map(|(l, _)| l).collect(),
    })
}

fn open(path: &Path) -> Result<File, DataError> {
    File::open(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Loads the three CSV files of a domain-adaptation task. The class count
/// is inferred as one past the largest label seen.
pub fn load_csv_dataset(source: &Path, target_train: &Path, target_test: &Path) -> Result<DomainDataset, DataError> {
    load_csv_dataset_with_classes(source, target_train, target_test, None)
}

/// As [`load_csv_dataset`], rejecting labels `>= classes` when given.
pub fn load_csv_dataset_with_classes(
    source: &Path,
    target_train: &Path,
    target_test: &Path,
    classes: Option<usize>,
) -> Result<DomainDataset, DataError> {
    let src = parse_csv(open(source)?, source, LabelRule::Required, None)?;
    let p = src.x.cols();
    let tt = parse_csv(open(target_train)?, target_train, LabelRule::Forbidden, Some(p))?;
    let te = parse_csv(open(target_test)?, target_test, LabelRule::Required, Some(p))?;

    let k = match classes {
        Some(k) => {
            for (path, set) in [(source, &src), (target_test, &te)] {
                if let Some(pos) = set.y.iter().position(|&l| l >= k) {
                    return Err(DataError::LabelOutOfRange {
                        path: path.to_path_buf(),
                        // header occupies line 1
                        line: pos as u64 + 2,
                        label: set.y[pos].to_string(),
                    });
                }
            }
            k
        }
        None => src.y.iter().chain(&te.y).copied().max().unwrap_or(0) + 1,
    };
    Ok(DomainDataset {
        source: LabeledSet { x: src.x, y: src.y },
        target_train: tt.x,
        target_test: LabeledSet { x: te.x, y: te.y },
        input_dim: p,
        classes: k.max(2),
        provenance: Provenance {
            generator: "csv".into(),
            params: format!(
                "source={},target_train={},target_test={}",
                source.display(),
                target_train.display(),
                target_test.display()
            ),
            seed: None,
        },
    })
}

/// A serializable recipe for building a [`DomainDataset`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DatasetSpec {
    TwoMoons {
        n: usize,
        rotation: f64,
        noise_sd: f64,
        seed: u64,
    },
    Blobs {
        classes: usize,
        n_per_class: usize,
        shift: Vec<f64>,
        scale: f64,
        seed: u64,
    },
    Csv {
        source: PathBuf,
        target_train: PathBuf,
        target_test: PathBuf,
        classes: Option<usize>,
    },
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::TwoMoons {
            n: 500,
            rotation: 30.0,
            noise_sd: 0.1,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn build(&self) -> Result<DomainDataset, DataError> {
        match self {
            DatasetSpec::TwoMoons {
                n,
                rotation,
                noise_sd,
                seed,
            } => two_moons_shift(*n, *rotation, *noise_sd, *seed),
            DatasetSpec::Blobs {
                classes,
                n_per_class,
                shift,
                scale,
                seed,
            } => gaussian_blobs_shift(*classes, *n_per_class, shift, *scale, *seed),
            DatasetSpec::Csv {
                source,
                target_train,
                target_test,
                classes,
            } => load_csv_dataset_with_classes(source, target_train, target_test, *classes),
        }
    }
}
