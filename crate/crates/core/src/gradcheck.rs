//! Reverse-mode gradients of every loss term against central finite
//! differences at random parameter points.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::baselines::{record_mcda, McdaBatch, McdaModel};
use crate::diffmath::{finite_diff_grad, relative_error, value_and_grad_with_fault, Binding, DiffError, Fault, Mat, Tape, Var};
use crate::error::Result;
use crate::featurenet::{Activation, FeatureNet, NetArch};
use crate::gp_head::{kl_on_tape, NoiseBatch, VariationalPosterior};
use crate::objectives::{ll_on_tape, ms_on_tape};
use crate::trainer::TrainConfig;

/// Loss terms covered by the suite, as reported.
pub const TERMS: [&str; 9] = [
    "kl/q",
    "ll/q",
    "ll/net",
    "ms/q",
    "ms/net",
    "inference/q",
    "model/net",
    "mcda_source/all",
    "mcda_adv/all",
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckOptions {
    pub points: usize,
    pub h: f64,
    pub tol: f64,
    pub seed: u64,
    #[doc(hidden)]
    pub fault: Option<Fault>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            points: 100,
            h: 1e-5,
            tol: 1e-4,
            seed: 0,
            fault: None,
        }
    }
}

/// Worst relative error seen for one term.
#[derive(Debug, Clone, PartialEq)]
pub struct TermResult {
    pub term: &'static str,
    pub worst: f64,
    /// Segment holding the largest absolute disagreement at the worst point.
    pub segment: String,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub terms: Vec<TermResult>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.terms.iter().all(|t| t.passed)
    }

    pub fn worst(&self) -> f64 {
        self.terms.iter().map(|t| t.worst).fold(0.0, f64::max)
    }
}

const K: usize = 3;
const D: usize = 3;
const BATCH: usize = 6;
const MAX_REDRAWS: usize = 1000;

struct Point {
    net: FeatureNet,
    q: VariationalPosterior,
    mcda: McdaModel,
    xs: Mat,
    ys: Vec<usize>,
    xt: Mat,
    noise: NoiseBatch,
}

fn normal_mat<R: Rng>(rows: usize, cols: usize, scale: f64, rng: &mut R) -> Mat {
    Mat::from_vec(rows, cols, (0..rows * cols).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect())
}

fn random_point<R: Rng>(rng: &mut R) -> Result<Point> {
    let arch = NetArch::new(vec![2, 5, D], Activation::Tanh)?;
    let net = FeatureNet::init(arch, rng);
    let log_var = Mat::from_vec(K, D, (0..K * D).map(|_| rng.random_range(-1.0..1.0)).collect());
    let q = VariationalPosterior::new(normal_mat(K, D, 1.0, rng), log_var)?;
    let cfg = TrainConfig {
        classes: K,
        feature_dim: D,
        hidden: vec![5],
        ..Default::default()
    };
    let mcda = McdaModel::init(&cfg, rng)?;
    Ok(Point {
        net,
        q,
        mcda,
        xs: normal_mat(BATCH, 2, 1.5, rng),
        ys: (0..BATCH).map(|_| rng.random_range(0..K)).collect(),
        xt: normal_mat(BATCH, 2, 1.5, rng),
        noise: NoiseBatch::sample(3, K, D, rng),
    })
}

/// Smallest distance to a kink of the MS loss (a hinge switching, or a change
/// in which classes hold the top two means or the largest spread) or of the
/// MCDA discrepancy (the two heads agreeing on a class).
fn kink_gap(p: &Point, alpha: f64, margin: f64) -> Result<f64> {
    let phi = p.net.features(&p.xt)?;
    let mut gap = f64::INFINITY;
    for i in 0..phi.rows() {
        let m = p.q.moments(phi.row(i))?;
        let mut mu = m.mu.clone();
        let mut sd = m.sigma.clone();
        mu.sort_by(|a, b| b.total_cmp(a));
        sd.sort_by(|a, b| b.total_cmp(a));
        let hinge = mu[1] - mu[0] + margin + alpha * sd[0];
        gap = gap.min(mu[0] - mu[1]).min(mu[1] - mu[2]).min(sd[0] - sd[1]).min(hinge.abs());
    }
    let p1 = p.mcda.probabilities(&p.xt, false)?;
    let p2 = p.mcda.probabilities(&p.xt, true)?;
    Ok(p1.data().iter().zip(p2.data()).fold(gap, |g, (a, b)| g.min((a - b).abs())))
}

type Outcome = (f64, String);

fn compare<F>(f: F, params: &crate::diffmath::ParamVector, opts: &GradcheckOptions) -> Result<Outcome, DiffError>
where
    F: for<'t> Fn(&'t Tape, Binding<'_>) -> Result<Var<'t>, DiffError>,
{
    let (_, exact) = value_and_grad_with_fault(&f, params, opts.fault)?;
    let approx = finite_diff_grad(&f, params, opts.h)?;
    let (a, b) = (exact.values(), approx.values());
    let worst_i = (0..a.len())
        .max_by(|&i, &j| (a[i] - b[i]).abs().total_cmp(&(a[j] - b[j]).abs()))
        .unwrap_or(0);
    let segment = params
        .layout()
        .segment_of(worst_i)
        .map(|s| s.name.clone())
        .unwrap_or_default();
    Ok((relative_error(a, b), segment))
}

fn features<'t>(arch: &NetArch, tape: &'t Tape, b: Binding<'_>, x: &Mat) -> Result<Var<'t>, DiffError> {
    arch.forward(tape, b, "", tape.constant(x.clone()))
}

const ALPHA: f64 = 2.0;
const MARGIN: f64 = 1.0;

fn check_point(p: &Point, opts: &GradcheckOptions) -> Result<Vec<Outcome>, DiffError> {
    let (alpha, margin, total) = (ALPHA, MARGIN, BATCH);
    let netp = p.net.params();
    let qp = p.q.params();
    let arch = p.net.arch();
    let batch = McdaBatch {
        source_x: &p.xs,
        source_y: &p.ys,
        target_x: &p.xt,
    };
    Ok(vec![
        compare(|t: &Tape, b: Binding<'_>| kl_on_tape(t, b), qp, opts)?,
        compare(
            |t: &Tape, b: Binding<'_>| {
                let phi = features(arch, t, Binding::Frozen(netp), &p.xs)?;
                ll_on_tape(t, b, phi, &p.ys, &p.noise, total)
            },
            qp,
            opts,
        )?,
        compare(
            |t: &Tape, b: Binding<'_>| {
                let phi = features(arch, t, b, &p.xs)?;
                ll_on_tape(t, Binding::Frozen(qp), phi, &p.ys, &p.noise, total)
            },
            netp,
            opts,
        )?,
        compare(
            |t: &Tape, b: Binding<'_>| {
                let phi = features(arch, t, Binding::Frozen(netp), &p.xt)?;
                ms_on_tape(t, b, phi, alpha, margin)
            },
            qp,
            opts,
        )?,
        compare(
            |t: &Tape, b: Binding<'_>| {
                let phi = features(arch, t, b, &p.xt)?;
                ms_on_tape(t, Binding::Frozen(qp), phi, alpha, margin)
            },
            netp,
            opts,
        )?,
        compare(
            |t: &Tape, b: Binding<'_>| {
                let phi = features(arch, t, Binding::Frozen(netp), &p.xs)?;
                Ok(kl_on_tape(t, b)?.sub(ll_on_tape(t, b, phi, &p.ys, &p.noise, total)?))
            },
            qp,
            opts,
        )?,
        compare(
            |t: &Tape, b: Binding<'_>| {
                let q = Binding::Frozen(qp);
                let ll = ll_on_tape(t, q, features(arch, t, b, &p.xs)?, &p.ys, &p.noise, total)?;
                let ms = ms_on_tape(t, q, features(arch, t, b, &p.xt)?, alpha, margin)?;
                Ok(kl_on_tape(t, q)?.sub(ll).add(ms.scale(50.0)))
            },
            netp,
            opts,
        )?,
        compare(|t: &Tape, b: Binding<'_>| Ok(record_mcda(t, &p.mcda, b, &batch)?.0), p.mcda.params(), opts)?,
        compare(|t: &Tape, b: Binding<'_>| Ok(record_mcda(t, &p.mcda, b, &batch)?.1), p.mcda.params(), opts)?,
    ])
}

/// Runs every term at `opts.points` random points. Points where a step of
/// `100·h` could cross a kink of the MS loss or the MCDA discrepancy are
/// redrawn, since central differences straddling a kink say nothing about
/// the gradient. A failing gradient computation (for instance a non-finite
/// value) counts as an infinite error.
pub fn run_suite(opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut terms: Vec<TermResult> = TERMS
        .iter()
        .map(|&term| TermResult {
            term,
            worst: 0.0,
            segment: String::new(),
            passed: true,
        })
        .collect();
    for _ in 0..opts.points {
        let mut point = random_point(&mut rng)?;
        for _ in 0..MAX_REDRAWS {
            if kink_gap(&point, ALPHA, MARGIN)? >= 100.0 * opts.h {
                break;
            }
            point = random_point(&mut rng)?;
        }
        match check_point(&point, opts) {
            Ok(outcomes) => {
                for (t, (err, seg)) in terms.iter_mut().zip(outcomes) {
                    if !(err <= t.worst) {
                        t.worst = err;
                        t.segment = seg;
                    }
                }
            }
            Err(e) => {
                for t in &mut terms {
                    t.worst = f64::INFINITY;
                    t.segment = e.to_string();
                }
            }
        }
    }
    for t in &mut terms {
        t.passed = t.worst <= opts.tol;
    }
    Ok(GradcheckReport { terms })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_on_a_few_points() {
        let r = run_suite(&GradcheckOptions { points: 5, ..Default::default() }).unwrap();
        assert!(r.passed(), "{r:?}");
        assert_eq!(r.terms.len(), TERMS.len());
    }

    #[test]
    fn corrupted_backward_rule_is_caught() {
        let opts = GradcheckOptions {
            points: 3,
            fault: Some(Fault::TanhBackward),
            ..Default::default()
        };
        let r = run_suite(&opts).unwrap();
        assert!(!r.passed());
        let net = r.terms.iter().find(|t| t.term == "ll/net").unwrap();
        assert!(!net.passed);
        assert!(net.segment.starts_with('w') || net.segment.starts_with('b'), "{}", net.segment);
        assert!(r.terms.iter().find(|t| t.term == "kl/q").unwrap().passed);
    }
}
