//! Training losses: the reparameterized log-likelihood estimate, the KL
//! term, the posterior max-separation hinge, and their two combinations
//! used by the alternating optimizer.

use serde::{Deserialize, Serialize};

use crate::diffmath::{argmax, argmax_excluding, value_and_grad, Binding, DiffError, Gradient, Mat, Tape, Var};
use crate::featurenet::FeatureNet;
use crate::gp_head::{log_softmax_at, moments_on_tape, NoiseBatch, VariationalPosterior, LOG_VAR, MEAN};
use crate::error::{Error, Result};

/// All loss components at one point, plus the two step objectives.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ll: f64,
    pub kl: f64,
    pub ms: f64,
    /// `−ll + kl`
    pub total_inference: f64,
    /// `−ll + kl + λ·ms`
    pub total_model: f64,
}

impl LossBreakdown {
    pub fn new(ll: f64, kl: f64, ms: f64, lambda: f64) -> Self {
        Self {
            ll,
            kl,
            ms,
            total_inference: -ll + kl,
            total_model: -ll + kl + lambda * ms,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.ll, self.kl, self.ms, self.total_inference, self.total_model]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Weights and constants of the separation term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeparationWeights {
    pub lambda: f64,
    pub alpha: f64,
    pub margin: f64,
}

impl Default for SeparationWeights {
    fn default() -> Self {
        Self {
            lambda: 50.0,
            alpha: 2.0,
            margin: 1.0,
        }
    }
}

/// A labeled source mini-batch and an unlabeled target mini-batch.
#[derive(Debug, Clone, Copy)]
pub struct StepBatch<'a> {
    pub source_x: &'a Mat,
    pub source_y: &'a [usize],
    /// `N_S`, the full source-set size the batch stands in for.
    pub source_total: usize,
    pub target_x: &'a Mat,
}

/// Per-sample hinge `(max_{j≠j*} μ_j − max_j μ_j + margin + α·max_j σ_j)_+`.
pub fn ms_term(mu: &[f64], sigma: &[f64], alpha: f64, margin: f64) -> f64 {
    let top = argmax(mu);
    let second = argmax_excluding(mu, top);
    let smax = sigma[argmax(sigma)];
    (mu[second] - mu[top] + margin + alpha * smax).max(0.0)
}

fn check_labels(y: &[usize], classes: usize) -> Result<()> {
    match y.iter().find(|&&l| l >= classes) {
        Some(&label) => Err(Error::LabelOutOfRange { label, classes }),
        None => Ok(()),
    }
}

fn check_head(q: &VariationalPosterior, net: &FeatureNet) -> Result<()> {
    if q.dim() != net.feature_dim() {
        return Err(Error::Dimension {
            context: "posterior vs feature net output",
            expected: net.feature_dim(),
            found: q.dim(),
        });
    }
    Ok(())
}

/// Recorded LL estimate over an n×d feature batch.
pub(crate) fn ll_on_tape<'t>(
    tape: &'t Tape,
    q: Binding<'_>,
    phi: Var<'t>,
    labels: &[usize],
    noise: &NoiseBatch,
    source_total: usize,
) -> Result<Var<'t>, DiffError> {
    let draws = noise.len();
    let m = q.get(tape, MEAN)?;
    let (classes, _) = m.shape();
    let sd = q.get(tape, LOG_VAR)?.scale(0.5).exp();
    // All draws at once: W stacks the M sampled K×d weight matrices, so row
    // (i·M + m) of the reshaped logits is sample i under draw m.
    let eps = Mat::vstack(noise.draws());
    let w = m.tile_rows(draws).add(sd.tile_rows(draws).mul(tape.constant(eps)));
    let n = labels.len();
    let logits = phi.matmul_bt(w).reshape(n * draws, classes);
    let repeated: Vec<usize> = labels.iter().flat_map(|&y| std::iter::repeat_n(y, draws)).collect();
    let scale = source_total as f64 / (n * draws) as f64;
    Ok(log_softmax_at(logits, &repeated).sum().scale(scale))
}

/// Recorded MS loss over an n×d target feature batch.
pub(crate) fn ms_on_tape<'t>(
    tape: &'t Tape,
    q: Binding<'_>,
    phi: Var<'t>,
    alpha: f64,
    margin: f64,
) -> Result<Var<'t>, DiffError> {
    let (mu, sigma) = moments_on_tape(tape, q, phi)?;
    let ((top, _), (second, _)) = mu.top2_rows();
    let (smax, _) = sigma.max_rows();
    Ok(second.sub(top).shift(margin).add(smax.scale(alpha)).hinge().mean())
}

struct LossVars<'t> {
    ll: Var<'t>,
    kl: Var<'t>,
    ms: Var<'t>,
}

fn validate(q: &VariationalPosterior, net: &FeatureNet, batch: &StepBatch<'_>, noise: &NoiseBatch, w: &SeparationWeights) -> Result<()> {
    check_head(q, net)?;
    if batch.source_y.is_empty() {
        return Err(Error::Empty("source batch"));
    }
    if batch.target_x.rows() == 0 {
        return Err(Error::Empty("target batch"));
    }
    if batch.source_x.rows() != batch.source_y.len() {
        return Err(Error::invalid("source inputs and labels differ in count"));
    }
    if noise.is_empty() {
        return Err(Error::invalid("need at least one posterior draw"));
    }
    if noise.draws().iter().any(|e| e.shape() != (q.classes(), q.dim())) {
        return Err(Error::invalid("noise draws must match the posterior shape"));
    }
    net.check_input(batch.source_x)?;
    net.check_input(batch.target_x)?;
    if q.classes() < 2 {
        return Err(Error::invalid("max-separation needs at least two classes"));
    }
    if !(w.alpha >= 0.0 && w.lambda >= 0.0) {
        return Err(Error::invalid("alpha and lambda must be nonnegative"));
    }
    check_labels(batch.source_y, q.classes())
}

#[allow(clippy::too_many_arguments)]
fn record_losses<'t>(
    tape: &'t Tape,
    net: &FeatureNet,
    net_params: Binding<'_>,
    q: Binding<'_>,
    batch: &StepBatch<'_>,
    noise: &NoiseBatch,
    w: &SeparationWeights,
) -> Result<LossVars<'t>> {
    let phi_s = net.forward(tape, net_params, batch.source_x)?;
    let phi_t = net.forward(tape, net_params, batch.target_x)?;
    Ok(LossVars {
        ll: ll_on_tape(tape, q, phi_s, batch.source_y, noise, batch.source_total)?,
        kl: crate::gp_head::kl_on_tape(tape, q)?,
        ms: ms_on_tape(tape, q, phi_t, w.alpha, w.margin)?,
    })
}

/// Monte-Carlo log-likelihood estimate,
/// `(1/M) Σ_m (N_S/|B_S|) Σ_i log p(y_i | W^(m) ψ(x_i))`.
pub fn ll_estimate(
    q: &VariationalPosterior,
    net: &FeatureNet,
    source_x: &Mat,
    source_y: &[usize],
    noise: &NoiseBatch,
    source_total: usize,
) -> Result<f64> {
    check_head(q, net)?;
    if source_y.is_empty() {
        return Err(Error::Empty("source batch"));
    }
    if source_x.rows() != source_y.len() {
        return Err(Error::invalid("source inputs and labels differ in count"));
    }
    if noise.is_empty() {
        return Err(Error::invalid("need at least one posterior draw"));
    }
    check_labels(source_y, q.classes())?;
    let tape = Tape::new();
    let phi = net.forward(&tape, Binding::Frozen(net.params()), source_x)?;
    let ll = ll_on_tape(&tape, Binding::Frozen(q.params()), phi, source_y, noise, source_total)?;
    finite(&tape)?;
    Ok(ll.scalar())
}

/// Mean posterior max-separation hinge over a target batch. `j*` is the
/// argmax of the posterior means.
pub fn ms_loss(q: &VariationalPosterior, net: &FeatureNet, target_x: &Mat, alpha: f64, margin: f64) -> Result<f64> {
    check_head(q, net)?;
    if target_x.rows() == 0 {
        return Err(Error::Empty("target batch"));
    }
    if !(alpha >= 0.0) {
        return Err(Error::invalid("alpha must be nonnegative"));
    }
    if q.classes() < 2 {
        return Err(Error::invalid("max-separation needs at least two classes"));
    }
    let tape = Tape::new();
    let phi = net.forward(&tape, Binding::Frozen(net.params()), target_x)?;
    let ms = ms_on_tape(&tape, Binding::Frozen(q.params()), phi, alpha, margin)?;
    finite(&tape)?;
    Ok(ms.scalar())
}

fn finite(tape: &Tape) -> Result<()> {
    match tape.non_finite_op() {
        Some(op) => Err(DiffError::NonFinite { op }.into()),
        None => Ok(()),
    }
}

/// LL, KL, MS and both totals at the current point.
pub fn composite_losses(
    q: &VariationalPosterior,
    net: &FeatureNet,
    batch: &StepBatch<'_>,
    noise: &NoiseBatch,
    weights: &SeparationWeights,
) -> Result<LossBreakdown> {
    validate(q, net, batch, noise, weights)?;
    let tape = Tape::new();
    let v = record_losses(&tape, net, Binding::Frozen(net.params()), Binding::Frozen(q.params()), batch, noise, weights)?;
    finite(&tape)?;
    Ok(LossBreakdown::new(v.ll.scalar(), v.kl.scalar(), v.ms.scalar(), weights.lambda))
}

/// Which parameters a step differentiates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepKind {
    /// `−LL + KL` over the posterior `(m, log s)`.
    Inference,
    /// `−LL + KL + λ·MS` over the feature-net parameters.
    Model,
}

/// Loss breakdown and the gradient of the step's objective with respect to
/// the step's own parameters.
pub fn step_value_and_grad(
    kind: StepKind,
    q: &VariationalPosterior,
    net: &FeatureNet,
    batch: &StepBatch<'_>,
    noise: &NoiseBatch,
    weights: &SeparationWeights,
) -> Result<(LossBreakdown, Gradient)> {
    step_value_and_grad_with_fault(kind, q, net, batch, noise, weights, None)
}

#[doc(hidden)]
pub fn step_value_and_grad_with_fault(
    kind: StepKind,
    q: &VariationalPosterior,
    net: &FeatureNet,
    batch: &StepBatch<'_>,
    noise: &NoiseBatch,
    weights: &SeparationWeights,
    fault: Option<crate::diffmath::Fault>,
) -> Result<(LossBreakdown, Gradient)> {
    validate(q, net, batch, noise, weights)?;
    let parts = std::cell::Cell::new(None);
    let objective = crate::diffmath::objective(|tape, p| {
        let (net_b, q_b) = match kind {
            StepKind::Inference => (Binding::Frozen(net.params()), p),
            StepKind::Model => (p, Binding::Frozen(q.params())),
        };
        let v = record_losses(tape, net, net_b, q_b, batch, noise, weights).map_err(|e| match e {
            Error::Diff(d) => d,
            other => unreachable!("inputs validated: {other}"),
        })?;
        parts.set(Some((v.ll.scalar(), v.kl.scalar(), v.ms.scalar())));
        let base = v.kl.sub(v.ll);
        Ok(match kind {
            StepKind::Inference => base,
            StepKind::Model => base.add(v.ms.scale(weights.lambda)),
        })
    });
    let params = match kind {
        StepKind::Inference => q.params(),
        StepKind::Model => net.params(),
    };
    let (_, grad) = crate::diffmath::value_and_grad_with_fault(objective, params, fault)?;
    let (ll, kl, ms) = parts.get().expect("objective evaluated");
    Ok((LossBreakdown::new(ll, kl, ms, weights.lambda), grad))
}

/// Gradient of `ll_estimate` with respect to the posterior (`wrt_net =
/// false`) or the feature net (`wrt_net = true`).
pub fn ll_gradient(
    q: &VariationalPosterior,
    net: &FeatureNet,
    source_x: &Mat,
    source_y: &[usize],
    noise: &NoiseBatch,
    source_total: usize,
    wrt_net: bool,
) -> Result<(f64, Gradient)> {
    ll_estimate(q, net, source_x, source_y, noise, source_total)?;
    let f = crate::diffmath::objective(|tape, p| {
        let (nb, qb) = if wrt_net {
            (p, Binding::Frozen(q.params()))
        } else {
            (Binding::Frozen(net.params()), p)
        };
        let xs = tape.constant(source_x.clone());
        let phi = net.arch().forward(tape, nb, "", xs)?;
        ll_on_tape(tape, qb, phi, source_y, noise, source_total)
    });
    let params = if wrt_net { net.params() } else { q.params() };
    Ok(value_and_grad(f, params)?)
}
