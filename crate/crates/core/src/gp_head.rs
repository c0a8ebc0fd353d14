//! Variational weight posterior `q(W) = Π_j N(w_j; m_j, diag(s_j))` over the
//! K latent functions `f_j(z) = w_jᵀ φ(z)`, and everything derived from it.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::diffmath::{argmax, dot, log_sum_exp, Binding, DiffError, Mat, ParamVector, Tape, Var};
use crate::error::{Error, Result};

pub const MEAN: &str = "m";
pub const LOG_VAR: &str = "log_s";

/// Per-class means `m_j` and log-diagonals `log s_j`, both K×d.
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalPosterior {
    classes: usize,
    dim: usize,
    params: ParamVector,
}

/// One joint draw of all class weight vectors, K×d.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightSample {
    pub w: Mat,
}

/// Posterior mean and standard deviation of every latent function at one
/// feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorMoments {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

/// M standard-normal K×d draws used by the reparameterized estimator.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseBatch {
    draws: Vec<Mat>,
}

impl NoiseBatch {
    pub fn sample<R: Rng + ?Sized>(m: usize, classes: usize, dim: usize, rng: &mut R) -> Self {
        let draws = (0..m)
            .map(|_| {
                let v = (0..classes * dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
                Mat::from_vec(classes, dim, v)
            })
            .collect();
        Self { draws }
    }

    pub fn zeros(m: usize, classes: usize, dim: usize) -> Self {
        Self {
            draws: vec![Mat::zeros(classes, dim); m],
        }
    }

    pub fn from_draws(draws: Vec<Mat>) -> Self {
        Self { draws }
    }

    pub fn draws(&self) -> &[Mat] {
        &self.draws
    }

    pub fn len(&self) -> usize {
        self.draws.len()
    }

    pub fn is_empty(&self) -> bool {
        self.draws.is_empty()
    }
}

impl VariationalPosterior {
    /// `m_j = 0`, `S_j = I`: the prior itself.
    pub fn prior(classes: usize, dim: usize) -> Self {
        let params = ParamVector::builder()
            .push(MEAN, classes, dim, vec![0.0; classes * dim])
            .push(LOG_VAR, classes, dim, vec![0.0; classes * dim])
            .build();
        Self { classes, dim, params }
    }

    pub fn new(mean: Mat, log_var: Mat) -> Result<Self> {
        if mean.shape() != log_var.shape() {
            return Err(Error::invalid("mean and log-variance must have the same shape"));
        }
        if !mean.is_finite() || !log_var.is_finite() {
            return Err(Error::invalid("posterior parameters must be finite"));
        }
        let (classes, dim) = mean.shape();
        let params = ParamVector::builder()
            .push(MEAN, classes, dim, mean.into_vec())
            .push(LOG_VAR, classes, dim, log_var.into_vec())
            .build();
        Ok(Self { classes, dim, params })
    }

    pub fn from_params(params: ParamVector) -> Result<Self> {
        let m = params.segment(MEAN)?.clone();
        let s = params.segment(LOG_VAR)?;
        if (m.rows, m.cols) != (s.rows, s.cols) {
            return Err(Error::invalid("mean and log-variance segments differ in shape"));
        }
        Ok(Self {
            classes: m.rows,
            dim: m.cols,
            params,
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamVector {
        &mut self.params
    }

    pub fn mean(&self) -> Mat {
        self.params.segment_mat(MEAN).expect("layout checked at construction")
    }

    pub fn log_var(&self) -> Mat {
        self.params.segment_mat(LOG_VAR).expect("layout checked at construction")
    }

    fn mean_row(&self, j: usize) -> &[f64] {
        &self.params.segment_values(MEAN).expect("layout")[j * self.dim..(j + 1) * self.dim]
    }

    fn log_var_row(&self, j: usize) -> &[f64] {
        &self.params.segment_values(LOG_VAR).expect("layout")[j * self.dim..(j + 1) * self.dim]
    }

    /// KL(q ‖ N(0, I)) summed over classes.
    pub fn kl(&self) -> f64 {
        let m = self.params.segment_values(MEAN).expect("layout");
        let ls = self.params.segment_values(LOG_VAR).expect("layout");
        0.5 * m
            .iter()
            .zip(ls)
            .map(|(&mi, &li)| li.exp() + mi * mi - li - 1.0)
            .sum::<f64>()
    }

    /// `w_j = m_j + exp(log s_j / 2) ⊙ ε_j`.
    pub fn sample_weights(&self, noise: &Mat) -> Result<WeightSample> {
        if noise.shape() != (self.classes, self.dim) {
            return Err(Error::invalid(format!(
                "noise must be {}x{}, got {}x{}",
                self.classes,
                self.dim,
                noise.rows(),
                noise.cols()
            )));
        }
        let m = self.params.segment_values(MEAN)?;
        let ls = self.params.segment_values(LOG_VAR)?;
        let w = m
            .iter()
            .zip(ls)
            .zip(noise.data())
            .map(|((&mi, &li), &e)| mi + (0.5 * li).exp() * e)
            .collect();
        Ok(WeightSample {
            w: Mat::from_vec(self.classes, self.dim, w),
        })
    }

    /// `μ_j = m_j·φ`, `σ_j = sqrt(Σ_i s_ji φ_i²)`.
    pub fn moments(&self, phi: &[f64]) -> Result<PosteriorMoments> {
        self.check_dim(phi.len())?;
        let mut mu = Vec::with_capacity(self.classes);
        let mut sigma = Vec::with_capacity(self.classes);
        for j in 0..self.classes {
            mu.push(dot(self.mean_row(j), phi));
            let var: f64 = self
                .log_var_row(j)
                .iter()
                .zip(phi)
                .map(|(&l, &p)| l.exp() * p * p)
                .sum();
            sigma.push(var.sqrt());
        }
        Ok(PosteriorMoments { mu, sigma })
    }

    /// MAP class: argmax of the posterior means, ties to the lowest label.
    pub fn predict(&self, phi: &[f64]) -> Result<usize> {
        self.check_dim(phi.len())?;
        let mu: Vec<f64> = (0..self.classes).map(|j| dot(self.mean_row(j), phi)).collect();
        Ok(argmax(&mu))
    }

    fn check_dim(&self, found: usize) -> Result<()> {
        if found != self.dim {
            return Err(Error::Dimension {
                context: "posterior feature",
                expected: self.dim,
                found,
            });
        }
        Ok(())
    }
}

impl PosteriorMoments {
    pub fn predicted(&self) -> usize {
        argmax(&self.mu)
    }
}

/// `f_y − log Σ_r exp(f_r)` with `f = Wφ`.
pub fn log_likelihood_softmax(sample: &WeightSample, phi: &[f64], label: usize) -> Result<f64> {
    let (classes, dim) = sample.w.shape();
    if phi.len() != dim {
        return Err(Error::Dimension {
            context: "softmax likelihood feature",
            expected: dim,
            found: phi.len(),
        });
    }
    if label >= classes {
        return Err(Error::LabelOutOfRange { label, classes });
    }
    let logits: Vec<f64> = (0..classes).map(|j| dot(sample.w.row(j), phi)).collect();
    Ok(logits[label] - log_sum_exp(&logits))
}

/// Recorded KL(q ‖ N(0, I)).
pub fn kl_on_tape<'t>(tape: &'t Tape, q: Binding<'_>) -> Result<Var<'t>, DiffError> {
    let m = q.get(tape, MEAN)?;
    let ls = q.get(tape, LOG_VAR)?;
    Ok(ls.exp().add(m.square()).sub(ls).shift(-1.0).sum().scale(0.5))
}

/// Recorded reparameterized draw, K×d.
pub fn weights_on_tape<'t>(tape: &'t Tape, q: Binding<'_>, noise: &Mat) -> Result<Var<'t>, DiffError> {
    let m = q.get(tape, MEAN)?;
    let ls = q.get(tape, LOG_VAR)?;
    let eps = tape.constant(noise.clone());
    Ok(m.add(ls.scale(0.5).exp().mul(eps)))
}

/// Recorded posterior moments for an n×d feature batch: (μ, σ), both n×K.
pub fn moments_on_tape<'t>(tape: &'t Tape, q: Binding<'_>, phi: Var<'t>) -> Result<(Var<'t>, Var<'t>), DiffError> {
    let m = q.get(tape, MEAN)?;
    let ls = q.get(tape, LOG_VAR)?;
    let mu = phi.matmul_bt(m);
    let sigma = phi.square().matmul_bt(ls.exp()).sqrt();
    Ok((mu, sigma))
}

/// Per-row log-softmax of `logits` (n×K) at `labels`, n×1.
pub fn log_softmax_at<'t>(logits: Var<'t>, labels: &[usize]) -> Var<'t> {
    logits.gather(labels).sub(logits.log_sum_exp_rows())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffmath::{finite_diff_grad, relative_error, value_and_grad};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn q(mean: &[&[f64]], var: &[&[f64]]) -> VariationalPosterior {
        let ls: Vec<Vec<f64>> = var.iter().map(|r| r.iter().map(|v: &f64| v.ln()).collect()).collect();
        VariationalPosterior::new(Mat::from_rows(mean), Mat::from_rows(&ls)).unwrap()
    }

    #[test]
    fn kl_of_prior_is_zero() {
        assert_eq!(VariationalPosterior::prior(1, 2).kl(), 0.0);
    }

    #[test]
    fn kl_by_hand() {
        let single = q(&[&[1.0, 0.0]], &[&[0.5, 2.0]]);
        assert!((single.kl() - 0.75).abs() < 1e-12);
        let double = q(&[&[1.0, 0.0], &[1.0, 0.0]], &[&[0.5, 2.0], &[0.5, 2.0]]);
        assert!((double.kl() - 1.5).abs() < 1e-12);
    }

    #[test]
    fn kl_gradient_in_mean_is_mean_at_unit_variance() {
        let post = q(&[&[0.3, -1.2], &[2.0, 0.5]], &[&[1.0, 1.0], &[1.0, 1.0]]);
        let (_, g) = value_and_grad(|t: &Tape, b: Binding<'_>| kl_on_tape(t, b), post.params()).unwrap();
        assert_eq!(g.segment_values(MEAN).unwrap(), post.params().segment_values(MEAN).unwrap());
        assert!(g.segment_values(LOG_VAR).unwrap().iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn kl_tape_matches_finite_differences() {
        let post = q(&[&[1.0, 0.0]], &[&[0.5, 2.0]]);
        let f = crate::diffmath::objective(|t, b| kl_on_tape(t, b));
        let (v, g) = value_and_grad(f, post.params()).unwrap();
        assert!((v - 0.75).abs() < 1e-12);
        let fd = finite_diff_grad(f, post.params(), 1e-5).unwrap();
        assert!(relative_error(g.values(), fd.values()) < 1e-5);
    }

    #[test]
    fn zero_noise_returns_the_mean() {
        let post = q(&[&[0.4, -0.1], &[1.0, 2.0]], &[&[3.0, 0.2], &[1.0, 1.0]]);
        let w = post.sample_weights(&Mat::zeros(2, 2)).unwrap();
        assert_eq!(w.w, post.mean());
    }

    #[test]
    fn reparameterized_draw_by_hand() {
        let post = q(&[&[0.0, 0.0]], &[&[4.0, 9.0]]);
        let w = post.sample_weights(&Mat::from_rows(&[[1.0, -1.0]])).unwrap();
        assert!((w.w.get(0, 0) - 2.0).abs() < 1e-12);
        assert!((w.w.get(0, 1) + 3.0).abs() < 1e-12);
        assert!(post.sample_weights(&Mat::zeros(2, 2)).is_err());
    }

    #[test]
    fn draws_average_to_the_mean() {
        let post = q(&[&[0.5, -1.0, 2.0]], &[&[0.25, 4.0, 1.0]]);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let n = 100_000;
        let mut acc = [0.0; 3];
        for _ in 0..n {
            let eps = NoiseBatch::sample(1, 1, 3, &mut rng);
            let w = post.sample_weights(&eps.draws()[0]).unwrap();
            for (a, v) in acc.iter_mut().zip(w.w.data()) {
                *a += v;
            }
        }
        let tol = 4.0 * 2.0 / (n as f64).sqrt();
        for (a, m) in acc.iter().zip([0.5, -1.0, 2.0]) {
            assert!((a / n as f64 - m).abs() < tol);
        }
    }

    #[test]
    fn moments_by_hand() {
        let post = q(&[&[0.7, -3.0], &[0.2, 0.1]], &[&[2.0, 3.0], &[1.0, 1.0]]);
        let mo = post.moments(&[1.0, 0.0]).unwrap();
        assert_eq!(mo.mu[0], 0.7);
        let mo = post.moments(&[1.0, 1.0]).unwrap();
        assert!((mo.sigma[0] - 5f64.sqrt()).abs() < 1e-12);
        assert!(post.moments(&[1.0]).is_err());
    }

    #[test]
    fn softmax_likelihood_by_hand() {
        let w = WeightSample {
            w: Mat::from_rows(&[[1.0], [1.0], [1.0]]),
        };
        let v = log_likelihood_softmax(&w, &[0.8], 2).unwrap();
        assert!((v - (1.0f64 / 3.0).ln()).abs() < 1e-12);

        let w = WeightSample {
            w: Mat::from_rows(&[[0.0], [1.0]]),
        };
        let v = log_likelihood_softmax(&w, &[1.0], 1).unwrap();
        assert!((v + (1.0 + (-1.0f64).exp()).ln()).abs() < 1e-12);
        assert!((v + 0.3133).abs() < 1e-4);
        assert!(matches!(
            log_likelihood_softmax(&w, &[1.0], 2),
            Err(Error::LabelOutOfRange { label: 2, classes: 2 })
        ));
    }

    #[test]
    fn softmax_likelihood_is_shift_invariant() {
        // Adding c to every logit: append a constant feature with equal weights.
        let base = WeightSample {
            w: Mat::from_rows(&[[0.3, 0.0], [-1.1, 0.0], [2.0, 0.0]]),
        };
        let shifted = WeightSample {
            w: Mat::from_rows(&[[0.3, 5.0], [-1.1, 5.0], [2.0, 5.0]]),
        };
        for y in 0..3 {
            let a = log_likelihood_softmax(&base, &[0.9, 1.0], y).unwrap();
            let b = log_likelihood_softmax(&shifted, &[0.9, 1.0], y).unwrap();
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn prediction_rule() {
        let post = q(&[&[0.1], &[0.9], &[0.3]], &[&[1.0], &[1.0], &[1.0]]);
        assert_eq!(post.predict(&[1.0]).unwrap(), 1);
        assert_eq!(post.predict(&[7.5]).unwrap(), 1);
        let tie = q(&[&[0.5], &[0.5]], &[&[1.0], &[1.0]]);
        assert_eq!(tie.predict(&[1.0]).unwrap(), 0);
    }

    #[test]
    fn tape_moments_match_plain_moments() {
        let post = q(&[&[0.7, -3.0], &[0.2, 0.1], &[1.0, 1.0]], &[&[2.0, 3.0], &[1.0, 0.5], &[0.1, 0.2]]);
        let phi = Mat::from_rows(&[[0.3, -0.4], [1.2, 0.8]]);
        let tape = Tape::new();
        let (mu, sigma) = moments_on_tape(&tape, Binding::Frozen(post.params()), tape.constant(phi.clone())).unwrap();
        for i in 0..2 {
            let mo = post.moments(phi.row(i)).unwrap();
            for j in 0..3 {
                assert!((mu.value().get(i, j) - mo.mu[j]).abs() < 1e-14);
                assert!((sigma.value().get(i, j) - mo.sigma[j]).abs() < 1e-14);
            }
        }
    }
}
