//! The composite deep feature map from raw inputs to the explicit kernel
//! feature space. Kernel values are inner products of these features.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffmath::{Binding, DiffError, Mat, ParamBuilder, ParamVector, Tape, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
}

impl Activation {
    fn apply<'t>(self, v: Var<'t>) -> Var<'t> {
        match self {
            Activation::Tanh => v.tanh(),
            Activation::Relu => v.relu(),
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "relu" => Ok(Activation::Relu),
            other => Err(Error::invalid(format!("unknown activation `{other}`"))),
        }
    }
}

/// Layer widths `[p, h_1, .., h_L, d]` and the hidden activation. The
/// output layer is linear.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetArch {
    pub sizes: Vec<usize>,
    pub activation: Activation,
}

impl NetArch {
    pub fn new(sizes: Vec<usize>, activation: Activation) -> Result<Self> {
        if sizes.len() < 2 {
            return Err(Error::invalid("a feature net needs at least input and output widths"));
        }
        if sizes.contains(&0) {
            return Err(Error::invalid("layer widths must be positive"));
        }
        Ok(Self { sizes, activation })
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().expect("validated non-empty")
    }

    pub fn num_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn weight_name(prefix: &str, layer: usize) -> String {
        format!("{prefix}w{layer}")
    }

    pub fn bias_name(prefix: &str, layer: usize) -> String {
        format!("{prefix}b{layer}")
    }

    /// Appends this net's segments (`{prefix}w{l}` as out×in, `{prefix}b{l}`
    /// as 1×out) with Glorot-uniform weights and zero biases.
    pub fn push_params<R: Rng + ?Sized>(&self, mut builder: ParamBuilder, prefix: &str, rng: &mut R) -> ParamBuilder {
        for (l, pair) in self.sizes.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let w = (0..fan_in * fan_out).map(|_| rng.random_range(-a..=a)).collect();
            builder = builder
                .push(Self::weight_name(prefix, l), fan_out, fan_in, w)
                .push(Self::bias_name(prefix, l), 1, fan_out, vec![0.0; fan_out]);
        }
        builder
    }

    /// Checks that `params` carries every segment this net reads, with the
    /// right shapes.
    pub fn check_params(&self, params: &ParamVector, prefix: &str) -> Result<()> {
        for (l, pair) in self.sizes.windows(2).enumerate() {
            let w = params.segment(&Self::weight_name(prefix, l))?;
            let b = params.segment(&Self::bias_name(prefix, l))?;
            if (w.rows, w.cols) != (pair[1], pair[0]) || (b.rows, b.cols) != (1, pair[1]) {
                return Err(Error::invalid(format!("layer {l} has the wrong parameter shape")));
            }
        }
        Ok(())
    }

    /// Records the forward pass of an n×p batch, producing n×d features.
    pub fn forward<'t>(&self, tape: &'t Tape, params: Binding<'_>, prefix: &str, x: Var<'t>) -> Result<Var<'t>, DiffError> {
        let mut h = x;
        let last = self.num_layers() - 1;
        for l in 0..self.num_layers() {
            let w = params.get(tape, &Self::weight_name(prefix, l))?;
            let b = params.get(tape, &Self::bias_name(prefix, l))?;
            h = h.matmul_bt(w).add_row(b);
            if l < last {
                h = self.activation.apply(h);
            }
        }
        Ok(h)
    }
}

/// A feature network together with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureNet {
    arch: NetArch,
    params: ParamVector,
}

impl FeatureNet {
    pub fn init<R: Rng + ?Sized>(arch: NetArch, rng: &mut R) -> Self {
        let params = arch.push_params(ParamVector::builder(), "", rng).build();
        Self { arch, params }
    }

    pub fn from_params(arch: NetArch, params: ParamVector) -> Result<Self> {
        arch.check_params(&params, "")?;
        Ok(Self { arch, params })
    }

    pub fn arch(&self) -> &NetArch {
        &self.arch
    }

    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamVector {
        &mut self.params
    }

    pub fn input_dim(&self) -> usize {
        self.arch.input_dim()
    }

    pub fn feature_dim(&self) -> usize {
        self.arch.output_dim()
    }

    pub(crate) fn check_input(&self, x: &Mat) -> Result<()> {
        if x.cols() != self.input_dim() {
            return Err(Error::Dimension {
                context: "feature net input",
                expected: self.input_dim(),
                found: x.cols(),
            });
        }
        Ok(())
    }

    /// Records ψ(X) on `tape` with the net's own parameters bound as given.
    /// `params` must be this net's parameter vector (or a perturbed copy).
    pub fn forward<'t>(&self, tape: &'t Tape, params: Binding<'_>, x: &Mat) -> Result<Var<'t>> {
        self.check_input(x)?;
        let xv = tape.constant(x.clone());
        Ok(self.arch.forward(tape, params, "", xv)?)
    }

    /// Row i of the result is ψ(x_i).
    pub fn features(&self, x: &Mat) -> Result<Mat> {
        let tape = Tape::new();
        let out = self.forward(&tape, Binding::Frozen(&self.params), x)?;
        if let Some(op) = tape.non_finite_op() {
            return Err(DiffError::NonFinite { op }.into());
        }
        let v = out.value();
        Ok((*v).clone())
    }

    /// Gram matrix of the deep kernel, `G_ij = ψ(x_i)·ψ(x_j)`.
    pub fn kernel_gram(&self, x: &Mat) -> Result<Mat> {
        let phi = self.features(x)?;
        let mut g = phi.matmul_bt(&phi);
        // Exact symmetry regardless of summation order.
        let n = g.rows();
        for i in 0..n {
            for j in 0..i {
                let v = g.get(j, i);
                g.set(i, j, v);
            }
        }
        Ok(g)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffmath::{finite_diff_grad, relative_error, value_and_grad};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn linear(w: Vec<f64>, rows: usize, cols: usize) -> FeatureNet {
        let arch = NetArch::new(vec![cols, rows], Activation::Tanh).unwrap();
        let params = ParamVector::builder()
            .push("w0", rows, cols, w)
            .push("b0", 1, rows, vec![0.0; rows])
            .build();
        FeatureNet::from_params(arch, params).unwrap()
    }

    #[test]
    fn identity_layer_is_identity() {
        let net = linear(vec![1.0, 0.0, 0.0, 1.0], 2, 2);
        let x = Mat::from_rows(&[[0.3, -1.2], [2.0, 5.0]]);
        assert_eq!(net.features(&x).unwrap(), x);
    }

    #[test]
    fn single_linear_layer_by_hand() {
        let net = linear(vec![1.0, 2.0, 0.0, 1.0], 2, 2);
        let f = net.features(&Mat::from_rows(&[[1.0, 1.0]])).unwrap();
        assert_eq!(f.data(), &[3.0, 1.0]);
    }

    #[test]
    fn duplicated_rows_give_duplicated_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = FeatureNet::init(NetArch::new(vec![3, 8, 4], Activation::Tanh).unwrap(), &mut rng);
        let f = net.features(&Mat::from_rows(&[[0.1, 0.2, 0.3], [0.1, 0.2, 0.3]])).unwrap();
        assert_eq!(f.row(0), f.row(1));
        assert_eq!(f.cols(), 4);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let net = linear(vec![1.0, 0.0, 0.0, 1.0], 2, 2);
        let err = net.features(&Mat::from_rows(&[[1.0, 2.0, 3.0]])).unwrap_err();
        assert!(matches!(err, Error::Dimension { expected: 2, found: 3, .. }));
        assert!(net.kernel_gram(&Mat::zeros(1, 5)).is_err());
    }

    #[test]
    fn gram_of_orthonormal_rows_under_identity() {
        let net = linear(vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0], 3, 3);
        let g = net.kernel_gram(&Mat::identity(3)).unwrap();
        assert_eq!(g, Mat::identity(3));
    }

    #[test]
    fn gram_of_single_point_is_squared_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = FeatureNet::init(NetArch::new(vec![2, 5, 3], Activation::Relu).unwrap(), &mut rng);
        let x = Mat::from_rows(&[[0.7, -0.4]]);
        let phi = net.features(&x).unwrap();
        let g = net.kernel_gram(&x).unwrap();
        assert_eq!(g.shape(), (1, 1));
        assert!((g.get(0, 0) - phi.data().iter().map(|v| v * v).sum::<f64>()).abs() < 1e-15);
        assert!(g.get(0, 0) >= 0.0);
    }

    #[test]
    fn init_respects_glorot_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let net = FeatureNet::init(NetArch::new(vec![2, 64, 64, 16], Activation::Tanh).unwrap(), &mut rng);
        let a = (6.0f64 / 128.0).sqrt();
        assert!(net.params().segment_values("w1").unwrap().iter().all(|w| w.abs() <= a));
        assert!(net.params().segment_values("b1").unwrap().iter().all(|&b| b == 0.0));
    }

    #[test]
    fn feature_gradients_match_finite_differences() {
        for act in [Activation::Tanh, Activation::Relu] {
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let mut net = FeatureNet::init(NetArch::new(vec![3, 6, 5, 4], act).unwrap(), &mut rng);
            // Nonzero biases keep relu pre-activations away from the kink.
            for l in 0..3 {
                for b in net.params_mut().segment_values_mut(&format!("b{l}")).unwrap() {
                    *b = rng.random_range(0.1..0.5);
                }
            }
            let x = Mat::from_rows(&[[0.5, -1.0, 0.2], [1.5, 0.3, -0.7]]);
            let probe = Mat::from_rows(&[[0.3, -0.2, 0.9, 1.1], [-0.4, 0.8, 0.1, 0.6]]);
            let obj = crate::diffmath::objective(|tape, p| {
                let phi = net.arch().forward(tape, p, "", tape.constant(x.clone()))?;
                Ok(phi.mul(tape.constant(probe.clone())).sum())
            });
            let (_, g) = value_and_grad(obj, net.params()).unwrap();
            let fd = finite_diff_grad(obj, net.params(), 1e-5).unwrap();
            assert!(relative_error(g.values(), fd.values()) < 1e-4, "{act:?}");
        }
    }
}
