use gpda_core::gp_head::{log_likelihood_softmax, NoiseBatch, WeightSample};
use gpda_core::objectives::{ll_estimate, ms_term};
use gpda_core::uncertainty::{bayes_error, bhattacharyya, bpd};
use gpda_core::{mcda_discrepancy, Activation, BayesMode, FeatureNet, Mat, NetArch, VariationalPosterior};
use nalgebra::{DMatrix, SymmetricEigen};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn to_na(m: &Mat) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.data())
}

fn probs(k: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.01f64..1.0, k).prop_map(|v| {
        let s: f64 = v.iter().sum();
        v.into_iter().map(|x| x / s).collect()
    })
}

fn mat(rows: usize, cols: usize, lo: f64, hi: f64) -> impl Strategy<Value = Mat> {
    prop::collection::vec(lo..hi, rows * cols).prop_map(move |v| Mat::from_vec(rows, cols, v))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn products_match_nalgebra(a in mat(4, 3, -2.0, 2.0), b in mat(3, 5, -2.0, 2.0), c in mat(5, 3, -2.0, 2.0)) {
        let want = to_na(&a) * to_na(&b);
        prop_assert!((to_na(&a.matmul(&b)) - want).abs().max() < 1e-12);
        let want_bt = to_na(&a) * to_na(&c).transpose();
        prop_assert!((to_na(&a.matmul_bt(&c)) - want_bt).abs().max() < 1e-12);
    }

    #[test]
    fn gram_is_symmetric_and_psd(seed in any::<u64>(), x in mat(7, 3, -3.0, 3.0)) {
        let arch = NetArch::new(vec![3, 6, 4], Activation::Tanh).unwrap();
        let net = FeatureNet::init(arch, &mut ChaCha8Rng::seed_from_u64(seed));
        let g = to_na(&net.kernel_gram(&x).unwrap());
        prop_assert!((&g - g.transpose()).abs().max() <= 1e-12);
        let min_eig = SymmetricEigen::new(g).eigenvalues.min();
        prop_assert!(min_eig >= -1e-8, "min eigenvalue {min_eig}");
    }

    #[test]
    fn kl_is_nonnegative(m in mat(3, 4, -3.0, 3.0), lv in mat(3, 4, -4.0, 4.0)) {
        let q = VariationalPosterior::new(m, lv).unwrap();
        prop_assert!(q.kl() >= 0.0);
    }

    #[test]
    fn bhattacharyya_is_symmetric_and_nonnegative(m1 in -5.0f64..5.0, s1 in 0.05f64..3.0, m2 in -5.0f64..5.0, s2 in 0.05f64..3.0) {
        let a = bhattacharyya(m1, s1, m2, s2).unwrap();
        prop_assert!(a >= 0.0);
        prop_assert!((a - bhattacharyya(m2, s2, m1, s1).unwrap()).abs() <= 1e-12 * a.max(1.0));
        if (m1 - m2).abs() > 1e-3 {
            prop_assert!(a > 0.0);
        }
    }

    #[test]
    fn bpd_ignores_order(p in probs(5), rot in 0usize..5) {
        let mut q = p.clone();
        q.rotate_left(rot);
        prop_assert_eq!(bpd(&p).unwrap(), bpd(&q).unwrap());
        prop_assert!(bpd(&p).unwrap() >= 0.0);
    }

    #[test]
    fn discrepancy_is_bounded_and_symmetric(p in probs(4), q in probs(4)) {
        let d = mcda_discrepancy(&p, &q).unwrap();
        prop_assert!((0.0..=2.0 / 4.0 + 1e-15).contains(&d));
        prop_assert_eq!(d, mcda_discrepancy(&q, &p).unwrap());
    }

    #[test]
    fn separation_hinge_grows_with_alpha(mu in prop::collection::vec(-3.0f64..3.0, 3), sd in prop::collection::vec(0.0f64..2.0, 3), a in 0.0f64..4.0, extra in 0.0f64..4.0) {
        let lo = ms_term(&mu, &sd, a, 1.0);
        prop_assert!(lo >= 0.0);
        prop_assert!(ms_term(&mu, &sd, a + extra, 1.0) >= lo);
    }

    #[test]
    fn softmax_likelihood_ignores_logit_shifts(w in mat(3, 2, -2.0, 2.0), c in -5.0f64..5.0, y in 0usize..3) {
        // a constant third feature adds c to every logit
        let base = WeightSample { w: Mat::from_vec(3, 3, (0..3).flat_map(|j| [w.get(j, 0), w.get(j, 1), 0.0]).collect()) };
        let shifted = WeightSample { w: Mat::from_vec(3, 3, (0..3).flat_map(|j| [w.get(j, 0), w.get(j, 1), c]).collect()) };
        let phi = [0.4, -1.1, 1.0];
        let a = log_likelihood_softmax(&base, &phi, y).unwrap();
        let b = log_likelihood_softmax(&shifted, &phi, y).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn midpoint_error_falls_as_means_separate(gap in 0.0f64..4.0, more in 0.01f64..2.0, s1 in 0.2f64..3.0, s2 in 0.2f64..3.0) {
        let near = bayes_error(gap, s1, 0.0, s2, BayesMode::Midpoint).unwrap();
        let far = bayes_error(gap + more, s1, 0.0, s2, BayesMode::Midpoint).unwrap();
        prop_assert!((0.0..=0.5).contains(&near));
        prop_assert!(far <= near);
    }

    #[test]
    fn as_written_error_falls_as_means_separate_for_unit_or_wider_spread(gap in 0.0f64..4.0, more in 0.01f64..2.0, s1 in 1.0f64..3.0, s2 in 1.0f64..3.0) {
        let near = bayes_error(gap, s1, 0.0, s2, BayesMode::AsWritten).unwrap();
        let far = bayes_error(gap + more, s1, 0.0, s2, BayesMode::AsWritten).unwrap();
        prop_assert!((0.0..=0.5).contains(&near));
        prop_assert!(far <= near + 1e-15);
    }
}

#[test]
fn likelihood_estimate_scales_with_source_total() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let net = FeatureNet::init(NetArch::new(vec![2, 4, 3], Activation::Tanh).unwrap(), &mut rng);
    let q = VariationalPosterior::prior(2, 3);
    let x = Mat::from_rows(&[[0.1, 0.2], [-1.0, 0.5], [0.3, -0.7]]);
    let y = [0, 1, 1];
    let noise = NoiseBatch::sample(7, 2, 3, &mut rng);
    let one = ll_estimate(&q, &net, &x, &y, &noise, 30).unwrap();
    let two = ll_estimate(&q, &net, &x, &y, &noise, 60).unwrap();
    assert_eq!(two, 2.0 * one);
}
