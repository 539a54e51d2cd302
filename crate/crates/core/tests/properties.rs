use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

use shrinkgp::bound::ky_fan_check;
use shrinkgp::config::RunConfig;
use shrinkgp::data::{load_csv_reader, Dataset, Standardizer, Task};
use shrinkgp::gp_exact::{exact_posterior, WeightedKernel};
use shrinkgp::horseshoe::{kl_weights, sample_weights, update_aux, HorseshoeState};
use shrinkgp::kernel::{additive_terms, BaseKernel, Covariance, KernelExpr, KernelPool};
use shrinkgp::linalg::eigh_desc;
use shrinkgp::multisvgp::{init_groups, marginal_predictive_diag, Likelihood, MultiSvgp, Weights};
use shrinkgp::quadrature::{gauss_hermite, normal_expectation};

fn base() -> impl Strategy<Value = BaseKernel> {
    prop_oneof![
        (0.1f64..3.0).prop_map(BaseKernel::se),
        (-1.0f64..1.0).prop_map(BaseKernel::lin),
        (0.2f64..2.0, 0.3f64..4.0).prop_map(|(l, p)| BaseKernel::per(l, p)),
    ]
}

fn expr() -> impl Strategy<Value = KernelExpr> {
    prop_oneof![
        base().prop_map(KernelExpr::single),
        (base(), base()).prop_map(|(a, b)| KernelExpr::product(a, b)),
    ]
}

fn inputs(n: std::ops::RangeInclusive<usize>) -> impl Strategy<Value = DMatrix<f64>> {
    n.prop_flat_map(|n| prop::collection::vec(-3.0f64..3.0, n).prop_map(move |v| DMatrix::from_vec(n, 1, v)))
}

fn binomial(n: usize, k: usize) -> usize {
    (0..k).fold(1, |acc, i| acc * (n - i) / (i + 1))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gram_is_symmetric_psd(k in expr(), x in inputs(2..=25)) {
        let g = k.gram(&x, &x);
        let scale = g.amax().max(1.0);
        prop_assert!((&g - g.transpose()).amax() <= 1e-12 * scale);
        let (eigs, _) = eigh_desc(&g);
        prop_assert!(eigs.min() >= -1e-8 * scale, "min eigenvalue {}", eigs.min());
    }

    #[test]
    fn gram_is_psd_in_two_dims(k in expr(), v in prop::collection::vec(-3.0f64..3.0, 4..40)) {
        let n = v.len() / 2;
        let x = DMatrix::from_fn(n, 2, |i, j| v[2 * i + j]);
        let g = k.gram(&x, &x);
        let scale = g.amax().max(1.0);
        prop_assert!(eigh_desc(&g).0.min() >= -1e-8 * scale);
    }

    #[test]
    fn ky_fan_slack_nonnegative(k1 in expr(), k2 in expr(), x in inputs(2..=25), frac in 0.0f64..1.0) {
        let m = 1 + (frac * (x.nrows() - 1) as f64) as usize;
        let slack = ky_fan_check(&k1.gram(&x, &x), &k2.gram(&x, &x), m).unwrap();
        prop_assert!(slack >= -1e-8, "slack {slack}");
    }

    #[test]
    fn horseshoe_kl_nonnegative(
        mu in prop::collection::vec(-3.0f64..3.0, 1..6),
        sig in prop::collection::vec(0.01f64..2.0, 6),
        a in 0.2f64..5.0,
        b in 0.2f64..5.0,
        fresh in any::<bool>(),
    ) {
        let m = mu.len() - 1;
        let mut s = HorseshoeState::new(m, a, b);
        s.mu_tau = mu[0];
        s.sigma_tau = sig[0];
        s.mu_lambda.copy_from_slice(&mu[1..]);
        s.sigma_lambda.copy_from_slice(&sig[1..=m]);
        let s = if fresh { update_aux(&s) } else { s };
        prop_assert!(kl_weights(&s).unwrap() >= -1e-10);
        // The closed-form update never increases the KL.
        prop_assert!(kl_weights(&update_aux(&s)).unwrap() <= kl_weights(&s).unwrap() + 1e-10);
        let eps: Vec<f64> = (0..m).map(|i| i as f64 - 1.0).collect();
        prop_assert!(sample_weights(&s, &eps).unwrap().iter().all(|w| *w > 0.0));
    }

    #[test]
    fn predictive_variance_nonnegative(
        x in inputs(4..=20),
        grid in inputs(1..=15),
        weights in prop::collection::vec(0.0f64..3.0, 3),
        seed in 0u64..1000,
    ) {
        let pool = KernelPool::new(vec![
            KernelExpr::single(BaseKernel::se(0.7)),
            KernelExpr::single(BaseKernel::per(1.0, 2.0)),
            KernelExpr::product(BaseKernel::se(2.0), BaseKernel::lin(0.1)),
        ]);
        let m = (x.nrows() / 2).max(1);
        let mut groups = init_groups(&pool, &x, m, seed).unwrap();
        for (k, g) in groups.iter_mut().enumerate() {
            g.mean = DVector::from_fn(m, |i, _| ((i * 7 + k * 3 + seed as usize) % 5) as f64 - 2.0);
            g.chol *= 0.5;
        }
        let model = MultiSvgp::new(pool, groups, Weights::Point(weights.clone()), Likelihood::Gaussian { noise: 0.1 }).unwrap();
        let (_, var) = marginal_predictive_diag(&model, &weights, &grid).unwrap();
        prop_assert!(var.iter().all(|v| *v >= -1e-9), "{var}");
    }

    #[test]
    fn exact_posterior_shrinks_prior(x in inputs(2..=20), noise in 0.01f64..1.0, seed in 0u64..100) {
        let pool = KernelPool::new(vec![KernelExpr::single(BaseKernel::se(1.0)), KernelExpr::single(BaseKernel::per(0.8, 2.0))]);
        let wk = WeightedKernel::new(pool, vec![1.0, 0.5]).unwrap();
        let y = DVector::from_fn(x.nrows(), |i, _| ((i as u64 * 31 + seed) % 7) as f64 - 3.0);
        let grid = DMatrix::from_fn(10, 1, |i, _| -3.0 + 0.6 * i as f64);
        let post = exact_posterior(&wk, &x, &y, noise, &grid).unwrap();
        let prior = wk.gram(&grid, &grid).unwrap().diagonal();
        for (v, p) in post.variance().iter().zip(prior.iter()) {
            prop_assert!(*v >= -1e-9 && *v <= p + 1e-9);
        }
    }

    #[test]
    fn additive_count_is_binomial(d in 1usize..=10, k in 1usize..=10) {
        prop_assume!(k <= d);
        let spec = additive_terms(d, k).unwrap();
        prop_assert_eq!(spec.subsets.len(), binomial(d, k));
        prop_assert!(spec.subsets.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn gauss_hermite_moments(mean in -5.0f64..5.0, var in 0.0f64..10.0) {
        let rule = gauss_hermite(20);
        let m1 = normal_expectation(&rule, mean, var, |f| f);
        let m2 = normal_expectation(&rule, mean, var, |f| f * f);
        let m4 = normal_expectation(&rule, mean, var, |f| (f - mean).powi(4));
        prop_assert!((m1 - mean).abs() < 1e-9);
        prop_assert!((m2 - mean * mean - var).abs() < 1e-8 * (1.0 + mean * mean + var));
        prop_assert!((m4 - 3.0 * var * var).abs() < 1e-8 * (1.0 + var * var));
    }

    #[test]
    fn csv_round_trip(rows in prop::collection::vec(prop::collection::vec(-1e6f64..1e6, 3), 1..30)) {
        let n = rows.len();
        let x = DMatrix::from_fn(n, 2, |i, j| rows[i][j]);
        let y = DVector::from_fn(n, |i, _| rows[i][2]);
        let ds = Dataset::new(x, y, Task::Regression, vec!["a".into(), "b c".into()], "y".into()).unwrap();
        let mut buf = Vec::new();
        ds.write_csv(&mut buf).unwrap();
        let back = load_csv_reader(buf.as_slice(), Some("y"), Task::Regression).unwrap();
        prop_assert_eq!(back, ds);
    }

    #[test]
    fn standardizer_round_trip(rows in prop::collection::vec(prop::collection::vec(-100.0f64..100.0, 2), 2..30)) {
        let n = rows.len();
        let x = DMatrix::from_fn(n, 1, |i, _| rows[i][0]);
        let y = DVector::from_fn(n, |i, _| rows[i][1]);
        let ds = Dataset::new(x.clone(), y.clone(), Task::Regression, vec!["x".into()], "y".into()).unwrap();
        let st = Standardizer::fit(&ds);
        let back = st.inverse_x(&st.transform_x(&x).unwrap());
        prop_assert!((back - &x).amax() <= 1e-9 * (1.0 + x.amax()));
        let yb = st.inverse_mean(&st.transform_y(&y));
        prop_assert!((yb - &y).amax() <= 1e-9 * (1.0 + y.amax()));
    }

    #[test]
    fn config_json_round_trip(seed in any::<u64>(), iters in 1usize..5000, lr in 1e-4f64..1.0, count in prop::option::of(1usize..500)) {
        let mut c = RunConfig::default();
        c.seed = seed;
        c.training.iterations = iters;
        c.training.learning_rate = lr;
        c.inducing.count = count;
        let back = RunConfig::from_json(&c.to_json().unwrap()).unwrap();
        prop_assert_eq!(back.hash().unwrap(), c.hash().unwrap());
        prop_assert_eq!(back, c);
    }
}
