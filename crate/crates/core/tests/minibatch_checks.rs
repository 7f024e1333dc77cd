use itertools::Itertools;
use num_rational::Rational64;
use proptest::prelude::*;
use sgd_valley::minibatch::{
    enumerate_minibatch_moments, exact_sgd_covariance, hessian_decomposition, relative_frobenius_gap, Dataset, Mlp,
    MlpObjective, MlpSpec,
};
use sgd_valley::{MlpObjectiveF32, Objective};

/// Exact mean and covariance of the batch mean over every `S`-subset, in rationals.
fn rational_moments(g: &[Vec<i64>], s: usize) -> (Vec<Rational64>, Vec<Vec<Rational64>>) {
    let p = g[0].len();
    let batches: Vec<Vec<Rational64>> = (0..g.len())
        .combinations(s)
        .map(|c| (0..p).map(|j| Rational64::new(c.iter().map(|&k| g[k][j]).sum(), s as i64)).collect())
        .collect();
    let n = Rational64::from_integer(batches.len() as i64);
    let mean: Vec<Rational64> = (0..p).map(|j| batches.iter().map(|b| b[j]).sum::<Rational64>() / n).collect();
    let cov = (0..p)
        .map(|i| {
            (0..p)
                .map(|j| batches.iter().map(|b| (b[i] - mean[i]) * (b[j] - mean[j])).sum::<Rational64>() / n)
                .collect()
        })
        .collect();
    (mean, cov)
}

fn to_f64(r: Rational64) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

fn integer_gradients() -> impl Strategy<Value = (Vec<Vec<i64>>, usize)> {
    (2usize..8, 1usize..4).prop_flat_map(|(m, p)| {
        (prop::collection::vec(prop::collection::vec(-9i64..10, p), m), 1..=m)
    })
}

fn objective(eps: f64, m: usize, seed: u64) -> (MlpObjective<f64>, Vec<f64>) {
    let mlp = Mlp::new(MlpSpec::new(vec![2, 3, 3], eps).unwrap()).unwrap();
    let params = mlp.init_params(seed);
    (MlpObjective::new(mlp, Dataset::gaussian_blobs(m, 2, 3, 1.0, seed).unwrap()).unwrap(), params)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn enumeration_matches_rational_oracle((g, s) in integer_gradients()) {
        let (mean, cov) = rational_moments(&g, s);
        let as_f64: Vec<Vec<f64>> = g.iter().map(|r| r.iter().map(|&x| x as f64).collect()).collect();
        let got = enumerate_minibatch_moments(&as_f64, s).unwrap();
        for (a, b) in got.mean.iter().zip(&mean) {
            prop_assert!((a - to_f64(*b)).abs() <= 1e-12);
        }
        for (i, row) in cov.iter().enumerate() {
            for (j, c) in row.iter().enumerate() {
                prop_assert!((got.covariance[(i, j)] - to_f64(*c)).abs() <= 1e-11);
            }
        }
    }

    #[test]
    fn closed_form_covariance_matches_rational_oracle((g, s) in integer_gradients()) {
        let (_, cov) = rational_moments(&g, s);
        let as_f64: Vec<Vec<f64>> = g.iter().map(|r| r.iter().map(|&x| x as f64).collect()).collect();
        let closed = exact_sgd_covariance(&as_f64, s).unwrap();
        for (i, row) in cov.iter().enumerate() {
            for (j, c) in row.iter().enumerate() {
                prop_assert!((closed[(i, j)] - to_f64(*c)).abs() <= 1e-11);
            }
        }
    }
}

#[test]
fn per_sample_loss_gradient_matches_differences() {
    let (obj, params) = objective(0.1, 6, 3);
    let h = 1e-5;
    for k in 0..obj.data.len() {
        let (x, y) = (obj.data.input(k), obj.data.label(k));
        let g = obj.mlp.sample_gradient(&params, x, y).unwrap();
        let mut err = 0.0f64;
        for j in 0..params.len() {
            let mut up = params.clone();
            let mut dn = params.clone();
            up[j] += h;
            dn[j] -= h;
            let fd = (obj.mlp.sample_loss(&up, x, y).unwrap() - obj.mlp.sample_loss(&dn, x, y).unwrap()) / (2.0 * h);
            err += (fd - g[j]).powi(2);
        }
        let scale = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(err.sqrt() <= 1e-5 * scale, "sample {k}: {:e} vs {scale:e}", err.sqrt());
    }
}

#[test]
fn enumerated_moments_on_network_gradients() {
    let (obj, params) = objective(0.0, 9, 5);
    let per_sample = obj.per_sample_gradients(&params).unwrap();
    let full = obj.gradient(&params).unwrap();
    for s in [1, 3, 5, 9] {
        let moments = enumerate_minibatch_moments(&per_sample, s).unwrap();
        for (a, b) in moments.mean.iter().zip(&full) {
            assert!((a - b).abs() <= 1e-14 * b.abs().max(1.0), "S = {s}: {a} vs {b}");
        }
        let closed = exact_sgd_covariance(&per_sample, s).unwrap();
        let scale = closed.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
        let worst = (&moments.covariance - &closed).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(worst <= 1e-12 * scale.max(1e-12), "S = {s}: {worst:e}");
    }
}

#[test]
fn hessian_identity_holds_at_random_points() {
    for (eps, seed) in [(0.0, 1), (0.1, 2), (0.3, 3)] {
        let (obj, params) = objective(eps, 5, seed);
        let d = hessian_decomposition(&obj, &params).unwrap();
        let rebuilt = &d.second_moment - &d.curvature_term;
        let gap = relative_frobenius_gap(&rebuilt, &d.hessian);
        assert!(gap <= 1e-5, "eps = {eps}: residual {gap:e}");
    }
}

#[test]
fn single_precision_objective() {
    let mlp = Mlp::<f32>::new(MlpSpec::new(vec![2, 3, 2], 0.1).unwrap()).unwrap();
    let params = mlp.init_params(1);
    let obj = MlpObjectiveF32::new(mlp, Dataset::gaussian_blobs(6, 2, 2, 1.0, 4).unwrap()).unwrap();
    let loss = obj.loss(&params).unwrap();
    assert!(loss.is_finite() && loss > 0.0);
    let g = obj.gradient(&params).unwrap();
    let moments = enumerate_minibatch_moments(&obj.per_sample_gradients(&params).unwrap(), 6).unwrap();
    for (a, b) in moments.mean.iter().zip(&g) {
        assert!((a - b).abs() <= 1e-5);
    }
}
