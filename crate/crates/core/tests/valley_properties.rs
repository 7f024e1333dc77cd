use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sgd_valley::{ValleyModel, ValleyModelF32};

const H: f64 = 1e-5;

fn central_gradient(f: impl Fn(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let mut up = x.to_vec();
            let mut dn = x.to_vec();
            up[i] += H;
            dn[i] -= H;
            (f(&up) - f(&dn)) / (2.0 * H)
        })
        .collect()
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

fn models() -> Vec<ValleyModel<f64>> {
    vec![ValleyModel::trace_toy(), ValleyModel::anticorr_toy(), ValleyModel::quartic_valley()]
}

/// Keeps finite-difference stencils off the trace toy's kinks.
fn off_kinks(hat: &[f64]) -> bool {
    (hat[0] + hat[1]).abs() > 0.05 && (hat[0] + 2.0 * hat[1]).abs() > 0.05
}

fn point() -> impl Strategy<Value = Vec<f64>> {
    (prop::collection::vec(-2.0..2.0f64, 2), prop::collection::vec(-1.0..1.0f64, 2))
        .prop_map(|(bar, hat)| bar.into_iter().chain(hat).collect())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn gradient_matches_central_differences(theta in point()) {
        prop_assume!(off_kinks(&theta[2..]));
        for m in models() {
            let g = m.gradient(&theta).unwrap();
            let fd = central_gradient(|x| m.loss(x).unwrap(), &theta);
            let rel = diff(&g, &fd) / l2(&g).max(1e-3);
            prop_assert!(rel <= 1e-5, "{}: relative error {rel:e} at {theta:?}", m.name());
        }
    }

    #[test]
    fn hessian_matches_differences_of_gradient(theta in point()) {
        prop_assume!(off_kinks(&theta[2..]));
        for m in models() {
            let h = m.hessian(&theta).unwrap();
            let mut err = 0.0f64;
            for j in 0..4 {
                let mut up = theta.clone();
                let mut dn = theta.clone();
                up[j] += H;
                dn[j] -= H;
                let (gu, gd) = (m.gradient(&up).unwrap(), m.gradient(&dn).unwrap());
                for i in 0..4 {
                    err = err.max((h[(i, j)] - (gu[i] - gd[i]) / (2.0 * H)).abs());
                }
            }
            let scale = h.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1e-3);
            prop_assert!(err / scale <= 1e-4, "{}: relative error {:e}", m.name(), err / scale);
        }
    }

    #[test]
    fn loss_equals_base_only_on_floor(theta in point(), on_floor in any::<bool>()) {
        let mut theta = theta;
        if on_floor {
            theta[0] = 0.0;
            theta[1] = 0.0;
        }
        prop_assume!(off_kinks(&theta[2..]));
        for m in models() {
            let m = m.with_base_loss(0.7);
            let excess = m.loss(&theta).unwrap() - 0.7;
            if on_floor {
                prop_assert_eq!(excess, 0.0);
            } else if l2(&theta[..2]) > 1e-3 {
                prop_assert!(excess > 0.0, "{}: excess {excess} off the floor", m.name());
            }
        }
    }

    #[test]
    fn floor_trace_is_sum_of_leading_eigenvalues(hat in prop::collection::vec(-1.0..1.0f64, 2)) {
        prop_assume!(off_kinks(&hat));
        for m in models() {
            let report = m.spectrum(&hat).unwrap();
            let h = m.hessian(&m.floor_point(&hat).unwrap()).unwrap();
            let mut ev: Vec<f64> = h.symmetric_eigenvalues().iter().copied().collect();
            ev.sort_by(|a, b| b.total_cmp(a));
            let leading: f64 = ev[..m.n()].iter().sum();
            prop_assert!((report.trace - leading).abs() <= 1e-8, "{}: {} vs {leading}", m.name(), report.trace);
        }
    }
}

#[test]
fn tangent_nullspace_at_random_floor_points() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut draws = ChaCha8Rng::seed_from_u64(6);
    for m in models() {
        let mut checked = 0;
        while checked < 50 {
            let hat: Vec<f64> = (0..2).map(|_| rand::Rng::random_range(&mut draws, -1.0..1.0)).collect();
            if !off_kinks(&hat) {
                continue;
            }
            let theta = m.floor_point(&hat).unwrap();
            let r = m.verify_tangent_nullspace(&theta, 8, &mut rng).unwrap();
            assert!(r <= 1e-8, "{}: residual {r:e} at {hat:?}", m.name());
            checked += 1;
        }
    }
}

#[test]
fn tangent_check_refuses_off_floor_points() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let m = ValleyModel::<f64>::anticorr_toy();
    assert!(m.verify_tangent_nullspace(&[0.1, 0.0, 0.0, 0.0], 4, &mut rng).is_err());
}

#[test]
fn single_precision_examples() {
    let m = ValleyModelF32::trace_toy();
    assert_eq!(m.loss(&[1.0, 0.0, 1.0, 1.0]).unwrap(), 2.0);
    assert_eq!(m.gradient(&[1.0, 1.0, 1.0, 1.0]).unwrap(), vec![4.0, 6.0, 2.0, 3.0]);
    let s = m.spectrum(&[1.0, 1.0]).unwrap();
    assert_eq!((s.trace, s.nondegenerate_det), (10.0, 24.0));
    let a = ValleyModelF32::anticorr_toy();
    assert_eq!(a.loss(&[1.0, 1.0, 0.0, 0.0]).unwrap(), 3.0);
}
