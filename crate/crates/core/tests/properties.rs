use lrla::belief::{BaselineKind, Factors};
use lrla::comparison::{bayes_factor, log_mean_exp, marginal_loglik, Hypothesis};
use lrla::strategy::{fit_probit, mean_shift, probit_log_likelihood, ChoiceObservation};
use proptest::prelude::*;

fn observation() -> impl Strategy<Value = ChoiceObservation> {
    (-20.0..20.0f64, -8.0..2.0f64, 0.5..15.0f64, 0..2usize).prop_map(|(v, ru, tu, choice)| ChoiceObservation {
        factors: Factors { v, ru, tu },
        choice,
    })
}

fn weights() -> impl Strategy<Value = [f64; 3]> {
    [-2.0..2.0f64, -2.0..2.0f64, -2.0..2.0f64]
}

fn penalized(obs: &[ChoiceObservation], w: &[f64; 3], ridge: f64) -> f64 {
    probit_log_likelihood(obs, w) - 0.5 * ridge * w.iter().map(|x| x * x).sum::<f64>()
}

proptest! {
    #[test]
    fn log_mean_exp_is_bounded_and_shift_equivariant(xs in prop::collection::vec(-500.0..500.0f64, 1..20), c in -100.0..100.0f64) {
        let top = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let v = log_mean_exp(&xs);
        prop_assert!(v <= top + 1e-12);
        prop_assert!(v >= top - (xs.len() as f64).ln() - 1e-12);
        let shifted: Vec<f64> = xs.iter().map(|x| x + c).collect();
        prop_assert!((log_mean_exp(&shifted) - v - c).abs() < 1e-9);
    }

    #[test]
    fn probit_loglik_is_nonpositive(obs in prop::collection::vec(observation(), 1..40), w in weights()) {
        prop_assert!(probit_log_likelihood(&obs, &w) <= 0.0);
    }

    #[test]
    fn probit_fit_maximizes_the_penalized_likelihood(obs in prop::collection::vec(observation(), 3..60), w in weights()) {
        let ridge = 0.5;
        let fit = fit_probit(&obs, ridge).unwrap();
        let best = penalized(&obs, &fit.w, fit.ridge);
        prop_assert!(best >= penalized(&obs, &w, fit.ridge) - 1e-8);
        prop_assert!((fit.log_likelihood - probit_log_likelihood(&obs, &fit.w)).abs() < 1e-9);
    }

    #[test]
    fn single_hypotheses_give_antisymmetric_bayes_factors(obs in prop::collection::vec(observation(), 1..40)) {
        let a = Hypothesis::baseline(BaselineKind::Thompson);
        let b = Hypothesis::baseline(BaselineKind::Ucb);
        let ab = bayes_factor(&obs, std::slice::from_ref(&a), &b).unwrap();
        let ba = bayes_factor(&obs, std::slice::from_ref(&b), &a).unwrap();
        prop_assert!((ab.log_bf + ba.log_bf).abs() < 1e-9);
        let direct = marginal_loglik(&obs, &a).unwrap() - marginal_loglik(&obs, &b).unwrap();
        prop_assert!((ab.log_bf - direct).abs() < 1e-9);
        prop_assert!((ab.two_log_bf - 2.0 * ab.log_bf).abs() < 1e-12);
    }

    #[test]
    fn class_marginal_lies_between_its_members(obs in prop::collection::vec(observation(), 1..40)) {
        let class: Vec<Hypothesis> = BaselineKind::ALL.into_iter().map(Hypothesis::baseline).collect();
        let bf = bayes_factor(&obs, &class, &class[0]).unwrap();
        let lo = bf.class_marginals.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = bf.class_marginals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(bf.class_loglik >= lo - 1e-9 && bf.class_loglik <= hi + 1e-9);
        prop_assert_eq!(bf.class_marginals[bf.best], hi);
    }

    #[test]
    fn mean_shift_modes_stay_in_the_bounding_box(points in prop::collection::vec([-5.0..5.0f64, -5.0..5.0f64, -5.0..5.0f64], 1..25), bw in 0.2..3.0f64) {
        let r = mean_shift(&points, bw).unwrap();
        prop_assert_eq!(r.assignments.len(), points.len());
        prop_assert!(r.assignments.iter().all(|&c| c < r.modes.len()));
        for m in &r.modes {
            for d in 0..3 {
                let lo = points.iter().map(|p| p[d]).fold(f64::INFINITY, f64::min);
                let hi = points.iter().map(|p| p[d]).fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(m[d] >= lo - 1e-9 && m[d] <= hi + 1e-9);
            }
        }
    }

    #[test]
    fn separated_blobs_are_recovered(
        jitter in prop::collection::vec([-0.05..0.05f64, -0.05..0.05f64, -0.05..0.05f64], 6..30),
        k in 1..4usize,
    ) {
        let centers = [[0.0, 0.0, 0.0], [10.0, 0.0, 0.0], [0.0, 10.0, -10.0]];
        let points: Vec<[f64; 3]> = jitter
            .iter()
            .enumerate()
            .map(|(i, j)| {
                let c = centers[i % k];
                [c[0] + j[0], c[1] + j[1], c[2] + j[2]]
            })
            .collect();
        let r = mean_shift(&points, 0.5).unwrap();
        prop_assert_eq!(r.modes.len(), k);
        for (i, &a) in r.assignments.iter().enumerate() {
            prop_assert_eq!(a, r.assignments[i % k]);
        }
    }
}
