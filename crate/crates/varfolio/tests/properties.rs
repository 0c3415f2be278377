//! Randomized invariants: serialization round-trips, scaling laws, schedule
//! arithmetic, and ECDF rank identities.

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use varfolio::sim::Ecdf;
use varfolio::{build_rule, iid_rule, PortfolioRule, RiskFree, VarModel};

/// Builds a comfortably stationary model from raw draws in [-1, 1].
///
/// Slopes are scaled so every row sum stays below one and the covariance is
/// a Gram matrix plus a diagonal bump, so construction never fails.
fn model_from_parts(k: usize, p: usize, raw: &[f64]) -> VarModel {
    let n = k + p;
    let mut it = raw.iter().copied().cycle();
    let nu = DVector::from_fn(n, |_, _| it.next().unwrap() * 0.01);
    let phi = DMatrix::from_fn(n, n, |_, _| it.next().unwrap() * 0.4 / n as f64);
    let a = DMatrix::from_fn(n, n, |_, _| it.next().unwrap() * 0.05);
    let sigma = &a * a.transpose() + DMatrix::identity(n, n) * 2e-3;
    VarModel::new(k, p, nu, phi, sigma).unwrap()
}

fn entries() -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(-1.0f64..1.0, 40)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn model_text_round_trip_is_exact(
        k in 1usize..=3,
        p in 0usize..=1,
        raw in entries(),
    ) {
        let m = model_from_parts(k, p, &raw);
        let back = VarModel::from_text(&m.to_text()).unwrap();
        prop_assert_eq!(back.k(), m.k());
        prop_assert_eq!(back.p(), m.p());
        prop_assert_eq!(back.nu(), m.nu());
        prop_assert_eq!(back.phi(), m.phi());
        prop_assert_eq!(back.sigma_at(1).matrix(), m.sigma_at(1).matrix());
    }

    #[test]
    fn dollars_scale_inversely_with_alpha_and_weights_with_wealth(
        k in 1usize..=3,
        p in 0usize..=1,
        t in 1usize..=4,
        raw in entries(),
        alpha in 0.3f64..4.0,
        wealth in 0.2f64..50.0,
    ) {
        let m = model_from_parts(k, p, &raw);
        let rf = RiskFree::Constant(0.001);
        let rule = build_rule(&m, t, &rf, alpha).unwrap();
        let doubled = build_rule(&m, t, &rf, 2.0 * alpha).unwrap();
        let y = DVector::from_fn(k + p, |i, _| raw[i] * 0.02);
        for s in 0..t {
            let d1 = rule.dollars(s, &y).unwrap();
            let d2 = doubled.dollars(s, &y).unwrap();
            let w = rule.weights(s, &y, wealth).unwrap();
            for i in 0..k {
                prop_assert!((2.0 * d2[i] - d1[i]).abs() <= 1e-12 * d1[i].abs().max(1.0));
                prop_assert!((w[i] * wealth - d1[i]).abs() <= 1e-12 * d1[i].abs().max(1.0));
            }
        }
    }

    #[test]
    fn rule_table_round_trip_preserves_coefficients(
        k in 1usize..=3,
        p in 0usize..=1,
        t in 1usize..=4,
        raw in entries(),
    ) {
        let m = model_from_parts(k, p, &raw);
        let rule = build_rule(&m, t, &RiskFree::Constant(0.0005), 1.1).unwrap();
        let back = PortfolioRule::from_text(&rule.to_text()).unwrap();
        prop_assert_eq!(back.horizon(), rule.horizon());
        for s in 0..t {
            let (a_new, d_new) = back.coefficients(s);
            let (a_old, d_old) = rule.coefficients(s);
            prop_assert_eq!(a_new, a_old);
            prop_assert_eq!(d_new, d_old);
            prop_assert_eq!(back.discount(s), rule.discount(s));
        }
    }

    #[test]
    fn ecdf_matches_direct_counting(
        samples in proptest::collection::vec(-1e6f64..1e6, 1..120),
        probe in -1.5e6f64..1.5e6,
    ) {
        let n = samples.len() as f64;
        let ecdf = Ecdf::new(&samples).unwrap();
        let count_le = samples.iter().filter(|v| **v <= probe).count() as f64;
        let count_lt = samples.iter().filter(|v| **v < probe).count() as f64;
        prop_assert_eq!(ecdf.eval(probe), count_le / n);
        prop_assert_eq!(ecdf.fraction_below(probe), count_lt / n);
        prop_assert_eq!(ecdf.eval(ecdf.max()), 1.0);
        prop_assert_eq!(ecdf.eval(ecdf.min() - 1.0), 0.0);
        let med = ecdf.quantile(0.5).unwrap();
        prop_assert!(samples.contains(&med));
    }

    #[test]
    fn per_period_schedule_discount_is_gross_product(
        rates in proptest::collection::vec(-0.005f64..0.01, 1..8),
    ) {
        let t = rates.len();
        let rf = RiskFree::PerPeriod(rates.clone());
        for (i, r) in rates.iter().enumerate() {
            prop_assert_eq!(rf.rate(i + 1), *r);
            prop_assert_eq!(rf.gross(i + 1), 1.0 + *r);
        }
        for s in 0..t {
            let manual: f64 = (s + 2..=t).map(|i| 1.0 + rates[i - 1]).product();
            let d = rf.discount(s, t);
            prop_assert!((d - manual).abs() <= 1e-15 * manual.abs().max(1.0));
        }
        prop_assert_eq!(rf.discount(t - 1, t), 1.0);
    }

    #[test]
    fn iid_positions_ignore_the_state(
        k in 1usize..=3,
        p in 0usize..=2,
        t in 1usize..=5,
        raw in entries(),
    ) {
        let mean = DVector::from_fn(k, |i, _| raw[i] * 0.01);
        let a = DMatrix::from_fn(k, k, |i, j| raw[(i * k + j) % raw.len()] * 0.05);
        let cov = &a * a.transpose() + DMatrix::identity(k, k) * 2e-3;
        let rf = RiskFree::Constant(0.001);
        let rule = iid_rule(k, p, &mean, &cov, t, &rf, 1.0).unwrap();
        let y1 = DVector::from_fn(k + p, |i, _| raw[i] * 3.0);
        let y2 = DVector::from_fn(k + p, |i, _| raw[i + 4] * -2.0);
        let direct = cov
            .clone()
            .lu()
            .solve(&(&mean - DVector::from_element(k, 0.001)))
            .unwrap();
        for s in 0..t {
            let u1 = rule.scaled(s, &y1).unwrap();
            let u2 = rule.scaled(s, &y2).unwrap();
            prop_assert_eq!(&u1, &u2);
            for i in 0..k {
                prop_assert!((u1[i] - direct[i]).abs() <= 1e-10 * direct[i].abs().max(1.0));
            }
        }
    }
}
