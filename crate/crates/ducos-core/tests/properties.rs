//! Property-based invariants: correlation and gate bounds, fusion convexity,
//! normalization idempotence, metric orderings, and multiplier nonnegativity.

use ducos_core::fusion::{gate, pcc_per_channel};
use ducos_core::image::minmax_normalize;
use ducos_core::metrics::{metric_delta, metric_mae, metric_rmse};
use ducos_core::trainer::{DualState, ScheduleMode};
use ducos_core::{NdArray, Tape};
use proptest::prelude::*;

const E: f64 = core::f64::consts::E;

fn arr(shape: Vec<usize>, data: Vec<f64>) -> NdArray<f64> {
    NdArray::new(shape, data)
}

fn plane(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-100.0f64..100.0, n)
}

proptest! {
    #[test]
    fn pcc_stays_in_unit_interval(f in plane(16), d in plane(16)) {
        let mut tape: Tape<f64> = Tape::new();
        let fv = tape.leaf(&arr(vec![1, 4, 4], f));
        let dv = tape.leaf(&arr(vec![1, 4, 4], d));
        let r = pcc_per_channel(&mut tape, fv, dv).unwrap();
        for &v in tape.values(r) {
            prop_assert!((-1.0..=1.0).contains(&v), "r = {v}");
        }
    }

    #[test]
    fn pcc_constant_input_gives_zero(c in -50.0f64..50.0, d in plane(16)) {
        let mut tape: Tape<f64> = Tape::new();
        let fv = tape.leaf(&NdArray::full(vec![1, 4, 4], c));
        let dv = tape.leaf(&arr(vec![1, 4, 4], d));
        let r = pcc_per_channel(&mut tape, fv, dv).unwrap();
        prop_assert_eq!(tape.values(r)[0], 0.0);
    }

    #[test]
    fn pcc_affine_invariant(f in plane(16), d in plane(16),
                            a in 0.1f64..10.0, b in -20.0f64..20.0) {
        // skip degenerate planes where the scaled variance crosses the floor
        let mean = f.iter().sum::<f64>() / 16.0;
        let var = f.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
        prop_assume!(var.sqrt() > 1e-3);
        let fa: Vec<f64> = f.iter().map(|v| a * v + b).collect();
        let mut tape: Tape<f64> = Tape::new();
        let fv = tape.leaf(&arr(vec![1, 4, 4], f));
        let fav = tape.leaf(&arr(vec![1, 4, 4], fa));
        let dv = tape.leaf(&arr(vec![1, 4, 4], d));
        let r1 = pcc_per_channel(&mut tape, fv, dv).unwrap();
        let r2 = pcc_per_channel(&mut tape, fav, dv).unwrap();
        let (v1, v2) = (tape.values(r1)[0], tape.values(r2)[0]);
        prop_assert!((v1 - v2).abs() < 1e-8, "{v1} vs {v2}");
    }

    #[test]
    fn gate_bounds_and_partition(f in plane(16), d in plane(16)) {
        let mut tape: Tape<f64> = Tape::new();
        let fv = tape.leaf(&arr(vec![1, 4, 4], f));
        let dv = tape.leaf(&arr(vec![1, 4, 4], d));
        let r = pcc_per_channel(&mut tape, fv, dv).unwrap();
        let (alpha, beta) = gate(&mut tape, r);
        let (lo, hi) = (1.0 / (1.0 + E), 1.0 / (1.0 + 1.0 / E));
        for (&a, &b) in tape.values(alpha).iter().zip(tape.values(beta).iter()) {
            prop_assert!((lo..=hi).contains(&a), "alpha = {a}");
            prop_assert!((a + b - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn fused_pixel_between_inputs(f in plane(16), d in plane(16)) {
        let mut tape: Tape<f64> = Tape::new();
        let fv = tape.leaf(&arr(vec![1, 4, 4], f.clone()));
        let dv = tape.leaf(&arr(vec![1, 4, 4], d.clone()));
        let r = pcc_per_channel(&mut tape, fv, dv).unwrap();
        let (alpha, beta) = gate(&mut tape, r);
        let af = tape.mul(fv, alpha).unwrap();
        let bd = tape.mul(dv, beta).unwrap();
        let fused = tape.add(af, bd).unwrap();
        for ((&y, &a), &b) in tape.values(fused).iter().zip(f.iter()).zip(d.iter()) {
            let (lo, hi) = (a.min(b), a.max(b));
            prop_assert!(y >= lo - 1e-9 && y <= hi + 1e-9, "{y} outside [{lo},{hi}]");
        }
    }

    #[test]
    fn minmax_is_idempotent(x in plane(25)) {
        let spread = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
            - x.iter().cloned().fold(f64::INFINITY, f64::min);
        // the epsilon in the denominator makes idempotence approximate,
        // with error on the order of eps / spread
        prop_assume!(spread > 1.0);
        let a = minmax_normalize(&arr(vec![1, 5, 5], x));
        let b = minmax_normalize(&a);
        for (&u, &v) in a.data.iter().zip(b.data.iter()) {
            prop_assert!((u - v).abs() < 1e-7);
            prop_assert!((0.0..=1.0).contains(&u));
        }
    }

    #[test]
    fn rmse_dominates_mae(y in plane(16), z in prop::collection::vec(0.1f64..100.0, 16)) {
        let ya = arr(vec![16], y);
        let za = arr(vec![16], z);
        let rmse = metric_rmse(&ya, &za).unwrap();
        let mae = metric_mae(&ya, &za).unwrap();
        prop_assert!(rmse >= mae - 1e-12, "rmse {rmse} < mae {mae}");
    }

    #[test]
    fn delta_monotone_in_threshold(y in prop::collection::vec(0.1f64..100.0, 16),
                                   z in prop::collection::vec(0.1f64..100.0, 16),
                                   t1 in 1.01f64..1.5, dt in 0.0f64..1.0) {
        let ya = arr(vec![16], y);
        let za = arr(vec![16], z);
        let d1 = metric_delta(&ya, &za, t1).unwrap();
        let d2 = metric_delta(&ya, &za, t1 + dt).unwrap();
        prop_assert!(d2 >= d1);
    }

    #[test]
    fn multipliers_never_negative(losses in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 1..30),
                                  l0 in 0.0f64..0.5, m0 in 0.0f64..0.5) {
        let horizon = losses.len();
        let mut d = DualState::new(l0, m0, 0.01, 0.01, horizon,
                                   ScheduleMode::RecomputeFromInitial).unwrap();
        for (lc, lg) in losses {
            d.step_dual(lc, lg);
            prop_assert!(d.lambda >= 0.0 && d.mu >= 0.0);
            prop_assert!(d.eta_lambda >= 0.0 && d.eta_mu >= 0.0);
        }
    }

    #[test]
    fn ascent_monotone_under_nonnegative_losses(losses in prop::collection::vec((0.0f64..5.0, 0.0f64..5.0), 1..30)) {
        let horizon = losses.len();
        let mut d = DualState::new(0.01, 0.05, 0.01, 0.01, horizon,
                                   ScheduleMode::RecomputeFromInitial).unwrap();
        let (mut pl, mut pm) = (d.lambda, d.mu);
        for (lc, lg) in losses {
            d.step_dual(lc, lg);
            prop_assert!(d.lambda >= pl && d.mu >= pm);
            pl = d.lambda;
            pm = d.mu;
        }
    }
}
