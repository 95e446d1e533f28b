mod common;

use common::*;
use dacca::contrast::info_nce;
use dacca::psmm::{aggregate_anchors, schedule_t, similarity_vector, MemoryBank};
use dacca::selftrain::{ema_update, poly_lr};
use dacca::Domain;
use proptest::prelude::*;

#[test]
fn bank_updates_stay_in_hull_and_contract() {
    bank_update_checks(77, 1000);
}

#[test]
fn update_ignores_anchors_equal_to_the_row() {
    let mut bank = MemoryBank::new(Domain::Source, 1, 3);
    bank.initialize_class(Domain::Source, 1, &[vec![1.0, 2.0, 3.0]]).unwrap();
    let same = vec![vec![2.0, 4.0, 6.0]; 3];
    assert!(!bank.update_class_with_factor(Domain::Source, 1, &same, 0.5).unwrap());
    assert_eq!(bank.get_positive(1).unwrap(), vec![1.0, 2.0, 3.0]);
}

#[test]
fn ema_k_steps_closed_form() {
    for beta in [0.0, 0.5, 0.9, 0.99] {
        let student = tiny_model(1);
        let mut teacher = tiny_model(2);
        let start: Vec<Vec<f64>> = teacher.params().iter().map(|t| t.values().to_vec()).collect();
        let k = 25;
        for _ in 0..k {
            ema_update(&mut teacher, &student, beta).unwrap();
        }
        let bk = beta.powi(k);
        for ((t, s), w0) in teacher.params().iter().zip(student.params()).zip(&start) {
            for ((tv, sv), w) in t.values().iter().zip(s.values()).zip(w0) {
                let want = bk * w + (1.0 - bk) * sv;
                assert!((tv - want).abs() < 1e-12, "beta {beta}");
            }
        }
    }
}

#[test]
fn info_nce_closed_forms() {
    let tau = 0.07;
    // positive and negative equally similar: log 2
    let a = vec![vec![1.0, 0.0]];
    let sym = info_nce(&a, &[0.0, 1.0], &[vec![vec![0.0, -1.0]]], tau).unwrap();
    assert!((sym - 2f64.ln()).abs() < 1e-9);
    // aligned positive, orthogonal negative
    let aligned = info_nce(&a, &[3.0, 0.0], &[vec![vec![0.0, 5.0]]], tau).unwrap();
    assert!((aligned - (1.0 + (-1.0 / tau).exp()).ln()).abs() < 1e-9);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn schedule_is_monotone_and_bounded(t0 in 0.01f64..1.0, p in 0.1f64..3.0, total in 1u64..500, m in 0u64..600) {
        let a = schedule_t(m, total, t0, p);
        let b = schedule_t(m + 1, total, t0, p);
        prop_assert!(b <= a);
        prop_assert!(a <= t0 && a >= t0 / 100.0);
    }

    #[test]
    fn poly_lr_is_monotone_and_bounded(base in 1e-6f64..1.0, total in 1u64..500, m in 0u64..600) {
        let a = poly_lr(base, m, total, 0.9);
        prop_assert!(poly_lr(base, m + 1, total, 0.9) <= a);
        prop_assert!(a >= 0.0 && a <= base);
    }

    #[test]
    fn teacher_drift_is_bounded(beta in 0.0f64..1.0, s1 in 0u64..50, s2 in 50u64..100) {
        let student = tiny_model(s1);
        let mut teacher = tiny_model(s2);
        let before = teacher.clone();
        ema_update(&mut teacher, &student, beta).unwrap();
        let inf = |a: &dacca::model::SegModel, b: &dacca::model::SegModel| {
            a.params()
                .iter()
                .zip(b.params())
                .flat_map(|(x, y)| x.values().iter().zip(y.values()).map(|(u, v)| (u - v).abs()).collect::<Vec<_>>())
                .fold(0.0, f64::max)
        };
        prop_assert!(inf(&teacher, &before) <= (1.0 - beta) * inf(&student, &before) + 1e-15);
    }

    #[test]
    fn aggregate_is_a_convex_combination(
        rows in proptest::collection::vec(proptest::collection::vec(-3.0f64..3.0, 4), 1..6),
        mem in proptest::collection::vec(-3.0f64..3.0, 4),
    ) {
        prop_assume!(norm(&mem) > 1e-3 && rows.iter().all(|r| norm(r) > 1e-3));
        let sims = similarity_vector(&rows, &mem).unwrap();
        if let Some(agg) = aggregate_anchors(&rows, &sims).unwrap() {
            for k in 0..4 {
                let lo = rows.iter().map(|a| a[k]).fold(f64::INFINITY, f64::min);
                let hi = rows.iter().map(|a| a[k]).fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(agg[k] >= lo - 1e-9 && agg[k] <= hi + 1e-9);
            }
        }
    }
}
