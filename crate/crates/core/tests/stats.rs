use std::collections::BTreeMap;

use diffrank_core::eval::{
    classification_metrics, mcnemar_exact, pass_at_n, win_rates, BenchmarkRun, JudgeRecord, SideMap, Verdict,
};
use diffrank_core::stats::{kendall_tau_b, rank_correlations, spearman, StatsError};
use proptest::prelude::*;

/// Kendall tau-b by enumerating every pair.
fn kendall_brute(x: &[f64], y: &[f64]) -> f64 {
    let (mut conc, mut disc, mut tx, mut ty) = (0i64, 0i64, 0i64, 0i64);
    let n = x.len();
    for i in 0..n {
        for j in i + 1..n {
            let dx = (x[i] - x[j]).signum() * f64::from(u8::from(x[i] != x[j]));
            let dy = (y[i] - y[j]).signum() * f64::from(u8::from(y[i] != y[j]));
            match (dx == 0.0, dy == 0.0) {
                (true, true) => {}
                (true, false) => tx += 1,
                (false, true) => ty += 1,
                _ if dx * dy > 0.0 => conc += 1,
                _ => disc += 1,
            }
        }
    }
    let n0 = (conc + disc + tx) as f64 * (conc + disc + ty) as f64;
    (conc - disc) as f64 / n0.sqrt()
}

/// Spearman as Pearson on ranks, with ranks from pairwise counting.
fn spearman_brute(x: &[f64], y: &[f64]) -> f64 {
    let rank = |v: &[f64]| -> Vec<f64> {
        v.iter()
            .map(|a| {
                let less = v.iter().filter(|b| *b < a).count() as f64;
                let eq = v.iter().filter(|b| *b == a).count() as f64;
                less + (eq + 1.0) / 2.0
            })
            .collect()
    };
    let (rx, ry) = (rank(x), rank(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx) * (a - mx)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my) * (b - my)).sum();
    cov / (vx * vy).sqrt()
}

fn binom_sum_exact(b: u64, c: u64) -> f64 {
    let n = b + c;
    if n == 0 {
        return 1.0;
    }
    let mut choose: u128 = 1;
    let mut total: u128 = 0;
    for k in 0..=b.min(c) {
        if k > 0 {
            choose = choose * u128::from(n - k + 1) / u128::from(k);
        }
        total += choose;
    }
    (2.0 * total as f64 / 2f64.powi(n as i32)).min(1.0)
}

#[test]
fn mcnemar_matches_integer_binomial_sum() {
    assert!((mcnemar_exact(10, 2) - 158.0 / 4096.0).abs() < 1e-12);
    assert!((binom_sum_exact(10, 2) - 158.0 / 4096.0).abs() < 1e-15);
    for b in 0..60 {
        for c in 0..60 {
            let p = mcnemar_exact(b, c);
            assert!((p - binom_sum_exact(b, c)).abs() < 1e-12, "({b},{c})");
            assert_eq!(p, mcnemar_exact(c, b));
        }
    }
}

#[test]
fn rank_correlations_match_enumeration_on_small_grids() {
    // Every x, y over a 3-value alphabet for lengths 2..=5, plus
    // permutations at length 6.
    for len in 2..=5u32 {
        let total = 3usize.pow(len);
        for a in 0..total {
            for b in (0..total).step_by(if len == 5 { 7 } else { 1 }) {
                let digits = |mut v: usize| -> Vec<f64> {
                    (0..len)
                        .map(|_| {
                            let d = (v % 3) as f64;
                            v /= 3;
                            d
                        })
                        .collect()
                };
                let (x, y) = (digits(a), digits(b));
                match rank_correlations(&x, &y) {
                    Ok(r) => {
                        assert!((r.kendall - kendall_brute(&x, &y)).abs() < 1e-12, "{x:?} {y:?}");
                        assert!((r.spearman - spearman_brute(&x, &y)).abs() < 1e-12, "{x:?} {y:?}");
                    }
                    Err(e) => {
                        assert_eq!(e, StatsError::ConstantInput);
                        assert!(x.iter().all(|v| *v == x[0]) || y.iter().all(|v| *v == y[0]));
                    }
                }
            }
        }
    }
    let x: Vec<f64> = (0..6).map(f64::from).collect();
    let mut perm = x.clone();
    for _ in 0..720 {
        next_permutation(&mut perm);
        let r = rank_correlations(&x, &perm).unwrap();
        assert!((r.kendall - kendall_brute(&x, &perm)).abs() < 1e-12);
        assert!((r.spearman - spearman_brute(&x, &perm)).abs() < 1e-12);
    }
}

fn next_permutation(v: &mut [f64]) {
    let n = v.len();
    let Some(i) = (0..n - 1).rev().find(|&i| v[i] < v[i + 1]) else {
        v.reverse();
        return;
    };
    let j = (i + 1..n).rev().find(|&j| v[j] > v[i]).unwrap();
    v.swap(i, j);
    v[i + 1..].reverse();
}

#[test]
fn perfect_monotone_cases() {
    let x = [0.3, 1.0, -2.0, 5.5, 4.0];
    let neg: Vec<f64> = x.iter().map(|v| -v).collect();
    let r = rank_correlations(&x, &x).unwrap();
    assert_eq!((r.spearman, r.kendall), (1.0, 1.0));
    let r = rank_correlations(&x, &neg).unwrap();
    assert!((r.spearman + 1.0).abs() < 1e-15 && (r.kendall + 1.0).abs() < 1e-15);
}

fn judge(a: u8, b: u8) -> JudgeRecord {
    let v = |k| match k {
        0 => Verdict::A,
        1 => Verdict::B,
        _ => Verdict::Tie,
    };
    JudgeRecord {
        question_id: "q".into(),
        first_pass_winner: v(a),
        second_pass_winner: v(b),
        round: 0,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn pass_at_n_is_monotone(outcomes in prop::collection::vec(prop::collection::vec(0u8..2, 8), 1..30)) {
        let mut run = BenchmarkRun::new("b", "m");
        for (k, s) in outcomes.into_iter().enumerate() {
            run.outcomes.insert(format!("q{k}"), s);
        }
        let curve: Vec<f64> = (1..=8).map(|n| pass_at_n(&run, n).unwrap()).collect();
        prop_assert!(curve.windows(2).all(|w| w[1] >= w[0]));
    }
}

proptest! {
    #[test]
    fn correlations_match_brute_force(pairs in prop::collection::vec((0i32..5, 0i32..5), 2..=6)) {
        let x: Vec<f64> = pairs.iter().map(|p| f64::from(p.0)).collect();
        let y: Vec<f64> = pairs.iter().map(|p| f64::from(p.1)).collect();
        if let Ok(r) = rank_correlations(&x, &y) {
            prop_assert!((r.kendall - kendall_brute(&x, &y)).abs() < 1e-12);
            prop_assert!((r.spearman - spearman_brute(&x, &y)).abs() < 1e-12);
        }
    }

    #[test]
    fn kendall_fast_path_matches_brute_force_on_long_inputs(
        pairs in prop::collection::vec((0i32..20, 0i32..20), 2..200)
    ) {
        let x: Vec<f64> = pairs.iter().map(|p| f64::from(p.0)).collect();
        let y: Vec<f64> = pairs.iter().map(|p| f64::from(p.1)).collect();
        if let Ok(k) = kendall_tau_b(&x, &y) {
            prop_assert!((k - kendall_brute(&x, &y)).abs() < 1e-12);
        }
    }

    #[test]
    fn correlations_ignore_increasing_transforms(v in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 3..40)) {
        let x: Vec<f64> = v.iter().map(|p| p.0).collect();
        let y: Vec<f64> = v.iter().map(|p| p.1).collect();
        let tx: Vec<f64> = x.iter().map(|a| a.exp() * 3.0 + 1.0).collect();
        let ty: Vec<f64> = y.iter().map(|a| a.powi(3)).collect();
        if let (Ok(a), Ok(b)) = (rank_correlations(&x, &y), rank_correlations(&tx, &ty)) {
            prop_assert_eq!(a, b);
        }
        if let (Ok(a), Ok(b)) = (spearman(&x, &y), spearman(&y, &x)) {
            prop_assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn consistent_never_exceeds_average(recs in prop::collection::vec((0u8..3, 0u8..3), 1..40)) {
        let records: Vec<JudgeRecord> = recs.iter().map(|&(a, b)| judge(a, b)).collect();
        for side in [Verdict::A, Verdict::B] {
            let w = win_rates(&records, SideMap::fixed(side)).unwrap();
            prop_assert!(w.consistent <= w.average);
        }
    }

    #[test]
    fn mcnemar_is_symmetric(b in 0u64..500, c in 0u64..500) {
        prop_assert_eq!(mcnemar_exact(b, c), mcnemar_exact(c, b));
        prop_assert!(mcnemar_exact(b, c) <= 1.0);
    }
}

/// Twenty hand-labeled verifier outcomes: (verifier said correct, truly correct).
pub fn verifier_fixture() -> Vec<(bool, bool)> {
    let raw = "TT TT TF TT FF FT TT FF TT TT TF FF TT FT TT FF TT TT FF TT";
    raw.split(' ')
        .map(|s| {
            let b: Vec<bool> = s.chars().map(|c| c == 'T').collect();
            (b[0], b[1])
        })
        .collect()
}

#[test]
fn classification_metrics_match_confusion_counts() {
    let fx = verifier_fixture();
    assert_eq!(fx.len(), 20);
    let mut cm: BTreeMap<(bool, bool), usize> = BTreeMap::new();
    for p in &fx {
        *cm.entry(*p).or_default() += 1;
    }
    // Hand counts: 11 TP, 2 FP, 5 TN, 2 FN.
    assert_eq!(cm[&(true, true)], 11);
    assert_eq!(cm[&(true, false)], 2);
    assert_eq!(cm[&(false, false)], 5);
    assert_eq!(cm[&(false, true)], 2);
    let m = classification_metrics(&fx).unwrap();
    assert!((m.precision - 100.0 * 11.0 / 13.0).abs() < 1e-12);
    assert!((m.recall - 100.0 * 11.0 / 13.0).abs() < 1e-12);
    assert!((m.f1 - 100.0 * 11.0 / 13.0).abs() < 1e-12);
    assert!((m.accuracy - 80.0).abs() < 1e-12);
}
