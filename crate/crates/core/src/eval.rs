//! Robustness and evaluation statistics over benchmark runs.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::math::{exp, ln_gamma, round2};

pub use crate::stats::{rank_correlations, RankCorrelation, StatsError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("original accuracy is zero; PDR is undefined")]
    UndefinedPdr,
    #[error("question `{question}` has {have} samples, need {need}")]
    InsufficientSamples { question: String, have: usize, need: usize },
    #[error("run `{0}` is invalid: {1}")]
    InvalidRun(String, String),
    #[error("no records")]
    Empty,
    #[error("question `{question}` missing from run `{run}`")]
    MissingQuestion { question: String, run: String },
    #[error("annotation incomplete for question `{question}` (run {run}): {message}")]
    PartialAnnotation { question: String, run: usize, message: String },
    #[error("invalid threshold: {0}")]
    InvalidThreshold(String),
}

/// One model's sampled outcomes on a benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRun {
    pub benchmark_id: String,
    pub model_id: String,
    /// question id → 0/1 outcome per sample, in sample order.
    pub outcomes: BTreeMap<String, Vec<u8>>,
}

impl BenchmarkRun {
    pub fn new(benchmark_id: impl Into<String>, model_id: impl Into<String>) -> Self {
        Self {
            benchmark_id: benchmark_id.into(),
            model_id: model_id.into(),
            outcomes: BTreeMap::new(),
        }
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        let bad = |m: String| EvalError::InvalidRun(self.model_id.clone(), m);
        if self.outcomes.is_empty() {
            return Err(bad("no questions".into()));
        }
        let n = self.outcomes.values().next().map_or(0, Vec::len);
        for (q, s) in &self.outcomes {
            if s.is_empty() {
                return Err(bad(format!("question `{q}` has no samples")));
            }
            if s.len() != n {
                return Err(bad(format!("question `{q}` has {} samples, others {n}", s.len())));
            }
            if s.iter().any(|&v| v > 1) {
                return Err(bad(format!("question `{q}` has a non-binary outcome")));
            }
        }
        Ok(())
    }

    /// Accuracy of first samples, in percent.
    pub fn accuracy(&self) -> Result<f64, EvalError> {
        pass_at_n(self, 1)
    }
}

/// Drop rate from two accuracies (any common unit), in percent.
pub fn pdr_from_accuracies(original: f64, perturbed: f64) -> Result<f64, EvalError> {
    if !(original > 0.0) {
        return Err(EvalError::UndefinedPdr);
    }
    Ok(100.0 * (1.0 - perturbed / original))
}

/// PDR in percent between two runs. Accuracies are first rounded to the two
/// decimals they are reported with, and the result is rounded likewise, so
/// tables are self-consistent.
pub fn pdr(original: &BenchmarkRun, perturbed: &BenchmarkRun) -> Result<f64, EvalError> {
    let a = round2(original.accuracy()?);
    let b = round2(perturbed.accuracy()?);
    Ok(round2(pdr_from_accuracies(a, b)?))
}

/// Percent of questions with at least one success among the first `n`
/// samples.
pub fn pass_at_n(run: &BenchmarkRun, n: usize) -> Result<f64, EvalError> {
    run.validate()?;
    if n == 0 {
        return Err(EvalError::InvalidThreshold("n must be >= 1".into()));
    }
    let mut solved = 0usize;
    for (q, s) in &run.outcomes {
        if s.len() < n {
            return Err(EvalError::InsufficientSamples {
                question: q.clone(),
                have: s.len(),
                need: n,
            });
        }
        solved += usize::from(s[..n].contains(&1));
    }
    Ok(100.0 * solved as f64 / run.outcomes.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairedOutcome {
    pub question_id: String,
    pub correct_original: u8,
    pub correct_rewritten: u8,
}

/// First-sample outcomes of the questions present in both runs.
pub fn paired_outcomes(original: &BenchmarkRun, rewritten: &BenchmarkRun) -> Vec<PairedOutcome> {
    original
        .outcomes
        .iter()
        .filter_map(|(q, a)| {
            rewritten.outcomes.get(q).map(|b| PairedOutcome {
                question_id: q.clone(),
                correct_original: a.first().copied().unwrap_or(0),
                correct_rewritten: b.first().copied().unwrap_or(0),
            })
        })
        .collect()
}

/// `(b, c)`: correct→incorrect and incorrect→correct transition counts.
pub fn transition_counts(pairs: &[PairedOutcome]) -> (u64, u64) {
    let b = pairs
        .iter()
        .filter(|p| p.correct_original == 1 && p.correct_rewritten == 0)
        .count() as u64;
    let c = pairs
        .iter()
        .filter(|p| p.correct_original == 0 && p.correct_rewritten == 1)
        .count() as u64;
    (b, c)
}

/// Exact two-sided McNemar p-value:
/// `min(1, 2·Σ_{k ≤ min(b,c)} C(b+c, k)·2^{−(b+c)})`, and 1 when `b + c = 0`.
pub fn mcnemar_exact(b: u64, c: u64) -> f64 {
    let n = b + c;
    if n == 0 {
        return 1.0;
    }
    let m = b.min(c);
    let nf = n as f64;
    let log_half_n = -nf * core::f64::consts::LN_2;
    let ln_fact_n = ln_gamma(nf + 1.0);
    let mut tail = 0.0;
    for k in 0..=m {
        let kf = k as f64;
        let log_c = ln_fact_n - ln_gamma(kf + 1.0) - ln_gamma(nf - kf + 1.0);
        tail += exp(log_c + log_half_n);
    }
    (2.0 * tail).min(1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Verdict {
    A,
    B,
    Tie,
}

/// Two order-swapped judgments of one pair. Winners name the underlying
/// question: `A` is always the pair's first question, whichever position it
/// was shown in.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgeRecord {
    pub question_id: String,
    pub first_pass_winner: Verdict,
    pub second_pass_winner: Verdict,
    pub round: u32,
}

/// Side held by the method of interest in each pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SideMap {
    pub first_pass: Verdict,
    pub second_pass: Verdict,
}

impl SideMap {
    /// The method is always recorded as `side`.
    pub fn fixed(side: Verdict) -> Self {
        Self {
            first_pass: side,
            second_pass: side,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WinRates {
    pub average: f64,
    pub consistent: f64,
}

/// Average win rate counts each pass separately; consistent win rate counts
/// questions won in both passes. Ties are wins for nobody.
pub fn win_rates(records: &[JudgeRecord], sides: SideMap) -> Result<WinRates, EvalError> {
    if records.is_empty() {
        return Err(EvalError::Empty);
    }
    if sides.first_pass == Verdict::Tie || sides.second_pass == Verdict::Tie {
        return Err(EvalError::InvalidThreshold("method side must be A or B".into()));
    }
    let (mut wins, mut both) = (0usize, 0usize);
    for r in records {
        let w1 = r.first_pass_winner == sides.first_pass;
        let w2 = r.second_pass_winner == sides.second_pass;
        wins += usize::from(w1) + usize::from(w2);
        both += usize::from(w1 && w2);
    }
    let n = records.len() as f64;
    Ok(WinRates {
        average: 100.0 * wins as f64 / (2.0 * n),
        consistent: 100.0 * both as f64 / n,
    })
}

/// Mean of per-round win rates.
pub fn win_rates_by_round(records: &[JudgeRecord], sides: SideMap) -> Result<WinRates, EvalError> {
    let mut rounds: BTreeMap<u32, Vec<JudgeRecord>> = BTreeMap::new();
    for r in records {
        rounds.entry(r.round).or_default().push(r.clone());
    }
    if rounds.is_empty() {
        return Err(EvalError::Empty);
    }
    let (mut avg, mut cons) = (0.0, 0.0);
    for recs in rounds.values() {
        let w = win_rates(recs, sides)?;
        avg += w.average;
        cons += w.consistent;
    }
    let k = rounds.len() as f64;
    Ok(WinRates {
        average: avg / k,
        consistent: cons / k,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Wording,
    DistractingInfo,
    NumericalSubstitution,
    ExtraSteps,
    ChangeConstraints,
    ChangeTarget,
}

impl Strategy {
    pub const ALL: [Strategy; 6] = [
        Strategy::Wording,
        Strategy::DistractingInfo,
        Strategy::NumericalSubstitution,
        Strategy::ExtraSteps,
        Strategy::ChangeConstraints,
        Strategy::ChangeTarget,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Strategy::Wording => "wording",
            Strategy::DistractingInfo => "distracting_info",
            Strategy::NumericalSubstitution => "numerical_substitution",
            Strategy::ExtraSteps => "extra_steps",
            Strategy::ChangeConstraints => "change_constraints",
            Strategy::ChangeTarget => "change_target",
        }
    }

    pub fn from_label(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.label() == s)
    }

    /// Surface strategies leave reasoning depth unchanged.
    pub fn is_surface(self) -> bool {
        matches!(
            self,
            Strategy::Wording | Strategy::DistractingInfo | Strategy::NumericalSubstitution
        )
    }
}

/// Majority annotation: a strategy is kept for a question when at least
/// `threshold` of `runs` judge calls select it.
pub fn annotate_strategies<F, E>(
    question_ids: &[String],
    mut judge: F,
    runs: usize,
    threshold: usize,
) -> Result<BTreeMap<String, BTreeSet<Strategy>>, EvalError>
where
    F: FnMut(&str, usize) -> Result<BTreeSet<Strategy>, E>,
    E: core::fmt::Display,
{
    if threshold == 0 || threshold > runs {
        return Err(EvalError::InvalidThreshold(format!("threshold {threshold} with {runs} runs")));
    }
    let mut out = BTreeMap::new();
    for q in question_ids {
        let mut votes: BTreeMap<Strategy, usize> = BTreeMap::new();
        for run in 0..runs {
            let picked = judge(q, run).map_err(|e| EvalError::PartialAnnotation {
                question: q.clone(),
                run,
                message: format!("{e}"),
            })?;
            for s in picked {
                *votes.entry(s).or_default() += 1;
            }
        }
        out.insert(
            q.clone(),
            votes.into_iter().filter(|&(_, v)| v >= threshold).map(|(s, _)| s).collect(),
        );
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Easy,
    Medium,
    Hard,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LevelThresholds {
    /// Mean accuracy at or above this is easy.
    pub easy_min: f64,
    /// Mean accuracy below this is hard.
    pub hard_below: f64,
}

impl Default for LevelThresholds {
    fn default() -> Self {
        Self {
            easy_min: 0.75,
            hard_below: 0.5,
        }
    }
}

/// Buckets questions by first-sample accuracy averaged over runs.
pub fn difficulty_level_split(
    runs: &[BenchmarkRun],
    thresholds: LevelThresholds,
) -> Result<BTreeMap<String, Level>, EvalError> {
    if runs.is_empty() {
        return Err(EvalError::Empty);
    }
    if !(thresholds.hard_below <= thresholds.easy_min) {
        return Err(EvalError::InvalidThreshold("hard_below must not exceed easy_min".into()));
    }
    let mut out = BTreeMap::new();
    for q in runs[0].outcomes.keys() {
        let mut sum = 0.0;
        for r in runs {
            let s = r.outcomes.get(q).ok_or_else(|| EvalError::MissingQuestion {
                question: q.clone(),
                run: r.model_id.clone(),
            })?;
            sum += f64::from(s.first().copied().unwrap_or(0));
        }
        let acc = sum / runs.len() as f64;
        let level = if acc >= thresholds.easy_min {
            Level::Easy
        } else if acc < thresholds.hard_below {
            Level::Hard
        } else {
            Level::Medium
        };
        out.insert(q.clone(), level);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LevelDrop {
    pub questions: usize,
    pub original: f64,
    pub perturbed: f64,
    /// Percentage-point drop.
    pub drop: f64,
}

/// Mean accuracy (percent) over all runs on each level's questions, before
/// and after perturbation. Runs are matched by position.
pub fn level_drops(
    levels: &BTreeMap<String, Level>,
    original: &[BenchmarkRun],
    perturbed: &[BenchmarkRun],
) -> Result<BTreeMap<Level, LevelDrop>, EvalError> {
    if original.len() != perturbed.len() || original.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut acc: BTreeMap<Level, (usize, f64, f64)> = BTreeMap::new();
    for (q, &level) in levels {
        let e = acc.entry(level).or_insert((0, 0.0, 0.0));
        e.0 += 1;
        for (o, p) in original.iter().zip(perturbed) {
            let first = |r: &BenchmarkRun| -> Result<f64, EvalError> {
                r.outcomes
                    .get(q)
                    .and_then(|s| s.first())
                    .map(|&v| f64::from(v))
                    .ok_or_else(|| EvalError::MissingQuestion {
                        question: q.clone(),
                        run: r.model_id.clone(),
                    })
            };
            e.1 += first(o)?;
            e.2 += first(p)?;
        }
    }
    let runs = original.len() as f64;
    Ok(acc
        .into_iter()
        .map(|(level, (n, a, b))| {
            let denom = n as f64 * runs;
            let (original, perturbed) = (100.0 * a / denom, 100.0 * b / denom);
            (
                level,
                LevelDrop {
                    questions: n,
                    original,
                    perturbed,
                    drop: original - perturbed,
                },
            )
        })
        .collect())
}

/// Confusion-matrix metrics in percent, with `true` as the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub true_positive: usize,
    pub false_positive: usize,
    pub true_negative: usize,
    pub false_negative: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
}

/// Metrics for `(predicted, actual)` pairs. Undefined ratios (zero
/// denominators) are reported as 0.
pub fn classification_metrics(pairs: &[(bool, bool)]) -> Result<ClassificationMetrics, EvalError> {
    if pairs.is_empty() {
        return Err(EvalError::Empty);
    }
    let count = |p: bool, a: bool| pairs.iter().filter(|&&x| x == (p, a)).count();
    let (tp, fp, tn, fneg) = (count(true, true), count(true, false), count(false, false), count(false, true));
    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fneg);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(ClassificationMetrics {
        true_positive: tp,
        false_positive: fp,
        true_negative: tn,
        false_negative: fneg,
        precision: 100.0 * precision,
        recall: 100.0 * recall,
        f1: 100.0 * f1,
        accuracy: 100.0 * ratio(tp + tn, pairs.len()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn run(model: &str, rows: &[(&str, &[u8])]) -> BenchmarkRun {
        let mut r = BenchmarkRun::new("bench", model);
        for (q, s) in rows {
            r.outcomes.insert(String::from(*q), s.to_vec());
        }
        r
    }

    #[test]
    fn pdr_examples() {
        assert!((pdr_from_accuracies(10.0, 3.33).unwrap() - 66.70).abs() < 0.05);
        assert!((pdr_from_accuracies(26.67, 3.33).unwrap() - 87.51).abs() < 0.05);
        assert!((pdr_from_accuracies(16.67, 3.33).unwrap() - 80.02).abs() < 0.05);
        assert_eq!(pdr_from_accuracies(0.0, 0.0), Err(EvalError::UndefinedPdr));
        let a = run("m", &[("q1", &[1]), ("q2", &[0])]);
        assert_eq!(pdr(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn pdr_from_thirty_question_runs() {
        // 3/30 and 1/30 correct: 10.00 → 3.33.
        let mk = |hits: usize| {
            let mut r = BenchmarkRun::new("aime", "m");
            for k in 0..30 {
                r.outcomes.insert(format!("q{k:02}"), vec![u8::from(k < hits)]);
            }
            r
        };
        assert_eq!(pdr(&mk(3), &mk(1)).unwrap(), 66.7);
        assert_eq!(pdr(&mk(8), &mk(1)).unwrap(), 87.51);
        assert_eq!(pdr(&mk(5), &mk(1)).unwrap(), 80.02);
    }

    #[test]
    fn pass_at_n_examples() {
        let r = run("m", &[("a", &[0, 1, 0, 0]), ("b", &[1, 0, 0, 0]), ("c", &[0, 0, 0, 0])]);
        assert!((pass_at_n(&r, 1).unwrap() - 100.0 / 3.0).abs() < 1e-12);
        assert!((pass_at_n(&r, 2).unwrap() - 200.0 / 3.0).abs() < 1e-12);
        assert!(pass_at_n(&r, 5).is_err());
        let wrong = run("m", &[("a", &[0, 0])]);
        assert_eq!(pass_at_n(&wrong, 2).unwrap(), 0.0);
    }

    #[test]
    fn mcnemar_examples() {
        assert!((mcnemar_exact(10, 2) - 158.0 / 4096.0).abs() < 1e-12);
        assert_eq!(mcnemar_exact(0, 0), 1.0);
        assert_eq!(mcnemar_exact(7, 7), 1.0);
    }

    #[test]
    fn transitions() {
        let o = run("m", &[("a", &[1]), ("b", &[1]), ("c", &[0]), ("d", &[0])]);
        let p = run("m", &[("a", &[0]), ("b", &[1]), ("c", &[1]), ("d", &[0])]);
        assert_eq!(transition_counts(&paired_outcomes(&o, &p)), (1, 1));
    }

    #[test]
    fn win_rate_fixtures() {
        let rec = |a, b| JudgeRecord {
            question_id: "q".into(),
            first_pass_winner: a,
            second_pass_winner: b,
            round: 0,
        };
        let side = SideMap::fixed(Verdict::A);
        let w = win_rates(&vec![rec(Verdict::A, Verdict::A); 3], side).unwrap();
        assert_eq!((w.average, w.consistent), (100.0, 100.0));
        let w = win_rates(&[rec(Verdict::A, Verdict::B), rec(Verdict::B, Verdict::A)], side).unwrap();
        assert_eq!((w.average, w.consistent), (50.0, 0.0));
        let w = win_rates(&[rec(Verdict::Tie, Verdict::Tie)], side).unwrap();
        assert_eq!((w.average, w.consistent), (0.0, 0.0));
        assert!(win_rates(&[], side).is_err());
    }

    #[test]
    fn majority_annotation() {
        let qs = vec![String::from("q")];
        let picks = [6usize, 2, 3, 0, 0, 0];
        let out = annotate_strategies(
            &qs,
            |_, run| -> Result<BTreeSet<Strategy>, &str> {
                Ok(Strategy::ALL
                    .iter()
                    .zip(picks)
                    .filter(|&(_, n)| run < n)
                    .map(|(s, _)| *s)
                    .collect())
            },
            6,
            3,
        )
        .unwrap();
        let want: BTreeSet<Strategy> = [Strategy::Wording, Strategy::NumericalSubstitution].into_iter().collect();
        assert_eq!(out["q"], want);
        let err = annotate_strategies(&qs, |_, run| if run == 4 { Err("timeout") } else { Ok(BTreeSet::new()) }, 6, 3);
        assert!(matches!(err, Err(EvalError::PartialAnnotation { run: 4, .. })));
    }

    #[test]
    fn levels() {
        let a = run("m1", &[("e", &[1]), ("h", &[0]), ("m", &[1])]);
        let b = run("m2", &[("e", &[1]), ("h", &[0]), ("m", &[0])]);
        let l = difficulty_level_split(&[a, b], LevelThresholds::default()).unwrap();
        assert_eq!(l["e"], Level::Easy);
        assert_eq!(l["h"], Level::Hard);
        assert_eq!(l["m"], Level::Medium);
    }

    #[test]
    fn classification_counts() {
        let m = classification_metrics(&[(true, true), (true, false), (false, false), (false, true)]).unwrap();
        assert_eq!((m.precision, m.recall, m.f1, m.accuracy), (50.0, 50.0, 50.0, 50.0));
    }
}
