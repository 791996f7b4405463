//! Evaluation report: drop rates, pass@n, paired tests, difficulty levels,
//! pairwise judging and strategy annotation.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{EvalStage, Pipeline, PipelineError, Result, RewriteRecord, Role, Stage};
use crate::eval::{
    difficulty_level_split, level_drops, mcnemar_exact, paired_outcomes, pass_at_n, pdr, transition_counts,
    BenchmarkRun, EvalError, Level, LevelDrop, RankCorrelation, SideMap, Strategy, Verdict, WinRates,
    win_rates_by_round,
};
use crate::gateway::{annotate_rewrites, dispatch, judge_pair};
use crate::io::CalibrationDoc;
use crate::stats::rank_correlations;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PdrRow {
    pub model: String,
    pub original: f64,
    pub perturbed: f64,
    /// `None` when the original accuracy is zero.
    pub pdr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PassRow {
    pub model: String,
    pub benchmark: String,
    /// `n` → pass@n in percent.
    pub pass: BTreeMap<usize, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McNemarRow {
    pub model: String,
    pub questions: usize,
    /// Correct before, incorrect after.
    pub b: u64,
    /// Incorrect before, correct after.
    pub c: u64,
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeSection {
    pub pairs: usize,
    pub rounds: u32,
    pub rates: WinRates,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategySection {
    pub annotated: usize,
    /// Share of rewrites using each strategy, in percent.
    pub share: BTreeMap<Strategy, f64>,
    /// Share of rewrites using only surface strategies, in percent.
    pub surface_only: f64,
    pub per_question: BTreeMap<String, BTreeSet<Strategy>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub pdr: Vec<PdrRow>,
    pub pass_at: Vec<PassRow>,
    pub mcnemar: Vec<McNemarRow>,
    pub levels: Option<BTreeMap<Level, LevelDrop>>,
    /// Rank correlation of calibrated difficulty with mean accuracy; a
    /// sensible calibration gives negative values.
    pub difficulty_vs_accuracy: Option<RankCorrelation>,
    pub judge: Option<JudgeSection>,
    pub strategies: Option<StrategySection>,
}

impl EvalReport {
    /// Sections computable from benchmark runs alone. Original and perturbed
    /// runs are paired by model id.
    pub fn from_runs(runs: &[BenchmarkRun], cfg: &EvalStage) -> std::result::Result<Self, EvalError> {
        let of = |bench: &str| -> BTreeMap<&str, &BenchmarkRun> {
            runs.iter()
                .filter(|r| r.benchmark_id == bench)
                .map(|r| (r.model_id.as_str(), r))
                .collect()
        };
        let originals = of(&cfg.original_benchmark);
        let perturbed = of(&cfg.perturbed_benchmark);
        if originals.is_empty() {
            return Err(EvalError::Empty);
        }
        let mut report = EvalReport {
            pdr: Vec::new(),
            pass_at: Vec::new(),
            mcnemar: Vec::new(),
            levels: None,
            difficulty_vs_accuracy: None,
            judge: None,
            strategies: None,
        };
        let mut sorted: Vec<&BenchmarkRun> = runs.iter().collect();
        sorted.sort_by(|a, b| (&a.model_id, &a.benchmark_id).cmp(&(&b.model_id, &b.benchmark_id)));
        for r in sorted {
            r.validate()?;
            let samples = r.outcomes.values().next().map_or(0, Vec::len);
            let mut pass = BTreeMap::new();
            for &n in cfg.pass_at.iter().filter(|&&n| n >= 1 && n <= samples) {
                pass.insert(n, pass_at_n(r, n)?);
            }
            report.pass_at.push(PassRow {
                model: r.model_id.clone(),
                benchmark: r.benchmark_id.clone(),
                pass,
            });
        }
        let mut paired_o = Vec::new();
        let mut paired_p = Vec::new();
        for (model, o) in &originals {
            let Some(p) = perturbed.get(model) else { continue };
            let value = match pdr(o, p) {
                Ok(v) => Some(v),
                Err(EvalError::UndefinedPdr) => None,
                Err(e) => return Err(e),
            };
            report.pdr.push(PdrRow {
                model: (*model).into(),
                original: diffrank_core::math::round2(o.accuracy()?),
                perturbed: diffrank_core::math::round2(p.accuracy()?),
                pdr: value,
            });
            let pairs = paired_outcomes(o, p);
            let (b, c) = transition_counts(&pairs);
            report.mcnemar.push(McNemarRow {
                model: (*model).into(),
                questions: pairs.len(),
                b,
                c,
                p_value: mcnemar_exact(b, c),
            });
            paired_o.push((*o).clone());
            paired_p.push((*p).clone());
        }
        if !paired_o.is_empty() {
            // Levels come from the original benchmark; questions missing from
            // any perturbed run are left out.
            let mut levels = difficulty_level_split(&paired_o, cfg.levels)?;
            levels.retain(|q, _| paired_p.iter().all(|r| r.outcomes.contains_key(q)));
            report.levels = Some(level_drops(&levels, &paired_o, &paired_p)?);
        }
        Ok(report)
    }

    /// Attaches the correlation between calibrated difficulty and mean
    /// first-sample accuracy on the original benchmark.
    pub fn with_calibration(&mut self, runs: &[BenchmarkRun], cfg: &EvalStage, cal: &CalibrationDoc) {
        let originals: Vec<&BenchmarkRun> = runs.iter().filter(|r| r.benchmark_id == cfg.original_benchmark).collect();
        let (mut d, mut acc) = (Vec::new(), Vec::new());
        for (q, &diff) in &cal.point_difficulties {
            let firsts: Option<Vec<f64>> = originals
                .iter()
                .map(|r| r.outcomes.get(q).and_then(|s| s.first()).map(|&v| f64::from(v)))
                .collect();
            if let Some(f) = firsts.filter(|f| !f.is_empty()) {
                d.push(diff);
                acc.push(f.iter().sum::<f64>() / f.len() as f64);
            }
        }
        self.difficulty_vs_accuracy = rank_correlations(&d, &acc).ok();
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::from("# Evaluation report\n\n## Performance drop\n\n");
        s.push_str("| Model | Original | Perturbed | PDR |\n|---|---|---|---|\n");
        for r in &self.pdr {
            let p = r.pdr.map_or_else(|| "n/a".to_string(), |v| format!("{v:.2}"));
            s.push_str(&format!("| {} | {:.2} | {:.2} | {p} |\n", r.model, r.original, r.perturbed));
        }
        let ns: BTreeSet<usize> = self.pass_at.iter().flat_map(|r| r.pass.keys().copied()).collect();
        if !ns.is_empty() {
            s.push_str("\n## pass@n\n\n| Model | Benchmark |");
            for n in &ns {
                s.push_str(&format!(" pass@{n} |"));
            }
            s.push_str(&format!("\n|---|---|{}\n", "---|".repeat(ns.len())));
            for r in &self.pass_at {
                s.push_str(&format!("| {} | {} |", r.model, r.benchmark));
                for n in &ns {
                    match r.pass.get(n) {
                        Some(v) => s.push_str(&format!(" {v:.2} |")),
                        None => s.push_str(" n/a |"),
                    }
                }
                s.push('\n');
            }
        }
        if !self.mcnemar.is_empty() {
            s.push_str("\n## Paired test\n\n| Model | Questions | Correct→incorrect | Incorrect→correct | p-value |\n");
            s.push_str("|---|---|---|---|---|\n");
            for r in &self.mcnemar {
                s.push_str(&format!("| {} | {} | {} | {} | {:.4} |\n", r.model, r.questions, r.b, r.c, r.p_value));
            }
        }
        if let Some(levels) = &self.levels {
            s.push_str("\n## By difficulty level\n\n| Level | Questions | Original | Perturbed | Drop |\n");
            s.push_str("|---|---|---|---|---|\n");
            for (l, d) in levels {
                let name = match l {
                    Level::Easy => "easy",
                    Level::Medium => "medium",
                    Level::Hard => "hard",
                };
                s.push_str(&format!(
                    "| {name} | {} | {:.2} | {:.2} | {:.2} |\n",
                    d.questions, d.original, d.perturbed, d.drop
                ));
            }
        }
        if let Some(c) = &self.difficulty_vs_accuracy {
            s.push_str(&format!(
                "\n## Calibration\n\nDifficulty vs accuracy: Spearman {:.3}, Kendall {:.3}\n",
                c.spearman, c.kendall
            ));
        }
        if let Some(j) = &self.judge {
            s.push_str(&format!(
                "\n## Pairwise judging\n\n{} pairs, {} rounds. Average win rate {:.2}, consistent win rate {:.2}\n",
                j.pairs, j.rounds, j.rates.average, j.rates.consistent
            ));
        }
        if let Some(st) = &self.strategies {
            s.push_str(&format!("\n## Strategies\n\n{} rewrites annotated.\n\n| Strategy | Share |\n|---|---|\n", st.annotated));
            for (k, v) in &st.share {
                s.push_str(&format!("| {} | {v:.2} |\n", k.label()));
            }
            s.push_str(&format!("| surface only | {:.2} |\n", st.surface_only));
        }
        s
    }
}

impl Pipeline {
    /// `rewrites` pairs each rewrite with its original's text.
    pub(super) fn build_report(
        &self,
        runs: &[BenchmarkRun],
        calibration: Option<&CalibrationDoc>,
        rewrites: &[(RewriteRecord, String)],
    ) -> Result<EvalReport> {
        let st = Stage::Eval;
        let cfg = &self.config.eval;
        let fail = |e: EvalError| PipelineError::compute(st.name(), e);
        let mut report = EvalReport::from_runs(runs, cfg).map_err(fail)?;
        if let Some(cal) = calibration {
            report.with_calibration(runs, cfg, cal);
        }

        let judged: Vec<(&RewriteRecord, &str, u32)> = rewrites
            .iter()
            .filter_map(|(r, _)| r.baseline.as_deref().map(|b| (r, b)))
            .flat_map(|(r, b)| (0..cfg.judge_rounds).map(move |round| (r, b, round)))
            .collect();
        if !judged.is_empty() {
            let gw = self.gateway(Role::Judge, &cfg.judge_model, None)?;
            let records = dispatch(&judged, gw.config().max_parallel, |&(r, b, round)| {
                judge_pair(&gw, self.templates(), &r.id, &r.text, b, &cfg.criteria, round)
            })
            .into_iter()
            .collect::<std::result::Result<Vec<_>, _>>()?;
            let rates = win_rates_by_round(&records, SideMap::fixed(Verdict::A)).map_err(fail)?;
            report.judge = Some(JudgeSection {
                pairs: judged.len() / cfg.judge_rounds as usize,
                rounds: cfg.judge_rounds,
                rates,
            });
        }

        if cfg.annotate && !rewrites.is_empty() {
            let gw = self.gateway(Role::Annotator, &cfg.annotator_model, None)?;
            let triples: Vec<(String, String, String)> =
                rewrites.iter().map(|(r, orig)| (r.id.clone(), orig.clone(), r.text.clone())).collect();
            let per_question =
                annotate_rewrites(&gw, self.templates(), &triples, cfg.annotation_runs, cfg.annotation_threshold)
                    .map_err(fail)?;
            let n = per_question.len() as f64;
            let share = Strategy::ALL
                .iter()
                .map(|&s| (s, 100.0 * per_question.values().filter(|v| v.contains(&s)).count() as f64 / n))
                .collect();
            let surface = per_question
                .values()
                .filter(|v| !v.is_empty() && v.iter().all(|s| s.is_surface()))
                .count() as f64;
            report.strategies = Some(StrategySection {
                annotated: per_question.len(),
                share,
                surface_only: 100.0 * surface / n,
                per_question,
            });
        }
        Ok(report)
    }
}
