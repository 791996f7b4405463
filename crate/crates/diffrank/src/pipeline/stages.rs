use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{Manifest, Pipeline, PipelineError, Result, RewriteRecord, Role, Stage};
use crate::augment::{
    augment_matrix, empirical_rates, generate_vae_students, sample_students, train_vae,
};
use crate::datamodel::{build_response_matrix, mask_holdout, QuestionRecord, Response, ResponseMatrix};
use crate::eval::{classification_metrics, BenchmarkRun, ClassificationMetrics, RankCorrelation};
use crate::gateway::{answer_question, dispatch, embed, verify_rewrite, MockWorld, WorldQuestion};
use crate::gspo::{target_token_reward, train_toy_policy, ToyTask};
use crate::io::{
    abilities_csv, curve_csv, cv_csv, load_embeddings, load_matrix, load_questions, load_responses, read_json,
    read_jsonl, save_embeddings, save_matrix, save_responses, save_runs, write_atomic, write_json, write_jsonl,
    CalibrationDoc, RankerDoc,
};
use crate::irt::{evaluate_holdout, fit_mcmc, fit_svi, IrtError, IrtModelConfig, ModelKind, PriorKind};
use crate::ranker::{check_symmetric, difficulty_reward, generate_pairs, train_ranker, RankItem, RankerConfig};
use crate::rng::derive_seed;
use crate::stats::{rank_correlations, spearman};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct AnswerLine {
    student_id: String,
    benchmark_id: String,
    question_id: String,
    sample_index: u32,
    extracted_answer: Option<String>,
    correct: u8,
    extraction_failed: bool,
}

struct AnswerJob {
    question: QuestionRecord,
    benchmark_id: &'static str,
    /// Id the outcome is recorded under; a rewrite is keyed by its original.
    key: String,
    sample: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub(super) struct SweepRow {
    pub model: ModelKind,
    pub prior: PriorKind,
    pub augmented: bool,
    pub auc_roc: Option<f64>,
    pub brier: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct IrtChecks {
    matrix: String,
    students: usize,
    questions: usize,
    holdout_auc_roc: Option<f64>,
    holdout_brier: Option<f64>,
    difficulty_vs_accuracy: Option<RankCorrelation>,
    mcmc_spearman: Option<f64>,
    mcmc_diagnostics: Vec<String>,
    augmentation_shift: Option<RankCorrelation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RewardLine {
    rewrite_id: String,
    original_id: String,
    r_diff: f64,
    r_cor: i8,
    reward: f64,
    verifier_model: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct AugmentSummary {
    vae_rows: usize,
    sampled_rows: usize,
    vae_loss_trace: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct GspoSummary {
    initial_mean_reward: f64,
    final_mean_reward: f64,
    diagnostics: Vec<String>,
}

#[derive(Serialize)]
struct GspoTaskDoc<'a> {
    task: &'a ToyTask,
    config: crate::gspo::GspoConfig,
    mix: crate::gspo::RewardMix,
}

fn markdown_sweep(rows: &[SweepRow]) -> String {
    let mut s = String::from("| Model | Prior | Augmentation | AUC-ROC | Brier |\n|---|---|---|---|---|\n");
    for r in rows {
        let auc = r.auc_roc.map_or_else(|| "n/a".to_string(), |a| format!("{a:.2}"));
        s.push_str(&format!(
            "| {} | {} | {} | {auc} | {:.2} |\n",
            r.model.label(),
            r.prior.label(),
            if r.augmented { "yes" } else { "no" },
            r.brier
        ));
    }
    s
}

impl Pipeline {
    fn questions_path(&self, stage: Stage) -> Result<PathBuf> {
        self.require_input(stage, self.config.questions.as_ref(), "questions")
    }

    fn rewrites_path(&self, stage: Stage) -> Result<Option<PathBuf>> {
        match &self.config.rewrites {
            None => Ok(None),
            Some(p) => self.require_input(stage, Some(p), "rewrites").map(Some),
        }
    }

    /// Loads rewrites and checks them against the question bank.
    fn load_rewrites(&self, path: &Path, bank: &[QuestionRecord]) -> Result<Vec<RewriteRecord>> {
        let recs: Vec<RewriteRecord> = read_jsonl(path)?;
        let bank_ids: BTreeSet<&str> = bank.iter().map(|q| q.id.as_str()).collect();
        let mut ids = BTreeSet::new();
        let mut originals = BTreeSet::new();
        for r in &recs {
            let bad = |m: &str| Err(PipelineError::Config(format!("{}: rewrite `{}` {m}", path.display(), r.id)));
            if r.id.is_empty() || r.text.trim().is_empty() || r.answer.trim().is_empty() {
                return bad("has an empty id, text or answer");
            }
            if bank_ids.contains(r.id.as_str()) || !ids.insert(r.id.as_str()) {
                return bad("reuses an existing id");
            }
            if !bank_ids.contains(r.original_id.as_str()) {
                return bad("refers to an unknown original");
            }
            if !originals.insert(r.original_id.as_str()) {
                return bad("duplicates another rewrite of the same original");
            }
        }
        Ok(recs)
    }

    fn rewrite_question(r: &RewriteRecord, original: &QuestionRecord) -> QuestionRecord {
        QuestionRecord {
            id: r.id.clone(),
            text: r.text.clone(),
            answer: r.answer.clone(),
            topic: original.topic.clone(),
            source: original.source.clone(),
            given_level: None,
        }
    }

    pub(super) fn collect(&self) -> Result<Manifest> {
        let st = Stage::Collect;
        let qpath = self.questions_path(st)?;
        let bank = load_questions(&qpath)?;
        let rpath = self.rewrites_path(st)?;
        let rewrites = match &rpath {
            Some(p) => self.load_rewrites(p, &bank)?,
            None => Vec::new(),
        };
        let by_id: BTreeMap<&str, &QuestionRecord> = bank.iter().map(|q| (q.id.as_str(), q)).collect();
        let benchmark: BTreeSet<&str> = if rewrites.is_empty() {
            by_id.keys().copied().collect()
        } else {
            rewrites.iter().map(|r| r.original_id.as_str()).collect()
        };
        let samples = self.config.collect.samples;
        let mut jobs = Vec::new();
        for q in &bank {
            let n = if benchmark.contains(q.id.as_str()) { samples } else { 1 };
            for s in 0..n {
                jobs.push(AnswerJob {
                    question: q.clone(),
                    benchmark_id: "original",
                    key: q.id.clone(),
                    sample: s,
                });
            }
        }
        for r in &rewrites {
            for s in 0..samples {
                jobs.push(AnswerJob {
                    question: Self::rewrite_question(r, by_id[r.original_id.as_str()]),
                    benchmark_id: "perturbed",
                    key: r.original_id.clone(),
                    sample: s,
                });
            }
        }
        let world = self.mock.then(|| {
            let qs: Vec<WorldQuestion> = jobs
                .iter()
                .filter(|j| j.sample == 0)
                .map(|j| WorldQuestion {
                    text: j.question.text.clone(),
                    answer: j.question.answer.clone(),
                })
                .collect();
            Arc::new(MockWorld::new(&qs, self.templates(), self.config.embed.dim, self.config.seed))
        });

        let mut answers = Vec::new();
        let mut responses = Vec::new();
        let mut runs: BTreeMap<(&str, &str), BenchmarkRun> = BTreeMap::new();
        for student in &self.config.collect.students {
            let gw = self.gateway(Role::Student, &student.id, world.as_ref())?;
            let outcomes = dispatch(&jobs, gw.config().max_parallel, |j| {
                answer_question(&gw, self.templates(), &j.question, j.sample)
            });
            for (j, o) in jobs.iter().zip(outcomes) {
                let o = o?;
                if j.sample == 0 && j.benchmark_id == "original" {
                    responses.push(Response::new(&student.id, &j.question.id, o.correct));
                }
                if j.benchmark_id == "perturbed" || benchmark.contains(j.key.as_str()) {
                    runs.entry((j.benchmark_id, &student.id))
                        .or_insert_with(|| BenchmarkRun::new(j.benchmark_id, &student.id))
                        .outcomes
                        .entry(j.key.clone())
                        .or_default()
                        .push(o.correct);
                }
                answers.push(AnswerLine {
                    student_id: student.id.clone(),
                    benchmark_id: j.benchmark_id.into(),
                    question_id: j.question.id.clone(),
                    sample_index: j.sample,
                    extracted_answer: o.extracted_answer,
                    correct: o.correct,
                    extraction_failed: o.extraction_failed,
                });
            }
        }
        answers.sort_by(|a, b| {
            (&a.student_id, &a.benchmark_id, &a.question_id, a.sample_index).cmp(&(
                &b.student_id,
                &b.benchmark_id,
                &b.question_id,
                b.sample_index,
            ))
        });
        let runs: Vec<BenchmarkRun> = runs.into_values().collect();
        save_responses(&self.artifact("responses.jsonl"), &responses)?;
        save_runs(&self.artifact("runs.jsonl"), &runs)?;
        write_jsonl(&self.artifact("answers.jsonl"), &answers)?;
        let mut inputs = vec![("questions", qpath.as_path())];
        if let Some(p) = &rpath {
            inputs.push(("rewrites", p.as_path()));
        }
        self.write_manifest(
            st,
            &(&self.config.collect, &self.config.gateway, self.mock),
            &inputs,
            &["responses.jsonl", "runs.jsonl", "answers.jsonl"],
        )
    }

    pub(super) fn matrix(&self) -> Result<Manifest> {
        let st = Stage::Matrix;
        let input = self.require(st, "responses.jsonl", Stage::Collect)?;
        let log = load_responses(&input)?;
        let m = build_response_matrix(&log, self.config.collect.completeness)
            .map_err(|e| PipelineError::compute(st.name(), e))?;
        let m = mask_holdout(&m, self.config.matrix.holdout_fraction, self.config.seed)
            .map_err(|e| PipelineError::compute(st.name(), e))?;
        save_matrix(&self.artifact("matrix.txt"), &m)?;
        self.write_manifest(
            st,
            &(&self.config.matrix, self.config.collect.completeness),
            &[("responses", &input)],
            &["matrix.txt"],
        )
    }

    pub(super) fn augment(&self) -> Result<Manifest> {
        let st = Stage::Augment;
        let input = self.require(st, "matrix.txt", Stage::Matrix)?;
        let m = load_matrix(&input)?;
        let seed = self.config.seed;
        let cfg = &self.config.augment;
        let compute = |e: crate::augment::AugmentError| PipelineError::compute(st.name(), e);
        let generator = train_vae(&m, &cfg.vae_config(seed)).map_err(compute)?;
        let vae_rows = generate_vae_students(&generator, cfg.vae.num_generate, derive_seed(seed, 3));
        let rates = empirical_rates(&m).map_err(compute)?;
        let sampled = sample_students(&rates, &cfg.sampling_config(seed)).map_err(compute)?;
        let aug = augment_matrix(&m, &vae_rows, &sampled).map_err(compute)?;
        save_matrix(&self.artifact("matrix_augmented.txt"), &aug)?;
        let synthetic: Vec<Response> = aug
            .filter_rows(|s| s.is_synthetic)
            .to_responses();
        save_responses(&self.artifact("synthetic_responses.jsonl"), &synthetic)?;
        write_json(
            &self.artifact("augment.json"),
            &AugmentSummary {
                vae_rows: vae_rows.len(),
                sampled_rows: sampled.len(),
                vae_loss_trace: generator.loss_trace.clone(),
            },
        )?;
        self.write_manifest(
            st,
            &cfg,
            &[("matrix", &input)],
            &["matrix_augmented.txt", "synthetic_responses.jsonl", "augment.json"],
        )
    }

    pub(super) fn irt_fit(&self) -> Result<Manifest> {
        let st = Stage::IrtFit;
        let base_path = self.require(st, "matrix.txt", Stage::Matrix)?;
        let base = load_matrix(&base_path)?;
        let irt = &self.config.irt;
        let aug_path = self.artifact("matrix_augmented.txt");
        let aug = if irt.use_augmented {
            Some(load_matrix(&self.require(st, "matrix_augmented.txt", Stage::Augment)?)?)
        } else if self.config.augment.enabled && aug_path.exists() {
            Some(load_matrix(&aug_path)?)
        } else {
            None
        };
        let cfg = irt.fit_config(self.config.seed);
        let fail = |e: IrtError| PipelineError::compute(st.name(), e);
        let (main, other) = match (&aug, irt.use_augmented) {
            (Some(a), true) => (a, Some(&base)),
            (a, _) => (&base, a.as_ref()),
        };
        let result = fit_svi(main, &cfg).map_err(fail)?;
        write_json(&self.artifact("calibration.json"), &CalibrationDoc::new(&result, main))?;
        write_atomic(&self.artifact("abilities.csv"), &abilities_csv(&result, main))?;

        let holdout = if main.holdout_count() > 0 {
            match evaluate_holdout(&result, main) {
                Ok(s) => (Some(s.auc_roc), Some(s.brier)),
                Err(IrtError::UndefinedAuc { brier }) => (None, Some(brier)),
                Err(e) => return Err(fail(e)),
            }
        } else {
            (None, None)
        };
        let col_acc: Vec<f64> = (0..main.num_questions()).map(|j| main.column_accuracy(j)).collect();
        let mut checks = IrtChecks {
            matrix: if irt.use_augmented { "augmented" } else { "base" }.into(),
            students: main.num_students(),
            questions: main.num_questions(),
            holdout_auc_roc: holdout.0,
            holdout_brier: holdout.1,
            difficulty_vs_accuracy: rank_correlations(&result.point_difficulties, &col_acc).ok(),
            mcmc_spearman: None,
            mcmc_diagnostics: Vec::new(),
            augmentation_shift: None,
        };
        if irt.mcmc_check && cfg.model_kind == ModelKind::OnePL {
            let mcmc = fit_mcmc(main, &cfg).map_err(fail)?;
            checks.mcmc_spearman = spearman(&result.point_difficulties, &mcmc.point_difficulties).ok();
            checks.mcmc_diagnostics = mcmc.diagnostics;
        }
        if let Some(o) = other {
            let r = fit_svi(o, &cfg).map_err(fail)?;
            checks.augmentation_shift = rank_correlations(&result.point_difficulties, &r.point_difficulties).ok();
        }
        write_json(&self.artifact("irt_checks.json"), &checks)?;

        let mut outputs = vec!["calibration.json", "abilities.csv", "irt_checks.json"];
        if irt.sweep {
            let rows = self.irt_sweep(&base, aug.as_ref(), &cfg)?;
            write_atomic(&self.artifact("irt_sweep.md"), markdown_sweep(&rows).as_bytes())?;
            write_json(&self.artifact("irt_sweep.json"), &rows)?;
            outputs.extend(["irt_sweep.md", "irt_sweep.json"]);
        }
        let mut inputs = vec![("matrix", base_path.as_path())];
        if aug.is_some() {
            inputs.push(("matrix_augmented", aug_path.as_path()));
        }
        self.write_manifest(st, irt, &inputs, &outputs)
    }

    /// One fit per model × prior × augmentation cell, scored on the held-out
    /// cells of the real students.
    fn irt_sweep(
        &self,
        base: &ResponseMatrix,
        aug: Option<&ResponseMatrix>,
        cfg: &IrtModelConfig,
    ) -> Result<Vec<SweepRow>> {
        let mut cells = Vec::new();
        for model in [ModelKind::OnePL, ModelKind::TwoPL, ModelKind::ThreePL] {
            for prior in [PriorKind::Vague, PriorKind::Hierarchical] {
                cells.push((model, prior, false));
                if aug.is_some() {
                    cells.push((model, prior, true));
                }
            }
        }
        let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
        let rows = dispatch(&cells, threads, |&(model, prior, augmented)| {
            let m = if augmented { aug.expect("augmented cell implies a matrix") } else { base };
            let c = IrtModelConfig {
                model_kind: model,
                prior_kind: prior,
                ..cfg.clone()
            };
            let r = fit_svi(m, &c)?;
            let (auc_roc, brier) = match evaluate_holdout(&r, m) {
                Ok(s) => (Some(s.auc_roc), s.brier),
                Err(IrtError::UndefinedAuc { brier }) => (None, brier),
                Err(e) => return Err(e),
            };
            Ok(SweepRow {
                model,
                prior,
                augmented,
                auc_roc,
                brier,
            })
        });
        rows.into_iter()
            .collect::<std::result::Result<_, IrtError>>()
            .map_err(|e| PipelineError::compute(Stage::IrtFit.name(), e))
    }

    pub(super) fn embed(&self) -> Result<Manifest> {
        let st = Stage::Embed;
        let qpath = self.questions_path(st)?;
        let bank = load_questions(&qpath)?;
        let rpath = self.rewrites_path(st)?;
        let mut texts: Vec<(String, String)> = bank.iter().map(|q| (q.id.clone(), q.text.clone())).collect();
        if let Some(p) = &rpath {
            texts.extend(self.load_rewrites(p, &bank)?.into_iter().map(|r| (r.id, r.text)));
        }
        let gw = self.gateway(Role::Embedder, &self.config.embed.model, None)?;
        let dim = self.config.embed.dim;
        let records = dispatch(&texts, gw.config().max_parallel, |(id, text)| embed(&gw, id, text, Some(dim)))
            .into_iter()
            .collect::<std::result::Result<Vec<_>, _>>()?;
        save_embeddings(&self.artifact("embeddings.jsonl"), &records)?;
        let mut inputs = vec![("questions", qpath.as_path())];
        if let Some(p) = &rpath {
            inputs.push(("rewrites", p.as_path()));
        }
        self.write_manifest(st, &(&self.config.embed, self.mock), &inputs, &["embeddings.jsonl"])
    }

    pub(super) fn ranker_train(&self) -> Result<Manifest> {
        let st = Stage::RankerTrain;
        let qpath = self.questions_path(st)?;
        let cal_path = self.require(st, "calibration.json", Stage::IrtFit)?;
        let emb_path = self.require(st, "embeddings.jsonl", Stage::Embed)?;
        let bank = load_questions(&qpath)?;
        let cal: CalibrationDoc = read_json(&cal_path)?;
        let emb: BTreeMap<String, Vec<f64>> =
            load_embeddings(&emb_path)?.into_iter().map(|e| (e.question_id, e.vector)).collect();
        let mut items: Vec<RankItem> = bank
            .iter()
            .filter_map(|q| {
                Some(RankItem {
                    question_id: q.id.clone(),
                    topic: q.topic.clone(),
                    embedding: emb.get(&q.id)?.clone(),
                    difficulty: *cal.point_difficulties.get(&q.id)?,
                })
            })
            .collect();
        items.sort_by(|a, b| a.question_id.cmp(&b.question_id));
        if items.len() < 2 {
            return Err(PipelineError::compute(st.name(), "fewer than two calibrated, embedded questions"));
        }
        let cfg = RankerConfig {
            seed: self.config.seed,
            ..self.config.ranker.clone()
        };
        let fail = |e: crate::ranker::RankerError| PipelineError::compute(st.name(), e);
        let pairs = generate_pairs(&items, &cfg).map_err(fail)?;
        check_symmetric(&pairs.pairs).map_err(fail)?;
        let ranker = train_ranker(&items, &pairs, &cfg).map_err(fail)?;
        write_json(&self.artifact("ranker.json"), &RankerDoc::from(&ranker))?;
        write_atomic(&self.artifact("ranker_cv.csv"), &cv_csv(&ranker.train_metrics))?;
        self.write_manifest(
            st,
            &cfg,
            &[("questions", &qpath), ("calibration", &cal_path), ("embeddings", &emb_path)],
            &["ranker.json", "ranker_cv.csv"],
        )
    }

    pub(super) fn reward_score(&self) -> Result<Manifest> {
        let st = Stage::RewardScore;
        let qpath = self.questions_path(st)?;
        let rpath = self
            .rewrites_path(st)?
            .ok_or_else(|| PipelineError::Config("stage `reward-score` needs `rewrites`".into()))?;
        let ranker_path = self.require(st, "ranker.json", Stage::RankerTrain)?;
        let emb_path = self.require(st, "embeddings.jsonl", Stage::Embed)?;
        let bank = load_questions(&qpath)?;
        let rewrites = self.load_rewrites(&rpath, &bank)?;
        if let Some(r) = rewrites.iter().find(|r| r.solution.trim().is_empty()) {
            return Err(PipelineError::Config(format!("rewrite `{}` has no solution to verify", r.id)));
        }
        let ranker = read_json::<RankerDoc>(&ranker_path)?.into_ranker(&ranker_path)?;
        let emb: BTreeMap<String, Vec<f64>> =
            load_embeddings(&emb_path)?.into_iter().map(|e| (e.question_id, e.vector)).collect();
        let lookup = |id: &str| {
            emb.get(id).ok_or_else(|| PipelineError::MissingDependency {
                stage: st.name(),
                artifact: emb_path.join(id),
                producer: Stage::Embed.name(),
            })
        };
        let mut diffs = Vec::with_capacity(rewrites.len());
        for r in &rewrites {
            let d = difficulty_reward(&ranker, lookup(&r.original_id)?, lookup(&r.id)?)
                .map_err(|e| PipelineError::compute(st.name(), e))?;
            diffs.push(d);
        }
        let gw = self.gateway(Role::Verifier, &self.config.reward.verifier_model, None)?;
        let verdicts = dispatch(&rewrites, gw.config().max_parallel, |r| {
            verify_rewrite(&gw, self.templates(), &r.text, &r.solution, &r.answer)
        })
        .into_iter()
        .collect::<std::result::Result<Vec<_>, _>>()?;
        let mix = self.config.reward.mix;
        let mut lines: Vec<RewardLine> = rewrites
            .iter()
            .zip(&diffs)
            .zip(&verdicts)
            .map(|((r, &d), v)| RewardLine {
                rewrite_id: r.id.clone(),
                original_id: r.original_id.clone(),
                r_diff: d,
                r_cor: v.reward,
                reward: crate::gspo::mix_reward(d, f64::from(v.reward), None, &mix),
                verifier_model: v.verifier_model.clone(),
            })
            .collect();
        lines.sort_by(|a, b| a.rewrite_id.cmp(&b.rewrite_id));
        write_jsonl(&self.artifact("rewards.jsonl"), &lines)?;
        let mut outputs = vec!["rewards.jsonl"];
        let labeled: Vec<(bool, bool)> = rewrites
            .iter()
            .zip(&verdicts)
            .filter_map(|(r, v)| r.label_valid.map(|l| (v.reward == 1, l)))
            .collect();
        if !labeled.is_empty() {
            let m: ClassificationMetrics =
                classification_metrics(&labeled).map_err(|e| PipelineError::compute(st.name(), e))?;
            write_json(&self.artifact("verifier_metrics.json"), &m)?;
            outputs.push("verifier_metrics.json");
        }
        self.write_manifest(
            st,
            &(&self.config.reward, self.mock),
            &[("questions", &qpath), ("rewrites", &rpath), ("ranker", &ranker_path), ("embeddings", &emb_path)],
            &outputs,
        )
    }

    pub(super) fn gspo_toy(&self) -> Result<Manifest> {
        let st = Stage::GspoToy;
        let g = &self.config.gspo;
        let t = &g.task;
        let task = ToyTask::emit_target(t.prompts, t.vocab, t.max_len, t.eos);
        let cfg = g.config(self.config.seed);
        let out = train_toy_policy(&task, target_token_reward, &g.mix, &cfg)
            .map_err(|e| PipelineError::compute(st.name(), e))?;
        write_json(
            &self.artifact("gspo_task.json"),
            &GspoTaskDoc {
                task: &task,
                config: cfg.clone(),
                mix: g.mix,
            },
        )?;
        write_atomic(&self.artifact("learning_curve.csv"), &curve_csv(&out.curve))?;
        let first = out.curve.first().map_or(0.0, |p| p.mean_reward);
        let last = out.curve.last().map_or(0.0, |p| p.mean_reward);
        write_json(
            &self.artifact("gspo_summary.json"),
            &GspoSummary {
                initial_mean_reward: first,
                final_mean_reward: last,
                diagnostics: out.diagnostics,
            },
        )?;
        self.write_manifest(st, g, &[], &["gspo_task.json", "learning_curve.csv", "gspo_summary.json"])
    }

    pub(super) fn eval(&self) -> Result<Manifest> {
        let st = Stage::Eval;
        let runs_path = match &self.config.eval.runs {
            Some(p) => self.require_input(st, Some(p), "eval.runs")?,
            None => self.require(st, "runs.jsonl", Stage::Collect)?,
        };
        let runs = crate::io::load_runs(&runs_path)?;
        let cal_path = self.artifact("calibration.json");
        let calibration: Option<CalibrationDoc> = if cal_path.exists() { Some(read_json(&cal_path)?) } else { None };
        let mut inputs = vec![("runs", runs_path.clone())];
        if calibration.is_some() {
            inputs.push(("calibration", cal_path.clone()));
        }
        let mut pairs = Vec::new();
        if let (Some(rp), Some(qp)) = (self.rewrites_path(st)?, self.config.questions.as_ref()) {
            let qpath = self.input_path(qp);
            let bank = load_questions(&qpath)?;
            let by_id: BTreeMap<&str, &QuestionRecord> = bank.iter().map(|q| (q.id.as_str(), q)).collect();
            for r in self.load_rewrites(&rp, &bank)? {
                let orig = by_id[r.original_id.as_str()].text.clone();
                pairs.push((r, orig));
            }
            inputs.push(("rewrites", rp));
        }
        let report = self.build_report(&runs, calibration.as_ref(), &pairs)?;
        write_atomic(&self.artifact("report.md"), report.to_markdown().as_bytes())?;
        write_json(&self.artifact("report.json"), &report)?;
        let inputs: Vec<(&str, &Path)> = inputs.iter().map(|(k, p)| (*k, p.as_path())).collect();
        self.write_manifest(st, &(&self.config.eval, self.mock), &inputs, &["report.md", "report.json"])
    }
}
