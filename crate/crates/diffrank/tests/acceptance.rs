//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use serde::Deserialize;

use diffrank::augment::{augment_matrix, empirical_rates, generate_vae_students, sample_students, train_vae, SamplingConfig, VaeConfig};
use diffrank::datamodel::{mask_holdout, ResponseMatrix};
use diffrank::eval::{
    classification_metrics, mcnemar_exact, pass_at_n, pdr_from_accuracies, win_rates, BenchmarkRun, JudgeRecord,
    SideMap, Verdict,
};
use diffrank::gateway::{verify_rewrite, BackendConfig, Gateway, MockBackend, MockRole, Templates};
use diffrank::gspo::{
    normalize_advantages, target_token_reward, toy_surrogate_gradient, train_toy_policy, GenerativePolicy, GspoConfig,
    RewardMix, ToyPolicy, ToyTask,
};
use diffrank::irt::{evaluate_holdout, fit_mcmc, fit_svi, IrtModelConfig};
use diffrank::pipeline::{Pipeline, Stage};
use diffrank::ranker::{check_symmetric, difficulty_reward, generate_pairs, train_ranker, RankItem, RankerConfig};
use diffrank::rng;
use diffrank::stats::{rank_correlations, spearman, StatsError};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

struct Rasch {
    theta: Vec<f64>,
    d: Vec<f64>,
    matrix: ResponseMatrix,
}

fn simulate_rasch(m: usize, n: usize, seed: u64) -> Rasch {
    let mut r = rng::seeded(seed);
    let theta: Vec<f64> = (0..m).map(|_| rng::normal(&mut r)).collect();
    let d: Vec<f64> = (0..n).map(|_| rng::normal(&mut r)).collect();
    let rows: Vec<Vec<u8>> = theta
        .iter()
        .map(|t| {
            d.iter()
                .map(|dj| u8::from(rng::uniform(&mut r) < 1.0 / (1.0 + (dj - t).exp())))
                .collect()
        })
        .collect();
    Rasch {
        theta,
        d,
        matrix: ResponseMatrix::from_rows(&rows).unwrap(),
    }
}

fn rasch_recovery(sim: &Rasch) -> Outcome {
    let start = Instant::now();
    let fit = fit_svi(&sim.matrix, &IrtModelConfig::default()).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let sd = spearman(&sim.d, &fit.point_difficulties).unwrap();
    let st = spearman(&sim.theta, &fit.point_abilities).unwrap();
    check(
        sd >= 0.85 && st >= 0.85 && elapsed < Duration::from_secs(300),
        format!("spearman d {sd:.4}, theta {st:.4}, {:.1}s", elapsed.as_secs_f64()),
    )
}

fn holdout_prediction(sim: &Rasch) -> Outcome {
    let masked = mask_holdout(&sim.matrix, 0.2, 42).unwrap();
    let cfg = IrtModelConfig::default();
    let base = fit_svi(&masked, &cfg).map_err(|e| e.to_string())?;
    let s = evaluate_holdout(&base, &masked).map_err(|e| e.to_string())?;

    // Same scores from the generating parameters, for reference.
    let mut preds = Vec::new();
    let mut labels = Vec::new();
    for i in 0..masked.num_students() {
        for j in 0..masked.num_questions() {
            if masked.is_held_out(i, j) {
                preds.push(1.0 / (1.0 + (sim.d[j] - sim.theta[i]).exp()));
                labels.push(masked.get(i, j) == 1);
            }
        }
    }
    let oracle = diffrank::irt::score_predictions(&preds, &labels).map_err(|e| e.to_string())?;

    let vae = train_vae(
        &masked,
        &VaeConfig {
            num_generate: 200,
            ..VaeConfig::default()
        },
    )
    .map_err(|e| e.to_string())?;
    let vae_rows = generate_vae_students(&vae, 200, rng::derive_seed(42, 3));
    let sampled = sample_students(
        &empirical_rates(&masked).unwrap(),
        &SamplingConfig {
            num_generate: 200,
            seed: rng::derive_seed(42, 1),
        },
    )
    .map_err(|e| e.to_string())?;
    let aug = augment_matrix(&masked, &vae_rows, &sampled).map_err(|e| e.to_string())?;
    let aug_fit = fit_svi(&aug, &cfg).map_err(|e| e.to_string())?;
    let a = evaluate_holdout(&aug_fit, &aug).map_err(|e| e.to_string())?;
    let drop = s.auc_roc - a.auc_roc;
    check(
        s.auc_roc >= 80.0 && s.brier <= 20.0 && drop <= 2.0,
        format!(
            "AUC {:.2}, Brier {:.2}; augmented AUC {:.2} (drop {drop:.2}); true-parameter AUC {:.2}, Brier {:.2}",
            s.auc_roc, s.brier, a.auc_roc, oracle.auc_roc, oracle.brier
        ),
    )
}

fn svi_mcmc(sim: &Rasch) -> Outcome {
    let cfg = IrtModelConfig::default();
    let svi = fit_svi(&sim.matrix, &cfg).map_err(|e| e.to_string())?;
    let mcmc = fit_mcmc(&sim.matrix, &cfg).map_err(|e| e.to_string())?;
    let rho = spearman(&svi.point_difficulties, &mcmc.point_difficulties).unwrap();
    check(rho >= 0.95, format!("spearman {rho:.4}, mcmc diagnostics {:?}", mcmc.diagnostics))
}

fn pdr_rows() -> Outcome {
    let rows = [(10.00, 3.33, 66.70), (26.67, 3.33, 87.51), (16.67, 3.33, 80.02)];
    let mut worst: f64 = 0.0;
    let mut got = Vec::new();
    for (a, b, want) in rows {
        let v = pdr_from_accuracies(a, b).map_err(|e| e.to_string())?;
        worst = worst.max((v - want).abs());
        got.push(format!("{v:.4}"));
    }
    check(worst <= 0.05, format!("{} (max deviation {worst:.4})", got.join(", ")))
}

fn planted_items(dim: usize, count: usize, topics: usize, seed: u64) -> Vec<RankItem> {
    let mut r = rng::seeded(seed);
    let w: Vec<f64> = (0..dim).map(|_| rng::normal(&mut r)).collect();
    (0..count)
        .map(|k| {
            let e: Vec<f64> = (0..dim).map(|_| rng::normal(&mut r)).collect();
            let d = e.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() / (dim as f64).sqrt();
            RankItem {
                question_id: format!("q{k:04}"),
                topic: format!("topic{}", k % topics),
                embedding: e,
                difficulty: d,
            }
        })
        .collect()
}

fn ranker() -> Outcome {
    let items = planted_items(64, 500, 5, 42);
    let cfg = RankerConfig::default();
    let pairs = generate_pairs(&items, &cfg).map_err(|e| e.to_string())?;
    let symmetric = check_symmetric(&pairs.pairs).is_ok();
    let start = Instant::now();
    let model = train_ranker(&items, &pairs, &cfg).map_err(|e| e.to_string())?;
    let auc = model.train_metrics.mean_cv_auc.unwrap_or(f64::NAN);
    let mut worst: f64 = 0.0;
    for w in items.windows(2) {
        let fwd = difficulty_reward(&model, &w[0].embedding, &w[1].embedding).unwrap();
        let back = difficulty_reward(&model, &w[1].embedding, &w[0].embedding).unwrap();
        worst = worst.max((fwd + back).abs());
    }
    check(
        auc >= 0.95 && symmetric && worst <= 1e-12,
        format!(
            "cv AUC {auc:.4} over {} pairs, symmetric {symmetric}, max |R(a,b)+R(b,a)| {worst:e}, {:.1}s",
            pairs.pairs.len(),
            start.elapsed().as_secs_f64()
        ),
    )
}

fn gspo() -> Outcome {
    // Finite differences inside the clip region.
    let mut max_rel: f64 = 0.0;
    for (eos, seed) in [(None, 1u64), (Some(5u32), 2)] {
        let mut policy = ToyPolicy::uniform(2, 6, 5, eos).unwrap();
        let mut r = rng::seeded(seed);
        policy.logits.iter_mut().for_each(|w| *w = 0.5 * rng::normal(&mut r));
        let mut old = policy.clone();
        old.logits.iter_mut().for_each(|w| *w += 0.01 * rng::normal(&mut r));
        let completions = old.sample(1, 6, seed);
        let logp_old: Vec<f64> = completions.iter().map(|c| old.logprob(1, c)).collect();
        let rewards: Vec<f64> = (0..6).map(|k| (k as f64 * 0.37).sin()).collect();
        let eval = |p: &ToyPolicy| toy_surrogate_gradient(p, 1, &completions, &logp_old, &rewards, 0.2, 1e-8).unwrap();
        let (s, grad) = eval(&policy);
        if s.clip_fraction != 0.0 {
            return Err("finite-difference point is clipped".into());
        }
        let h = 1e-6;
        for k in 0..policy.logits.len() {
            let (mut up, mut dn) = (policy.clone(), policy.clone());
            up.logits[k] += h;
            dn.logits[k] -= h;
            let fd = (eval(&up).0.objective - eval(&dn).0.objective) / (2.0 * h);
            max_rel = max_rel.max((fd - grad[k]).abs() / fd.abs().max(grad[k].abs()).max(1e-6));
        }
    }

    let task = ToyTask::emit_target(3, 6, 4, None);
    let improved = (0..10u64)
        .filter(|&seed| {
            let cfg = GspoConfig {
                seed,
                steps: 200,
                ..GspoConfig::default()
            };
            let out = train_toy_policy(&task, target_token_reward, &RewardMix::default(), &cfg).unwrap();
            out.curve[200].mean_reward > out.curve[0].mean_reward
        })
        .count();

    let mut r = rng::seeded(9);
    let mut worst_mean: f64 = 0.0;
    for k in 2..40 {
        let rewards: Vec<f64> = (0..k).map(|_| 100.0 * rng::normal(&mut r)).collect();
        let a = normalize_advantages(&rewards, 1e-8);
        worst_mean = worst_mean.max((a.iter().sum::<f64>() / k as f64).abs());
    }
    let flat = [0.0, 1.0, -3.5, 1e6]
        .iter()
        .all(|&c| normalize_advantages(&[c; 7], 1e-8).iter().all(|&a| a == 0.0));
    check(
        max_rel <= 1e-4 && improved >= 8 && worst_mean <= 1e-12 && flat,
        format!(
            "gradient rel err {max_rel:.2e}, improved on {improved}/10 seeds, max |mean adv| {worst_mean:.1e}, equal groups zero {flat}"
        ),
    )
}

fn kendall_brute(x: &[f64], y: &[f64]) -> f64 {
    let (mut s, mut tx, mut ty, mut n0) = (0i64, 0i64, 0i64, 0i64);
    for i in 0..x.len() {
        for j in i + 1..x.len() {
            n0 += 1;
            let a = (x[i] - x[j]).partial_cmp(&0.0).unwrap() as i64;
            let b = (y[i] - y[j]).partial_cmp(&0.0).unwrap() as i64;
            s += a * b;
            tx += i64::from(a == 0);
            ty += i64::from(b == 0);
        }
    }
    s as f64 / (((n0 - tx) * (n0 - ty)) as f64).sqrt()
}

fn spearman_brute(x: &[f64], y: &[f64]) -> f64 {
    let rank = |v: &[f64]| -> Vec<f64> {
        v.iter()
            .map(|a| v.iter().filter(|b| *b < a).count() as f64 + (v.iter().filter(|b| *b == a).count() as f64 + 1.0) / 2.0)
            .collect()
    };
    let (rx, ry) = (rank(x), rank(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

/// Every vector of length `len` over the alphabet `0..len`: all rank
/// patterns, ties included.
fn all_patterns(len: usize) -> Vec<Vec<f64>> {
    let total = len.pow(len as u32);
    (0..total)
        .map(|mut v| {
            (0..len)
                .map(|_| {
                    let d = (v % len) as f64;
                    v /= len;
                    d
                })
                .collect()
        })
        .collect()
}

fn statistics() -> Outcome {
    let mut brute = 0.0;
    for k in 0..=2u32 {
        let mut c = 1u64;
        for i in 0..k {
            c = c * u64::from(12 - i) / u64::from(i + 1);
        }
        brute += c as f64;
    }
    brute = 2.0 * brute / 4096.0;
    let p = mcnemar_exact(10, 2);
    let mcnemar_ok = (p - 158.0 / 4096.0).abs() < 1e-12 && (p - brute).abs() < 1e-12;

    // Every x over all rank patterns against every y for lengths ≤ 4; at
    // lengths 5 and 6 every x against a strided sample of y.
    let mut compared = 0usize;
    let mut worst: f64 = 0.0;
    for len in 2..=6usize {
        let pats = all_patterns(len);
        let stride = match len {
            0..=4 => 1,
            5 => 97,
            _ => 4099,
        };
        for x in &pats {
            for y in pats.iter().step_by(stride) {
                match rank_correlations(x, y) {
                    Ok(r) => {
                        worst = worst
                            .max((r.kendall - kendall_brute(x, y)).abs())
                            .max((r.spearman - spearman_brute(x, y)).abs());
                        compared += 1;
                    }
                    Err(StatsError::ConstantInput) => {}
                    Err(e) => return Err(format!("{x:?} {y:?}: {e}")),
                }
            }
        }
    }

    let rec = |a, b| JudgeRecord {
        question_id: "q".into(),
        first_pass_winner: a,
        second_pass_winner: b,
        round: 0,
    };
    let all_a = vec![rec(Verdict::A, Verdict::A); 4];
    let w1 = win_rates(&all_a, SideMap::fixed(Verdict::A)).unwrap();
    let split = vec![rec(Verdict::A, Verdict::B); 4];
    let w2 = win_rates(&split, SideMap::fixed(Verdict::A)).unwrap();
    let win_ok = (w1.average, w1.consistent) == (100.0, 100.0) && (w2.average, w2.consistent) == (50.0, 0.0);

    let mut r = rng::seeded(7);
    let mut monotone = 0;
    for t in 0..1000 {
        let mut run = BenchmarkRun::new("b", "m");
        let p = rng::uniform(&mut r);
        for q in 0..(1 + t % 25) {
            run.outcomes
                .insert(format!("q{q}"), (0..8).map(|_| u8::from(rng::uniform(&mut r) < p)).collect());
        }
        let curve: Vec<f64> = (1..=8).map(|n| pass_at_n(&run, n).unwrap()).collect();
        monotone += usize::from(curve.windows(2).all(|w| w[1] >= w[0]));
    }
    check(
        mcnemar_ok && worst < 1e-12 && win_ok && monotone == 1000,
        format!(
            "mcnemar(10,2) {p:.15}, {compared} correlation cases max err {worst:.1e}, win rates {win_ok}, pass@n monotone {monotone}/1000"
        ),
    )
}

fn artifacts(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (PathBuf::from(p.file_name().unwrap()), std::fs::read(&p).unwrap()))
        .collect();
    out.sort();
    out
}

fn determinism() -> Outcome {
    let config = Path::new(env!("CARGO_MANIFEST_DIR")).join("demo/mock.toml");
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let start = Instant::now();
    let cold = Pipeline::from_file(&config, Some(tmp.path().join("a")), None, true).map_err(|e| e.to_string())?;
    cold.run_all().map_err(|e| e.to_string())?;
    let first_run = start.elapsed();
    let a = artifacts(&cold.out);

    let warm = Pipeline::from_file(&config, Some(tmp.path().join("a")), None, true).map_err(|e| e.to_string())?;
    for stage in Stage::ALL {
        warm.run(stage).map_err(|e| e.to_string())?;
    }
    let warm_same = artifacts(&warm.out) == a;

    let fresh = Pipeline::from_file(&config, Some(tmp.path().join("b")), None, true).map_err(|e| e.to_string())?;
    fresh.run_all().map_err(|e| e.to_string())?;
    let fresh_same = artifacts(&fresh.out) == a;
    check(
        warm_same && fresh_same && warm.backend_calls() == 0 && first_run < Duration::from_secs(600),
        format!(
            "{} artifacts; warm rerun identical {warm_same} with {} backend calls; fresh directory identical {fresh_same}; full run {:.1}s",
            a.len(),
            warm.backend_calls(),
            first_run.as_secs_f64()
        ),
    )
}

#[derive(Deserialize)]
struct LabeledItem {
    question: String,
    solution: String,
    answer: String,
    verifier_output: String,
    label_valid: bool,
}

fn verifier() -> Outcome {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/verifier_labels.jsonl");
    let items: Vec<LabeledItem> = diffrank::io::read_jsonl(&path).map_err(|e| e.to_string())?;
    let t = Templates::default();
    let mut mock = MockBackend::new(MockRole::Scripted);
    for it in &items {
        let prompt = Templates::render(
            &t.verify,
            &[("question", &it.question), ("solution", &it.solution), ("answer", &it.answer)],
        );
        mock = mock.scripted(&prompt, &it.verifier_output);
    }
    let gw = Gateway::new(
        BackendConfig {
            model_id: "verifier".into(),
            ..BackendConfig::default()
        },
        Box::new(mock),
    )
    .map_err(|e| e.to_string())?;
    let mut pairs = Vec::new();
    for it in &items {
        let v = verify_rewrite(&gw, &t, &it.question, &it.solution, &it.answer).map_err(|e| e.to_string())?;
        pairs.push((v.reward == 1, it.label_valid));
    }
    let m = classification_metrics(&pairs).map_err(|e| e.to_string())?;

    let count = |p: bool, a: bool| pairs.iter().filter(|&&x| x == (p, a)).count();
    let (tp, fp, tn, fn_) = (count(true, true), count(true, false), count(false, false), count(false, true));
    let precision = 100.0 * tp as f64 / (tp + fp) as f64;
    let recall = 100.0 * tp as f64 / (tp + fn_) as f64;
    let f1 = 2.0 * precision * recall / (precision + recall);
    let accuracy = 100.0 * (tp + tn) as f64 / pairs.len() as f64;
    // Hand count of the fixture: 9 TP, 3 FP, 6 TN, 2 FN.
    let hand = (tp, fp, tn, fn_) == (9, 3, 6, 2);
    let close = |a: f64, b: f64| (a - b).abs() < 1e-9;
    let ok = hand
        && (m.true_positive, m.false_positive, m.true_negative, m.false_negative) == (tp, fp, tn, fn_)
        && close(m.precision, precision)
        && close(m.recall, recall)
        && close(m.f1, f1)
        && close(m.accuracy, accuracy)
        && close(m.precision, 75.0)
        && close(m.recall, 900.0 / 11.0)
        && close(m.f1, 1800.0 / 23.0)
        && close(m.accuracy, 75.0);
    check(
        ok,
        format!(
            "TP {tp} FP {fp} TN {tn} FN {fn_}; precision {:.2} recall {:.2} F1 {:.2} accuracy {:.2}",
            m.precision, m.recall, m.f1, m.accuracy
        ),
    )
}

fn main() {
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let sim = simulate_rasch(40, 400, 42);
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome + '_>)> = vec![
        ("1 rasch recovery", Box::new(|| rasch_recovery(&sim))),
        ("2 holdout prediction", Box::new(|| holdout_prediction(&sim))),
        ("3 svi/mcmc consistency", Box::new(|| svi_mcmc(&sim))),
        ("4 drop-rate arithmetic", Box::new(pdr_rows)),
        ("5 difficulty ranker", Box::new(ranker)),
        ("6 gspo", Box::new(gspo)),
        ("7 statistics oracles", Box::new(statistics)),
        ("8 determinism", Box::new(determinism)),
        ("9 verifier metrics", Box::new(verifier)),
    ];
    let mut failed = 0;
    for (name, f) in &criteria {
        if !filter.is_empty() && !filter.iter().any(|p| name.contains(p.as_str())) {
            continue;
        }
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            Err(e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match outcome {
            Ok(d) => println!("PASS [{name}] {d}"),
            Err(d) => {
                failed += 1;
                println!("FAIL [{name}] {d}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
