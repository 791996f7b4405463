//! The four model roles, built on [`Gateway`].

use std::collections::{BTreeMap, BTreeSet};
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::extract::{answers_match, extract_boxed, normalize_answer};
use super::{dispatch, Gateway, GatewayError, Result, Templates};
use crate::datamodel::{EmbeddingRecord, QuestionRecord};
use crate::eval::{annotate_strategies, EvalError, JudgeRecord, Strategy, Verdict};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerOutcome {
    pub extracted_answer: Option<String>,
    pub correct: u8,
    pub extraction_failed: bool,
}

pub fn answer_question(
    gw: &Gateway,
    templates: &Templates,
    question: &QuestionRecord,
    sample_index: u32,
) -> Result<AnswerOutcome> {
    let prompt = Templates::render(&templates.answer, &[("question", &question.text)]);
    let text = gw.complete(&prompt, sample_index)?;
    Ok(match extract_boxed(&text) {
        Some(ans) => AnswerOutcome {
            correct: u8::from(answers_match(&ans, &question.answer)),
            extracted_answer: Some(normalize_answer(&ans)),
            extraction_failed: false,
        },
        None => AnswerOutcome {
            extracted_answer: None,
            correct: 0,
            extraction_failed: true,
        },
    })
}

/// Embeds `text`; `expected_dim` is the bank's dimension, if one exists.
pub fn embed(gw: &Gateway, question_id: &str, text: &str, expected_dim: Option<usize>) -> Result<EmbeddingRecord> {
    if text.is_empty() {
        return Err(GatewayError::EmptyInput("embedding text"));
    }
    let v = gw.embed_text(text)?;
    if let Some(expected) = expected_dim {
        if v.len() != expected {
            return Err(GatewayError::DimensionMismatch { expected, got: v.len() });
        }
    }
    Ok(EmbeddingRecord::new(question_id, v, gw.model_id()))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerifierVerdict {
    pub reward: i8,
    pub raw_judgment: String,
    pub verifier_model: String,
}

fn verdict_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)final\s+verdict\s*:\s*\**\s*(correct|incorrect)\b").expect("static regex"))
}

/// `1` for an accepted rewrite, `-1` for rejected or unparseable.
pub fn parse_verdict(text: &str) -> i8 {
    if let Some(c) = verdict_re().captures_iter(text).last() {
        return if c[1].eq_ignore_ascii_case("correct") { 1 } else { -1 };
    }
    match text.trim().trim_end_matches('.').to_ascii_lowercase().as_str() {
        "correct" => 1,
        _ => -1,
    }
}

pub fn verify_rewrite(
    gw: &Gateway,
    templates: &Templates,
    question: &str,
    solution: &str,
    answer: &str,
) -> Result<VerifierVerdict> {
    for (name, v) in [("question", question), ("solution", solution), ("answer", answer)] {
        if v.trim().is_empty() {
            return Err(GatewayError::EmptyInput(match name {
                "question" => "question",
                "solution" => "solution",
                _ => "answer",
            }));
        }
    }
    let prompt = Templates::render(
        &templates.verify,
        &[("question", question), ("solution", solution), ("answer", answer)],
    );
    let raw = gw.complete(&prompt, 0)?;
    Ok(VerifierVerdict {
        reward: parse_verdict(&raw),
        raw_judgment: raw,
        verifier_model: gw.model_id().into(),
    })
}

fn choice_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)final\s+choice\s*:\s*\**\s*(a|b|tie)\b").expect("static regex"))
}

/// Position named by the last `Final choice:` line.
pub fn parse_judge_choice(text: &str) -> Option<Verdict> {
    let c = choice_re().captures_iter(text).last()?;
    Some(match c[1].to_ascii_lowercase().as_str() {
        "a" => Verdict::A,
        "b" => Verdict::B,
        _ => Verdict::Tie,
    })
}

/// Judges `question_a` against `question_b` twice, the second time with the
/// positions swapped. Both winners are recorded by underlying question:
/// `A` always means `question_a`.
pub fn judge_pair(
    gw: &Gateway,
    templates: &Templates,
    question_id: &str,
    question_a: &str,
    question_b: &str,
    criteria: &str,
    round: u32,
) -> Result<JudgeRecord> {
    if question_a.trim().is_empty() || question_b.trim().is_empty() {
        return Err(GatewayError::EmptyInput("judged question"));
    }
    let ask = |first: &str, second: &str, pass: u8| -> Result<Verdict> {
        let prompt = Templates::render(
            &templates.judge,
            &[("criteria", criteria), ("question_a", first), ("question_b", second)],
        );
        let text = gw.complete(&prompt, round)?;
        parse_judge_choice(&text).ok_or_else(|| GatewayError::JudgeParse {
            question_id: question_id.into(),
            pass,
        })
    };
    let first = ask(question_a, question_b, 1)?;
    let second = match ask(question_b, question_a, 2)? {
        Verdict::A => Verdict::B,
        Verdict::B => Verdict::A,
        Verdict::Tie => Verdict::Tie,
    };
    Ok(JudgeRecord {
        question_id: question_id.into(),
        first_pass_winner: first,
        second_pass_winner: second,
        round,
    })
}

fn strategies_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?im)^\s*strategies\s*:\s*(.*)$").expect("static regex"))
}

pub fn parse_strategies(text: &str) -> Option<BTreeSet<Strategy>> {
    let line = strategies_re().captures_iter(text).last()?[1].trim().to_ascii_lowercase();
    if line == "none" {
        return Some(BTreeSet::new());
    }
    line.split(',')
        .map(|s| Strategy::from_label(s.trim().trim_end_matches('.')))
        .collect()
}

/// Majority strategy annotation of `(id, original, rewrite)` triples, with
/// `runs` independent annotator calls per pair.
pub fn annotate_rewrites(
    gw: &Gateway,
    templates: &Templates,
    pairs: &[(String, String, String)],
    runs: usize,
    threshold: usize,
) -> std::result::Result<BTreeMap<String, BTreeSet<Strategy>>, EvalError> {
    let labels: Vec<&str> = Strategy::ALL.iter().map(|s| s.label()).collect();
    let labels = labels.join(", ");
    let jobs: Vec<(usize, usize)> = (0..pairs.len()).flat_map(|p| (0..runs).map(move |r| (p, r))).collect();
    let results = dispatch(&jobs, gw.config().max_parallel, |&(p, r)| {
        let (_, orig, rw) = &pairs[p];
        let prompt = Templates::render(
            &templates.annotate,
            &[("strategies", &labels), ("question_a", orig), ("question_b", rw)],
        );
        gw.complete(&prompt, r as u32).and_then(|t| {
            parse_strategies(&t).ok_or_else(|| GatewayError::Parse(format!("no strategy line in `{t}`")))
        })
    });
    let mut by_key: BTreeMap<(&str, usize), std::result::Result<BTreeSet<Strategy>, String>> = BTreeMap::new();
    for (&(p, r), res) in jobs.iter().zip(results) {
        by_key.insert((pairs[p].0.as_str(), r), res.map_err(|e| e.to_string()));
    }
    let ids: Vec<String> = pairs.iter().map(|p| p.0.clone()).collect();
    annotate_strategies(&ids, |q, run| by_key[&(q, run)].clone(), runs, threshold)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn verdict_parsing() {
        assert_eq!(parse_verdict("correct"), 1);
        assert_eq!(parse_verdict("incorrect"), -1);
        assert_eq!(parse_verdict("blah\nFinal verdict: CORRECT"), 1);
        assert_eq!(parse_verdict("Final verdict: correct\nFinal verdict: INCORRECT"), -1);
        assert_eq!(parse_verdict("looks fine to me"), -1);
    }

    #[test]
    fn choice_and_strategy_parsing() {
        assert_eq!(parse_judge_choice("x\nFinal choice: **B**"), Some(Verdict::B));
        assert_eq!(parse_judge_choice("Final choice: tie"), Some(Verdict::Tie));
        assert_eq!(parse_judge_choice("I prefer A"), None);
        let s = parse_strategies("Strategies: wording, extra_steps").unwrap();
        assert_eq!(s.into_iter().collect::<Vec<_>>(), vec![Strategy::Wording, Strategy::ExtraSteps]);
        assert_eq!(parse_strategies("Strategies: none"), Some(BTreeSet::new()));
        assert_eq!(parse_strategies("Strategies: wording, magic"), None);
    }
}
