//! Deterministic offline backend. Scripted responses are looked up by prompt
//! digest; anything unscripted falls back to the backend's role.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use serde::Deserialize;

use super::{Backend, ChatRequest, GatewayError, Result, Templates};
use crate::digest::{seed_from_text, sha256_hex};
use crate::eval::Strategy;
use crate::rng;

/// Unit-variance pseudo-random vector determined by `text`.
pub fn synthetic_embedding(text: &str, dim: usize) -> Vec<f64> {
    let mut r = rng::seeded(seed_from_text(text));
    (0..dim).map(|_| rng::normal(&mut r)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorldQuestion {
    pub text: String,
    pub answer: String,
}

/// Simulated question pool for student backends. Each question's difficulty
/// is a fixed linear function of its synthetic embedding, so a ranker
/// trained on mock embeddings has real signal to find.
#[derive(Debug, Clone)]
pub struct MockWorld {
    dim: usize,
    weights: Vec<f64>,
    by_digest: BTreeMap<String, WorldQuestion>,
}

impl MockWorld {
    pub fn new(questions: &[WorldQuestion], templates: &Templates, dim: usize, seed: u64) -> Self {
        let mut r = rng::stream(seed, 0x0057_0e1d);
        let weights = (0..dim).map(|_| rng::normal(&mut r)).collect();
        let by_digest = questions
            .iter()
            .map(|q| {
                let prompt = Templates::render(&templates.answer, &[("question", &q.text)]);
                (sha256_hex(&prompt), q.clone())
            })
            .collect();
        Self {
            dim,
            weights,
            by_digest,
        }
    }

    pub fn difficulty(&self, text: &str) -> f64 {
        let e = synthetic_embedding(text, self.dim);
        e.iter().zip(&self.weights).map(|(a, b)| a * b).sum::<f64>() / (self.dim as f64).sqrt()
    }
}

#[derive(Debug, Clone)]
pub enum MockRole {
    /// Answers world questions correctly with probability σ(ability − d).
    Student { ability: f64, world: Arc<MockWorld> },
    /// Accepts a rewrite with probability `accept_rate`.
    Verifier { accept_rate: f64 },
    Judge,
    Annotator,
    /// Only embeddings and scripted prompts.
    Embedder { dim: usize },
    Scripted,
}

#[derive(Deserialize)]
struct FixtureLine {
    #[serde(default)]
    prompt_digest: Option<String>,
    #[serde(default)]
    prompt: Option<String>,
    response: String,
}

pub struct MockBackend {
    role: MockRole,
    script: BTreeMap<String, String>,
    latency: Duration,
    fail_first: AtomicUsize,
    in_flight: AtomicUsize,
    peak: AtomicUsize,
    calls: AtomicUsize,
}

impl MockBackend {
    pub fn new(role: MockRole) -> Self {
        Self {
            role,
            script: BTreeMap::new(),
            latency: Duration::ZERO,
            fail_first: AtomicUsize::new(0),
            in_flight: AtomicUsize::new(0),
            peak: AtomicUsize::new(0),
            calls: AtomicUsize::new(0),
        }
    }

    pub fn scripted(mut self, prompt: &str, response: &str) -> Self {
        self.script.insert(sha256_hex(prompt), response.into());
        self
    }

    /// Adds every line of a fixture file: `{"prompt_digest"|"prompt", "response"}`.
    pub fn with_fixture(mut self, path: &Path) -> std::result::Result<Self, crate::io::IoError> {
        for line in crate::io::read_jsonl::<FixtureLine>(path)? {
            let digest = match (line.prompt_digest, line.prompt) {
                (Some(d), _) => d,
                (None, Some(p)) => sha256_hex(&p),
                (None, None) => continue,
            };
            self.script.insert(digest, line.response);
        }
        Ok(self)
    }

    pub fn with_latency(mut self, latency: Duration) -> Self {
        self.latency = latency;
        self
    }

    /// The next `n` calls fail with a retryable transport error.
    pub fn failing_first(self, n: usize) -> Self {
        self.fail_first.store(n, Ordering::SeqCst);
        self
    }

    /// Highest number of concurrent calls observed.
    pub fn peak_in_flight(&self) -> usize {
        self.peak.load(Ordering::SeqCst)
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    fn enter(&self) -> Result<InFlight<'_>> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        self.peak.fetch_max(now, Ordering::SeqCst);
        let guard = InFlight(&self.in_flight);
        if !self.latency.is_zero() {
            std::thread::sleep(self.latency);
        }
        let failing = self
            .fail_first
            .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| n.checked_sub(1))
            .is_ok();
        if failing {
            return Err(GatewayError::Transport {
                attempts: 1,
                message: "injected failure".into(),
            });
        }
        Ok(guard)
    }
}

struct InFlight<'a>(&'a AtomicUsize);

impl Drop for InFlight<'_> {
    fn drop(&mut self) {
        self.0.fetch_sub(1, Ordering::SeqCst);
    }
}

fn draw(parts: &[&str]) -> f64 {
    rng::uniform(&mut rng::seeded(seed_from_text(&parts.join("\u{1f}"))))
}

impl Backend for MockBackend {
    fn complete(&self, model_id: &str, request: &ChatRequest) -> Result<String> {
        let _guard = self.enter()?;
        let digest = sha256_hex(&request.prompt);
        if let Some(s) = self.script.get(&digest) {
            return Ok(s.clone());
        }
        let sample = request.sample_index.to_string();
        let u = |salt: &str| draw(&[model_id, &digest, &sample, salt]);
        match &self.role {
            MockRole::Student { ability, world } => {
                let q = world.by_digest.get(&digest).ok_or_else(|| GatewayError::NoScript(digest.clone()))?;
                let p = 1.0 / (1.0 + (world.difficulty(&q.text) - ability).exp());
                Ok(if u("correct") < p {
                    format!("Working through the problem gives the result.\n\\boxed{{{}}}", q.answer)
                } else if u("format") < 0.1 {
                    "I could not finish this one.".to_string()
                } else {
                    "After some algebra the result is \\boxed{?}".to_string()
                })
            }
            MockRole::Verifier { accept_rate } => Ok(if u("verdict") < *accept_rate {
                "The solution checks out.\nFinal verdict: CORRECT".into()
            } else {
                "The stated answer does not follow.\nFinal verdict: INCORRECT".into()
            }),
            MockRole::Judge => {
                let v = u("choice");
                let pick = if v < 0.45 {
                    "A"
                } else if v < 0.9 {
                    "B"
                } else {
                    "Tie"
                };
                Ok(format!("Both are reasonable.\nFinal choice: {pick}"))
            }
            MockRole::Annotator => {
                let picked: Vec<&str> = Strategy::ALL
                    .iter()
                    .filter(|s| u(s.label()) < 0.4)
                    .map(|s| s.label())
                    .collect();
                let list = if picked.is_empty() { "none".to_string() } else { picked.join(", ") };
                Ok(format!("Strategies: {list}"))
            }
            MockRole::Embedder { .. } | MockRole::Scripted => Err(GatewayError::NoScript(digest)),
        }
    }

    fn embed(&self, _model_id: &str, text: &str) -> Result<Vec<f64>> {
        let _guard = self.enter()?;
        match &self.role {
            MockRole::Embedder { dim } => Ok(synthetic_embedding(text, *dim)),
            _ => Err(GatewayError::NoScript(sha256_hex(text))),
        }
    }
}
