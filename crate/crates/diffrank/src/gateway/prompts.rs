//! Prompt templates with `{name}` placeholders. Defaults are compiled in;
//! a directory of same-named `.txt` files overrides them.

use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum PromptError {
    #[error("template `{template}` lacks placeholder {{{placeholder}}}")]
    MissingPlaceholder { template: &'static str, placeholder: &'static str },
    #[error("template `{template}` uses unknown placeholder {{{placeholder}}}")]
    UnknownPlaceholder { template: &'static str, placeholder: String },
    #[error("reading template `{0}`: {1}")]
    Read(String, String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Templates {
    pub answer: String,
    pub verify: String,
    pub judge: String,
    pub annotate: String,
}

const SPECS: [(&str, &[&str]); 4] = [
    ("answer", &["question"]),
    ("verify", &["question", "solution", "answer"]),
    ("judge", &["criteria", "question_a", "question_b"]),
    ("annotate", &["strategies", "question_a", "question_b"]),
];

fn placeholder_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\{([a-z_]+)\}").expect("static regex"))
}

impl Default for Templates {
    fn default() -> Self {
        Self {
            answer: include_str!("../../prompts/answer.txt").into(),
            verify: include_str!("../../prompts/verify.txt").into(),
            judge: include_str!("../../prompts/judge.txt").into(),
            annotate: include_str!("../../prompts/annotate.txt").into(),
        }
    }
}

impl Templates {
    /// Defaults, with any `answer.txt`, `verify.txt`, `judge.txt` or
    /// `annotate.txt` found in `dir` taking precedence.
    pub fn load(dir: Option<&Path>) -> Result<Self, PromptError> {
        let mut t = Self::default();
        if let Some(dir) = dir {
            for (name, slot) in t.slots_mut() {
                let path = dir.join(format!("{name}.txt"));
                if path.exists() {
                    *slot = std::fs::read_to_string(&path)
                        .map_err(|e| PromptError::Read(path.display().to_string(), e.to_string()))?;
                }
            }
        }
        t.validate()?;
        Ok(t)
    }

    fn slots_mut(&mut self) -> [(&'static str, &mut String); 4] {
        [
            ("answer", &mut self.answer),
            ("verify", &mut self.verify),
            ("judge", &mut self.judge),
            ("annotate", &mut self.annotate),
        ]
    }

    fn get(&self, name: &str) -> &str {
        match name {
            "answer" => &self.answer,
            "verify" => &self.verify,
            "judge" => &self.judge,
            _ => &self.annotate,
        }
    }

    pub fn validate(&self) -> Result<(), PromptError> {
        for (name, required) in SPECS {
            let text = self.get(name);
            for p in required {
                if !text.contains(&format!("{{{p}}}")) {
                    return Err(PromptError::MissingPlaceholder {
                        template: name,
                        placeholder: p,
                    });
                }
            }
            for cap in placeholder_re().captures_iter(text) {
                if !required.contains(&&cap[1]) {
                    return Err(PromptError::UnknownPlaceholder {
                        template: name,
                        placeholder: cap[1].to_string(),
                    });
                }
            }
        }
        Ok(())
    }

    /// Substitutes placeholders in one pass over the template, so values
    /// containing braces are inserted verbatim.
    pub fn render(template: &str, values: &[(&str, &str)]) -> String {
        placeholder_re()
            .replace_all(template, |c: &regex::Captures| {
                values
                    .iter()
                    .find(|(k, _)| *k == &c[1])
                    .map_or_else(|| c[0].to_string(), |(_, v)| v.to_string())
            })
            .into_owned()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_values_are_verbatim() {
        let t = Templates::default();
        t.validate().unwrap();
        let p = Templates::render(&t.answer, &[("question", "Find {x} if x+1=2.")]);
        assert!(p.contains("Find {x} if x+1=2."));
        assert!(p.contains("\\boxed{}"));
    }

    #[test]
    fn missing_placeholder_is_reported() {
        let t = Templates {
            verify: "no fields".into(),
            ..Templates::default()
        };
        assert!(matches!(t.validate(), Err(PromptError::MissingPlaceholder { template: "verify", .. })));
    }
}
