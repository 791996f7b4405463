//! Question banks, students, embeddings and the binary response matrix.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DataError {
    #[error("conflicting responses for student `{student}` on question `{question}`")]
    Conflict { student: String, question: String },
    #[error("response matrix has {count} missing cells (first: {examples:?})")]
    MissingCells {
        count: usize,
        examples: Vec<(String, String)>,
    },
    #[error("correct flag must be 0 or 1, got {0}")]
    InvalidFlag(u8),
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("duplicate id `{0}`")]
    DuplicateId(String),
    #[error("record `{id}` has an empty `{field}`")]
    EmptyField { id: String, field: &'static str },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("holdout fraction must lie in [0, 1], got {0}")]
    InvalidFraction(f64),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionRecord {
    pub id: String,
    pub text: String,
    pub answer: String,
    pub topic: String,
    pub source: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub given_level: Option<i64>,
}

impl QuestionRecord {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.id.is_empty() {
            return Err(DataError::EmptyField {
                id: self.id.clone(),
                field: "id",
            });
        }
        if self.topic.is_empty() {
            return Err(DataError::EmptyField {
                id: self.id.clone(),
                field: "topic",
            });
        }
        Ok(())
    }
}

/// Checks per-record invariants and id uniqueness across a bank.
pub fn validate_question_bank(bank: &[QuestionRecord]) -> Result<(), DataError> {
    let mut seen = BTreeSet::new();
    for q in bank {
        q.validate()?;
        if !seen.insert(q.id.as_str()) {
            return Err(DataError::DuplicateId(q.id.clone()));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Real,
    Vae,
    Sampled,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StudentRecord {
    pub id: String,
    pub model_name: String,
    pub is_synthetic: bool,
    pub origin: Origin,
}

impl StudentRecord {
    pub fn real(id: impl Into<String>) -> Self {
        let id = id.into();
        Self {
            model_name: id.clone(),
            id,
            is_synthetic: false,
            origin: Origin::Real,
        }
    }

    pub fn synthetic(id: impl Into<String>, origin: Origin) -> Self {
        let id = id.into();
        Self {
            model_name: id.clone(),
            id,
            is_synthetic: origin != Origin::Real,
            origin,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub question_id: String,
    pub vector: Vec<f64>,
    #[serde(default)]
    pub provider: String,
    pub dim: usize,
}

impl EmbeddingRecord {
    pub fn new(question_id: impl Into<String>, vector: Vec<f64>, provider: impl Into<String>) -> Self {
        let dim = vector.len();
        Self {
            question_id: question_id.into(),
            vector,
            provider: provider.into(),
            dim,
        }
    }
}

/// All records must declare `dim == vector.len()` and share one dimension.
pub fn validate_embedding_bank(bank: &[EmbeddingRecord]) -> Result<Option<usize>, DataError> {
    let mut dim = None;
    let mut seen = BTreeSet::new();
    for e in bank {
        if e.dim != e.vector.len() {
            return Err(DataError::Dimension(alloc::format!(
                "embedding `{}` declares dim {} but has {} values",
                e.question_id,
                e.dim,
                e.vector.len()
            )));
        }
        match dim {
            None => dim = Some(e.dim),
            Some(d) if d != e.dim => {
                return Err(DataError::Dimension(alloc::format!(
                    "embedding `{}` has dim {} but bank dim is {d}",
                    e.question_id,
                    e.dim
                )))
            }
            _ => {}
        }
        if !seen.insert(e.question_id.as_str()) {
            return Err(DataError::DuplicateId(e.question_id.clone()));
        }
    }
    Ok(dim)
}

/// One line of a response log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Response {
    pub student_id: String,
    pub question_id: String,
    pub correct: u8,
}

impl Response {
    pub fn new(student_id: impl Into<String>, question_id: impl Into<String>, correct: u8) -> Self {
        Self {
            student_id: student_id.into(),
            question_id: question_id.into(),
            correct,
        }
    }
}

/// How [`build_response_matrix`] treats cells with no response.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Completeness {
    /// Every (student, question) cell must be present.
    #[default]
    Strict,
    /// Absent cells are recorded as not administered and excluded from
    /// likelihoods and metrics.
    Sparse,
}

/// Binary students × questions matrix, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseMatrix {
    pub students: Vec<StudentRecord>,
    pub questions: Vec<String>,
    pub entries: Vec<u8>,
    /// `true` = held out from fitting.
    pub holdout_mask: Option<Vec<bool>>,
    /// `true` = not administered (sparse mode only).
    pub missing_mask: Option<Vec<bool>>,
}

impl ResponseMatrix {
    pub fn new(
        students: Vec<StudentRecord>,
        questions: Vec<String>,
        entries: Vec<u8>,
    ) -> Result<Self, DataError> {
        let m = Self {
            students,
            questions,
            entries,
            holdout_mask: None,
            missing_mask: None,
        };
        m.validate()?;
        Ok(m)
    }

    /// Builds a real-student matrix from rows of 0/1 values; ids are
    /// `s000…` and `q000…`, which sort in row/column order.
    pub fn from_rows(rows: &[Vec<u8>]) -> Result<Self, DataError> {
        let n = rows.first().map_or(0, Vec::len);
        let students = (0..rows.len())
            .map(|i| StudentRecord::real(alloc::format!("s{i:04}")))
            .collect();
        let questions = (0..n).map(|j| alloc::format!("q{j:05}")).collect();
        let mut entries = Vec::with_capacity(rows.len() * n);
        for r in rows {
            if r.len() != n {
                return Err(DataError::Dimension(alloc::format!(
                    "row width {} differs from {n}",
                    r.len()
                )));
            }
            entries.extend_from_slice(r);
        }
        Self::new(students, questions, entries)
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let cells = self.num_students() * self.num_questions();
        if self.entries.len() != cells {
            return Err(DataError::Dimension(alloc::format!(
                "{} entries for a {}x{} matrix",
                self.entries.len(),
                self.num_students(),
                self.num_questions()
            )));
        }
        if let Some(&bad) = self.entries.iter().find(|&&v| v > 1) {
            return Err(DataError::InvalidFlag(bad));
        }
        for (name, mask) in [("holdout", &self.holdout_mask), ("missing", &self.missing_mask)] {
            if let Some(mask) = mask {
                if mask.len() != cells {
                    return Err(DataError::Dimension(alloc::format!(
                        "{name} mask has {} cells, expected {cells}",
                        mask.len()
                    )));
                }
            }
        }
        let mut seen = BTreeSet::new();
        for s in &self.students {
            if !seen.insert(s.id.as_str()) {
                return Err(DataError::DuplicateId(s.id.clone()));
            }
        }
        let mut seen = BTreeSet::new();
        for q in &self.questions {
            if !seen.insert(q.as_str()) {
                return Err(DataError::DuplicateId(q.clone()));
            }
        }
        Ok(())
    }

    pub fn num_students(&self) -> usize {
        self.students.len()
    }

    pub fn num_questions(&self) -> usize {
        self.questions.len()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.num_students(), self.num_questions())
    }

    pub fn is_empty(&self) -> bool {
        self.students.is_empty() || self.questions.is_empty()
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> u8 {
        self.entries[i * self.num_questions() + j]
    }

    pub fn row(&self, i: usize) -> &[u8] {
        let n = self.num_questions();
        &self.entries[i * n..(i + 1) * n]
    }

    #[inline]
    pub fn is_missing(&self, i: usize, j: usize) -> bool {
        self.missing_mask
            .as_ref()
            .is_some_and(|m| m[i * self.num_questions() + j])
    }

    #[inline]
    pub fn is_held_out(&self, i: usize, j: usize) -> bool {
        self.holdout_mask
            .as_ref()
            .is_some_and(|m| m[i * self.num_questions() + j])
    }

    /// Cells that enter likelihoods: administered and not held out.
    #[inline]
    pub fn is_training(&self, i: usize, j: usize) -> bool {
        !self.is_missing(i, j) && !self.is_held_out(i, j)
    }

    /// Flat mask of training cells.
    pub fn training_mask(&self) -> Vec<bool> {
        let n = self.num_questions();
        (0..self.entries.len())
            .map(|k| self.is_training(k / n, k % n))
            .collect()
    }

    pub fn holdout_count(&self) -> usize {
        self.holdout_mask
            .as_ref()
            .map_or(0, |m| m.iter().filter(|&&b| b).count())
    }

    /// Accuracy of row `i` over administered cells.
    pub fn row_accuracy(&self, i: usize) -> f64 {
        let mut hits = 0usize;
        let mut total = 0usize;
        for j in 0..self.num_questions() {
            if !self.is_missing(i, j) {
                total += 1;
                hits += usize::from(self.get(i, j));
            }
        }
        if total == 0 {
            0.0
        } else {
            hits as f64 / total as f64
        }
    }

    /// Accuracy of column `j` over administered cells.
    pub fn column_accuracy(&self, j: usize) -> f64 {
        let mut hits = 0usize;
        let mut total = 0usize;
        for i in 0..self.num_students() {
            if !self.is_missing(i, j) {
                total += 1;
                hits += usize::from(self.get(i, j));
            }
        }
        if total == 0 {
            0.0
        } else {
            hits as f64 / total as f64
        }
    }

    pub fn student_index(&self, id: &str) -> Option<usize> {
        self.students.iter().position(|s| s.id == id)
    }

    pub fn question_index(&self, id: &str) -> Option<usize> {
        self.questions.iter().position(|q| q == id)
    }

    /// Replace metadata of students whose id matches a supplied record.
    pub fn attach_students(&mut self, records: &[StudentRecord]) {
        let by_id: BTreeMap<&str, &StudentRecord> =
            records.iter().map(|r| (r.id.as_str(), r)).collect();
        for s in &mut self.students {
            if let Some(r) = by_id.get(s.id.as_str()) {
                *s = (*r).clone();
            }
        }
    }

    /// Keeps only rows for which `keep` returns true.
    pub fn filter_rows(&self, keep: impl Fn(&StudentRecord) -> bool) -> ResponseMatrix {
        let n = self.num_questions();
        let mut out = ResponseMatrix {
            students: Vec::new(),
            questions: self.questions.clone(),
            entries: Vec::new(),
            holdout_mask: self.holdout_mask.as_ref().map(|_| Vec::new()),
            missing_mask: self.missing_mask.as_ref().map(|_| Vec::new()),
        };
        for (i, s) in self.students.iter().enumerate() {
            if !keep(s) {
                continue;
            }
            out.students.push(s.clone());
            out.entries.extend_from_slice(self.row(i));
            if let (Some(dst), Some(src)) = (out.holdout_mask.as_mut(), self.holdout_mask.as_ref()) {
                dst.extend_from_slice(&src[i * n..(i + 1) * n]);
            }
            if let (Some(dst), Some(src)) = (out.missing_mask.as_mut(), self.missing_mask.as_ref()) {
                dst.extend_from_slice(&src[i * n..(i + 1) * n]);
            }
        }
        out
    }

    /// Converts back to a response log (administered cells only), in
    /// canonical row/column order.
    pub fn to_responses(&self) -> Vec<Response> {
        let mut out = Vec::with_capacity(self.entries.len());
        for (i, s) in self.students.iter().enumerate() {
            for (j, q) in self.questions.iter().enumerate() {
                if !self.is_missing(i, j) {
                    out.push(Response::new(s.id.clone(), q.clone(), self.get(i, j)));
                }
            }
        }
        out
    }
}

/// Assembles a matrix with rows and columns sorted by id.
pub fn build_response_matrix(
    responses: &[Response],
    mode: Completeness,
) -> Result<ResponseMatrix, DataError> {
    if responses.is_empty() {
        return Err(DataError::Empty("response set"));
    }
    let mut cells: BTreeMap<(&str, &str), u8> = BTreeMap::new();
    let mut students = BTreeSet::new();
    let mut questions = BTreeSet::new();
    for r in responses {
        if r.correct > 1 {
            return Err(DataError::InvalidFlag(r.correct));
        }
        let key = (r.student_id.as_str(), r.question_id.as_str());
        if cells.insert(key, r.correct).is_some() {
            return Err(DataError::Conflict {
                student: r.student_id.clone(),
                question: r.question_id.clone(),
            });
        }
        students.insert(r.student_id.as_str());
        questions.insert(r.question_id.as_str());
    }
    let n = questions.len();
    let mut entries = vec![0u8; students.len() * n];
    let mut missing = vec![false; students.len() * n];
    let mut missing_count = 0usize;
    let mut examples = Vec::new();
    for (i, s) in students.iter().enumerate() {
        for (j, q) in questions.iter().enumerate() {
            match cells.get(&(*s, *q)) {
                Some(&v) => entries[i * n + j] = v,
                None => {
                    missing[i * n + j] = true;
                    missing_count += 1;
                    if examples.len() < 20 {
                        examples.push((s.to_string(), q.to_string()));
                    }
                }
            }
        }
    }
    if missing_count > 0 && mode == Completeness::Strict {
        return Err(DataError::MissingCells {
            count: missing_count,
            examples,
        });
    }
    Ok(ResponseMatrix {
        students: students.into_iter().map(StudentRecord::real).collect(),
        questions: questions.into_iter().map(String::from).collect(),
        entries,
        holdout_mask: None,
        missing_mask: (missing_count > 0).then_some(missing),
    })
}

/// Marks `round(fraction · administered_cells)` cells as held out, chosen
/// uniformly without replacement under `seed`. Replaces any existing mask.
pub fn mask_holdout(
    matrix: &ResponseMatrix,
    fraction: f64,
    seed: u64,
) -> Result<ResponseMatrix, DataError> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(DataError::InvalidFraction(fraction));
    }
    let candidates: Vec<usize> = (0..matrix.entries.len())
        .filter(|&k| {
            matrix
                .missing_mask
                .as_ref()
                .is_none_or(|m| !m[k])
        })
        .collect();
    let count = crate::math::round(fraction * candidates.len() as f64) as usize;
    let mut mask = vec![false; matrix.entries.len()];
    let mut rng = rng::seeded(seed);
    for idx in rand::seq::index::sample(&mut rng, candidates.len(), count) {
        mask[candidates[idx]] = true;
    }
    let mut out = matrix.clone();
    out.holdout_mask = Some(mask);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn r(s: &str, q: &str, c: u8) -> Response {
        Response::new(s, q, c)
    }

    #[test]
    fn single_cell() {
        let m = build_response_matrix(&[r("s1", "q1", 1)], Completeness::Strict).unwrap();
        assert_eq!(m.shape(), (1, 1));
        assert_eq!(m.entries, vec![1]);
    }

    #[test]
    fn conflicting_pair_is_rejected() {
        let err = build_response_matrix(&[r("s1", "q1", 1), r("s1", "q1", 0)], Completeness::Strict)
            .unwrap_err();
        assert!(matches!(err, DataError::Conflict { .. }));
    }

    #[test]
    fn strict_mode_lists_missing_cells() {
        let log = [r("a", "q1", 1), r("b", "q2", 0)];
        match build_response_matrix(&log, Completeness::Strict) {
            Err(DataError::MissingCells { count, examples }) => {
                assert_eq!(count, 2);
                assert!(examples.contains(&("a".into(), "q2".into())));
            }
            other => panic!("unexpected {other:?}"),
        }
        let sparse = build_response_matrix(&log, Completeness::Sparse).unwrap();
        assert!(sparse.is_missing(0, 1) && sparse.is_missing(1, 0));
        assert!(!sparse.is_training(0, 1));
    }

    #[test]
    fn full_35_by_2000_matrix() {
        let mut log = Vec::new();
        for s in 0..35 {
            for q in 0..2000 {
                log.push(r(&alloc::format!("m{s:02}"), &alloc::format!("q{q:04}"), ((s + q) % 2) as u8));
            }
        }
        let m = build_response_matrix(&log, Completeness::Strict).unwrap();
        assert_eq!(m.shape(), (35, 2000));
        let masked = mask_holdout(&m, 0.2, 42).unwrap();
        assert_eq!(masked.holdout_count(), 14_000);
    }

    #[test]
    fn rows_and_columns_sorted_by_id() {
        let m = build_response_matrix(
            &[r("b", "y", 1), r("a", "y", 0), r("b", "x", 0), r("a", "x", 1)],
            Completeness::Strict,
        )
        .unwrap();
        assert_eq!(m.students[0].id, "a");
        assert_eq!(m.questions, vec!["x", "y"]);
        assert_eq!(m.entries, vec![1, 0, 0, 1]);
    }

    #[test]
    fn mask_zero_fraction_and_determinism() {
        let m = ResponseMatrix::from_rows(&[vec![1, 0, 1], vec![0, 0, 1]]).unwrap();
        assert_eq!(mask_holdout(&m, 0.0, 1).unwrap().holdout_count(), 0);
        let a = mask_holdout(&m, 0.5, 9).unwrap();
        let b = mask_holdout(&m, 0.5, 9).unwrap();
        assert_eq!(a.holdout_mask, b.holdout_mask);
        assert_eq!(a.holdout_count(), 3);
        assert!(mask_holdout(&m, 1.5, 0).is_err());
    }

    #[test]
    fn bank_validation() {
        let q = QuestionRecord {
            id: "q".into(),
            text: "t".into(),
            answer: "1".into(),
            topic: String::new(),
            source: "s".into(),
            given_level: None,
        };
        assert!(matches!(q.validate(), Err(DataError::EmptyField { field: "topic", .. })));
        let e1 = EmbeddingRecord::new("a", vec![1.0, 2.0], "p");
        let e2 = EmbeddingRecord::new("b", vec![1.0], "p");
        assert!(validate_embedding_bank(&[e1.clone(), e2]).is_err());
        assert_eq!(validate_embedding_bank(&[e1]).unwrap(), Some(2));
    }
}
