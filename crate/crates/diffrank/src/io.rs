//! On-disk formats. Writers emit one canonical byte form (rows and columns
//! sorted by id, fixed field order) and replace files atomically.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datamodel::{
    validate_embedding_bank, validate_question_bank, DataError, EmbeddingRecord, QuestionRecord, Response,
    ResponseMatrix, StudentRecord,
};
use crate::eval::BenchmarkRun;
use crate::gspo::CurvePoint;
use crate::irt::{CalibrationResult, FitMethod, IrtModelConfig};
use crate::nn::Mlp;
use crate::ranker::{DifficultyRanker, RankerConfig, TrainMetrics};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}:{line}: {source}", path.display())]
    Json {
        path: PathBuf,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("{}: {message}", path.display())]
    Format { path: PathBuf, message: String },
    #[error("{}: {source}", path.display())]
    Data {
        path: PathBuf,
        #[source]
        source: DataError,
    },
}

impl IoError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    fn format(path: &Path, message: impl Into<String>) -> Self {
        Self::Format {
            path: path.to_path_buf(),
            message: message.into(),
        }
    }

    fn data(path: &Path, source: DataError) -> Self {
        Self::Data {
            path: path.to_path_buf(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, IoError>;

static TMP_COUNTER: AtomicU64 = AtomicU64::new(0);

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| IoError::io(dir, e))?;
    }
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = path.with_file_name(format!(
        ".{name}.{}.{}.tmp",
        std::process::id(),
        TMP_COUNTER.fetch_add(1, Ordering::Relaxed)
    ));
    fs::write(&tmp, bytes).map_err(|e| IoError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| {
        let _ = fs::remove_file(&tmp);
        IoError::io(path, e)
    })
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| IoError::io(path, e))
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = read_text(path)?;
    let mut out = Vec::new();
    for (k, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(line).map_err(|source| IoError::Json {
            path: path.to_path_buf(),
            line: k + 1,
            source,
        })?);
    }
    Ok(out)
}

pub fn to_jsonl<T: Serialize>(items: &[T]) -> Vec<u8> {
    let mut out = Vec::new();
    for it in items {
        serde_json::to_writer(&mut out, it).expect("in-memory JSON serialization");
        out.push(b'\n');
    }
    out
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    write_atomic(path, &to_jsonl(items))
}

pub fn to_json_document<T: Serialize>(value: &T) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(value).expect("in-memory JSON serialization");
    out.push(b'\n');
    out
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_atomic(path, &to_json_document(value))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = read_text(path)?;
    serde_json::from_str(&text).map_err(|source| IoError::Json {
        path: path.to_path_buf(),
        line: source.line(),
        source,
    })
}

// Question banks -----------------------------------------------------------

pub fn load_questions(path: &Path) -> Result<Vec<QuestionRecord>> {
    let bank: Vec<QuestionRecord> = read_jsonl(path)?;
    validate_question_bank(&bank).map_err(|e| IoError::data(path, e))?;
    Ok(bank)
}

pub fn encode_questions(bank: &[QuestionRecord]) -> std::result::Result<Vec<u8>, DataError> {
    validate_question_bank(bank)?;
    let mut sorted = bank.to_vec();
    sorted.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(to_jsonl(&sorted))
}

pub fn save_questions(path: &Path, bank: &[QuestionRecord]) -> Result<()> {
    let bytes = encode_questions(bank).map_err(|e| IoError::data(path, e))?;
    write_atomic(path, &bytes)
}

// Response logs ------------------------------------------------------------

pub fn load_responses(path: &Path) -> Result<Vec<Response>> {
    read_jsonl(path)
}

pub fn encode_responses(log: &[Response]) -> Vec<u8> {
    let mut sorted = log.to_vec();
    sorted.sort_by(|a, b| (&a.student_id, &a.question_id).cmp(&(&b.student_id, &b.question_id)));
    to_jsonl(&sorted)
}

pub fn save_responses(path: &Path, log: &[Response]) -> Result<()> {
    write_atomic(path, &encode_responses(log))
}

// Embedding banks ----------------------------------------------------------

pub fn load_embeddings(path: &Path) -> Result<Vec<EmbeddingRecord>> {
    let bank: Vec<EmbeddingRecord> = read_jsonl(path)?;
    validate_embedding_bank(&bank).map_err(|e| IoError::data(path, e))?;
    Ok(bank)
}

pub fn encode_embeddings(bank: &[EmbeddingRecord]) -> std::result::Result<Vec<u8>, DataError> {
    validate_embedding_bank(bank)?;
    let mut sorted = bank.to_vec();
    sorted.sort_by(|a, b| a.question_id.cmp(&b.question_id));
    Ok(to_jsonl(&sorted))
}

pub fn save_embeddings(path: &Path, bank: &[EmbeddingRecord]) -> Result<()> {
    let bytes = encode_embeddings(bank).map_err(|e| IoError::data(path, e))?;
    write_atomic(path, &bytes)
}

// Matrix files -------------------------------------------------------------
//
// Line 1 is a JSON header; then one line of '0'/'1' characters per student.
// Optional `# holdout` and `# missing` sections repeat the layout with '1'
// marking flagged cells.

const MATRIX_FORMAT: &str = "diffrank-matrix/1";

#[derive(Serialize, Deserialize)]
struct MatrixHeader {
    format: String,
    students: Vec<StudentRecord>,
    questions: Vec<String>,
}

/// Copy of `m` with rows and columns sorted by id.
pub fn canonical_matrix(m: &ResponseMatrix) -> ResponseMatrix {
    let (rows, cols) = m.shape();
    let mut ri: Vec<usize> = (0..rows).collect();
    ri.sort_by(|&a, &b| m.students[a].id.cmp(&m.students[b].id));
    let mut ci: Vec<usize> = (0..cols).collect();
    ci.sort_by(|&a, &b| m.questions[a].cmp(&m.questions[b]));
    let permute = |v: &[u8]| -> Vec<u8> {
        ri.iter().flat_map(|&i| ci.iter().map(move |&j| v[i * cols + j])).collect()
    };
    let permute_mask = |v: &Vec<bool>| -> Vec<bool> {
        ri.iter().flat_map(|&i| ci.iter().map(move |&j| v[i * cols + j])).collect()
    };
    ResponseMatrix {
        students: ri.iter().map(|&i| m.students[i].clone()).collect(),
        questions: ci.iter().map(|&j| m.questions[j].clone()).collect(),
        entries: permute(&m.entries),
        holdout_mask: m.holdout_mask.as_ref().map(permute_mask),
        missing_mask: m.missing_mask.as_ref().map(permute_mask),
    }
}

pub fn encode_matrix(m: &ResponseMatrix) -> std::result::Result<String, DataError> {
    m.validate()?;
    let m = canonical_matrix(m);
    let header = MatrixHeader {
        format: MATRIX_FORMAT.into(),
        students: m.students.clone(),
        questions: m.questions.clone(),
    };
    let mut out = serde_json::to_string(&header).expect("in-memory JSON serialization");
    out.push('\n');
    let n = m.num_questions();
    let push_rows = |out: &mut String, bits: &mut dyn Iterator<Item = bool>| {
        for _ in 0..m.num_students() {
            out.extend((&mut *bits).take(n).map(|b| if b { '1' } else { '0' }));
            out.push('\n');
        }
    };
    push_rows(&mut out, &mut m.entries.iter().map(|&v| v == 1));
    for (name, mask) in [("holdout", &m.holdout_mask), ("missing", &m.missing_mask)] {
        if let Some(mask) = mask {
            out.push_str("# ");
            out.push_str(name);
            out.push('\n');
            push_rows(&mut out, &mut mask.iter().copied());
        }
    }
    Ok(out)
}

pub fn decode_matrix(text: &str, path: &Path) -> Result<ResponseMatrix> {
    let mut lines = text.lines();
    let header: MatrixHeader = serde_json::from_str(lines.next().unwrap_or_default()).map_err(|source| IoError::Json {
        path: path.to_path_buf(),
        line: 1,
        source,
    })?;
    if header.format != MATRIX_FORMAT {
        return Err(IoError::format(path, format!("unknown matrix format `{}`", header.format)));
    }
    let (m, n) = (header.students.len(), header.questions.len());
    let mut read_bits = |what: &str| -> Result<Vec<bool>> {
        let mut bits = Vec::with_capacity(m * n);
        for i in 0..m {
            let line = lines
                .next()
                .ok_or_else(|| IoError::format(path, format!("{what}: expected {m} rows, found {i}")))?;
            if line.len() != n {
                return Err(IoError::format(path, format!("{what} row {i}: width {} != {n}", line.len())));
            }
            for c in line.bytes() {
                match c {
                    b'0' => bits.push(false),
                    b'1' => bits.push(true),
                    _ => return Err(IoError::format(path, format!("{what} row {i}: invalid byte {c:#04x}"))),
                }
            }
        }
        Ok(bits)
    };
    let entries: Vec<u8> = read_bits("entries")?.into_iter().map(u8::from).collect();
    let mut matrix = ResponseMatrix {
        students: header.students,
        questions: header.questions,
        entries,
        holdout_mask: None,
        missing_mask: None,
    };
    while let Some(line) = lines.next() {
        let section = match line {
            "# holdout" => "holdout",
            "# missing" => "missing",
            "" => continue,
            other => return Err(IoError::format(path, format!("unexpected line `{other}`"))),
        };
        let mut section_lines = Vec::with_capacity(m);
        for _ in 0..m {
            section_lines.push(lines.next().unwrap_or(""));
        }
        let mut it = section_lines.into_iter();
        let mut bits = Vec::with_capacity(m * n);
        for i in 0..m {
            let row = it.next().unwrap_or("");
            if row.len() != n || !row.bytes().all(|b| b == b'0' || b == b'1') {
                return Err(IoError::format(path, format!("{section} row {i} is malformed")));
            }
            bits.extend(row.bytes().map(|b| b == b'1'));
        }
        if section == "holdout" {
            matrix.holdout_mask = Some(bits);
        } else {
            matrix.missing_mask = Some(bits);
        }
    }
    matrix.validate().map_err(|e| IoError::data(path, e))?;
    Ok(matrix)
}

pub fn save_matrix(path: &Path, m: &ResponseMatrix) -> Result<()> {
    let text = encode_matrix(m).map_err(|e| IoError::data(path, e))?;
    write_atomic(path, text.as_bytes())
}

pub fn load_matrix(path: &Path) -> Result<ResponseMatrix> {
    decode_matrix(&read_text(path)?, path)
}

// Calibration --------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorStds {
    pub abilities: BTreeMap<String, f64>,
    pub difficulties: BTreeMap<String, f64>,
}

/// Calibration keyed by student and question id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationDoc {
    pub method: FitMethod,
    pub config: IrtModelConfig,
    pub point_abilities: BTreeMap<String, f64>,
    pub point_difficulties: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub point_discriminations: Option<BTreeMap<String, f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub point_guessing: Option<BTreeMap<String, f64>>,
    pub posterior_stds: PosteriorStds,
    pub elbo_trace: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub diagnostics: Vec<String>,
}

impl CalibrationDoc {
    pub fn new(result: &CalibrationResult, matrix: &ResponseMatrix) -> Self {
        let students = || matrix.students.iter().map(|s| s.id.clone());
        let questions = || matrix.questions.iter().cloned();
        let by_q = |v: &[f64]| questions().zip(v.iter().copied()).collect::<BTreeMap<_, _>>();
        Self {
            method: result.method,
            config: result.config.clone(),
            point_abilities: students().zip(result.point_abilities.iter().copied()).collect(),
            point_difficulties: by_q(&result.point_difficulties),
            point_discriminations: result.point_discriminations.as_deref().map(by_q),
            point_guessing: result.point_guessing.as_deref().map(by_q),
            posterior_stds: PosteriorStds {
                abilities: students().zip(result.posterior.theta_std.iter().copied()).collect(),
                difficulties: by_q(&result.posterior.diff_std),
            },
            elbo_trace: result.elbo_trace.clone(),
            diagnostics: result.diagnostics.clone(),
        }
    }
}

/// `student_id,accuracy,theta` with accuracy in percent.
pub fn abilities_csv(result: &CalibrationResult, matrix: &ResponseMatrix) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["student_id", "accuracy", "theta"]).expect("in-memory CSV");
    for (i, s) in matrix.students.iter().enumerate() {
        w.write_record([
            s.id.clone(),
            format!("{:.2}", 100.0 * matrix.row_accuracy(i)),
            format!("{:.4}", result.point_abilities[i]),
        ])
        .expect("in-memory CSV");
    }
    w.into_inner().expect("in-memory CSV")
}

// Ranker ---------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankerDoc {
    pub layer_sizes: Vec<usize>,
    pub weights: Vec<f64>,
    pub config: RankerConfig,
    pub train_metrics: TrainMetrics,
}

impl From<&DifficultyRanker> for RankerDoc {
    fn from(r: &DifficultyRanker) -> Self {
        Self {
            layer_sizes: r.network.sizes.clone(),
            weights: r.network.params.clone(),
            config: r.config.clone(),
            train_metrics: r.train_metrics.clone(),
        }
    }
}

impl RankerDoc {
    pub fn into_ranker(self, path: &Path) -> Result<DifficultyRanker> {
        let expected: usize = self.layer_sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        if self.layer_sizes.len() < 2 || expected != self.weights.len() || self.layer_sizes[0] % 4 != 0 {
            return Err(IoError::format(path, "layer sizes do not match the weight array"));
        }
        Ok(DifficultyRanker {
            network: Mlp {
                sizes: self.layer_sizes,
                params: self.weights,
            },
            config: self.config,
            train_metrics: self.train_metrics,
        })
    }
}

/// `fold,auc`; folds without test pairs leave `auc` empty.
pub fn cv_csv(metrics: &TrainMetrics) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["fold", "auc"]).expect("in-memory CSV");
    for (k, auc) in metrics.fold_auc.iter().enumerate() {
        w.write_record([k.to_string(), auc.map(|a| a.to_string()).unwrap_or_default()])
            .expect("in-memory CSV");
    }
    w.into_inner().expect("in-memory CSV")
}

// Benchmark runs -------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunLine {
    #[serde(default)]
    pub benchmark_id: String,
    pub model_id: String,
    pub question_id: String,
    pub sample_index: usize,
    pub correct: u8,
}

pub fn runs_to_lines(runs: &[BenchmarkRun]) -> Vec<RunLine> {
    let mut lines = Vec::new();
    for r in runs {
        for (q, samples) in &r.outcomes {
            for (k, &c) in samples.iter().enumerate() {
                lines.push(RunLine {
                    benchmark_id: r.benchmark_id.clone(),
                    model_id: r.model_id.clone(),
                    question_id: q.clone(),
                    sample_index: k,
                    correct: c,
                });
            }
        }
    }
    lines.sort_by(|a, b| {
        (&a.benchmark_id, &a.model_id, &a.question_id, a.sample_index).cmp(&(
            &b.benchmark_id,
            &b.model_id,
            &b.question_id,
            b.sample_index,
        ))
    });
    lines
}

/// Groups lines into runs keyed by (benchmark, model), ordered by key.
pub fn lines_to_runs(lines: &[RunLine], path: &Path) -> Result<Vec<BenchmarkRun>> {
    let mut grouped: BTreeMap<(&str, &str), BTreeMap<&str, BTreeMap<usize, u8>>> = BTreeMap::new();
    for l in lines {
        if l.correct > 1 {
            return Err(IoError::data(path, DataError::InvalidFlag(l.correct)));
        }
        let samples = grouped
            .entry((&l.benchmark_id, &l.model_id))
            .or_default()
            .entry(&l.question_id)
            .or_default();
        if samples.insert(l.sample_index, l.correct).is_some() {
            return Err(IoError::format(
                path,
                format!("duplicate sample {} for {} on {}", l.sample_index, l.model_id, l.question_id),
            ));
        }
    }
    let mut runs = Vec::new();
    for ((bench, model), questions) in grouped {
        let mut run = BenchmarkRun::new(bench, model);
        for (q, samples) in questions {
            if samples.keys().copied().ne(0..samples.len()) {
                return Err(IoError::format(path, format!("sample indices for {model} on {q} are not 0..n")));
            }
            run.outcomes.insert(q.to_string(), samples.into_values().collect());
        }
        runs.push(run);
    }
    Ok(runs)
}

pub fn load_runs(path: &Path) -> Result<Vec<BenchmarkRun>> {
    let lines: Vec<RunLine> = read_jsonl(path)?;
    lines_to_runs(&lines, path)
}

pub fn save_runs(path: &Path, runs: &[BenchmarkRun]) -> Result<()> {
    write_jsonl(path, &runs_to_lines(runs))
}

// Learning curves ------------------------------------------------------------

pub fn curve_csv(curve: &[CurvePoint]) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["step", "mean_reward", "mean_ratio", "clip_fraction"]).expect("in-memory CSV");
    for p in curve {
        w.write_record([
            p.step.to_string(),
            p.mean_reward.to_string(),
            p.mean_ratio.to_string(),
            p.clip_fraction.to_string(),
        ])
        .expect("in-memory CSV");
    }
    w.into_inner().expect("in-memory CSV")
}
