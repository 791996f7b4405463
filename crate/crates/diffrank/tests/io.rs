use std::path::Path;

use diffrank::datamodel::{build_response_matrix, mask_holdout, Completeness, EmbeddingRecord, Response};
use diffrank::eval::BenchmarkRun;
use diffrank::io::{
    decode_matrix, encode_embeddings, encode_matrix, load_embeddings, load_runs, read_json, save_embeddings,
    save_runs, write_json, CalibrationDoc,
};
use diffrank::irt::{fit_svi, IrtModelConfig};
use proptest::prelude::*;

fn log_from(cells: &[(usize, usize, bool)]) -> Vec<Response> {
    cells
        .iter()
        .map(|&(s, q, c)| Response::new(format!("s{s:02}"), format!("q{q:03}"), u8::from(c)))
        .collect()
}

proptest! {
    #[test]
    fn matrix_text_round_trips_byte_identically(
        rows in 1usize..6,
        cols in 1usize..9,
        bits in proptest::collection::vec(any::<bool>(), 48),
        drop in proptest::collection::vec(any::<bool>(), 48),
        frac in 0.0f64..0.6,
        seed in any::<u64>(),
    ) {
        let mut cells = Vec::new();
        for i in 0..rows {
            for j in 0..cols {
                let k = i * cols + j;
                // keep the first column complete so every student and question appears
                if j == 0 || i == 0 || !drop[k] {
                    cells.push((i, j, bits[k]));
                }
            }
        }
        let m = build_response_matrix(&log_from(&cells), Completeness::Sparse).unwrap();
        let m = mask_holdout(&m, frac, seed).unwrap();
        let text = encode_matrix(&m).unwrap();
        let back = decode_matrix(&text, Path::new("mem")).unwrap();
        prop_assert_eq!(&back, &m);
        prop_assert_eq!(encode_matrix(&back).unwrap(), text);
    }
}

#[test]
fn embeddings_reload_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("emb.jsonl");
    let v = vec![0.1 + 0.2, 1.0 / 3.0, -2.5e-300, 6.02214076e23, f64::MIN_POSITIVE];
    let bank = vec![
        EmbeddingRecord::new("b", v.clone(), "p"),
        EmbeddingRecord::new("a", v.iter().map(|x| -x).collect(), "p"),
    ];
    save_embeddings(&path, &bank).unwrap();
    let back = load_embeddings(&path).unwrap();
    assert_eq!(back[0].question_id, "a");
    assert_eq!(back[1].vector, v);
    assert_eq!(encode_embeddings(&back).unwrap(), std::fs::read(&path).unwrap());
}

#[test]
fn embedding_banks_reject_mixed_dimensions() {
    let bank = vec![EmbeddingRecord::new("a", vec![1.0; 3], "p"), EmbeddingRecord::new("b", vec![1.0; 4], "p")];
    assert!(encode_embeddings(&bank).is_err());
}

#[test]
fn runs_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("runs.jsonl");
    let mut a = BenchmarkRun::new("original", "m1");
    a.outcomes.insert("q1".into(), vec![1, 0, 1]);
    a.outcomes.insert("q2".into(), vec![0, 0, 0]);
    let mut b = BenchmarkRun::new("perturbed", "m1");
    b.outcomes.insert("q1".into(), vec![0, 0, 1]);
    save_runs(&path, &[b.clone(), a.clone()]).unwrap();
    let back = load_runs(&path).unwrap();
    assert_eq!(back, vec![a, b]);
}

#[test]
fn runs_with_gaps_in_sample_indices_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("runs.jsonl");
    std::fs::write(
        &path,
        concat!(
            r#"{"benchmark_id":"o","model_id":"m","question_id":"q","sample_index":0,"correct":1}"#,
            "\n",
            r#"{"benchmark_id":"o","model_id":"m","question_id":"q","sample_index":2,"correct":1}"#,
            "\n"
        ),
    )
    .unwrap();
    assert!(load_runs(&path).is_err());
}

#[test]
fn calibration_document_round_trips() {
    let rows: Vec<Vec<u8>> = (0..6).map(|i| (0..10).map(|j| u8::from((i + j) % 3 != 0)).collect()).collect();
    let m = diffrank::datamodel::ResponseMatrix::from_rows(&rows).unwrap();
    let cfg = IrtModelConfig {
        steps: 50,
        ..IrtModelConfig::default()
    };
    let r = fit_svi(&m, &cfg).unwrap();
    let doc = CalibrationDoc::new(&r, &m);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cal.json");
    write_json(&path, &doc).unwrap();
    let back: CalibrationDoc = read_json(&path).unwrap();
    assert_eq!(back, doc);
    assert_eq!(back.point_difficulties.len(), 10);
}

#[test]
fn malformed_matrix_reports_the_problem() {
    let err = decode_matrix("{\"format\":\"diffrank-matrix/1\",\"students\":[],\"questions\":[]}\nxx\n", Path::new("m.txt"));
    assert!(err.is_err());
    let err = decode_matrix("{\"format\":\"other\",\"students\":[],\"questions\":[]}\n", Path::new("m.txt")).unwrap_err();
    assert!(err.to_string().contains("unknown matrix format"), "{err}");
}
