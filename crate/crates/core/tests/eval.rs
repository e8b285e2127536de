use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use coltype_core::corpus::{load_labeled_corpus, AnnotatedTable};
use coltype_core::ensemble::PipelineConfig;
use coltype_core::eval::{evaluate, EvalError, EvalOptions};
use coltype_core::state::{to_json_text, BuildOptions, GlobalModel, TenantModel};
use coltype_core::store::{init_global, DataDir, GlobalSources};
use coltype_core::table::{Column, ParseOptions, Table};
use serde_json::Value;

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn global() -> (tempfile::TempDir, GlobalModel) {
    let f = fixtures();
    let dir = tempfile::tempdir().unwrap();
    let sources = GlobalSources {
        ontology: f.join("ontology.tsv"),
        embeddings: f.join("embeddings.txt"),
        rules: Some(f.join("rules")),
        training: f.join("corpus/train"),
        source_corpus: None,
    };
    let g = init_global(&DataDir::new(dir.path()), &sources, &BuildOptions::default()).unwrap();
    (dir, g)
}

fn eval_corpus() -> Vec<AnnotatedTable> {
    load_labeled_corpus(&fixtures().join("corpus/eval"), &ParseOptions::default()).unwrap()
}

/// Recounts precision and coverage from the serialized predictions alone:
/// a column counts as predicted when it did not abstain and its top type
/// is not `unknown`.
fn recount(json: &[Value], corpus: &[AnnotatedTable]) -> (usize, usize, usize) {
    let (mut total, mut predicted, mut correct) = (0, 0, 0);
    for (resp, t) in json.iter().zip(corpus) {
        assert_eq!(resp["table_id"], Value::String(t.table.table_id.clone()));
        for (i, gold) in &t.labels {
            total += 1;
            let p = &resp["predictions"][*i];
            if p["abstained"] == Value::Bool(true) {
                continue;
            }
            let top = p["ranked"][0]["type"].as_str().unwrap();
            if top == "unknown" {
                continue;
            }
            predicted += 1;
            if top == gold {
                correct += 1;
            }
        }
    }
    (total, predicted, correct)
}

#[test]
fn report_matches_independent_recount() {
    let (_d, g) = global();
    let corpus = eval_corpus();
    assert_eq!(corpus.len(), 10);
    let tenant = TenantModel::new("t");
    for tau in [0.0, 0.3, 0.5, 0.8] {
        let config = PipelineConfig { abstain_threshold: tau, ..g.config.clone() };
        let (report, responses) = evaluate(&corpus, &g, &tenant, &config, &EvalOptions::default()).unwrap();
        let json: Vec<Value> =
            responses.iter().map(|r| serde_json::from_str(&to_json_text(r)).unwrap()).collect();
        let (total, predicted, correct) = recount(&json, &corpus);
        assert_eq!((report.columns, report.predicted, report.correct), (total, predicted, correct), "tau {tau}");
        assert_eq!(report.coverage, predicted as f64 / total as f64);
        assert_eq!(report.precision, (predicted > 0).then(|| correct as f64 / predicted as f64));
        let support: usize = report.per_type.iter().map(|s| s.support).sum();
        assert_eq!(support, total);
        let confused: usize = report.confusion.iter().map(|c| c.count).sum();
        assert_eq!(confused, total);
    }
}

#[test]
fn sweep_covers_grid_and_is_monotone() {
    let (_d, g) = global();
    let corpus = eval_corpus();
    let options = EvalOptions { sweep_tau: true, target_precision: None };
    let (report, _) = evaluate(&corpus, &g, &TenantModel::new("t"), &g.config, &options).unwrap();
    let curve = report.curve.unwrap();
    assert_eq!(curve.len(), 101);
    assert!(curve.windows(2).all(|w| w[1].coverage <= w[0].coverage));
    // The curve point at the configured τ agrees with the main numbers.
    let at = curve.iter().find(|p| p.tau == report.tau).unwrap();
    assert_eq!((at.precision, at.coverage), (report.precision, report.coverage));
}

#[test]
fn target_precision_evaluates_at_calibrated_tau() {
    let (_d, g) = global();
    let corpus = eval_corpus();
    let options = EvalOptions { sweep_tau: false, target_precision: Some(0.9) };
    let (report, _) = evaluate(&corpus, &g, &TenantModel::new("t"), &g.config, &options).unwrap();
    let cal = report.calibration.unwrap();
    assert_eq!(report.tau, cal.tau);
    assert_eq!((report.precision, report.coverage), (cal.precision, cal.coverage));
    if !cal.unattainable {
        assert!(report.precision.unwrap() >= 0.9);
    }
}

#[test]
fn all_correct_corpus_scores_one_at_zero() {
    let (_d, g) = global();
    let table = Table::new(
        "hand",
        "hand",
        vec![
            Column::from_strs("email", &["a@x.com", "b@y.org", "c@z.net"]),
            Column::from_strs("City", &["Paris", "Tokyo", "Lima"]),
        ],
    )
    .unwrap();
    let labels = BTreeMap::from([(0, "email".to_string()), (1, "city".to_string())]);
    let corpus = vec![AnnotatedTable::new(table, labels)];
    let zero = PipelineConfig { abstain_threshold: 0.0, ..g.config.clone() };
    let (report, _) = evaluate(&corpus, &g, &TenantModel::new("t"), &zero, &EvalOptions::default()).unwrap();
    assert_eq!((report.precision, report.coverage), (Some(1.0), 1.0));
}

#[test]
fn empty_corpus_is_an_error() {
    let (_d, g) = global();
    let r = evaluate(&[], &g, &TenantModel::new("t"), &g.config, &EvalOptions::default());
    assert!(matches!(r, Err(EvalError::EmptyCorpus)));
    let r = evaluate(&eval_corpus(), &g, &TenantModel::new("t"), &g.config, &EvalOptions { sweep_tau: false, target_precision: Some(1.5) });
    assert!(matches!(r, Err(EvalError::BadTarget(_))));
}
