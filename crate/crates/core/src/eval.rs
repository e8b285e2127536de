//! Precision and coverage over a labeled corpus.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::AnnotatedTable;
use crate::ensemble::{
    calibrate_tau_scored, precision_coverage, score_labeled_table, tau_grid, Calibration, PipelineConfig,
    ScoredColumn,
};
use crate::state::{model_state, prediction_response, GlobalModel, PredictionResponse, StateError, TenantModel};

/// Confusion entries use this in place of a type when the column abstained.
pub const ABSTAIN: &str = "(abstain)";

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("corpus has no labeled columns")]
    EmptyCorpus,
    #[error("target precision {0} outside (0, 1]")]
    BadTarget(f64),
    #[error(transparent)]
    State(#[from] StateError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TypeStats {
    #[serde(rename = "type")]
    pub type_id: String,
    /// Labeled columns with this gold type.
    pub support: usize,
    /// Non-abstained predictions of this type.
    pub predicted: usize,
    pub correct: usize,
    pub precision: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionEntry {
    pub gold: String,
    pub predicted: String,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub tau: f64,
    pub precision: Option<f64>,
    pub coverage: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tables: usize,
    /// Labeled columns; unlabeled ones are not scored.
    pub columns: usize,
    pub predicted: usize,
    pub correct: usize,
    /// `correct / predicted`, `null` when nothing was predicted.
    pub precision: Option<f64>,
    /// `predicted / columns`.
    pub coverage: f64,
    pub per_type: Vec<TypeStats>,
    pub confusion: Vec<ConfusionEntry>,
    pub tau: f64,
    pub c: f64,
    pub top_k: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub curve: Option<Vec<CurvePoint>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub calibration: Option<Calibration>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalOptions {
    pub sweep_tau: bool,
    /// Calibrate `τ` for this precision first and evaluate at the result.
    pub target_precision: Option<f64>,
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// Runs the pipeline on every table and scores the labeled columns. Also
/// returns the emitted predictions, one response per table.
pub fn evaluate(
    corpus: &[AnnotatedTable],
    global: &GlobalModel,
    tenant: &TenantModel,
    config: &PipelineConfig,
    options: &EvalOptions,
) -> Result<(EvalReport, Vec<PredictionResponse>), EvalError> {
    if let Some(p) = options.target_precision {
        if !(p > 0.0 && p <= 1.0) {
            return Err(EvalError::BadTarget(p));
        }
    }
    let ontology = tenant.effective_ontology(global).map_err(StateError::from)?;
    let state = model_state(global, tenant, &ontology);
    let mut scored: Vec<ScoredColumn> = Vec::new();
    if options.sweep_tau || options.target_precision.is_some() {
        for t in corpus {
            scored.extend(score_labeled_table(&t.table, &t.labels, &state, config).map_err(StateError::from)?);
        }
    }
    let calibration = options.target_precision.map(|p| calibrate_tau_scored(&scored, p));
    let config = match &calibration {
        Some(c) => PipelineConfig { abstain_threshold: c.tau, ..config.clone() },
        None => config.clone(),
    };

    let mut responses = Vec::with_capacity(corpus.len());
    let mut columns = 0;
    let mut predicted = 0;
    let mut correct = 0;
    let mut per_type: BTreeMap<String, TypeStats> = BTreeMap::new();
    let mut confusion: BTreeMap<(String, String), usize> = BTreeMap::new();
    let stats = |t: &str| -> TypeStats {
        TypeStats { type_id: t.to_string(), support: 0, predicted: 0, correct: 0, precision: None }
    };
    for t in corpus {
        let response = prediction_response(global, tenant, &t.table, &config)?;
        for (&i, gold) in &t.labels {
            let Some(p) = response.predictions.get(i) else { continue };
            columns += 1;
            per_type.entry(gold.clone()).or_insert_with(|| stats(gold)).support += 1;
            let guess = p.predicted_type();
            if let Some(g) = guess {
                predicted += 1;
                let s = per_type.entry(g.to_string()).or_insert_with(|| stats(g));
                s.predicted += 1;
                if g == gold {
                    correct += 1;
                    s.correct += 1;
                }
            }
            *confusion.entry((gold.clone(), guess.unwrap_or(ABSTAIN).to_string())).or_insert(0) += 1;
        }
        responses.push(response);
    }
    if columns == 0 {
        return Err(EvalError::EmptyCorpus);
    }
    let per_type = per_type
        .into_values()
        .map(|mut s| {
            s.precision = ratio(s.correct, s.predicted);
            s
        })
        .collect();
    let curve = options.sweep_tau.then(|| {
        tau_grid()
            .map(|tau| {
                let (precision, coverage) = precision_coverage(&scored, tau);
                CurvePoint { tau, precision, coverage }
            })
            .collect()
    });
    let report = EvalReport {
        tables: corpus.len(),
        columns,
        predicted,
        correct,
        precision: ratio(correct, predicted),
        coverage: predicted as f64 / columns as f64,
        per_type,
        confusion: confusion.into_iter().map(|((gold, predicted), count)| ConfusionEntry { gold, predicted, count }).collect(),
        tau: config.abstain_threshold,
        c: config.stage_gate,
        top_k: config.top_k,
        curve,
        calibration,
    };
    Ok((report, responses))
}
