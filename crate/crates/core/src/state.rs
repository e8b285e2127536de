//! The shared global model and per-tenant local models.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classifier::{
    self, column_features, labels_of, make_background_examples, ClassifierError, ClassifierParams, ExampleOrigin,
    LabeledExample, TrainConfig,
};
use crate::corpus::AnnotatedTable;
use crate::dpbd::feedback::AdaptationReport;
use crate::dpbd::lf::{GenerateParams, InferParams, LfRegistry};
use crate::ensemble::{run_pipeline, FinalPrediction, ModelState, ModelWeights, PipelineConfig, PipelineError, SideModel};
use crate::header::EmbeddingStore;
use crate::lookup::RuleRegistry;
use crate::ontology::{Ontology, OntologyError, UNKNOWN};
use crate::table::Table;

#[derive(Debug, Error)]
pub enum StateError {
    #[error(transparent)]
    Ontology(#[from] OntologyError),
    #[error(transparent)]
    Classifier(#[from] ClassifierError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error("training corpus has no columns labeled with ontology types")]
    NoTrainingData,
}

/// DPBD knobs shared by all tenants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpbdConfig {
    pub infer: InferParams,
    pub generate: GenerateParams,
    /// Approvals trigger a local retrain once this many feedback-table
    /// examples have accumulated since the last one.
    pub retrain_every: usize,
}

impl Default for DpbdConfig {
    fn default() -> Self {
        DpbdConfig { infer: InferParams::default(), generate: GenerateParams::default(), retrain_every: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildOptions {
    pub background_count: usize,
    pub background_seed: u64,
    pub train: TrainConfig,
    pub config: PipelineConfig,
    pub dpbd: DpbdConfig,
}

impl Default for BuildOptions {
    fn default() -> Self {
        BuildOptions {
            background_count: 80,
            background_seed: 11,
            train: TrainConfig::default(),
            config: PipelineConfig::default(),
            dpbd: DpbdConfig::default(),
        }
    }
}

/// Immutable at runtime; replaced wholesale on reload.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GlobalModel {
    pub version: u64,
    pub ontology: Ontology,
    pub embeddings: EmbeddingStore,
    pub rules: RuleRegistry,
    pub lfs: LfRegistry,
    pub classifier: ClassifierParams,
    /// The examples `classifier` was trained on; local retrains start here.
    pub examples: Vec<LabeledExample>,
    /// Corpus scanned for weakly labeled data during DPBD.
    pub source_corpus: Vec<AnnotatedTable>,
    pub config: PipelineConfig,
    pub train_config: TrainConfig,
    pub dpbd: DpbdConfig,
    /// Identifies the on-disk files this model was loaded from; tenant
    /// snapshots taken under a different fingerprint are discarded.
    #[serde(default)]
    pub fingerprint: u64,
}

/// Seed examples from a labeled corpus: every column annotated with an
/// ontology type (including `unknown`).
pub fn seed_examples(corpus: &[AnnotatedTable], ontology: &Ontology, store: &EmbeddingStore) -> Vec<LabeledExample> {
    let mut out = Vec::new();
    for t in corpus {
        for (&i, label) in &t.labels {
            if i < t.table.n_columns() && ontology.contains(label) {
                out.push(LabeledExample {
                    features: column_features(&t.table.columns[i], store),
                    type_id: label.clone(),
                    weight: 1.0,
                    origin: ExampleOrigin::SeedCorpus,
                });
            }
        }
    }
    out
}

impl GlobalModel {
    /// Trains the global classifier on `training` plus background columns.
    pub fn build(
        ontology: Ontology,
        embeddings: EmbeddingStore,
        rules: RuleRegistry,
        training: &[AnnotatedTable],
        source_corpus: Vec<AnnotatedTable>,
        options: &BuildOptions,
    ) -> Result<Self, StateError> {
        let mut examples = seed_examples(training, &ontology, &embeddings);
        if examples.iter().all(|e| e.type_id == UNKNOWN) {
            return Err(StateError::NoTrainingData);
        }
        examples.extend(make_background_examples(
            training,
            &ontology,
            options.background_count,
            options.background_seed,
            &embeddings,
        )?);
        let classifier = classifier::train(&examples, &labels_of(&examples), &options.train)?;
        Ok(GlobalModel {
            version: 1,
            ontology,
            embeddings,
            rules,
            lfs: LfRegistry::default(),
            classifier,
            examples,
            source_corpus,
            config: options.config.clone(),
            train_config: options.train.clone(),
            dpbd: options.dpbd.clone(),
            fingerprint: 0,
        })
    }
}

/// A tenant's local model. A fresh one behaves exactly like the global
/// model alone.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TenantModel {
    pub tenant_id: String,
    /// User-created type names in creation order.
    pub user_types: Vec<String>,
    pub rules: RuleRegistry,
    pub lfs: LfRegistry,
    pub classifier: Option<ClassifierParams>,
    pub weights: ModelWeights,
    /// Weakly labeled examples from DPBD.
    pub generated: Vec<LabeledExample>,
    /// Feedback-table examples keyed by `table_id#column`.
    pub table_examples: BTreeMap<String, LabeledExample>,
    /// Asserted or approved type per `table_id#column`.
    pub table_labels: BTreeMap<String, String>,
    /// Report for every applied event, by event id.
    pub reports: BTreeMap<String, AdaptationReport>,
    /// Feedback-table examples added since the last retrain.
    pub pending_examples: usize,
    pub events_applied: u64,
}

pub fn column_key(table_id: &str, column_index: usize) -> String {
    format!("{table_id}#{column_index}")
}

impl TenantModel {
    pub fn new(tenant_id: impl Into<String>) -> Self {
        TenantModel {
            tenant_id: tenant_id.into(),
            user_types: Vec::new(),
            rules: RuleRegistry::default(),
            lfs: LfRegistry::default(),
            classifier: None,
            weights: ModelWeights::default(),
            generated: Vec::new(),
            table_examples: BTreeMap::new(),
            table_labels: BTreeMap::new(),
            reports: BTreeMap::new(),
            pending_examples: 0,
            events_applied: 0,
        }
    }

    /// Global ontology plus this tenant's user types.
    pub fn effective_ontology(&self, global: &GlobalModel) -> Result<Ontology, OntologyError> {
        let mut o = global.ontology.clone();
        for name in &self.user_types {
            o.add_user_type(name)?;
        }
        Ok(o)
    }

    pub fn label_for(&self, table_id: &str, column_index: usize) -> Option<&str> {
        self.table_labels.get(&column_key(table_id, column_index)).map(String::as_str)
    }
}

pub fn model_state<'a>(global: &'a GlobalModel, tenant: &'a TenantModel, ontology: &'a Ontology) -> ModelState<'a> {
    ModelState {
        ontology,
        embeddings: &global.embeddings,
        global: SideModel { rules: &global.rules, lfs: &global.lfs, classifier: Some(&global.classifier) },
        local: SideModel { rules: &tenant.rules, lfs: &tenant.lfs, classifier: tenant.classifier.as_ref() },
        weights: &tenant.weights,
    }
}

/// Runs the pipeline for one tenant.
pub fn predict_table(
    global: &GlobalModel,
    tenant: &TenantModel,
    table: &Table,
    config: &PipelineConfig,
) -> Result<Vec<FinalPrediction>, StateError> {
    let ontology = tenant.effective_ontology(global)?;
    Ok(run_pipeline(table, &model_state(global, tenant, &ontology), config)?)
}

/// Per-type weight entry in a state summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TypeWeight {
    #[serde(rename = "type")]
    pub type_id: String,
    pub n: u64,
    pub w_local: f64,
    pub w_global: f64,
    pub local_only: bool,
}

/// What `GET /v1/state` and `coltype replay` report about a tenant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TenantSummary {
    pub tenant_id: String,
    pub global_version: u64,
    pub ontology_version: u64,
    pub state_revision: u64,
    pub user_types: Vec<String>,
    pub weights: Vec<TypeWeight>,
    pub lfs: Vec<crate::dpbd::LabelingFunction>,
    pub local_rules: usize,
    /// Training examples by origin, global and local combined.
    pub example_counts: BTreeMap<String, usize>,
    pub local_classifier: bool,
    pub tau: f64,
    pub c: f64,
    pub top_k: usize,
}

fn origin_name(origin: ExampleOrigin) -> String {
    match serde_json::to_value(origin) {
        Ok(serde_json::Value::String(s)) => s,
        _ => format!("{origin:?}"),
    }
}

pub fn summarize(global: &GlobalModel, tenant: &TenantModel) -> Result<TenantSummary, StateError> {
    let ontology = tenant.effective_ontology(global)?;
    let weights = ontology
        .ids()
        .filter(|id| *id != UNKNOWN)
        .map(|id| TypeWeight {
            type_id: id.to_string(),
            n: tenant.weights.count(id),
            w_local: tenant.weights.w_local(id),
            w_global: tenant.weights.w_global(id),
            local_only: tenant.weights.local_only.contains(id),
        })
        .collect();
    let mut example_counts = BTreeMap::new();
    let local = tenant.generated.iter().chain(tenant.table_examples.values());
    for e in global.examples.iter().chain(local) {
        *example_counts.entry(origin_name(e.origin)).or_insert(0) += 1;
    }
    Ok(TenantSummary {
        tenant_id: tenant.tenant_id.clone(),
        global_version: global.version,
        ontology_version: ontology.version(),
        state_revision: tenant.events_applied,
        user_types: tenant.user_types.clone(),
        weights,
        lfs: tenant.lfs.iter().cloned().collect(),
        local_rules: tenant.rules.len(),
        example_counts,
        local_classifier: tenant.classifier.is_some(),
        tau: global.config.abstain_threshold,
        c: global.config.stage_gate,
        top_k: global.config.top_k,
    })
}

/// Prediction payload shared by the HTTP service and `coltype detect`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionResponse {
    pub table_id: String,
    pub ontology_version: u64,
    pub global_version: u64,
    pub state_revision: u64,
    pub predictions: Vec<FinalPrediction>,
}

pub fn prediction_response(
    global: &GlobalModel,
    tenant: &TenantModel,
    table: &Table,
    config: &PipelineConfig,
) -> Result<PredictionResponse, StateError> {
    let ontology = tenant.effective_ontology(global)?;
    let predictions = run_pipeline(table, &model_state(global, tenant, &ontology), config)?;
    Ok(PredictionResponse {
        table_id: table.table_id.clone(),
        ontology_version: ontology.version(),
        global_version: global.version,
        state_revision: tenant.events_applied,
        predictions,
    })
}

/// The canonical JSON rendering: pretty-printed with a trailing newline.
pub fn to_json_text<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("plain data serializes");
    s.push('\n');
    s
}
