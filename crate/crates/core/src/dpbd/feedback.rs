//! Turning one feedback event into a local-model update.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classifier::{self, extract_features, labels_of, ClassifierError, ExampleOrigin, LabeledExample};
use crate::dpbd::lf::{generate_training_data, infer_labeling_functions, LabelingFunction, LfContext};
use crate::ensemble::{run_pipeline, update_weights, Outcome, PipelineConfig, PipelineError};
use crate::lookup::{LookupError, LookupRule, RuleOrigin};
use crate::ontology::{normalize, Ontology, OntologyError, UNKNOWN};
use crate::state::{column_key, model_state, GlobalModel, TenantModel};
use crate::table::{profile_column, Table};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeedbackKind {
    ExplicitCorrection,
    ExplicitApproval,
    ImplicitApproval,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeedbackEvent {
    pub event_id: String,
    /// May be left empty in API requests; the service fills it in.
    #[serde(default)]
    pub tenant_id: String,
    pub table_id: String,
    pub column_index: usize,
    pub predicted_type: String,
    pub asserted_type: String,
    pub kind: FeedbackKind,
    #[serde(default)]
    pub timestamp: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightUpdate {
    pub type_id: String,
    pub n: u64,
    pub w_local: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptationReport {
    pub event_id: String,
    /// The asserted type, resolved to an id.
    pub type_id: String,
    pub created_type: bool,
    pub new_lfs: Vec<LabelingFunction>,
    pub new_rules: Vec<String>,
    pub n_generated: usize,
    pub retrained: bool,
    pub weight_updates: Vec<WeightUpdate>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeedbackResult {
    pub report: AdaptationReport,
    /// The event id was seen before; nothing changed.
    pub duplicate: bool,
}

#[derive(Debug, Error)]
pub enum DpbdError {
    #[error("not found: {0}")]
    NotFound(String),
    #[error("invalid feedback: {0}")]
    Validation(String),
    #[error(transparent)]
    Ontology(#[from] OntologyError),
    #[error(transparent)]
    Lookup(#[from] LookupError),
    #[error(transparent)]
    Classifier(#[from] ClassifierError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
}

fn validate(event: &FeedbackEvent, tenant: &TenantModel, table: &Table) -> Result<(), DpbdError> {
    if event.event_id.trim().is_empty() {
        return Err(DpbdError::Validation("event_id is empty".into()));
    }
    if event.tenant_id != tenant.tenant_id {
        return Err(DpbdError::Validation(format!(
            "event for tenant `{}` applied to tenant `{}`",
            event.tenant_id, tenant.tenant_id
        )));
    }
    if event.table_id != table.table_id {
        return Err(DpbdError::NotFound(format!("table `{}`", event.table_id)));
    }
    if event.column_index >= table.n_columns() {
        return Err(DpbdError::NotFound(format!("column {} of table `{}`", event.column_index, event.table_id)));
    }
    if normalize(&event.asserted_type).is_empty() {
        return Err(DpbdError::Validation("asserted type is empty after normalization".into()));
    }
    let same = normalize(&event.asserted_type) == normalize(&event.predicted_type);
    match event.kind {
        FeedbackKind::ExplicitCorrection if same => {
            Err(DpbdError::Validation("a correction must assert a type other than the predicted one".into()))
        }
        FeedbackKind::ExplicitApproval | FeedbackKind::ImplicitApproval if !same => {
            Err(DpbdError::Validation("an approval must assert the predicted type".into()))
        }
        _ => Ok(()),
    }
}

/// Looks a type up by id, then by name.
fn resolve<'o>(ontology: &'o Ontology, name: &str) -> Option<&'o str> {
    if ontology.contains(name) {
        return ontology.get(name).map(|t| t.id.as_str());
    }
    ontology.resolve_name(name).map(|t| t.id.as_str())
}

/// Confident types of the column's immediate neighbors: the tenant's own
/// labels first, otherwise the current non-abstained prediction.
fn neighbor_types(
    global: &GlobalModel,
    tenant: &TenantModel,
    ontology: &Ontology,
    table: &Table,
    index: usize,
    config: &PipelineConfig,
) -> Result<(Option<String>, Option<String>), DpbdError> {
    let neighbors: Vec<usize> = [index.checked_sub(1), Some(index + 1)]
        .into_iter()
        .flatten()
        .filter(|&i| i < table.n_columns())
        .collect();
    let mut predictions = None;
    let mut typed = |i: usize| -> Result<Option<String>, DpbdError> {
        if let Some(l) = tenant.label_for(&table.table_id, i) {
            return Ok(Some(l.to_string()).filter(|l| l != UNKNOWN));
        }
        if predictions.is_none() {
            predictions = Some(run_pipeline(table, &model_state(global, tenant, ontology), config)?);
        }
        let p = &predictions.as_ref().expect("just set")[i];
        Ok(p.predicted_type().map(String::from))
    };
    let mut left = None;
    let mut right = None;
    for i in neighbors {
        if i < index {
            left = typed(i)?;
        } else {
            right = typed(i)?;
        }
    }
    Ok((left, right))
}

fn retrain(global: &GlobalModel, tenant: &mut TenantModel) -> Result<(), DpbdError> {
    let mut examples: Vec<LabeledExample> = global.examples.clone();
    examples.extend(tenant.generated.iter().cloned());
    examples.extend(tenant.table_examples.values().cloned());
    let labels = labels_of(&examples);
    tenant.classifier = Some(classifier::train(&examples, &labels, &global.train_config)?);
    tenant.pending_examples = 0;
    Ok(())
}

/// Applies one feedback event to `tenant`.
///
/// All changes are made on a copy and committed only on success. A
/// repeated `event_id` returns the original report without changes.
pub fn process_feedback(
    global: &GlobalModel,
    tenant: &mut TenantModel,
    event: &FeedbackEvent,
    table: &Table,
) -> Result<FeedbackResult, DpbdError> {
    if let Some(report) = tenant.reports.get(&event.event_id) {
        return Ok(FeedbackResult { report: report.clone(), duplicate: true });
    }
    validate(event, tenant, table)?;
    let mut next = tenant.clone();
    let mut ontology = next.effective_ontology(global)?;
    let j = event.column_index;
    let column = &table.columns[j];
    let profile = profile_column(column);

    let mut report = AdaptationReport {
        event_id: event.event_id.clone(),
        type_id: String::new(),
        created_type: false,
        new_lfs: Vec::new(),
        new_rules: Vec::new(),
        n_generated: 0,
        retrained: false,
        weight_updates: Vec::new(),
    };
    let mut touched = Vec::new();

    match event.kind {
        FeedbackKind::ExplicitCorrection => {
            let (left, right) = neighbor_types(global, tenant, &ontology, table, j, &global.config)?;
            let type_id = match resolve(&ontology, &event.asserted_type) {
                Some(id) => id.to_string(),
                None => {
                    let t = ontology.add_user_type(&event.asserted_type)?;
                    next.user_types.push(event.asserted_type.trim().to_string());
                    next.weights.mark_local_only(&t.id);
                    report.created_type = true;
                    t.id
                }
            };
            let ctx = LfContext { header: &table.headers[j], left_type: left.as_deref(), right_type: right.as_deref() };
            let lfs = infer_labeling_functions(&profile, &ctx, &type_id, &event.event_id, &global.dpbd.infer);
            for lf in &lfs {
                next.lfs.insert(lf.clone());
                // Column-level LFs other than the header token are too
                // unspecific to score values on their own; they only vote
                // during training-data generation.
                if lf.body.is_value_level() || matches!(lf.body, crate::dpbd::lf::LfBody::HeaderToken { .. }) {
                    let rule = LookupRule::labeling_function(
                        &format!("rule:{}", lf.lf_id),
                        &type_id,
                        &lf.lf_id,
                        RuleOrigin::DpbdLocal,
                    );
                    report.new_rules.push(next.rules.register(rule, &ontology)?);
                }
            }
            let generated =
                generate_training_data(&global.source_corpus, &lfs, &global.dpbd.generate, &global.embeddings);
            report.n_generated = generated.len();
            next.generated.extend(generated);
            report.new_lfs = lfs;

            touched.push(type_id.clone());
            if let Some(p) = resolve(&ontology, &event.predicted_type).filter(|p| *p != UNKNOWN && *p != type_id) {
                touched.push(p.to_string());
            }
            report.type_id = type_id;
        }
        FeedbackKind::ExplicitApproval | FeedbackKind::ImplicitApproval => {
            let type_id = resolve(&ontology, &event.asserted_type)
                .ok_or_else(|| DpbdError::Validation(format!("approved type `{}` is not in the ontology", event.asserted_type)))?
                .to_string();
            touched.push(type_id.clone());
            report.type_id = type_id;
        }
    }

    let key = column_key(&table.table_id, j);
    next.table_labels.insert(key.clone(), report.type_id.clone());
    next.table_examples.insert(
        key,
        LabeledExample {
            features: extract_features(column, &profile, &global.embeddings),
            type_id: report.type_id.clone(),
            weight: 1.0,
            origin: ExampleOrigin::FeedbackTable,
        },
    );
    next.pending_examples += 1;

    let outcome = match event.kind {
        FeedbackKind::ExplicitCorrection => Outcome::CorrectionRecorded,
        _ => Outcome::LocalConfirmed,
    };
    for t in &touched {
        next.weights = update_weights(&next.weights, t, outcome);
        report.weight_updates.push(WeightUpdate { type_id: t.clone(), n: next.weights.count(t), w_local: next.weights.w_local(t) });
    }

    let must_retrain = event.kind == FeedbackKind::ExplicitCorrection
        || next.classifier.is_none()
        || next.pending_examples >= global.dpbd.retrain_every;
    if must_retrain {
        retrain(global, &mut next)?;
        report.retrained = true;
    }

    next.events_applied += 1;
    next.reports.insert(event.event_id.clone(), report.clone());
    *tenant = next;
    Ok(FeedbackResult { report, duplicate: false })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn event_json_shape() {
        let e = FeedbackEvent {
            event_id: "e1".into(),
            tenant_id: "acme".into(),
            table_id: "tbl-000001".into(),
            column_index: 2,
            predicted_type: "price".into(),
            asserted_type: "salary".into(),
            kind: FeedbackKind::ExplicitCorrection,
            timestamp: "2024-01-01T00:00:00Z".into(),
        };
        let v = serde_json::to_value(&e).unwrap();
        assert_eq!(v["kind"], "explicit_correction");
        assert_eq!(serde_json::from_value::<FeedbackEvent>(v).unwrap(), e);
    }
}
