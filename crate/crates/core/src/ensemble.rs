//! The staged, confidence-gated pipeline and the global/local blend.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classifier::{self, feature_dim, ClassifierError, ClassifierParams};
use crate::dpbd::lf::{LfContext, LfRegistry};
use crate::header::{match_header_types, EmbeddingStore, DEFAULT_FUZZY_FLOOR};
use crate::lookup::{apply_lookup, sample_values, stable_hash, ColumnContext, LookupError, RuleRegistry, DEFAULT_SAMPLE_CAP};
use crate::ontology::{Ontology, TypeSource, UNKNOWN};
use crate::prediction::{Stage, StagePrediction};
use crate::table::{profile_column, Table};

pub const DEFAULT_PRIOR_STRENGTH: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    LocalConfirmed,
    CorrectionRecorded,
}

/// Per-type global/local influence, derived in closed form from feedback
/// counters: `w_local = n / (n + k0)`.
///
/// Types that exist only in the tenant's model (user-created types) have
/// no global evidence at all; for them `w_local = 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelWeights {
    pub feedback_counts: BTreeMap<String, u64>,
    pub prior_strength: f64,
    #[serde(default)]
    pub local_only: BTreeSet<String>,
}

impl Default for ModelWeights {
    fn default() -> Self {
        ModelWeights::new(DEFAULT_PRIOR_STRENGTH)
    }
}

impl ModelWeights {
    pub fn new(prior_strength: f64) -> Self {
        ModelWeights { feedback_counts: BTreeMap::new(), prior_strength, local_only: BTreeSet::new() }
    }

    pub fn count(&self, type_id: &str) -> u64 {
        self.feedback_counts.get(type_id).copied().unwrap_or(0)
    }

    pub fn w_local(&self, type_id: &str) -> f64 {
        if self.local_only.contains(type_id) {
            return 1.0;
        }
        let n = self.count(type_id) as f64;
        if n == 0.0 {
            0.0
        } else {
            n / (n + self.prior_strength)
        }
    }

    pub fn w_global(&self, type_id: &str) -> f64 {
        1.0 - self.w_local(type_id)
    }

    pub fn mark_local_only(&mut self, type_id: &str) {
        self.local_only.insert(type_id.to_string());
    }
}

/// Increments `n_t` for `type_id`; other types are untouched.
pub fn update_weights(weights: &ModelWeights, type_id: &str, outcome: Outcome) -> ModelWeights {
    let mut w = weights.clone();
    match outcome {
        Outcome::LocalConfirmed | Outcome::CorrectionRecorded => {
            *w.feedback_counts.entry(type_id.to_string()).or_default() += 1;
        }
    }
    w
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    /// Gate `c`: a column whose running top confidence reaches it skips
    /// later stages.
    pub stage_gate: f64,
    /// `τ`: predictions below it abstain.
    pub abstain_threshold: f64,
    pub top_k: usize,
    pub sample_cap: usize,
    pub fuzzy_floor: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            stage_gate: 0.95,
            abstain_threshold: 0.5,
            top_k: 3,
            sample_cap: DEFAULT_SAMPLE_CAP,
            fuzzy_floor: DEFAULT_FUZZY_FLOOR,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(ConfigError::Invalid(format!("{name} must be in [0, 1], got {v}")))
            }
        };
        unit("stage_gate", self.stage_gate)?;
        unit("abstain_threshold", self.abstain_threshold)?;
        unit("fuzzy_floor", self.fuzzy_floor)?;
        if self.top_k == 0 {
            return Err(ConfigError::Invalid("top_k must be at least 1".into()));
        }
        if self.sample_cap == 0 {
            return Err(ConfigError::Invalid("sample_cap must be at least 1".into()));
        }
        Ok(())
    }

    /// Applies `key = value` lines (`#` comments) on top of `self`.
    pub fn merge_text(&self, text: &str) -> Result<Self, ConfigError> {
        let mut cfg = self.clone();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: String| ConfigError::Parse { line: i + 1, message };
            let (k, v) = line.split_once('=').ok_or_else(|| err("expected `key = value`".into()))?;
            let (k, v) = (k.trim(), v.trim());
            let real = || v.parse::<f64>().map_err(|_| err(format!("`{v}` is not a number")));
            let count = || v.parse::<usize>().map_err(|_| err(format!("`{v}` is not a count")));
            match k {
                "stage_gate" | "c" => cfg.stage_gate = real()?,
                "abstain_threshold" | "tau" => cfg.abstain_threshold = real()?,
                "top_k" | "k" => cfg.top_k = count()?,
                "sample_cap" => cfg.sample_cap = count()?,
                "fuzzy_floor" => cfg.fuzzy_floor = real()?,
                _ => return Err(err(format!("unknown key `{k}`"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        format!(
            "stage_gate = {}\nabstain_threshold = {}\ntop_k = {}\nsample_cap = {}\nfuzzy_floor = {}\n",
            self.stage_gate, self.abstain_threshold, self.top_k, self.sample_cap, self.fuzzy_floor
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Global,
    Local,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTrace {
    pub stage: Stage,
    pub side: Side,
    pub scores: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedType {
    #[serde(rename = "type")]
    pub type_id: String,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalPrediction {
    pub column_index: usize,
    pub header: String,
    pub ranked: Vec<RankedType>,
    pub abstained: bool,
    #[serde(rename = "stages")]
    pub stage_trace: Vec<StageTrace>,
}

impl FinalPrediction {
    /// The predicted type, or `None` when abstained or predicting `unknown`.
    pub fn predicted_type(&self) -> Option<&str> {
        if self.abstained {
            return None;
        }
        self.ranked.first().map(|r| r.type_id.as_str()).filter(|t| *t != UNKNOWN)
    }

    pub fn executed_stages(&self) -> BTreeSet<Stage> {
        self.stage_trace.iter().map(|t| t.stage).collect()
    }
}

/// Blended per-type scores.
///
/// `g(t)` averages over every global trace (a type absent from a trace
/// counts 0); `l(t)` averages over the non-empty local traces, and is 0 if
/// there are none.
pub fn blend(global: &[&StagePrediction], local: &[&StagePrediction], weights: &ModelWeights) -> BTreeMap<String, f64> {
    let local: Vec<&StagePrediction> = local.iter().copied().filter(|p| !p.is_empty()).collect();
    let types: BTreeSet<&str> = global.iter().chain(&local).flat_map(|p| p.scores.keys().map(String::as_str)).collect();
    let mean = |side: &[&StagePrediction], t: &str| {
        if side.is_empty() {
            0.0
        } else {
            side.iter().map(|p| p.get(t)).sum::<f64>() / side.len() as f64
        }
    };
    types
        .into_iter()
        .map(|t| {
            let b = weights.w_global(t) * mean(global, t) + weights.w_local(t) * mean(&local, t);
            (t.to_string(), b)
        })
        .collect()
}

/// Non-zero scores sorted by descending confidence, then type id.
pub fn rank(blended: &BTreeMap<String, f64>) -> Vec<RankedType> {
    let mut ranked: Vec<RankedType> = blended
        .iter()
        .filter(|(_, &v)| v > 0.0)
        .map(|(t, &v)| RankedType { type_id: t.clone(), confidence: v })
        .collect();
    ranked.sort_by(|a, b| b.confidence.total_cmp(&a.confidence).then_with(|| a.type_id.cmp(&b.type_id)));
    ranked
}

/// Blends, ranks, keeps the top `k` and applies the `τ` abstention rule.
/// An empty score set always abstains.
pub fn combine_scores(
    global: &[&StagePrediction],
    local: &[&StagePrediction],
    weights: &ModelWeights,
    tau: f64,
    k: usize,
) -> (Vec<RankedType>, bool) {
    let mut ranked = rank(&blend(global, local, weights));
    let top = ranked.first().map_or(0.0, |r| r.confidence);
    if ranked.is_empty() || top < tau {
        return (vec![RankedType { type_id: UNKNOWN.to_string(), confidence: 1.0 - top }], true);
    }
    ranked.truncate(k.max(1));
    (ranked, false)
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PipelineError {
    #[error("state corruption: {0}")]
    StateCorruption(String),
    #[error(transparent)]
    Lookup(#[from] LookupError),
    #[error(transparent)]
    Classifier(#[from] ClassifierError),
    #[error(transparent)]
    Config(#[from] ConfigError),
}

/// One side (global or tenant-local) of the model.
#[derive(Debug, Clone, Copy)]
pub struct SideModel<'a> {
    pub rules: &'a RuleRegistry,
    pub lfs: &'a LfRegistry,
    pub classifier: Option<&'a ClassifierParams>,
}

/// Everything a pipeline run reads. `ontology` is the effective ontology:
/// built-in types (matched by the global header stage) plus the tenant's
/// user types (matched by the local one).
#[derive(Debug, Clone, Copy)]
pub struct ModelState<'a> {
    pub ontology: &'a Ontology,
    pub embeddings: &'a EmbeddingStore,
    pub global: SideModel<'a>,
    pub local: SideModel<'a>,
    pub weights: &'a ModelWeights,
}

impl ModelState<'_> {
    pub fn check(&self) -> Result<(), PipelineError> {
        let dim = feature_dim(self.embeddings.dimension());
        for (side, params) in [("global", self.global.classifier), ("local", self.local.classifier)] {
            let Some(p) = params else { continue };
            if p.feature_dim != dim {
                return Err(PipelineError::StateCorruption(format!(
                    "{side} classifier expects {} features, embeddings give {dim}",
                    p.feature_dim
                )));
            }
            if p.weights.len() != p.labels.len() * p.feature_dim || p.bias.len() != p.labels.len() {
                return Err(PipelineError::StateCorruption(format!("{side} classifier parameter shapes disagree")));
            }
            if let Some(l) = p.labels.iter().find(|l| !self.ontology.contains(l)) {
                return Err(PipelineError::StateCorruption(format!("{side} classifier label `{l}` not in ontology")));
            }
        }
        Ok(())
    }
}

/// Sampling seed for a column: stable across runs and processes.
pub fn column_seed(table_id: &str, column_index: usize) -> u64 {
    stable_hash(table_id).wrapping_add(column_index as u64)
}

/// Runs header, lookup and classifier stages in order for every column,
/// freezing a column once its running blended top confidence reaches
/// `stage_gate`.
pub fn run_pipeline(
    table: &Table,
    state: &ModelState<'_>,
    config: &PipelineConfig,
) -> Result<Vec<FinalPrediction>, PipelineError> {
    config.validate()?;
    state.check()?;
    let builtin: Vec<_> = state.ontology.types().filter(|t| t.source == TypeSource::Builtin).collect();
    let user: Vec<_> = state.ontology.user_types().collect();
    let mut out = Vec::with_capacity(table.n_columns());
    for (j, column) in table.columns.iter().enumerate() {
        let header = &table.headers[j];
        let profile = profile_column(column);
        let mut global: Vec<StagePrediction> = Vec::new();
        let mut local: Vec<StagePrediction> = Vec::new();
        let mut features = None;
        for stage in Stage::ORDER {
            let (g, l) = match stage {
                Stage::Header => (
                    match_header_types(header, builtin.iter().copied(), state.embeddings, config.fuzzy_floor),
                    match_header_types(header, user.iter().copied(), state.embeddings, config.fuzzy_floor),
                ),
                Stage::Lookup => {
                    let sample = sample_values(column, config.sample_cap, column_seed(&table.table_id, j));
                    let ctx = ColumnContext { column, profile: &profile, lf: LfContext::header_only(header) };
                    (
                        apply_lookup(&sample, [state.global.rules], state.global.lfs, Some(&ctx))?,
                        apply_lookup(&sample, [state.local.rules], state.local.lfs, Some(&ctx))?,
                    )
                }
                Stage::Classifier => {
                    let f = features
                        .get_or_insert_with(|| classifier::extract_features(column, &profile, state.embeddings));
                    let run = |p: Option<&ClassifierParams>| match p {
                        Some(p) => classifier::predict(f, p),
                        None => Ok(StagePrediction::empty(Stage::Classifier)),
                    };
                    (run(state.global.classifier)?, run(state.local.classifier)?)
                }
            };
            global.push(g);
            if !l.is_empty() {
                local.push(l);
            }
            let running = rank(&blend(&global.iter().collect::<Vec<_>>(), &local.iter().collect::<Vec<_>>(), state.weights));
            if running.first().is_some_and(|r| r.confidence >= config.stage_gate) {
                break;
            }
        }
        let (ranked, abstained) = combine_scores(
            &global.iter().collect::<Vec<_>>(),
            &local.iter().collect::<Vec<_>>(),
            state.weights,
            config.abstain_threshold,
            config.top_k,
        );
        let mut stage_trace: Vec<StageTrace> = global
            .into_iter()
            .map(|p| StageTrace { stage: p.stage, side: Side::Global, scores: p.scores })
            .chain(local.into_iter().map(|p| StageTrace { stage: p.stage, side: Side::Local, scores: p.scores }))
            .collect();
        stage_trace.sort_by_key(|t| (t.stage, t.side));
        out.push(FinalPrediction { column_index: j, header: header.clone(), ranked, abstained, stage_trace });
    }
    Ok(out)
}

/// A validation column scored at `τ = 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredColumn {
    pub table_id: String,
    pub column_index: usize,
    pub gold: String,
    /// Top blended type and confidence; `None` if nothing scored.
    pub top: Option<(String, f64)>,
}

impl ScoredColumn {
    /// The prediction under threshold `tau`; `None` means abstain (a top
    /// type of `unknown` also counts as abstaining).
    pub fn predicted_at(&self, tau: f64) -> Option<&str> {
        self.top.as_ref().filter(|(t, s)| *s >= tau && t != UNKNOWN).map(|(t, _)| t.as_str())
    }
}

/// Runs the pipeline with `τ = 0` and pairs each labeled column with its
/// top score.
pub fn score_labeled_table(
    table: &Table,
    labels: &BTreeMap<usize, String>,
    state: &ModelState<'_>,
    config: &PipelineConfig,
) -> Result<Vec<ScoredColumn>, PipelineError> {
    let zero = PipelineConfig { abstain_threshold: 0.0, ..config.clone() };
    let preds = run_pipeline(table, state, &zero)?;
    Ok(labels
        .iter()
        .filter(|(i, _)| **i < preds.len())
        .map(|(&i, gold)| ScoredColumn {
            table_id: table.table_id.clone(),
            column_index: i,
            gold: gold.clone(),
            top: (!preds[i].abstained).then(|| {
                let r = &preds[i].ranked[0];
                (r.type_id.clone(), r.confidence)
            }),
        })
        .collect())
}

/// `(precision, coverage)` at `tau`. Precision is `None` when nothing is
/// predicted.
pub fn precision_coverage(scored: &[ScoredColumn], tau: f64) -> (Option<f64>, f64) {
    let mut predicted = 0usize;
    let mut correct = 0usize;
    for s in scored {
        if let Some(t) = s.predicted_at(tau) {
            predicted += 1;
            if t == s.gold {
                correct += 1;
            }
        }
    }
    let precision = (predicted > 0).then(|| correct as f64 / predicted as f64);
    let coverage = if scored.is_empty() { 0.0 } else { predicted as f64 / scored.len() as f64 };
    (precision, coverage)
}

/// The threshold grid `{0, 0.01, ..., 1}`.
pub fn tau_grid() -> impl Iterator<Item = f64> {
    (0..=100).map(|i| i as f64 / 100.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub tau: f64,
    pub target_precision: f64,
    /// Precision at the chosen `tau` (`None` if nothing is predicted).
    pub precision: Option<f64>,
    pub coverage: f64,
    /// Set when no grid point reaches the target; `tau` is then 1.
    pub unattainable: bool,
}

/// Smallest grid `τ` whose precision reaches `target_precision`.
pub fn calibrate_tau_scored(scored: &[ScoredColumn], target_precision: f64) -> Calibration {
    for tau in tau_grid() {
        let (precision, coverage) = precision_coverage(scored, tau);
        if precision.is_some_and(|p| p >= target_precision) {
            return Calibration { tau, target_precision, precision, coverage, unattainable: false };
        }
    }
    let (precision, coverage) = precision_coverage(scored, 1.0);
    Calibration { tau: 1.0, target_precision, precision, coverage, unattainable: true }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CalibrationError {
    #[error("validation set has no labeled columns")]
    EmptyValidation,
    #[error("target precision {0} outside (0, 1]")]
    BadTarget(f64),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
}

pub fn calibrate_tau<'t>(
    validation: impl IntoIterator<Item = (&'t Table, &'t BTreeMap<usize, String>)>,
    state: &ModelState<'_>,
    config: &PipelineConfig,
    target_precision: f64,
) -> Result<Calibration, CalibrationError> {
    if !(target_precision > 0.0 && target_precision <= 1.0) {
        return Err(CalibrationError::BadTarget(target_precision));
    }
    let mut scored = Vec::new();
    for (table, labels) in validation {
        scored.extend(score_labeled_table(table, labels, state, config)?);
    }
    if scored.is_empty() {
        return Err(CalibrationError::EmptyValidation);
    }
    Ok(calibrate_tau_scored(&scored, target_precision))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lookup::{LookupRule, RuleOrigin};
    use crate::ontology::load_ontology;
    use crate::table::Column;

    fn pred(stage: Stage, scores: &[(&str, f64)]) -> StagePrediction {
        StagePrediction { stage, scores: scores.iter().map(|(k, v)| (k.to_string(), *v)).collect() }
    }

    fn weights(counts: &[(&str, u64)]) -> ModelWeights {
        let mut w = ModelWeights::default();
        for (t, n) in counts {
            w.feedback_counts.insert(t.to_string(), *n);
        }
        w
    }

    #[test]
    fn closed_form_weights() {
        let w = weights(&[("a", 5)]);
        assert_eq!(w.w_local("a"), 0.5);
        assert_eq!(w.w_local("b"), 0.0);
        let mut w = ModelWeights::default();
        let mut prev = w.w_local("x");
        for _ in 0..3 {
            w = update_weights(&w, "x", Outcome::LocalConfirmed);
            assert!(w.w_local("x") > prev);
            prev = w.w_local("x");
        }
        assert_eq!(w.count("x"), 3);
        assert_eq!(w.count("y"), 0);
        w.mark_local_only("s");
        assert_eq!((w.w_local("s"), w.w_global("s")), (1.0, 0.0));
    }

    #[test]
    fn blend_arithmetic() {
        let g1 = pred(Stage::Header, &[("date", 0.8), ("city", 0.4)]);
        let g2 = pred(Stage::Lookup, &[("date", 0.4)]);
        let l1 = pred(Stage::Lookup, &[("date", 1.0)]);
        let w = weights(&[("date", 5)]);
        let b = blend(&[&g1, &g2], &[&l1], &w);
        // g(date) = 0.6, g(city) = 0.2, l(date) = 1.0, w_local(date) = 0.5.
        assert!((b["date"] - 0.8).abs() < 1e-12);
        assert!((b["city"] - 0.2).abs() < 1e-12);
    }

    #[test]
    fn zero_local_weight_is_global_only() {
        let g = pred(Stage::Header, &[("a", 0.7), ("b", 0.2)]);
        let l = pred(Stage::Lookup, &[("a", 0.1), ("c", 0.9)]);
        let w = ModelWeights::default();
        assert_eq!(combine_scores(&[&g], &[&l], &w, 0.5, 3), combine_scores(&[&g], &[], &w, 0.5, 3));
    }

    #[test]
    fn abstention_and_ties() {
        let g = pred(Stage::Header, &[("b", 0.3), ("a", 0.3)]);
        let (ranked, abstained) = combine_scores(&[&g], &[], &ModelWeights::default(), 0.5, 3);
        assert!(abstained);
        assert_eq!(ranked, vec![RankedType { type_id: UNKNOWN.into(), confidence: 0.7 }]);
        let (ranked, abstained) = combine_scores(&[&g], &[], &ModelWeights::default(), 0.3, 3);
        assert!(!abstained);
        assert_eq!(ranked.iter().map(|r| r.type_id.as_str()).collect::<Vec<_>>(), ["a", "b"]);
        let (ranked, abstained) = combine_scores(&[], &[], &ModelWeights::default(), 0.0, 3);
        assert!(abstained && ranked[0].confidence == 1.0);
    }

    #[test]
    fn config_text_round_trip() {
        let cfg = PipelineConfig::default().merge_text("c = 0.9 # gate\ntau=0.3\n\nk = 2\n").unwrap();
        assert_eq!((cfg.stage_gate, cfg.abstain_threshold, cfg.top_k), (0.9, 0.3, 2));
        assert_eq!(PipelineConfig::default().merge_text(&cfg.to_text()).unwrap(), cfg);
        assert!(matches!(PipelineConfig::default().merge_text("tau = 2"), Err(ConfigError::Invalid(_))));
        assert!(matches!(PipelineConfig::default().merge_text("x = 1"), Err(ConfigError::Parse { line: 1, .. })));
    }

    fn scored(rows: &[(&str, &str, f64)]) -> Vec<ScoredColumn> {
        rows.iter()
            .enumerate()
            .map(|(i, (gold, top, s))| ScoredColumn {
                table_id: "t".into(),
                column_index: i,
                gold: gold.to_string(),
                top: Some((top.to_string(), *s)),
            })
            .collect()
    }

    #[test]
    fn calibration_cases() {
        let perfect = scored(&[("a", "a", 0.2), ("b", "b", 0.9)]);
        let c = calibrate_tau_scored(&perfect, 0.95);
        assert_eq!((c.tau, c.unattainable), (0.0, false));

        let irreducible = scored(&[("a", "b", 1.0), ("b", "b", 0.9)]);
        let c = calibrate_tau_scored(&irreducible, 1.0);
        assert_eq!((c.tau, c.unattainable), (1.0, true));

        // Errors at 0.3 and 0.55; precision reaches 1 once tau passes 0.55.
        let mixed = scored(&[("a", "a", 0.9), ("a", "b", 0.3), ("b", "b", 0.7), ("b", "a", 0.55), ("c", "c", 0.6)]);
        let brute = tau_grid()
            .find(|&t| {
                let (mut n, mut ok) = (0, 0);
                for (gold, top, s) in [("a", "a", 0.9), ("a", "b", 0.3), ("b", "b", 0.7), ("b", "a", 0.55), ("c", "c", 0.6)] {
                    if s >= t {
                        n += 1;
                        ok += usize::from(gold == top);
                    }
                }
                n > 0 && ok as f64 / n as f64 >= 1.0
            })
            .unwrap();
        let c = calibrate_tau_scored(&mixed, 1.0);
        assert_eq!(c.tau, brute);
        assert_eq!(c.tau, 0.56);
        assert_eq!(c.coverage, 0.6);
    }

    fn onto() -> Ontology {
        load_ontology(b"version\t1\ndate\tdate\t-\tday\ncity\tcity\t-\ttown\n").unwrap()
    }

    struct Fixture {
        onto: Ontology,
        store: EmbeddingStore,
        rules: RuleRegistry,
        empty_rules: RuleRegistry,
        lfs: LfRegistry,
        weights: ModelWeights,
    }

    impl Fixture {
        fn new() -> Self {
            let onto = onto();
            let mut rules = RuleRegistry::default();
            rules
                .register(LookupRule::regex("iso", "date", r"^\d{4}-\d{2}-\d{2}$", RuleOrigin::Builtin), &onto)
                .unwrap();
            rules
                .register(
                    LookupRule::dictionary("cities", "city", ["paris", "lima"], true, RuleOrigin::Kb),
                    &onto,
                )
                .unwrap();
            Fixture {
                onto,
                store: EmbeddingStore::empty(0),
                rules,
                empty_rules: RuleRegistry::default(),
                lfs: LfRegistry::default(),
                weights: ModelWeights::default(),
            }
        }

        fn state(&self) -> ModelState<'_> {
            ModelState {
                ontology: &self.onto,
                embeddings: &self.store,
                global: SideModel { rules: &self.rules, lfs: &self.lfs, classifier: None },
                local: SideModel { rules: &self.empty_rules, lfs: &self.lfs, classifier: None },
                weights: &self.weights,
            }
        }
    }

    fn table() -> Table {
        Table::new(
            "t",
            "t",
            vec![
                Column::from_strs("date", &["x", "y", "z", "w"]),
                Column::from_strs("when", &["2020-01-01", "2021-02-03", "soon", "2022-03-04"]),
                Column::from_strs("zz", &["Paris", "q", "r", "s"]),
            ],
        )
        .unwrap()
    }

    #[test]
    fn gating_and_hand_computed_scores() {
        let fx = Fixture::new();
        let cfg = PipelineConfig { stage_gate: 0.9, ..PipelineConfig::default() };
        let preds = run_pipeline(&table(), &fx.state(), &cfg).unwrap();
        // Exact header match: header stage only.
        assert_eq!(preds[0].executed_stages(), [Stage::Header].into());
        assert_eq!(preds[0].ranked[0], RankedType { type_id: "date".into(), confidence: 1.0 });
        // No header match; lookup 3/4 → mean over (header 0, lookup 0.75,
        // classifier absent → empty) = 0.25.
        assert_eq!(preds[1].stage_trace.len(), 3);
        // Top 0.25 < tau 0.5: abstains with confidence 1 - 0.25.
        assert!(preds[1].abstained);
        assert_eq!(preds[1].ranked, vec![RankedType { type_id: UNKNOWN.into(), confidence: 0.75 }]);
        // Dictionary matches 1 of 4 values: 0.25 / 3 stages.
        let relaxed = PipelineConfig { abstain_threshold: 0.05, ..cfg };
        let preds = run_pipeline(&table(), &fx.state(), &relaxed).unwrap();
        assert_eq!(preds[2].ranked[0].type_id, "city");
        assert!((preds[2].ranked[0].confidence - 0.25 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn state_corruption_is_detected() {
        let fx = Fixture::new();
        let bad = ClassifierParams::zeros(vec!["date".into(), "planet".into()], classifier::PROFILE_FEATURES);
        let mut st = fx.state();
        st.global.classifier = Some(&bad);
        assert!(matches!(run_pipeline(&table(), &st, &PipelineConfig::default()), Err(PipelineError::StateCorruption(_))));
        let wrong_dim = ClassifierParams::zeros(vec!["date".into()], 3);
        st.global.classifier = Some(&wrong_dim);
        assert!(matches!(run_pipeline(&table(), &st, &PipelineConfig::default()), Err(PipelineError::StateCorruption(_))));
    }

    #[test]
    fn prediction_json_shape() {
        let fx = Fixture::new();
        let preds = run_pipeline(&table(), &fx.state(), &PipelineConfig::default()).unwrap();
        let v = serde_json::to_value(&preds[0]).unwrap();
        for key in ["column_index", "header", "ranked", "abstained", "stages"] {
            assert!(v.get(key).is_some(), "{key}");
        }
        assert!(v["ranked"][0].get("type").is_some());
        assert_eq!(v["stages"][0]["side"], "global");
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn arb_pred(stage: Stage) -> impl Strategy<Value = StagePrediction> {
            prop::collection::btree_map("[a-d]", 0.0f64..=1.0, 0..4).prop_map(move |scores| StagePrediction { stage, scores })
        }

        fn arb_weights() -> impl Strategy<Value = ModelWeights> {
            prop::collection::btree_map("[a-d]", 0u64..20, 0..4).prop_map(|counts| ModelWeights {
                feedback_counts: counts,
                ..ModelWeights::default()
            })
        }

        proptest! {
            #[test]
            fn weights_sum_to_one(w in arb_weights(), t in "[a-e]") {
                prop_assert!((w.w_global(&t) + w.w_local(&t) - 1.0).abs() < 1e-15);
                let n = w.count(&t) as f64;
                prop_assert_eq!(w.w_local(&t), if n == 0.0 { 0.0 } else { n / (n + 5.0) });
            }

            #[test]
            fn order_of_traces_is_irrelevant(
                g in prop::collection::vec(arb_pred(Stage::Header), 1..4),
                l in prop::collection::vec(arb_pred(Stage::Lookup), 0..3),
                w in arb_weights(),
            ) {
                let gr: Vec<&StagePrediction> = g.iter().collect();
                let lr: Vec<&StagePrediction> = l.iter().collect();
                let grev: Vec<&StagePrediction> = g.iter().rev().collect();
                let lrev: Vec<&StagePrediction> = l.iter().rev().collect();
                let a = blend(&gr, &lr, &w);
                let b = blend(&grev, &lrev, &w);
                prop_assert_eq!(a.keys().collect::<Vec<_>>(), b.keys().collect::<Vec<_>>());
                for (k, v) in &a {
                    prop_assert!((v - b[k]).abs() < 1e-12);
                }
            }

            #[test]
            fn raising_tau_never_unabstains(
                g in prop::collection::vec(arb_pred(Stage::Header), 1..3),
                w in arb_weights(),
                t1 in 0.0f64..=1.0,
                t2 in 0.0f64..=1.0,
            ) {
                let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
                let gr: Vec<&StagePrediction> = g.iter().collect();
                let (_, a_lo) = combine_scores(&gr, &[], &w, lo, 3);
                let (_, a_hi) = combine_scores(&gr, &[], &w, hi, 3);
                prop_assert!(!a_lo || a_hi);
            }

            #[test]
            fn ranking_is_strict_and_scale_stable(
                g in arb_pred(Stage::Header),
                s in 0.01f64..1.0,
            ) {
                let w = ModelWeights::default();
                let (r, _) = combine_scores(&[&g], &[], &w, 0.0, 10);
                for p in r.windows(2) {
                    prop_assert!(p[0].confidence > p[1].confidence
                        || (p[0].confidence == p[1].confidence && p[0].type_id < p[1].type_id));
                }
                let scaled = StagePrediction { stage: g.stage, scores: g.scores.iter().map(|(k, v)| (k.clone(), v * s)).collect() };
                let (r2, _) = combine_scores(&[&scaled], &[], &w, 0.0, 10);
                prop_assert_eq!(r.first().map(|x| &x.type_id), r2.first().map(|x| &x.type_id));
            }

            #[test]
            fn raising_c_never_runs_fewer_stages(
                c1 in 0.0f64..=1.0,
                c2 in 0.0f64..=1.0,
                vals in prop::collection::vec(prop_oneof![Just("2020-01-01"), Just("paris"), Just("x")], 1..6),
                h in prop_oneof![Just("date"), Just("town"), Just("zz"), Just("citty")],
            ) {
                let fx = Fixture::new();
                let (lo, hi) = if c1 <= c2 { (c1, c2) } else { (c2, c1) };
                let t = Table::new("p", "p", vec![Column::from_strs(h, &vals)]).unwrap();
                let run = |c| run_pipeline(&t, &fx.state(), &PipelineConfig { stage_gate: c, ..PipelineConfig::default() }).unwrap();
                prop_assert!(run(lo)[0].executed_stages().len() <= run(hi)[0].executed_stages().len());
            }
        }
    }
}
