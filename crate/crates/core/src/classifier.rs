//! Stage 3: a multiclass linear softmax classifier over column features.
//!
//! The label set always contains [`UNKNOWN`], trained on background columns
//! so that out-of-distribution inputs can be recognized.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::AnnotatedTable;
use crate::header::EmbeddingStore;
use crate::lookup::stable_hash;
use crate::ontology::{name_tokens, Ontology, UNKNOWN};
use crate::prediction::{Stage, StagePrediction};
use crate::table::{is_boolean, is_date, profile_column, Column, ColumnProfile, Primitive};

/// Number of profile-derived features preceding the value embedding.
pub const PROFILE_FEATURES: usize = 22;

/// Distinct values whose tokens feed the mean value embedding.
pub const EMBEDDING_VALUES: usize = 50;

pub const FEATURE_NAMES: [&str; PROFILE_FEATURES] = [
    "log_rows",
    "missing_fraction",
    "unique_ratio",
    "log_mean_length",
    "frac_digit",
    "frac_alpha",
    "frac_punct",
    "frac_space",
    "frac_other",
    "numeric_present",
    "num_min",
    "num_max",
    "num_mean",
    "num_std",
    "fraction_integer",
    "top_dominance",
    "top_entropy",
    "boolean_likeness",
    "date_likeness",
    "digit_start",
    "reserved_0",
    "reserved_1",
];

// Scaling constants. Counts and lengths are log-compressed; numeric stats use
// a signed log and are divided by NUM_SCALE so typical magnitudes land in
// roughly [-1.5, 1.5].
const ROWS_SCALE: f64 = 10.0;
const LENGTH_SCALE: f64 = 5.0;
const NUM_SCALE: f64 = 10.0;

pub fn feature_dim(embedding_dim: usize) -> usize {
    PROFILE_FEATURES + embedding_dim
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClassifierError {
    #[error("no training examples")]
    NoExamples,
    #[error("training diverged (non-finite loss) at epoch {epoch}")]
    Divergence { epoch: usize },
    #[error("feature dimension mismatch: expected {expected}, got {found}")]
    Dimension { expected: usize, found: usize },
    #[error("label set must contain `unknown`")]
    MissingUnknown,
    #[error("example label `{0}` is not in the label set")]
    UnlistedLabel(String),
    #[error("label `{0}` has no training examples")]
    EmptyLabel(String),
    #[error("example weight {0} outside (0, 1]")]
    BadWeight(f64),
    #[error("background corpus has no usable columns")]
    NoUsableColumns,
    #[error("invalid config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FeatureVector(pub Vec<f64>);

impl FeatureVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

fn slog(x: f64) -> f64 {
    x.signum() * x.abs().ln_1p()
}

/// Up to [`EMBEDDING_VALUES`] distinct values chosen by hash, so the choice
/// does not depend on row order.
fn embedding_values(column: &Column) -> Vec<&str> {
    let distinct: BTreeSet<&str> = column.non_missing().collect();
    let mut keyed: Vec<(u64, &str)> = distinct.into_iter().map(|v| (stable_hash(v), v)).collect();
    keyed.sort_unstable();
    keyed.into_iter().take(EMBEDDING_VALUES).map(|(_, v)| v).collect()
}

/// Builds the `22 + d` feature vector for a column. See [`FEATURE_NAMES`].
pub fn extract_features(column: &Column, profile: &ColumnProfile, store: &EmbeddingStore) -> FeatureVector {
    let mut f = vec![0.0; feature_dim(store.dimension())];
    let present = profile.n_present();
    f[0] = (profile.n_rows as f64).ln_1p() / ROWS_SCALE;
    if profile.n_rows > 0 {
        f[1] = profile.n_missing as f64 / profile.n_rows as f64;
    }
    f[2] = profile.unique_ratio();
    if let Some(ts) = &profile.text_stats {
        f[3] = ts.mean_length.ln_1p() / LENGTH_SCALE;
        f[4..9].copy_from_slice(&ts.char_class_histogram.as_array());
    }
    if let Some(ns) = &profile.numeric_stats {
        f[9] = 1.0;
        f[10] = slog(ns.min) / NUM_SCALE;
        f[11] = slog(ns.max) / NUM_SCALE;
        f[12] = slog(ns.mean) / NUM_SCALE;
        f[13] = slog(ns.std) / NUM_SCALE;
        f[14] = ns.fraction_integer;
    }
    if present > 0 {
        let n = present as f64;
        f[15] = profile.top_values.first().map_or(0.0, |t| t.1 as f64 / n);
        let top_total: usize = profile.top_values.iter().map(|t| t.1).sum();
        if top_total > 0 {
            let h: f64 = profile
                .top_values
                .iter()
                .map(|t| t.1 as f64 / top_total as f64)
                .map(|p| -p * p.ln())
                .sum();
            f[16] = h / (crate::table::TOP_VALUES_CAP as f64).ln();
        }
        let rate = |pred: &dyn Fn(&str) -> bool| column.non_missing().filter(|v| pred(v)).count() as f64 / n;
        f[17] = rate(&is_boolean);
        f[18] = rate(&is_date);
        f[19] = rate(&|v: &str| v.trim_start().starts_with(|c: char| c.is_ascii_digit()));
    }
    if store.dimension() > 0 {
        let tokens: Vec<String> = embedding_values(column).into_iter().flat_map(name_tokens).collect();
        if let Some(mean) = store.mean_vector(tokens.iter().map(String::as_str)) {
            f[PROFILE_FEATURES..].copy_from_slice(&mean);
        }
    }
    debug_assert!(f.iter().all(|x| x.is_finite()));
    FeatureVector(f)
}

pub fn column_features(column: &Column, store: &EmbeddingStore) -> FeatureVector {
    extract_features(column, &profile_column(column), store)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExampleOrigin {
    SeedCorpus,
    FeedbackTable,
    DpbdGenerated,
    Background,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub features: FeatureVector,
    pub type_id: String,
    pub weight: f64,
    pub origin: ExampleOrigin,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub l2: f64,
    pub seed: u64,
    /// Permit labels with no examples (they only receive the L2 pull).
    #[serde(default)]
    pub allow_empty_labels: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { learning_rate: 0.1, epochs: 200, batch_size: 32, l2: 1e-4, seed: 7, allow_empty_labels: false }
    }
}

/// Row-major `labels × feature_dim` weights plus per-label bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierParams {
    pub labels: Vec<String>,
    pub feature_dim: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub train_config: TrainConfig,
}

impl ClassifierParams {
    pub fn zeros(labels: Vec<String>, feature_dim: usize) -> Self {
        let n = labels.len();
        ClassifierParams {
            labels,
            feature_dim,
            weights: vec![0.0; n * feature_dim],
            bias: vec![0.0; n],
            train_config: TrainConfig::default(),
        }
    }

    pub fn n_labels(&self) -> usize {
        self.labels.len()
    }

    pub fn row(&self, label: usize) -> &[f64] {
        &self.weights[label * self.feature_dim..(label + 1) * self.feature_dim]
    }

    pub fn label_index(&self, type_id: &str) -> Option<usize> {
        self.labels.binary_search_by(|l| l.as_str().cmp(type_id)).ok()
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n_labels())
            .map(|k| self.bias[k] + self.row(k).iter().zip(x).map(|(w, v)| w * v).sum::<f64>())
            .collect()
    }

    pub fn probabilities(&self, x: &[f64]) -> Result<Vec<f64>, ClassifierError> {
        if x.len() != self.feature_dim {
            return Err(ClassifierError::Dimension { expected: self.feature_dim, found: x.len() });
        }
        Ok(softmax(&self.logits(x)))
    }

    pub fn squared_norm(&self) -> f64 {
        self.weights.iter().map(|w| w * w).sum()
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Softmax probabilities as a classifier-stage prediction over all labels.
pub fn predict(features: &FeatureVector, params: &ClassifierParams) -> Result<StagePrediction, ClassifierError> {
    let probs = params.probabilities(features.as_slice())?;
    Ok(StagePrediction {
        stage: Stage::Classifier,
        scores: params.labels.iter().cloned().zip(probs).collect(),
    })
}

/// One weighted training row.
#[derive(Debug, Clone, Copy)]
pub struct Sample<'a> {
    pub x: &'a [f64],
    pub target: usize,
    pub weight: f64,
}

/// Gradient of [`loss_and_gradient`], laid out like the params.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Weighted mean cross-entropy plus `l2 / 2 * ||W||^2` (bias unpenalized),
/// and its analytic gradient.
pub fn loss_and_gradient(params: &ClassifierParams, batch: &[Sample<'_>], l2: f64) -> (f64, Gradient) {
    let (n_labels, dim) = (params.n_labels(), params.feature_dim);
    let mut gw = vec![0.0; n_labels * dim];
    let mut gb = vec![0.0; n_labels];
    let total_weight: f64 = batch.iter().map(|s| s.weight).sum();
    let mut loss = 0.0;
    if total_weight > 0.0 {
        for s in batch {
            let p = softmax(&params.logits(s.x));
            loss -= s.weight * p[s.target].max(f64::MIN_POSITIVE).ln();
            let scale = s.weight / total_weight;
            for k in 0..n_labels {
                let delta = (p[k] - f64::from(u8::from(k == s.target))) * scale;
                gb[k] += delta;
                if delta != 0.0 {
                    for (g, x) in gw[k * dim..(k + 1) * dim].iter_mut().zip(s.x) {
                        *g += delta * x;
                    }
                }
            }
        }
        loss /= total_weight;
    }
    loss += 0.5 * l2 * params.squared_norm();
    for (g, w) in gw.iter_mut().zip(&params.weights) {
        *g += l2 * w;
    }
    (loss, Gradient { weights: gw, bias: gb })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Full-data loss after each epoch.
    pub epoch_losses: Vec<f64>,
}

pub fn train(
    examples: &[LabeledExample],
    labels: &[String],
    config: &TrainConfig,
) -> Result<ClassifierParams, ClassifierError> {
    train_with_report(examples, labels, config).map(|(p, _)| p)
}

/// Seeded mini-batch gradient descent. Labels are sorted and deduplicated.
pub fn train_with_report(
    examples: &[LabeledExample],
    labels: &[String],
    config: &TrainConfig,
) -> Result<(ClassifierParams, TrainReport), ClassifierError> {
    if examples.is_empty() {
        return Err(ClassifierError::NoExamples);
    }
    if config.batch_size == 0 || !(config.learning_rate > 0.0) || config.l2 < 0.0 {
        return Err(ClassifierError::Config("batch_size, learning_rate must be positive and l2 non-negative".into()));
    }
    let labels: Vec<String> = labels.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
    if !labels.iter().any(|l| l == UNKNOWN) {
        return Err(ClassifierError::MissingUnknown);
    }
    let dim = examples[0].features.len();
    let mut params = ClassifierParams::zeros(labels, dim);
    params.train_config = config.clone();

    let mut counts = vec![0usize; params.n_labels()];
    let mut rows = Vec::with_capacity(examples.len());
    for e in examples {
        if e.features.len() != dim {
            return Err(ClassifierError::Dimension { expected: dim, found: e.features.len() });
        }
        if !(e.weight > 0.0 && e.weight <= 1.0) {
            return Err(ClassifierError::BadWeight(e.weight));
        }
        let target = params.label_index(&e.type_id).ok_or_else(|| ClassifierError::UnlistedLabel(e.type_id.clone()))?;
        counts[target] += 1;
        rows.push(Sample { x: e.features.as_slice(), target, weight: e.weight });
    }
    if !config.allow_empty_labels {
        if let Some(k) = counts.iter().position(|&c| c == 0) {
            return Err(ClassifierError::EmptyLabel(params.labels[k].clone()));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..rows.len()).collect();
    let mut losses = Vec::with_capacity(config.epochs);
    let mut batch = Vec::with_capacity(config.batch_size);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| rows[i]));
            let (_, g) = loss_and_gradient(&params, &batch, config.l2);
            for (w, gw) in params.weights.iter_mut().zip(&g.weights) {
                *w -= config.learning_rate * gw;
            }
            for (b, gb) in params.bias.iter_mut().zip(&g.bias) {
                *b -= config.learning_rate * gb;
            }
        }
        let (loss, _) = loss_and_gradient(&params, &rows, config.l2);
        if !loss.is_finite() || params.weights.iter().any(|w| !w.is_finite()) {
            return Err(ClassifierError::Divergence { epoch });
        }
        losses.push(loss);
    }
    Ok((params, TrainReport { epoch_losses: losses }))
}

/// Background (`unknown`) examples from a corpus.
///
/// Up to half come from columns annotated with a type outside the ontology
/// (or annotated `unknown`); the rest are chimera columns whose values are
/// drawn round-robin from three distinct source columns.
pub fn make_background_examples(
    corpus: &[AnnotatedTable],
    ontology: &Ontology,
    count: usize,
    seed: u64,
    store: &EmbeddingStore,
) -> Result<Vec<LabeledExample>, ClassifierError> {
    if count == 0 {
        return Ok(Vec::new());
    }
    let usable: Vec<(&AnnotatedTable, usize)> = corpus
        .iter()
        .flat_map(|t| t.table.columns.iter().enumerate().map(move |(i, c)| (t, i, c)))
        .filter(|(_, _, c)| c.primitive != Primitive::Empty)
        .map(|(t, i, _)| (t, i))
        .collect();
    if usable.is_empty() {
        return Err(ClassifierError::NoUsableColumns);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut outside: Vec<&Column> = usable
        .iter()
        .filter(|(t, i)| t.label(*i).is_some_and(|l| l == UNKNOWN || !ontology.contains(l)))
        .map(|(t, i)| &t.table.columns[*i])
        .collect();
    outside.shuffle(&mut rng);
    outside.truncate(count.div_ceil(2));

    let example = |c: &Column| LabeledExample {
        features: column_features(c, store),
        type_id: UNKNOWN.to_string(),
        weight: 1.0,
        origin: ExampleOrigin::Background,
    };
    let mut out: Vec<LabeledExample> = outside.iter().map(|c| example(c)).collect();
    let chimeras = count - out.len();
    if chimeras > 0 && usable.len() < 3 {
        return Err(ClassifierError::NoUsableColumns);
    }
    for _ in 0..chimeras {
        let c = chimera_column(&usable, &mut rng);
        out.push(example(&c));
    }
    Ok(out)
}

fn chimera_column(usable: &[(&AnnotatedTable, usize)], rng: &mut ChaCha8Rng) -> Column {
    let picks = index::sample(rng, usable.len(), 3).into_vec();
    let sources: Vec<Vec<&str>> = picks
        .iter()
        .map(|&p| {
            let (t, i) = usable[p];
            t.table.columns[i].non_missing().collect()
        })
        .collect();
    let rows = rng.random_range(20..=60);
    let values = (0..rows)
        .map(|r| {
            let src = &sources[r % sources.len()];
            src[rng.random_range(0..src.len())].to_string()
        })
        .collect();
    Column::new("", values)
}

/// Sorted label list for a training set: every example label plus `unknown`.
pub fn labels_of(examples: &[LabeledExample]) -> Vec<String> {
    let mut set: BTreeSet<String> = examples.iter().map(|e| e.type_id.clone()).collect();
    set.insert(UNKNOWN.to_string());
    set.into_iter().collect()
}

/// Per-label example counts.
pub fn label_counts(examples: &[LabeledExample]) -> BTreeMap<String, usize> {
    let mut m = BTreeMap::new();
    for e in examples {
        *m.entry(e.type_id.clone()).or_default() += 1;
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::table::Table;

    fn ex(x: &[f64], label: &str) -> LabeledExample {
        LabeledExample {
            features: FeatureVector(x.to_vec()),
            type_id: label.into(),
            weight: 1.0,
            origin: ExampleOrigin::SeedCorpus,
        }
    }

    fn strings(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn empty_column_features() {
        let c = Column::from_strs("x", &["", ""]);
        let store = EmbeddingStore::empty(4);
        let f = column_features(&c, &store);
        assert_eq!(f.len(), PROFILE_FEATURES + 4);
        assert_eq!(f.0[9], 0.0);
        assert!(f.0[PROFILE_FEATURES..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dominance_and_integer_features() {
        let store = EmbeddingStore::empty(0);
        let f = column_features(&Column::from_strs("x", &["a", "a", "b"]), &store);
        assert!((f.0[15] - 2.0 / 3.0).abs() < 1e-12);
        let f = column_features(&Column::from_strs("x", &["1", "2", "3"]), &store);
        assert_eq!(f.0[14], 1.0);
        assert_eq!(f.0[2], 1.0);
        assert_eq!(f.0[9], 1.0);
    }

    #[test]
    fn value_embedding_is_mean_of_known_tokens() {
        let store = crate::header::load_embeddings(b"paris 1 0\nlima 0 1\n").unwrap();
        let f = column_features(&Column::from_strs("x", &["Paris", "Lima", "Quito"]), &store);
        assert_eq!(&f.0[PROFILE_FEATURES..], &[0.5, 0.5]);
    }

    #[test]
    fn zero_params_predict_uniform() {
        let p = ClassifierParams::zeros(strings(&["a", "b", UNKNOWN]), 2);
        let s = predict(&FeatureVector(vec![3.0, -1.0]), &p).unwrap();
        for v in s.scores.values() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn hand_computed_two_class_softmax() {
        let mut p = ClassifierParams::zeros(strings(&["a", "b"]), 2);
        p.weights = vec![1.0, 0.0, 0.0, 0.0];
        let probs = p.probabilities(&[1.0, 0.0]).unwrap();
        let e = std::f64::consts::E;
        assert!((probs[0] - e / (e + 1.0)).abs() < 1e-15);
        assert!((probs[1] - 1.0 / (e + 1.0)).abs() < 1e-15);
        assert!((probs[0] - 0.7311).abs() < 1e-4);
    }

    #[test]
    fn dimension_mismatch() {
        let p = ClassifierParams::zeros(strings(&["a", UNKNOWN]), 3);
        assert_eq!(
            predict(&FeatureVector(vec![1.0]), &p).unwrap_err(),
            ClassifierError::Dimension { expected: 3, found: 1 }
        );
    }

    #[test]
    fn separable_singletons_fit() {
        let examples = vec![ex(&[1.0, 0.0], "a"), ex(&[0.0, 1.0], UNKNOWN)];
        let p = train(&examples, &strings(&["a", UNKNOWN]), &TrainConfig::default()).unwrap();
        for e in &examples {
            let s = predict(&e.features, &p).unwrap();
            assert_eq!(s.top().unwrap().0, e.type_id);
        }
    }

    #[test]
    fn training_is_bitwise_reproducible() {
        let examples: Vec<_> = (0..40)
            .map(|i| ex(&[(i % 7) as f64 / 7.0, (i % 3) as f64], if i % 2 == 0 { "a" } else { UNKNOWN }))
            .collect();
        let labels = strings(&["a", UNKNOWN]);
        let a = train(&examples, &labels, &TrainConfig::default()).unwrap();
        let b = train(&examples, &labels, &TrainConfig::default()).unwrap();
        assert_eq!(a, b);
        let bits = |p: &ClassifierParams| p.weights.iter().map(|w| w.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn training_errors() {
        let cfg = TrainConfig::default();
        assert_eq!(train(&[], &strings(&[UNKNOWN]), &cfg), Err(ClassifierError::NoExamples));
        assert_eq!(train(&[ex(&[1.0], "a")], &strings(&["a"]), &cfg), Err(ClassifierError::MissingUnknown));
        assert_eq!(
            train(&[ex(&[1.0], "a")], &strings(&["a", UNKNOWN]), &cfg),
            Err(ClassifierError::EmptyLabel(UNKNOWN.into()))
        );
        let relaxed = TrainConfig { allow_empty_labels: true, epochs: 2, ..TrainConfig::default() };
        assert!(train(&[ex(&[1.0], "a")], &strings(&["a", UNKNOWN]), &relaxed).is_ok());
        assert!(matches!(
            train(&[ex(&[1.0], "zzz")], &strings(&[UNKNOWN]), &cfg),
            Err(ClassifierError::UnlistedLabel(_))
        ));
        let mut bad = ex(&[1.0], UNKNOWN);
        bad.weight = 0.0;
        assert_eq!(train(&[bad], &strings(&[UNKNOWN]), &cfg), Err(ClassifierError::BadWeight(0.0)));
    }

    #[test]
    fn divergence_is_reported_with_epoch() {
        let examples = vec![ex(&[1e154, -1e154], "a"), ex(&[-1e154, 1e154], UNKNOWN)];
        let cfg = TrainConfig { learning_rate: 1e10, ..TrainConfig::default() };
        assert!(matches!(
            train(&examples, &strings(&["a", UNKNOWN]), &cfg),
            Err(ClassifierError::Divergence { epoch: 0 })
        ));
    }

    #[test]
    fn loss_decreases_over_epochs() {
        let examples: Vec<_> = (0..90)
            .map(|i| {
                let k = i % 3;
                let x = [k as f64 + 0.1 * ((i * 7) % 5) as f64, (2 - k) as f64 * 0.5, ((i * 3) % 4) as f64 * 0.1];
                ex(&x, ["a", "b", UNKNOWN][k])
            })
            .collect();
        let (_, report) = train_with_report(&examples, &labels_of(&examples), &TrainConfig::default()).unwrap();
        for w in report.epoch_losses.windows(2) {
            assert!(w[1] <= w[0] + 1e-3, "{} -> {}", w[0], w[1]);
        }
        assert!(report.epoch_losses.last().unwrap() < &report.epoch_losses[0]);
    }

    #[test]
    fn l2_shrinks_weights() {
        let examples = vec![ex(&[1.0, 0.2], "a"), ex(&[0.1, 1.0], UNKNOWN), ex(&[0.9, 0.0], "a")];
        let labels = strings(&["a", UNKNOWN]);
        let free = train(&examples, &labels, &TrainConfig { l2: 0.0, ..TrainConfig::default() }).unwrap();
        let reg = train(&examples, &labels, &TrainConfig { l2: 0.05, ..TrainConfig::default() }).unwrap();
        assert!(reg.squared_norm() < free.squared_norm());
    }

    #[test]
    fn background_examples() {
        let t = |id: &str, cols: Vec<Column>, labels: &[(usize, &str)]| {
            AnnotatedTable::new(
                Table::new(id, id, cols).unwrap(),
                labels.iter().map(|(i, l)| (*i, l.to_string())).collect(),
            )
        };
        let corpus = vec![
            t("a", vec![Column::from_strs("x", &["1", "2", "3"]), Column::from_strs("y", &["p", "q", "r"])], &[(0, "age"), (1, "planet")]),
            t("b", vec![Column::from_strs("z", &["10", "20", "30"])], &[(0, "age")]),
        ];
        let onto = crate::ontology::load_ontology(b"version\t1\nage\tage\t-\t-\n").unwrap();
        let store = EmbeddingStore::empty(0);
        assert!(make_background_examples(&corpus, &onto, 0, 1, &store).unwrap().is_empty());
        let a = make_background_examples(&corpus, &onto, 5, 1, &store).unwrap();
        let b = make_background_examples(&corpus, &onto, 5, 1, &store).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 5);
        assert!(a.iter().all(|e| e.type_id == UNKNOWN && e.origin == ExampleOrigin::Background));
        // The single out-of-ontology column (`planet`) comes first.
        assert_eq!(a[0].features, column_features(&corpus[0].table.columns[1], &store));
        assert!(matches!(make_background_examples(&[], &onto, 3, 1, &store), Err(ClassifierError::NoUsableColumns)));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn softmax_positive_and_normalized(z in prop::collection::vec(-50.0f64..50.0, 1..8)) {
                let p = softmax(&z);
                prop_assert!(p.iter().all(|&v| v > 0.0));
                prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }

            #[test]
            fn argmax_invariant_to_logit_shift(z in prop::collection::vec(-20.0f64..20.0, 2..6), c in -100.0f64..100.0) {
                let shifted: Vec<f64> = z.iter().map(|v| v + c).collect();
                let argmax = |p: &[f64]| p.iter().enumerate().fold(0, |b, (i, v)| if *v > p[b] { i } else { b });
                prop_assert_eq!(argmax(&softmax(&z)), argmax(&softmax(&shifted)));
            }

            #[test]
            fn features_are_row_permutation_invariant(
                values in prop::collection::vec(prop_oneof!["[a-c]{1,3}", (0i32..50).prop_map(|v| v.to_string()), Just(String::new())], 0..30),
                seed in any::<u64>(),
            ) {
                let store = crate::header::load_embeddings(b"a 1 0\nb 0 1\nc 1 1\n").unwrap();
                let mut shuffled = values.clone();
                shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
                let f1 = column_features(&Column::new("h", values), &store);
                let f2 = column_features(&Column::new("h", shuffled), &store);
                prop_assert_eq!(f1.0.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), f2.0.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
                prop_assert!(f1.0.iter().all(|v| v.is_finite()));
            }

            #[test]
            fn gradient_matches_central_differences(
                w in prop::collection::vec(-1.0f64..1.0, 12),
                b in prop::collection::vec(-1.0f64..1.0, 3),
                xs in prop::collection::vec(prop::collection::vec(-2.0f64..2.0, 4), 1..5),
                targets in prop::collection::vec(0usize..3, 5),
                l2 in 0.0f64..0.1,
            ) {
                let mut params = ClassifierParams::zeros(strings(&["a", "b", "c"]), 4);
                params.weights = w;
                params.bias = b;
                let batch: Vec<Sample<'_>> =
                    xs.iter().zip(&targets).map(|(x, &target)| Sample { x, target, weight: 1.0 }).collect();
                let (_, g) = loss_and_gradient(&params, &batch, l2);
                let eps = 1e-5;
                for (i, a) in g.weights.iter().chain(&g.bias).enumerate() {
                    let at = |d: f64| {
                        let mut p = params.clone();
                        match i.checked_sub(p.weights.len()) {
                            None => p.weights[i] += d,
                            Some(j) => p.bias[j] += d,
                        }
                        loss_and_gradient(&p, &batch, l2).0
                    };
                    let numeric = (at(eps) - at(-eps)) / (2.0 * eps);
                    let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                    prop_assert!(rel < 1e-4, "coord {}: analytic {} numeric {}", i, a, numeric);
                }
            }
        }
    }
}
