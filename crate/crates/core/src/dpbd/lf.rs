//! Labeling functions: one-sided weak rules inferred from a demonstrated
//! column. Each votes `Match` or `Abstain` for a single target type.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::classifier::{extract_features, ExampleOrigin, LabeledExample};
use crate::corpus::AnnotatedTable;
use crate::header::EmbeddingStore;
use crate::ontology::{name_tokens, UNKNOWN};
use crate::table::{parse_number, profile_column, Column, ColumnProfile};

/// Fraction of non-missing values that must fall inside a numeric range.
pub const RANGE_COVERAGE: f64 = 0.8;
/// Minimum header-token Jaccard overlap.
pub const HEADER_JACCARD: f64 = 0.5;
pub const DEFAULT_VALUE_OVERLAP: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Left,
    Right,
    Any,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LfBody {
    NumericRange { lo: f64, hi: f64 },
    ValueSet { values: BTreeSet<String>, min_overlap_fraction: f64 },
    UniqueRatioBand { lo: f64, hi: f64 },
    HeaderToken { tokens: BTreeSet<String> },
    CoOccurrence { neighbor_type_id: String, direction: Direction },
}

impl LfBody {
    /// Value-level bodies can be tested on a single value.
    pub fn is_value_level(&self) -> bool {
        matches!(self, LfBody::NumericRange { .. } | LfBody::ValueSet { .. })
    }

    pub fn kind(&self) -> &'static str {
        match self {
            LfBody::NumericRange { .. } => "numeric_range",
            LfBody::ValueSet { .. } => "value_set",
            LfBody::UniqueRatioBand { .. } => "unique_ratio_band",
            LfBody::HeaderToken { .. } => "header_token",
            LfBody::CoOccurrence { .. } => "co_occurrence",
        }
    }

    pub fn is_valid(&self) -> bool {
        match self {
            LfBody::NumericRange { lo, hi } | LfBody::UniqueRatioBand { lo, hi } => {
                lo.is_finite() && hi.is_finite() && lo <= hi
            }
            LfBody::ValueSet { values, min_overlap_fraction } => {
                !values.is_empty() && *min_overlap_fraction > 0.0 && *min_overlap_fraction <= 1.0
            }
            LfBody::HeaderToken { tokens } => !tokens.is_empty(),
            LfBody::CoOccurrence { neighbor_type_id, .. } => !neighbor_type_id.is_empty(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelingFunction {
    pub lf_id: String,
    pub type_id: String,
    pub body: LfBody,
    /// The feedback event this LF was inferred from.
    pub provenance: String,
}

impl LabelingFunction {
    pub fn new(lf_id: impl Into<String>, type_id: impl Into<String>, body: LfBody, provenance: impl Into<String>) -> Self {
        LabelingFunction { lf_id: lf_id.into(), type_id: type_id.into(), body, provenance: provenance.into() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LfVote {
    Match,
    Abstain,
}

/// Where a column sits: its header and the confident types of its
/// immediate neighbors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct LfContext<'a> {
    pub header: &'a str,
    pub left_type: Option<&'a str>,
    pub right_type: Option<&'a str>,
}

impl<'a> LfContext<'a> {
    pub fn header_only(header: &'a str) -> Self {
        LfContext { header, left_type: None, right_type: None }
    }

    /// Context for column `index` of an annotated table, using the
    /// annotations of its neighbors (`unknown` does not count).
    pub fn from_annotations(table: &'a AnnotatedTable, index: usize) -> Self {
        let typed = |i: usize| table.label(i).filter(|l| *l != UNKNOWN);
        LfContext {
            header: &table.table.headers[index],
            left_type: index.checked_sub(1).and_then(typed),
            right_type: typed(index + 1),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LfRegistry {
    lfs: BTreeMap<String, LabelingFunction>,
}

impl LfRegistry {
    /// Inserts or replaces by `lf_id`.
    pub fn insert(&mut self, lf: LabelingFunction) {
        self.lfs.insert(lf.lf_id.clone(), lf);
    }

    pub fn get(&self, lf_id: &str) -> Option<&LabelingFunction> {
        self.lfs.get(lf_id)
    }

    pub fn remove(&mut self, lf_id: &str) -> Option<LabelingFunction> {
        self.lfs.remove(lf_id)
    }

    pub fn iter(&self) -> impl Iterator<Item = &LabelingFunction> {
        self.lfs.values()
    }

    pub fn for_type<'s>(&'s self, type_id: &'s str) -> impl Iterator<Item = &'s LabelingFunction> + 's {
        self.lfs.values().filter(move |lf| lf.type_id == type_id)
    }

    pub fn len(&self) -> usize {
        self.lfs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lfs.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InferParams {
    /// Width of the mean ± alpha·std band, in standard deviations.
    pub alpha: f64,
}

impl Default for InferParams {
    fn default() -> Self {
        InferParams { alpha: 1.0 }
    }
}

/// Infers LFs for `asserted_type` from a demonstrated column. Ids are
/// `<event_id>/<kind>[-n]`.
pub fn infer_labeling_functions(
    profile: &ColumnProfile,
    context: &LfContext<'_>,
    asserted_type: &str,
    event_id: &str,
    params: &InferParams,
) -> Vec<LabelingFunction> {
    let mut bodies = Vec::new();
    if profile.n_present() > 0 {
        if let Some(ns) = &profile.numeric_stats {
            let (lo, hi) = (ns.mean - params.alpha * ns.std, ns.mean + params.alpha * ns.std);
            bodies.push(LfBody::NumericRange { lo, hi });
            bodies.push(LfBody::NumericRange { lo: ns.min, hi: ns.max });
        } else {
            let values: BTreeSet<String> = profile.top_values.iter().map(|(v, _)| v.clone()).collect();
            bodies.push(LfBody::ValueSet { values, min_overlap_fraction: DEFAULT_VALUE_OVERLAP });
            let r = profile.unique_ratio();
            bodies.push(LfBody::UniqueRatioBand { lo: 0.5 * r, hi: (1.5 * r).min(1.0) });
        }
    }
    let tokens: BTreeSet<String> = name_tokens(context.header).into_iter().collect();
    if !tokens.is_empty() {
        bodies.push(LfBody::HeaderToken { tokens });
    }
    for (neighbor, direction) in [(context.left_type, Direction::Left), (context.right_type, Direction::Right)] {
        if let Some(t) = neighbor.filter(|t| *t != UNKNOWN) {
            bodies.push(LfBody::CoOccurrence { neighbor_type_id: t.to_string(), direction });
        }
    }

    let mut seen: BTreeMap<&'static str, usize> = BTreeMap::new();
    bodies
        .into_iter()
        .filter(LfBody::is_valid)
        .map(|body| {
            let n = seen.entry(body.kind()).or_default();
            *n += 1;
            let id = if *n == 1 { format!("{event_id}/{}", body.kind()) } else { format!("{event_id}/{}-{n}", body.kind()) };
            LabelingFunction::new(id, asserted_type, body, event_id)
        })
        .collect()
}

fn vote(b: bool) -> LfVote {
    if b {
        LfVote::Match
    } else {
        LfVote::Abstain
    }
}

/// Pure, one-sided evaluation of an LF on a column.
pub fn evaluate_lf(lf: &LabelingFunction, column: &Column, profile: &ColumnProfile, context: &LfContext<'_>) -> LfVote {
    match &lf.body {
        LfBody::NumericRange { lo, hi } => {
            if profile.numeric_stats.is_none() {
                return LfVote::Abstain;
            }
            let (mut n, mut inside) = (0usize, 0usize);
            for v in column.non_missing() {
                n += 1;
                if parse_number(v).is_some_and(|x| *lo <= x && x <= *hi) {
                    inside += 1;
                }
            }
            vote(n > 0 && inside as f64 >= RANGE_COVERAGE * n as f64)
        }
        LfBody::ValueSet { values, min_overlap_fraction } => {
            let (mut n, mut hit) = (0usize, 0usize);
            for v in column.non_missing() {
                n += 1;
                if values.contains(v) {
                    hit += 1;
                }
            }
            vote(n > 0 && hit as f64 >= min_overlap_fraction * n as f64)
        }
        LfBody::UniqueRatioBand { lo, hi } => {
            let r = profile.unique_ratio();
            vote(profile.n_present() > 0 && *lo <= r && r <= *hi)
        }
        LfBody::HeaderToken { tokens } => {
            let header: BTreeSet<String> = name_tokens(context.header).into_iter().collect();
            let inter = header.intersection(tokens).count();
            let union = header.union(tokens).count();
            vote(union > 0 && inter as f64 >= HEADER_JACCARD * union as f64)
        }
        LfBody::CoOccurrence { neighbor_type_id, direction } => {
            let at = |t: Option<&str>| t == Some(neighbor_type_id.as_str());
            vote(match direction {
                Direction::Left => at(context.left_type),
                Direction::Right => at(context.right_type),
                Direction::Any => at(context.left_type) || at(context.right_type),
            })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenerateParams {
    /// Quorum: how many LFs must match a column.
    pub min_votes: usize,
    pub cap: usize,
    pub weight: f64,
}

impl Default for GenerateParams {
    fn default() -> Self {
        GenerateParams { min_votes: 2, cap: 500, weight: 0.5 }
    }
}

/// `(table index, column index)` of every corpus column reaching the quorum,
/// in scan order, at most `cap`.
pub fn select_training_columns(
    corpus: &[AnnotatedTable],
    lfs: &[LabelingFunction],
    params: &GenerateParams,
) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    if lfs.is_empty() || params.cap == 0 {
        return out;
    }
    let quorum = params.min_votes.max(1);
    'scan: for (ti, t) in corpus.iter().enumerate() {
        for (ci, column) in t.table.columns.iter().enumerate() {
            let profile = profile_column(column);
            let ctx = LfContext::from_annotations(t, ci);
            let votes = lfs.iter().filter(|lf| evaluate_lf(lf, column, &profile, &ctx) == LfVote::Match).count();
            if votes >= quorum {
                out.push((ti, ci));
                if out.len() == params.cap {
                    break 'scan;
                }
            }
        }
    }
    out
}

/// Weakly labeled examples for the (single) target type of `lfs`.
pub fn generate_training_data(
    corpus: &[AnnotatedTable],
    lfs: &[LabelingFunction],
    params: &GenerateParams,
    store: &EmbeddingStore,
) -> Vec<LabeledExample> {
    let Some(first) = lfs.first() else {
        return Vec::new();
    };
    debug_assert!(lfs.iter().all(|lf| lf.type_id == first.type_id), "LFs must share one target type");
    select_training_columns(corpus, lfs, params)
        .into_iter()
        .map(|(ti, ci)| {
            let column = &corpus[ti].table.columns[ci];
            LabeledExample {
                features: extract_features(column, &profile_column(column), store),
                type_id: first.type_id.clone(),
                weight: params.weight,
                origin: ExampleOrigin::DpbdGenerated,
            }
        })
        .collect()
}
