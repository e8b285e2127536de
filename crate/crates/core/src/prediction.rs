//! Per-stage confidence vectors.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Header,
    Lookup,
    Classifier,
}

impl Stage {
    /// Execution order: cheapest first.
    pub const ORDER: [Stage; 3] = [Stage::Header, Stage::Lookup, Stage::Classifier];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Header => "header",
            Stage::Lookup => "lookup",
            Stage::Classifier => "classifier",
        }
    }
}

/// Confidences in `[0, 1]` keyed by type id. May be empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StagePrediction {
    pub stage: Stage,
    pub scores: BTreeMap<String, f64>,
}

impl StagePrediction {
    pub fn empty(stage: Stage) -> Self {
        StagePrediction { stage, scores: BTreeMap::new() }
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn get(&self, type_id: &str) -> f64 {
        self.scores.get(type_id).copied().unwrap_or(0.0)
    }

    /// Highest-scoring type, ties broken by type id.
    pub fn top(&self) -> Option<(&str, f64)> {
        self.scores
            .iter()
            .fold(None, |best: Option<(&str, f64)>, (k, &v)| match best {
                Some((_, bv)) if bv >= v => best,
                _ => Some((k.as_str(), v)),
            })
    }
}
