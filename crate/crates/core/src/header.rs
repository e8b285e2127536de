//! Stage 1: header matching.
//!
//! Headers are compared to type names syntactically (exact match after
//! normalization, else normalized Levenshtein similarity) and semantically
//! (cosine similarity of mean word vectors). An exact match is final and
//! scores 1.0.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ontology::{name_tokens, normalize, Ontology, SemanticType};
use crate::prediction::{Stage, StagePrediction};

pub const DEFAULT_FUZZY_FLOOR: f64 = 0.6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EmbeddingError {
    #[error("embedding file is empty")]
    Empty,
    #[error("line {line}: token `{token}` has dimension {found}, expected {expected}")]
    Dimension { line: usize, token: String, expected: usize, found: usize },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

/// Word vectors keyed by lowercase token.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingStore {
    dimension: usize,
    vectors: HashMap<String, Vec<f64>>,
}

impl EmbeddingStore {
    /// An empty store of the given dimension; every lookup misses.
    pub fn empty(dimension: usize) -> Self {
        EmbeddingStore { dimension, vectors: HashMap::new() }
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn get(&self, token: &str) -> Option<&[f64]> {
        self.vectors.get(token).map(Vec::as_slice)
    }

    /// Mean of the known token vectors, or `None` when no token is known.
    pub fn mean_vector<'a>(&self, tokens: impl IntoIterator<Item = &'a str>) -> Option<Vec<f64>> {
        let mut acc = vec![0.0; self.dimension];
        let mut n = 0usize;
        for t in tokens {
            if let Some(v) = self.get(t) {
                for (a, x) in acc.iter_mut().zip(v) {
                    *a += x;
                }
                n += 1;
            }
        }
        (n > 0).then(|| {
            acc.iter_mut().for_each(|a| *a /= n as f64);
            acc
        })
    }
}

/// Parses whitespace-separated word vectors, with an optional
/// `<vocab> <dim>` first line. Tokens are lowercased; the first occurrence
/// of a token wins.
pub fn load_embeddings(bytes: &[u8]) -> Result<EmbeddingStore, EmbeddingError> {
    let text = String::from_utf8_lossy(bytes);
    let lines: Vec<(usize, Vec<&str>)> = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.split_whitespace().collect::<Vec<_>>()))
        .filter(|(_, f)| !f.is_empty())
        .collect();
    let mut rows = lines.as_slice();
    let mut declared: Option<(usize, usize)> = None;
    if let Some((_, first)) = rows.first() {
        if let [a, b] = first.as_slice() {
            if let (Ok(vocab), Ok(dim)) = (a.parse::<usize>(), b.parse::<usize>()) {
                let next_fits = rows.get(1).is_none_or(|(_, f)| f.len() == dim + 1);
                if dim > 0 && next_fits {
                    declared = Some((vocab, dim));
                    rows = &rows[1..];
                }
            }
        }
    }
    let Some((_, first_row)) = rows.first() else {
        return Err(EmbeddingError::Empty);
    };
    let dimension = declared.map_or(first_row.len() - 1, |d| d.1);
    if dimension == 0 {
        return Err(EmbeddingError::Parse { line: rows[0].0, message: "vector has no components".into() });
    }
    let mut vectors = HashMap::with_capacity(rows.len());
    for (line, fields) in rows {
        let token = fields[0];
        if fields.len() - 1 != dimension {
            return Err(EmbeddingError::Dimension {
                line: *line,
                token: token.to_string(),
                expected: dimension,
                found: fields.len() - 1,
            });
        }
        let v = fields[1..]
            .iter()
            .map(|x| x.parse::<f64>().ok().filter(|v| v.is_finite()))
            .collect::<Option<Vec<f64>>>()
            .ok_or_else(|| EmbeddingError::Parse {
                line: *line,
                message: format!("non-numeric component for token `{token}`"),
            })?;
        vectors.entry(token.to_lowercase()).or_insert(v);
    }
    if let Some((vocab, _)) = declared {
        if vocab != rows.len() {
            return Err(EmbeddingError::Parse {
                line: 1,
                message: format!("header declares {vocab} vectors, found {}", rows.len()),
            });
        }
    }
    Ok(EmbeddingStore { dimension, vectors })
}

/// Character-level edit distance.
pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// `1 - dist / max(|a|, |b|)` on already-normalized strings.
pub fn similarity(a: &str, b: &str) -> f64 {
    let longest = a.chars().count().max(b.chars().count());
    if longest == 0 {
        return 1.0;
    }
    1.0 - levenshtein(a, b) as f64 / longest as f64
}

pub fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    (na > 0.0 && nb > 0.0).then(|| dot / (na * nb))
}

fn candidates<'a>(types: impl Iterator<Item = &'a SemanticType>) -> impl Iterator<Item = &'a SemanticType> {
    types.filter(|t| !t.is_unknown())
}

/// The types whose canonical name or synonym equals the normalized header.
fn exact_matches<'a>(
    header: &str,
    types: impl Iterator<Item = &'a SemanticType>,
) -> Vec<&'a SemanticType> {
    candidates(types).filter(|t| t.normalized_names().any(|n| n == header)).collect()
}

/// Syntactic header match against `types` (normally all ontology types).
pub fn syntactic_match_types<'a>(
    header: &str,
    types: impl Iterator<Item = &'a SemanticType> + Clone,
    fuzzy_floor: f64,
) -> StagePrediction {
    let mut out = StagePrediction::empty(Stage::Header);
    let h = normalize(header);
    if h.is_empty() {
        return out;
    }
    let exact = exact_matches(&h, types.clone());
    if !exact.is_empty() {
        for t in exact {
            out.scores.insert(t.id.clone(), 1.0);
        }
        return out;
    }
    for t in candidates(types) {
        let best = t.normalized_names().map(|n| similarity(&h, &n)).fold(0.0, f64::max);
        if best >= fuzzy_floor && best > 0.0 {
            out.scores.insert(t.id.clone(), best.clamp(0.0, 1.0));
        }
    }
    out
}

pub fn syntactic_match(header: &str, ontology: &Ontology, fuzzy_floor: f64) -> StagePrediction {
    syntactic_match_types(header, ontology.types(), fuzzy_floor)
}

/// Cosine similarity between the header and each canonical type name,
/// clamped at zero. Zero scores are not emitted.
pub fn semantic_match_types<'a>(
    header: &str,
    types: impl Iterator<Item = &'a SemanticType>,
    store: &EmbeddingStore,
) -> StagePrediction {
    let mut out = StagePrediction::empty(Stage::Header);
    let tokens = name_tokens(header);
    let Some(hv) = store.mean_vector(tokens.iter().map(String::as_str)) else {
        return out;
    };
    for t in candidates(types) {
        let tt = name_tokens(&t.canonical_name);
        let Some(tv) = store.mean_vector(tt.iter().map(String::as_str)) else {
            continue;
        };
        if let Some(c) = cosine(&hv, &tv) {
            let s = c.clamp(0.0, 1.0);
            if s > 0.0 {
                out.scores.insert(t.id.clone(), s);
            }
        }
    }
    out
}

pub fn semantic_match(header: &str, ontology: &Ontology, store: &EmbeddingStore) -> StagePrediction {
    semantic_match_types(header, ontology.types(), store)
}

/// Stage-1 prediction: per type, the max of syntactic and semantic scores.
/// An exact syntactic match skips semantic matching entirely.
pub fn match_header_types<'a>(
    header: &str,
    types: impl Iterator<Item = &'a SemanticType> + Clone,
    store: &EmbeddingStore,
    fuzzy_floor: f64,
) -> StagePrediction {
    let syntactic = syntactic_match_types(header, types.clone(), fuzzy_floor);
    if syntactic.scores.values().any(|&s| s >= 1.0) {
        return syntactic;
    }
    let semantic = semantic_match_types(header, types, store);
    let mut out = syntactic;
    for (id, s) in semantic.scores {
        let e = out.scores.entry(id).or_insert(0.0);
        *e = e.max(s);
    }
    out
}

pub fn match_header(
    header: &str,
    ontology: &Ontology,
    store: &EmbeddingStore,
    fuzzy_floor: f64,
) -> StagePrediction {
    match_header_types(header, ontology.types(), store, fuzzy_floor)
}
