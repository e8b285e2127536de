//! Semantic type ontology: the label space shared by every pipeline stage.
//!
//! Ontologies are loaded from a flat tab-separated file:
//!
//! ```text
//! # comment
//! version	1
//! salary	Salary	-	wage,pay
//! city	City	place	town
//! ```
//!
//! The reserved [`UNKNOWN`] type is always present, has no synonyms and no
//! parent, and is never returned by name resolution.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Reserved id of the out-of-distribution / abstention type.
pub const UNKNOWN: &str = "unknown";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OntologyError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("duplicate type id `{0}`")]
    DuplicateId(String),
    #[error("type `{id}` refers to missing parent `{parent}`")]
    DanglingParent { id: String, parent: String },
    #[error("parent cycle through type `{0}`")]
    Cycle(String),
    #[error("invalid type: {0}")]
    Validation(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TypeSource {
    Builtin,
    User,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SemanticType {
    pub id: String,
    pub canonical_name: String,
    #[serde(default)]
    pub synonyms: Vec<String>,
    #[serde(default)]
    pub parent_id: Option<String>,
    pub source: TypeSource,
}

impl SemanticType {
    fn unknown() -> Self {
        SemanticType {
            id: UNKNOWN.to_string(),
            canonical_name: UNKNOWN.to_string(),
            synonyms: Vec::new(),
            parent_id: None,
            source: TypeSource::Builtin,
        }
    }

    /// Normalized canonical name followed by normalized synonyms.
    pub fn normalized_names(&self) -> impl Iterator<Item = String> + '_ {
        std::iter::once(&self.canonical_name)
            .chain(self.synonyms.iter())
            .map(|n| normalize(n))
            .filter(|n| !n.is_empty())
    }

    pub fn is_unknown(&self) -> bool {
        self.id == UNKNOWN
    }
}

/// Canonical form for header and type-name comparison.
///
/// Splits camelCase, maps `_`, `-`, `.` and whitespace runs to a single
/// space, lowercases and trims.
pub fn normalize(name: &str) -> String {
    let chars: Vec<char> = name.chars().collect();
    let mut out = String::with_capacity(name.len() + 4);
    let mut pending_space = false;
    for (i, &c) in chars.iter().enumerate() {
        if c == '_' || c == '-' || c == '.' || c.is_whitespace() {
            pending_space = true;
            continue;
        }
        if is_cased_upper(c) && i > 0 {
            let prev = chars[i - 1];
            let next_lower = chars.get(i + 1).is_some_and(|n| n.is_lowercase());
            if prev.is_lowercase() || prev.is_ascii_digit() || (is_cased_upper(prev) && next_lower)
            {
                pending_space = true;
            }
        }
        if pending_space && !out.is_empty() {
            out.push(' ');
        }
        pending_space = false;
        out.extend(c.to_lowercase());
    }
    out
}

/// Uppercase with a distinct lowercase form. Symbols such as `𝕊` count as
/// uppercase but never change case, so they must not trigger splits.
fn is_cased_upper(c: char) -> bool {
    c.is_uppercase() && !c.to_lowercase().eq(std::iter::once(c))
}

/// Whitespace tokens of the normalized name.
pub fn name_tokens(name: &str) -> Vec<String> {
    normalize(name).split(' ').filter(|t| !t.is_empty()).map(str::to_string).collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "OntologyRepr", into = "OntologyRepr")]
pub struct Ontology {
    types: BTreeMap<String, SemanticType>,
    version: u64,
    /// Normalized name -> type id. Canonical names win over synonyms, then
    /// lower ids win.
    names: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
struct OntologyRepr {
    version: u64,
    types: Vec<SemanticType>,
}

impl TryFrom<OntologyRepr> for Ontology {
    type Error = OntologyError;

    fn try_from(repr: OntologyRepr) -> Result<Self, Self::Error> {
        let mut o = Ontology::from_types(repr.types)?;
        o.version = repr.version;
        Ok(o)
    }
}

impl From<Ontology> for OntologyRepr {
    fn from(o: Ontology) -> Self {
        OntologyRepr { version: o.version, types: o.types.into_values().collect() }
    }
}

impl Default for Ontology {
    fn default() -> Self {
        Ontology::from_types(Vec::new()).expect("empty ontology is valid")
    }
}

impl Ontology {
    /// Builds a validated ontology at version 1, injecting `unknown` if absent.
    pub fn from_types(types: Vec<SemanticType>) -> Result<Self, OntologyError> {
        let mut map = BTreeMap::new();
        for t in types {
            if t.id.trim().is_empty() {
                return Err(OntologyError::Validation("empty type id".into()));
            }
            if normalize(&t.canonical_name).is_empty() {
                return Err(OntologyError::Validation(format!(
                    "type `{}` has an empty canonical name",
                    t.id
                )));
            }
            if t.is_unknown() && (!t.synonyms.is_empty() || t.parent_id.is_some()) {
                return Err(OntologyError::Validation(
                    "reserved type `unknown` cannot have synonyms or a parent".into(),
                ));
            }
            if map.contains_key(&t.id) {
                return Err(OntologyError::DuplicateId(t.id));
            }
            map.insert(t.id.clone(), t);
        }
        map.entry(UNKNOWN.to_string()).or_insert_with(SemanticType::unknown);
        check_parents(&map)?;
        let mut o = Ontology { types: map, version: 1, names: BTreeMap::new() };
        o.rebuild_names();
        Ok(o)
    }

    fn rebuild_names(&mut self) {
        let mut names = BTreeMap::new();
        for t in self.types.values().filter(|t| !t.is_unknown()) {
            let n = normalize(&t.canonical_name);
            names.entry(n).or_insert_with(|| t.id.clone());
        }
        for t in self.types.values().filter(|t| !t.is_unknown()) {
            for s in &t.synonyms {
                let n = normalize(s);
                if !n.is_empty() {
                    names.entry(n).or_insert_with(|| t.id.clone());
                }
            }
        }
        self.names = names;
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn len(&self) -> usize {
        self.types.len()
    }

    pub fn is_empty(&self) -> bool {
        self.types.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&SemanticType> {
        self.types.get(id)
    }

    pub fn contains(&self, id: &str) -> bool {
        self.types.contains_key(id)
    }

    /// Types in id order.
    pub fn types(&self) -> impl Iterator<Item = &SemanticType> + Clone {
        self.types.values()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.types.keys().map(String::as_str)
    }

    /// Finds the type whose canonical name or synonym equals `name` after
    /// normalization. Never resolves to `unknown`.
    pub fn resolve_name(&self, name: &str) -> Option<&SemanticType> {
        let n = normalize(name);
        self.names.get(&n).and_then(|id| self.types.get(id))
    }

    /// Returns the existing type for `name`, or registers a new user type.
    ///
    /// The version is bumped only when a type is created.
    pub fn add_user_type(&mut self, name: &str) -> Result<SemanticType, OntologyError> {
        let normalized = normalize(name);
        if normalized.is_empty() {
            return Err(OntologyError::Validation(format!(
                "type name `{name}` is empty after normalization"
            )));
        }
        if normalized == UNKNOWN {
            return Err(OntologyError::Validation("`unknown` is a reserved type".into()));
        }
        if let Some(t) = self.resolve_name(&normalized) {
            return Ok(t.clone());
        }
        let base = normalized.replace(' ', "_");
        let mut id = base.clone();
        let mut suffix = 2;
        while self.types.contains_key(&id) {
            id = format!("{base}_{suffix}");
            suffix += 1;
        }
        let t = SemanticType {
            id: id.clone(),
            canonical_name: name.trim().to_string(),
            synonyms: Vec::new(),
            parent_id: None,
            source: TypeSource::User,
        };
        self.types.insert(id, t.clone());
        self.names.entry(normalized).or_insert_with(|| t.id.clone());
        self.version += 1;
        Ok(t)
    }

    /// User-created types, in id order.
    pub fn user_types(&self) -> impl Iterator<Item = &SemanticType> {
        self.types.values().filter(|t| t.source == TypeSource::User)
    }
}

fn check_parents(types: &BTreeMap<String, SemanticType>) -> Result<(), OntologyError> {
    for t in types.values() {
        if let Some(p) = &t.parent_id {
            if !types.contains_key(p) {
                return Err(OntologyError::DanglingParent { id: t.id.clone(), parent: p.clone() });
            }
        }
    }
    for t in types.values() {
        let mut seen = BTreeSet::new();
        let mut cur = Some(t);
        while let Some(c) = cur {
            if !seen.insert(c.id.as_str()) {
                return Err(OntologyError::Cycle(t.id.clone()));
            }
            cur = c.parent_id.as_ref().and_then(|p| types.get(p));
        }
    }
    Ok(())
}

/// Parses the ontology file format. The loaded ontology is at version 1;
/// the file's own `version` header is returned alongside it.
pub fn load_ontology(bytes: &[u8]) -> Result<Ontology, OntologyError> {
    parse_ontology(bytes).map(|(o, _)| o)
}

pub fn parse_ontology(bytes: &[u8]) -> Result<(Ontology, u64), OntologyError> {
    let text = std::str::from_utf8(bytes).map_err(|e| OntologyError::Parse {
        line: line_of_offset(bytes, e.valid_up_to()),
        message: "invalid UTF-8".into(),
    })?;
    let mut file_version = None;
    let mut types = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim_end_matches('\r');
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if file_version.is_none() {
            match fields.as_slice() {
                ["version", v] => {
                    let v = v.trim().parse::<u64>().map_err(|_| OntologyError::Parse {
                        line: line_no,
                        message: format!("bad version number `{v}`"),
                    })?;
                    file_version = Some(v);
                    continue;
                }
                _ => {
                    return Err(OntologyError::Parse {
                        line: line_no,
                        message: "expected `version<TAB><int>` header".into(),
                    })
                }
            }
        }
        if fields.len() != 4 {
            return Err(OntologyError::Parse {
                line: line_no,
                message: format!("expected 4 tab-separated fields, found {}", fields.len()),
            });
        }
        let id = fields[0].trim();
        if id.is_empty() {
            return Err(OntologyError::Parse { line: line_no, message: "empty type id".into() });
        }
        let parent = match fields[2].trim() {
            "-" | "" => None,
            p => Some(p.to_string()),
        };
        let synonyms = match fields[3].trim() {
            "-" | "" => Vec::new(),
            s => s.split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect(),
        };
        types.push(SemanticType {
            id: id.to_string(),
            canonical_name: fields[1].trim().to_string(),
            synonyms,
            parent_id: parent,
            source: TypeSource::Builtin,
        });
    }
    let file_version = file_version.ok_or(OntologyError::Parse {
        line: 1,
        message: "missing `version<TAB><int>` header".into(),
    })?;
    Ok((Ontology::from_types(types)?, file_version))
}

fn line_of_offset(bytes: &[u8], offset: usize) -> usize {
    bytes[..offset].iter().filter(|&&b| b == b'\n').count() + 1
}
