//! Stage 2: value lookup.
//!
//! A sample of column values is matched against regexes, dictionaries
//! (knowledge-base stand-in) and labeling functions. A type's confidence is
//! the fraction of sampled values matched by any rule targeting that type.

use std::collections::{BTreeMap, BTreeSet};

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dpbd::lf::{evaluate_lf, LfBody, LfContext, LfRegistry, LfVote};
use crate::ontology::Ontology;
use crate::prediction::{Stage, StagePrediction};
use crate::table::{parse_number, Column, ColumnProfile};

pub const DEFAULT_SAMPLE_CAP: usize = 100;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LookupError {
    #[error("rule `{0}` already registered")]
    Conflict(String),
    #[error("rule `{0}` not found")]
    NotFound(String),
    #[error("invalid regex at position {position}: {message}")]
    InvalidRegex { position: usize, message: String },
    #[error("rule `{rule}` targets unknown type `{type_id}`")]
    UnknownType { rule: String, type_id: String },
    #[error("rule `{0}` has an empty dictionary")]
    EmptyDictionary(String),
    #[error("rule `{rule}` references unknown labeling function `{lf_id}`")]
    UnknownLf { rule: String, lf_id: String },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RuleOrigin {
    Builtin,
    Kb,
    User,
    DpbdGlobal,
    DpbdLocal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RuleBody {
    Regex { pattern: String },
    Dictionary { values: BTreeSet<String>, case_fold: bool },
    LabelingFunction { lf_id: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LookupRule {
    pub rule_id: String,
    pub type_id: String,
    pub body: RuleBody,
    pub origin: RuleOrigin,
}

impl LookupRule {
    pub fn regex(rule_id: &str, type_id: &str, pattern: &str, origin: RuleOrigin) -> Self {
        LookupRule {
            rule_id: rule_id.into(),
            type_id: type_id.into(),
            body: RuleBody::Regex { pattern: pattern.into() },
            origin,
        }
    }

    pub fn dictionary<I, S>(rule_id: &str, type_id: &str, values: I, case_fold: bool, origin: RuleOrigin) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        LookupRule {
            rule_id: rule_id.into(),
            type_id: type_id.into(),
            body: RuleBody::Dictionary { values: values.into_iter().map(Into::into).collect(), case_fold },
            origin,
        }
    }

    pub fn labeling_function(rule_id: &str, type_id: &str, lf_id: &str, origin: RuleOrigin) -> Self {
        LookupRule {
            rule_id: rule_id.into(),
            type_id: type_id.into(),
            body: RuleBody::LabelingFunction { lf_id: lf_id.into() },
            origin,
        }
    }
}

#[derive(Debug, Clone)]
enum Matcher {
    Regex(Regex),
    Dictionary { values: BTreeSet<String>, case_fold: bool },
    Lf(String),
}

#[derive(Debug, Clone)]
struct CompiledRule {
    rule: LookupRule,
    matcher: Matcher,
}

fn compile(rule: &LookupRule) -> Result<Matcher, LookupError> {
    match &rule.body {
        RuleBody::Regex { pattern } => {
            if let Err(e) = regex_syntax::ast::parse::Parser::new().parse(pattern) {
                return Err(LookupError::InvalidRegex {
                    position: e.span().start.offset,
                    message: e.kind().to_string(),
                });
            }
            Regex::new(pattern)
                .map(Matcher::Regex)
                .map_err(|e| LookupError::InvalidRegex { position: 0, message: e.to_string() })
        }
        RuleBody::Dictionary { values, case_fold } => {
            if values.is_empty() {
                return Err(LookupError::EmptyDictionary(rule.rule_id.clone()));
            }
            let values = if *case_fold {
                values.iter().map(|v| v.trim().to_lowercase()).collect()
            } else {
                values.iter().map(|v| v.trim().to_string()).collect()
            };
            Ok(Matcher::Dictionary { values, case_fold: *case_fold })
        }
        RuleBody::LabelingFunction { lf_id } => Ok(Matcher::Lf(lf_id.clone())),
    }
}

/// Lookup rules keyed by id. Serializes as the plain rule list; regexes are
/// recompiled on load.
#[derive(Debug, Clone, Default)]
pub struct RuleRegistry {
    rules: BTreeMap<String, CompiledRule>,
}

impl PartialEq for RuleRegistry {
    fn eq(&self, other: &Self) -> bool {
        self.rules.len() == other.rules.len()
            && self.rules.values().zip(other.rules.values()).all(|(a, b)| a.rule == b.rule)
    }
}

impl Serialize for RuleRegistry {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(self.rules.values().map(|r| &r.rule))
    }
}

impl<'de> Deserialize<'de> for RuleRegistry {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let rules = Vec::<LookupRule>::deserialize(d)?;
        let mut reg = RuleRegistry::default();
        for r in rules {
            reg.insert_unchecked(r).map_err(serde::de::Error::custom)?;
        }
        Ok(reg)
    }
}

impl RuleRegistry {
    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }

    pub fn get(&self, rule_id: &str) -> Option<&LookupRule> {
        self.rules.get(rule_id).map(|r| &r.rule)
    }

    pub fn rules(&self) -> impl Iterator<Item = &LookupRule> {
        self.rules.values().map(|r| &r.rule)
    }

    /// Validates against the ontology and registers the rule.
    pub fn register(&mut self, rule: LookupRule, ontology: &Ontology) -> Result<String, LookupError> {
        if !ontology.contains(&rule.type_id) {
            return Err(LookupError::UnknownType { rule: rule.rule_id, type_id: rule.type_id });
        }
        self.insert_unchecked(rule)
    }

    fn insert_unchecked(&mut self, rule: LookupRule) -> Result<String, LookupError> {
        if self.rules.contains_key(&rule.rule_id) {
            return Err(LookupError::Conflict(rule.rule_id));
        }
        let matcher = compile(&rule)?;
        let id = rule.rule_id.clone();
        self.rules.insert(id.clone(), CompiledRule { rule, matcher });
        Ok(id)
    }

    pub fn remove(&mut self, rule_id: &str) -> Result<LookupRule, LookupError> {
        self.rules
            .remove(rule_id)
            .map(|r| r.rule)
            .ok_or_else(|| LookupError::NotFound(rule_id.to_string()))
    }

    /// Every labeling-function reference must resolve in `lfs`.
    pub fn check_lf_refs(&self, lfs: &LfRegistry) -> Result<(), LookupError> {
        for r in self.rules.values() {
            if let Matcher::Lf(id) = &r.matcher {
                if lfs.get(id).is_none() {
                    return Err(LookupError::UnknownLf { rule: r.rule.rule_id.clone(), lf_id: id.clone() });
                }
            }
        }
        Ok(())
    }
}

/// Non-missing values sampled from a column.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValueSample {
    pub values: Vec<String>,
    pub seed: u64,
    pub source_size: usize,
}

/// 64-bit linear congruential generator (Knuth's MMIX constants).
#[derive(Debug, Clone)]
pub struct Lcg(u64);

impl Lcg {
    pub fn new(seed: u64) -> Self {
        Lcg(seed)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0 = self.0.wrapping_mul(6_364_136_223_846_793_005).wrapping_add(1_442_695_040_888_963_407);
        self.0
    }

    /// Uniform-ish integer in `0..bound`, from the high bits.
    pub fn below(&mut self, bound: usize) -> usize {
        ((self.next_u64() >> 32) % bound as u64) as usize
    }
}

/// Draws up to `cap` non-missing values without replacement.
///
/// Uses a partial Fisher-Yates shuffle of value indices driven by [`Lcg`];
/// the selected values are returned in their original column order.
pub fn sample_values(column: &Column, cap: usize, seed: u64) -> ValueSample {
    let present: Vec<&str> = column.non_missing().collect();
    let source_size = present.len();
    if source_size <= cap {
        return ValueSample { values: present.into_iter().map(String::from).collect(), seed, source_size };
    }
    let mut idx: Vec<usize> = (0..source_size).collect();
    let mut rng = Lcg::new(seed);
    for i in 0..cap {
        let j = i + rng.below(source_size - i);
        idx.swap(i, j);
    }
    let mut chosen = idx[..cap].to_vec();
    chosen.sort_unstable();
    ValueSample { values: chosen.into_iter().map(|i| present[i].to_string()).collect(), seed, source_size }
}

/// FNV-1a, used to derive stable sampling seeds from table ids.
pub fn stable_hash(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3))
}

/// Column-level inputs for labeling-function rules.
#[derive(Debug, Clone, Copy)]
pub struct ColumnContext<'a> {
    pub column: &'a Column,
    pub profile: &'a ColumnProfile,
    pub lf: LfContext<'a>,
}

fn value_matches(
    m: &Matcher,
    value: &str,
    lfs: &LfRegistry,
    column_votes: &BTreeMap<&str, bool>,
) -> bool {
    match m {
        Matcher::Regex(re) => re.is_match(value.trim()),
        Matcher::Dictionary { values, case_fold } => {
            let v = value.trim();
            if *case_fold {
                values.contains(&v.to_lowercase())
            } else {
                values.contains(v)
            }
        }
        Matcher::Lf(id) => match lfs.get(id).map(|lf| &lf.body) {
            Some(LfBody::NumericRange { lo, hi }) => {
                parse_number(value).is_some_and(|x| *lo <= x && x <= *hi)
            }
            Some(LfBody::ValueSet { values, .. }) => values.contains(value),
            Some(_) => column_votes.get(id.as_str()).copied().unwrap_or(false),
            None => false,
        },
    }
}

/// Scores each type by the fraction of sampled values matched by any of
/// its rules.
///
/// Value-level labeling functions (numeric ranges, value sets) are tested
/// per value; column-level ones (header tokens, unique-ratio bands,
/// co-occurrence) match every value when they vote on the column, and
/// abstain when no `context` is given.
pub fn apply_lookup<'r>(
    sample: &ValueSample,
    rules: impl IntoIterator<Item = &'r RuleRegistry>,
    lfs: &LfRegistry,
    context: Option<&ColumnContext<'_>>,
) -> Result<StagePrediction, LookupError> {
    let registries: Vec<&RuleRegistry> = rules.into_iter().collect();
    for r in &registries {
        r.check_lf_refs(lfs)?;
    }
    let mut out = StagePrediction::empty(Stage::Lookup);
    if sample.values.is_empty() {
        return Ok(out);
    }
    let mut column_votes: BTreeMap<&str, bool> = BTreeMap::new();
    if let Some(ctx) = context {
        for r in registries.iter().flat_map(|r| r.rules.values()) {
            if let Matcher::Lf(id) = &r.matcher {
                let lf = lfs.get(id).expect("checked above");
                if !lf.body.is_value_level() {
                    let vote = evaluate_lf(lf, ctx.column, ctx.profile, &ctx.lf) == LfVote::Match;
                    column_votes.insert(id.as_str(), vote);
                }
            }
        }
    }
    let mut by_type: BTreeMap<&str, Vec<&Matcher>> = BTreeMap::new();
    for r in registries.iter().flat_map(|r| r.rules.values()) {
        by_type.entry(r.rule.type_id.as_str()).or_default().push(&r.matcher);
    }
    let n = sample.values.len() as f64;
    for (type_id, matchers) in by_type {
        let k = sample
            .values
            .iter()
            .filter(|v| matchers.iter().any(|m| value_matches(m, v, lfs, &column_votes)))
            .count();
        if k > 0 {
            out.scores.insert(type_id.to_string(), k as f64 / n);
        }
    }
    Ok(out)
}

/// Parses a regex pack: `rule_id<TAB>type_id<TAB>pattern` per line, `#`
/// comments.
pub fn parse_regex_pack(text: &str, origin: RuleOrigin) -> Result<Vec<LookupRule>, LookupError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        let mut parts = line.splitn(3, '\t');
        match (parts.next(), parts.next(), parts.next()) {
            (Some(id), Some(ty), Some(pat)) if !id.trim().is_empty() && !ty.trim().is_empty() => {
                out.push(LookupRule::regex(id.trim(), ty.trim(), pat, origin));
            }
            _ => {
                return Err(LookupError::Parse {
                    line: i + 1,
                    message: "expected `rule_id<TAB>type_id<TAB>pattern`".into(),
                })
            }
        }
    }
    Ok(out)
}

/// Parses a dictionary file: one value per line, `#` comments.
pub fn parse_dictionary(text: &str) -> BTreeSet<String> {
    text.lines()
        .map(|l| l.trim())
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(String::from)
        .collect()
}

/// Regexes shipped with every global model. Type ids that are absent from
/// the ontology are skipped at registration.
pub const BUILTIN_REGEX_PACK: &str = include_str!("builtin_rules.tsv");

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dpbd::lf::LabelingFunction;
    use crate::ontology::load_ontology;
    use crate::table::profile_column;

    fn onto() -> Ontology {
        load_ontology(b"version\t1\ndate\tdate\t-\t-\ncity\tcity\t-\t-\nsalary\tsalary\t-\t-\n").unwrap()
    }

    fn sample(values: &[&str]) -> ValueSample {
        ValueSample { values: values.iter().map(|s| s.to_string()).collect(), seed: 0, source_size: values.len() }
    }

    #[test]
    fn small_columns_are_returned_whole() {
        let c = Column::from_strs("c", &["a", "", "b", "c"]);
        let s = sample_values(&c, 10, 1);
        assert_eq!(s.values, vec!["a", "b", "c"]);
        assert_eq!(s.source_size, 3);
    }

    #[test]
    fn sampling_is_deterministic() {
        let c = Column::new("c", (0..500).map(|i| i.to_string()).collect());
        assert_eq!(sample_values(&c, 10, 9), sample_values(&c, 10, 9));
        assert_ne!(sample_values(&c, 10, 9).values, sample_values(&c, 10, 10).values);
        let s = sample_values(&c, 10, 9);
        let distinct: BTreeSet<_> = s.values.iter().collect();
        assert_eq!(distinct.len(), 10);
    }

    #[test]
    fn all_missing_column_gives_empty_sample() {
        let c = Column::from_strs("c", &["", ""]);
        assert!(sample_values(&c, 5, 0).values.is_empty());
    }

    #[test]
    fn date_regex_full_match() {
        let mut reg = RuleRegistry::default();
        reg.register(LookupRule::regex("iso", "date", r"^\d{4}-\d{2}-\d{2}$", RuleOrigin::Builtin), &onto())
            .unwrap();
        let p = apply_lookup(&sample(&["2021-01-01", "2020-12-31"]), [&reg], &LfRegistry::default(), None).unwrap();
        assert_eq!(p.get("date"), 1.0);
        assert_eq!(p.scores.len(), 1);
    }

    #[test]
    fn dictionary_fraction() {
        let mut reg = RuleRegistry::default();
        reg.register(LookupRule::dictionary("cities", "city", ["Paris", "Lima"], true, RuleOrigin::Kb), &onto())
            .unwrap();
        let p = apply_lookup(&sample(&["paris", "x", "LIMA", "y"]), [&reg], &LfRegistry::default(), None).unwrap();
        assert_eq!(p.get("city"), 0.5);
    }

    #[test]
    fn union_over_rules_per_value() {
        let mut reg = RuleRegistry::default();
        let o = onto();
        reg.register(LookupRule::regex("r1", "salary", "^1", RuleOrigin::User), &o).unwrap();
        reg.register(LookupRule::regex("r2", "salary", "0$", RuleOrigin::User), &o).unwrap();
        // "10" matches both, "150" matches r1, "7" matches neither.
        let p = apply_lookup(&sample(&["10", "150", "7"]), [&reg], &LfRegistry::default(), None).unwrap();
        assert_eq!(p.get("salary"), 2.0 / 3.0);
    }

    #[test]
    fn registration_errors() {
        let o = onto();
        let mut reg = RuleRegistry::default();
        reg.register(LookupRule::regex("iso", "date", r"^\d{4}-\d{2}-\d{2}$", RuleOrigin::Builtin), &o).unwrap();
        assert_eq!(
            reg.register(LookupRule::regex("iso", "date", "x", RuleOrigin::Builtin), &o),
            Err(LookupError::Conflict("iso".into()))
        );
        assert_eq!(reg.remove("nope"), Err(LookupError::NotFound("nope".into())));
        let err = reg.register(LookupRule::regex("bad", "date", "ab(c", RuleOrigin::User), &o).unwrap_err();
        assert!(matches!(err, LookupError::InvalidRegex { position: 2, .. }), "{err:?}");
        let err = reg.register(LookupRule::regex("x", "planet", "x", RuleOrigin::User), &o).unwrap_err();
        assert!(matches!(err, LookupError::UnknownType { .. }));
        let empty: [&str; 0] = [];
        let err = reg.register(LookupRule::dictionary("d", "city", empty, true, RuleOrigin::Kb), &o).unwrap_err();
        assert!(matches!(err, LookupError::EmptyDictionary(_)));
        assert!(reg.remove("iso").is_ok());
        assert!(reg.is_empty());
    }

    #[test]
    fn dangling_lf_reference_is_config_error() {
        let mut reg = RuleRegistry::default();
        reg.register(LookupRule::labeling_function("l", "salary", "lf-x", RuleOrigin::DpbdLocal), &onto())
            .unwrap();
        let err = apply_lookup(&sample(&["1"]), [&reg], &LfRegistry::default(), None).unwrap_err();
        assert!(matches!(err, LookupError::UnknownLf { .. }));
    }

    #[test]
    fn lf_rules_value_and_column_level() {
        let mut lfs = LfRegistry::default();
        lfs.insert(LabelingFunction::new("range", "salary", LfBody::NumericRange { lo: 100.0, hi: 200.0 }, "e1"));
        lfs.insert(LabelingFunction::new(
            "hdr",
            "salary",
            LfBody::HeaderToken { tokens: ["income".to_string()].into() },
            "e1",
        ));
        let mut reg = RuleRegistry::default();
        reg.register(LookupRule::labeling_function("r-range", "salary", "range", RuleOrigin::DpbdLocal), &onto())
            .unwrap();
        let s = sample(&["150", "250", "x", "199"]);
        let p = apply_lookup(&s, [&reg], &lfs, None).unwrap();
        assert_eq!(p.get("salary"), 0.5);

        reg.register(LookupRule::labeling_function("r-hdr", "salary", "hdr", RuleOrigin::DpbdLocal), &onto())
            .unwrap();
        let col = Column::from_strs("Income", &["150", "250", "x", "199"]);
        let prof = profile_column(&col);
        let ctx = ColumnContext { column: &col, profile: &prof, lf: LfContext::header_only("Income") };
        assert_eq!(apply_lookup(&s, [&reg], &lfs, Some(&ctx)).unwrap().get("salary"), 1.0);
        // Without context the header LF abstains.
        assert_eq!(apply_lookup(&s, [&reg], &lfs, None).unwrap().get("salary"), 0.5);
    }

    #[test]
    fn builtin_pack_parses_and_compiles() {
        let rules = parse_regex_pack(BUILTIN_REGEX_PACK, RuleOrigin::Builtin).unwrap();
        assert!(rules.len() >= 7);
        for r in &rules {
            compile(r).unwrap();
        }
    }

    #[test]
    fn registry_serde_round_trip() {
        let mut reg = RuleRegistry::default();
        reg.register(LookupRule::regex("iso", "date", r"^\d{4}$", RuleOrigin::Builtin), &onto()).unwrap();
        let json = serde_json::to_string(&reg).unwrap();
        let back: RuleRegistry = serde_json::from_str(&json).unwrap();
        assert_eq!(back, reg);
        let p = apply_lookup(&sample(&["2020"]), [&back], &LfRegistry::default(), None).unwrap();
        assert_eq!(p.get("date"), 1.0);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn rule_strategy() -> impl Strategy<Value = (usize, String)> {
            (0usize..3, prop::sample::select(vec!["^a", "b$", "^[0-9]+$", "c", "^.{3}$"]).prop_map(String::from))
        }

        fn brute_force(values: &[String], rules: &[(usize, String)]) -> BTreeMap<String, f64> {
            let types = ["date", "city", "salary"];
            let mut out = BTreeMap::new();
            for (t_idx, t) in types.iter().enumerate() {
                let mut k = 0;
                for v in values {
                    let mut hit = false;
                    for (rt, pat) in rules {
                        if *rt == t_idx && Regex::new(pat).unwrap().is_match(v) {
                            hit = true;
                        }
                    }
                    if hit {
                        k += 1;
                    }
                }
                if k > 0 {
                    out.insert(t.to_string(), k as f64 / values.len() as f64);
                }
            }
            out
        }

        proptest! {
            #[test]
            fn lookup_equals_brute_force(
                values in prop::collection::vec("[abc0-9]{1,4}", 1..12),
                rules in prop::collection::vec(rule_strategy(), 0..6),
            ) {
                let types = ["date", "city", "salary"];
                let mut reg = RuleRegistry::default();
                for (i, (t, pat)) in rules.iter().enumerate() {
                    reg.register(LookupRule::regex(&format!("r{i}"), types[*t], pat, RuleOrigin::User), &onto()).unwrap();
                }
                let s = ValueSample { values: values.clone(), seed: 0, source_size: values.len() };
                let p = apply_lookup(&s, [&reg], &LfRegistry::default(), None).unwrap();
                prop_assert_eq!(&p.scores, &brute_force(&values, &rules));
                let n = values.len() as f64;
                for v in p.scores.values() {
                    let k = v * n;
                    prop_assert!((k - k.round()).abs() < 1e-9);
                }
            }

            #[test]
            fn adding_rule_is_monotone_and_local(
                values in prop::collection::vec("[abc0-9]{1,4}", 1..12),
                rules in prop::collection::vec(rule_strategy(), 0..5),
                extra in rule_strategy(),
            ) {
                let types = ["date", "city", "salary"];
                let mut reg = RuleRegistry::default();
                for (i, (t, pat)) in rules.iter().enumerate() {
                    reg.register(LookupRule::regex(&format!("r{i}"), types[*t], pat, RuleOrigin::User), &onto()).unwrap();
                }
                let s = ValueSample { values: values.clone(), seed: 0, source_size: values.len() };
                let before = apply_lookup(&s, [&reg], &LfRegistry::default(), None).unwrap();
                reg.register(LookupRule::regex("extra", types[extra.0], &extra.1, RuleOrigin::User), &onto()).unwrap();
                let after = apply_lookup(&s, [&reg], &LfRegistry::default(), None).unwrap();
                for t in types {
                    if t == types[extra.0] {
                        prop_assert!(after.get(t) >= before.get(t));
                    } else {
                        prop_assert_eq!(after.get(t), before.get(t));
                    }
                }
            }
        }
    }
}
