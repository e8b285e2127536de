//! On-disk layout, the per-tenant feedback log and snapshots.
//!
//! ```text
//! data/global/{ontology.tsv, embeddings.txt, rules/, params.snap, corpus/}
//! data/tenants/<id>/{feedback.jsonl, snapshot.snap, tables/}
//! ```
//!
//! Tenant state is event sourced: `feedback.jsonl` holds every applied
//! event and `snapshot.snap` the state after some prefix of it. Opening a
//! tenant loads the snapshot and replays the remaining events.

use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classifier::{ClassifierParams, LabeledExample, TrainConfig};
use crate::corpus::{load_labeled_corpus, write_labeled_corpus, CorpusError};
use crate::dpbd::{process_feedback, DpbdError, FeedbackEvent, FeedbackResult, LfRegistry};
use crate::ensemble::PipelineConfig;
use crate::header::{load_embeddings, EmbeddingError};
use crate::lookup::{parse_dictionary, parse_regex_pack, LookupError, LookupRule, RuleOrigin, RuleRegistry, BUILTIN_REGEX_PACK};
use crate::ontology::{parse_ontology, Ontology, OntologyError};
use crate::state::{BuildOptions, DpbdConfig, GlobalModel, StateError, TenantModel};
use crate::table::{parse_table, ParseOptions, Table, TableError};

pub const GLOBAL_FORMAT: &str = "coltype-global";
pub const TENANT_FORMAT: &str = "coltype-tenant";
pub const FORMAT_VERSION: u32 = 1;
/// A tenant snapshot is written after every this many applied events.
pub const SNAPSHOT_EVERY: u64 = 10;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error("{}: {source}", path.display())]
    Ontology { path: PathBuf, source: OntologyError },
    #[error("{}: {source}", path.display())]
    Embeddings { path: PathBuf, source: EmbeddingError },
    #[error("{}: {source}", path.display())]
    Rules { path: PathBuf, source: LookupError },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("{}: {message}", path.display())]
    Snapshot { path: PathBuf, message: String },
    #[error("{}: line {line}: {message}", path.display())]
    Log { path: PathBuf, line: usize, message: String },
    #[error("table `{id}`: {source}")]
    Table { id: String, source: TableError },
    #[error("not found: {0}")]
    NotFound(String),
    #[error("invalid tenant id `{0}`")]
    InvalidTenant(String),
    #[error(transparent)]
    State(#[from] StateError),
    #[error(transparent)]
    Feedback(#[from] DpbdError),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> StoreError + '_ {
    move |source| StoreError::Io { path: path.to_path_buf(), source }
}

/// Writes `bytes` to a temporary sibling, syncs it and renames it over
/// `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), StoreError> {
    let tmp = path.with_extension("tmp");
    let mut f = File::create(&tmp).map_err(io_err(&tmp))?;
    f.write_all(bytes).map_err(io_err(&tmp))?;
    f.sync_all().map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))?;
    if let Some(dir) = path.parent() {
        // Directory fsync is best effort; not every platform supports it.
        if let Ok(d) = File::open(dir) {
            let _ = d.sync_all();
        }
    }
    Ok(())
}

fn read(path: &Path) -> Result<Vec<u8>, StoreError> {
    fs::read(path).map_err(io_err(path))
}

pub fn valid_tenant_id(id: &str) -> bool {
    !id.is_empty()
        && id.len() <= 64
        && !id.starts_with('.')
        && id.bytes().all(|b| b.is_ascii_alphanumeric() || matches!(b, b'_' | b'-' | b'.'))
}

/// Root of a data directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DataDir {
    root: PathBuf,
}

impl DataDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        DataDir { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn global_dir(&self) -> PathBuf {
        self.root.join("global")
    }

    pub fn tenant_dir(&self, tenant_id: &str) -> Result<PathBuf, StoreError> {
        if !valid_tenant_id(tenant_id) {
            return Err(StoreError::InvalidTenant(tenant_id.to_string()));
        }
        Ok(self.root.join("tenants").join(tenant_id))
    }
}

/// Builtin regexes for types in `ontology`, then every `*.tsv` regex pack
/// and `<type>.dict` dictionary in `dir`, in file name order.
pub fn load_rules(dir: Option<&Path>, ontology: &Ontology) -> Result<RuleRegistry, StoreError> {
    let mut registry = RuleRegistry::default();
    let builtin = parse_regex_pack(BUILTIN_REGEX_PACK, RuleOrigin::Builtin).expect("builtin pack is valid");
    for rule in builtin.into_iter().filter(|r| ontology.contains(&r.type_id)) {
        registry.register(rule, ontology).expect("builtin pack is valid");
    }
    let Some(dir) = dir else { return Ok(registry) };
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    files.sort();
    for path in files {
        let rules_err = |source| StoreError::Rules { path: path.clone(), source };
        let ext = path.extension().and_then(|e| e.to_str());
        let rules = match ext {
            Some("tsv") => {
                let text = String::from_utf8_lossy(&read(&path)?).into_owned();
                parse_regex_pack(&text, RuleOrigin::User).map_err(rules_err)?
            }
            Some("dict") => {
                let type_id = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
                let values = parse_dictionary(&String::from_utf8_lossy(&read(&path)?));
                vec![LookupRule::dictionary(&format!("kb:{type_id}"), type_id, values, true, RuleOrigin::Kb)]
            }
            _ => continue,
        };
        for rule in rules {
            registry.register(rule, ontology).map_err(rules_err)?;
        }
    }
    Ok(registry)
}

/// Input files for building a global model from scratch.
#[derive(Debug, Clone)]
pub struct GlobalSources {
    pub ontology: PathBuf,
    pub embeddings: PathBuf,
    pub rules: Option<PathBuf>,
    pub training: PathBuf,
    pub source_corpus: Option<PathBuf>,
}

/// The trained part of a global model; everything else is read from the
/// files next to it.
#[derive(Serialize, Deserialize)]
struct GlobalParams {
    format: String,
    format_version: u32,
    classifier: ClassifierParams,
    examples: Vec<LabeledExample>,
    lfs: LfRegistry,
    config: PipelineConfig,
    train_config: TrainConfig,
    dpbd: DpbdConfig,
}

fn load_ontology_file(path: &Path) -> Result<Ontology, StoreError> {
    let (ontology, _) =
        parse_ontology(&read(path)?).map_err(|source| StoreError::Ontology { path: path.to_path_buf(), source })?;
    Ok(ontology)
}

/// Trains a global model from `sources` and writes it under `data/global`.
pub fn init_global(data: &DataDir, sources: &GlobalSources, options: &BuildOptions) -> Result<GlobalModel, StoreError> {
    let ontology = load_ontology_file(&sources.ontology)?;
    let embeddings = load_embeddings(&read(&sources.embeddings)?)
        .map_err(|source| StoreError::Embeddings { path: sources.embeddings.clone(), source })?;
    let rules = load_rules(sources.rules.as_deref(), &ontology)?;
    let training = load_labeled_corpus(&sources.training, &ParseOptions::default())?;
    let source_corpus = match &sources.source_corpus {
        Some(dir) => load_labeled_corpus(dir, &ParseOptions::default())?,
        None => Vec::new(),
    };
    let model = GlobalModel::build(ontology, embeddings, rules, &training, source_corpus, options)?;

    let dir = data.global_dir();
    let rules_dir = dir.join("rules");
    fs::create_dir_all(&rules_dir).map_err(io_err(&rules_dir))?;
    write_atomic(&dir.join("ontology.tsv"), &read(&sources.ontology)?)?;
    write_atomic(&dir.join("embeddings.txt"), &read(&sources.embeddings)?)?;
    if let Some(src) = &sources.rules {
        for entry in fs::read_dir(src).map_err(io_err(src))? {
            let path = entry.map_err(io_err(src))?.path();
            if matches!(path.extension().and_then(|e| e.to_str()), Some("tsv" | "dict")) {
                let name = path.file_name().expect("file has a name");
                write_atomic(&rules_dir.join(name), &read(&path)?)?;
            }
        }
    }
    let corpus_dir = dir.join("corpus");
    write_labeled_corpus(&corpus_dir, &model.source_corpus).map_err(io_err(&corpus_dir))?;
    save_global_params(data, &model)?;
    // Reload so the result carries the same fingerprint a restart would.
    load_global(data)
}

pub fn save_global_params(data: &DataDir, model: &GlobalModel) -> Result<(), StoreError> {
    let params = GlobalParams {
        format: GLOBAL_FORMAT.into(),
        format_version: FORMAT_VERSION,
        classifier: model.classifier.clone(),
        examples: model.examples.clone(),
        lfs: model.lfs.clone(),
        config: model.config.clone(),
        train_config: model.train_config.clone(),
        dpbd: model.dpbd.clone(),
    };
    let bytes = serde_json::to_vec(&params).expect("plain data serializes");
    write_atomic(&data.global_dir().join("params.snap"), &bytes)
}

fn fingerprint(parts: &[&[u8]]) -> u64 {
    let mut text = String::new();
    for p in parts {
        text.push_str(&String::from_utf8_lossy(p));
        text.push('\u{0}');
    }
    crate::lookup::stable_hash(&text)
}

/// Loads `data/global`. The result has version 1; callers that replace a
/// running model bump it.
pub fn load_global(data: &DataDir) -> Result<GlobalModel, StoreError> {
    let dir = data.global_dir();
    let ontology = load_ontology_file(&dir.join("ontology.tsv"))?;
    let emb_path = dir.join("embeddings.txt");
    let emb_bytes = read(&emb_path)?;
    let embeddings =
        load_embeddings(&emb_bytes).map_err(|source| StoreError::Embeddings { path: emb_path, source })?;
    let rules_dir = dir.join("rules");
    let rules = load_rules(rules_dir.is_dir().then_some(rules_dir.as_path()), &ontology)?;
    let snap_path = dir.join("params.snap");
    let snap_err = |message: String| StoreError::Snapshot { path: snap_path.clone(), message };
    let snap_bytes = read(&snap_path)?;
    let params: GlobalParams = serde_json::from_slice(&snap_bytes).map_err(|e| snap_err(e.to_string()))?;
    if params.format != GLOBAL_FORMAT || params.format_version != FORMAT_VERSION {
        return Err(snap_err(format!("unsupported format {} v{}", params.format, params.format_version)));
    }
    let corpus_dir = dir.join("corpus");
    let source_corpus = if corpus_dir.is_dir() {
        load_labeled_corpus(&corpus_dir, &ParseOptions::default())?
    } else {
        Vec::new()
    };
    let model = GlobalModel {
        version: 1,
        ontology,
        embeddings,
        rules,
        lfs: params.lfs,
        classifier: params.classifier,
        examples: params.examples,
        source_corpus,
        config: params.config,
        train_config: params.train_config,
        dpbd: params.dpbd,
        fingerprint: fingerprint(&[&read(&dir.join("ontology.tsv"))?, &emb_bytes, &snap_bytes]),
    };
    let tenant = TenantModel::new("_check");
    crate::state::model_state(&model, &tenant, &model.ontology)
        .check()
        .map_err(|e| snap_err(e.to_string()))?;
    Ok(model)
}

/// Parses a feedback log. Blank lines are skipped. A final line without a
/// newline that fails to parse is a torn write and is dropped; the
/// returned flag reports that.
pub fn read_log_text(text: &str, path: &Path) -> Result<(Vec<FeedbackEvent>, bool), StoreError> {
    let mut events = Vec::new();
    let complete = text.is_empty() || text.ends_with('\n');
    let lines: Vec<&str> = text.lines().collect();
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(line) {
            Ok(e) => events.push(e),
            Err(_) if !complete && i + 1 == lines.len() => return Ok((events, true)),
            Err(e) => {
                return Err(StoreError::Log { path: path.to_path_buf(), line: i + 1, message: e.to_string() });
            }
        }
    }
    Ok((events, false))
}

pub fn read_log(path: &Path) -> Result<(Vec<FeedbackEvent>, bool), StoreError> {
    if !path.exists() {
        return Ok((Vec::new(), false));
    }
    let bytes = read(path)?;
    read_log_text(&String::from_utf8_lossy(&bytes), path)
}

/// Applies `events` in order to a fresh tenant. This is the code path
/// behind both tenant recovery and `coltype replay`.
pub fn replay_events<'e>(
    global: &GlobalModel,
    mut tenant: TenantModel,
    events: impl IntoIterator<Item = &'e FeedbackEvent>,
    mut table: impl FnMut(&str) -> Result<Table, StoreError>,
) -> Result<(TenantModel, Vec<FeedbackResult>), StoreError> {
    let mut results = Vec::new();
    for event in events {
        if let Some(report) = tenant.reports.get(&event.event_id) {
            results.push(FeedbackResult { report: report.clone(), duplicate: true });
            continue;
        }
        let t = table(&event.table_id)?;
        results.push(process_feedback(global, &mut tenant, event, &t)?);
    }
    Ok((tenant, results))
}

#[derive(Serialize, Deserialize)]
struct TenantSnapshot {
    format: String,
    format_version: u32,
    global_fingerprint: u64,
    tenant: TenantModel,
}

pub fn snapshot_bytes(tenant: &TenantModel, global: &GlobalModel) -> Vec<u8> {
    let snap = TenantSnapshot {
        format: TENANT_FORMAT.into(),
        format_version: FORMAT_VERSION,
        global_fingerprint: global.fingerprint,
        tenant: tenant.clone(),
    };
    serde_json::to_vec(&snap).expect("plain data serializes")
}

/// Returns the tenant and the fingerprint of the global model it was
/// built against.
pub fn parse_snapshot(bytes: &[u8], path: &Path) -> Result<(TenantModel, u64), StoreError> {
    let err = |message: String| StoreError::Snapshot { path: path.to_path_buf(), message };
    let snap: TenantSnapshot = serde_json::from_slice(bytes).map_err(|e| err(e.to_string()))?;
    if snap.format != TENANT_FORMAT || snap.format_version != FORMAT_VERSION {
        return Err(err(format!("unsupported format {} v{}", snap.format, snap.format_version)));
    }
    Ok((snap.tenant, snap.global_fingerprint))
}

/// Stored alongside each uploaded table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableMeta {
    pub table_id: String,
    pub name: String,
    pub options: ParseOptions,
}

/// Read access to a tenant's uploaded tables.
#[derive(Debug, Clone)]
pub struct TableDir {
    dir: PathBuf,
}

impl TableDir {
    pub fn new(tenant_dir: &Path) -> Self {
        TableDir { dir: tenant_dir.join("tables") }
    }

    fn paths(&self, id: &str) -> (PathBuf, PathBuf) {
        (self.dir.join(format!("{id}.csv")), self.dir.join(format!("{id}.json")))
    }

    pub fn load(&self, id: &str) -> Result<Table, StoreError> {
        let plausible = !id.is_empty() && id.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'-');
        let (csv, meta) = self.paths(id);
        if !plausible || !csv.is_file() {
            return Err(StoreError::NotFound(format!("table `{id}`")));
        }
        let meta: TableMeta = serde_json::from_slice(&read(&meta)?)
            .map_err(|e| StoreError::Snapshot { path: meta.clone(), message: e.to_string() })?;
        let table = parse_table(&read(&csv)?, &meta.options)
            .map_err(|source| StoreError::Table { id: id.to_string(), source })?;
        Ok(table.with_id(meta.table_id, meta.name))
    }

    /// Highest sequence number in use, 0 if none.
    fn last_seq(&self) -> Result<u64, StoreError> {
        if !self.dir.is_dir() {
            return Ok(0);
        }
        let mut last = 0;
        for entry in fs::read_dir(&self.dir).map_err(io_err(&self.dir))? {
            let name = entry.map_err(io_err(&self.dir))?.file_name();
            let seq = name.to_str().and_then(|n| n.strip_prefix("tbl-")?.strip_suffix(".csv")?.parse::<u64>().ok());
            last = last.max(seq.unwrap_or(0));
        }
        Ok(last)
    }
}

/// Loads a tenant without writing anything. A tenant with no directory is
/// fresh.
pub fn load_tenant(data: &DataDir, tenant_id: &str, global: &GlobalModel) -> Result<TenantModel, StoreError> {
    let dir = data.tenant_dir(tenant_id)?;
    let snap_path = dir.join("snapshot.snap");
    let mut base = TenantModel::new(tenant_id);
    if snap_path.is_file() {
        let (t, fp) = parse_snapshot(&read(&snap_path)?, &snap_path)?;
        if t.tenant_id != tenant_id {
            return Err(StoreError::Snapshot { path: snap_path, message: format!("belongs to tenant `{}`", t.tenant_id) });
        }
        // A snapshot from another global model is stale; replay everything.
        if fp == global.fingerprint {
            base = t;
        }
    }
    let log_path = dir.join("feedback.jsonl");
    let (events, _) = read_log(&log_path)?;
    let done = base.events_applied as usize;
    if done > events.len() {
        return Err(StoreError::Snapshot {
            path: snap_path,
            message: format!("covers {done} events but the log has {}", events.len()),
        });
    }
    let tables = TableDir::new(&dir);
    let (tenant, _) = replay_events(global, base, &events[done..], |id| tables.load(id))?;
    Ok(tenant)
}

/// The single writer for one tenant.
#[derive(Debug)]
pub struct TenantStore {
    dir: PathBuf,
    tables: TableDir,
    model: Arc<TenantModel>,
    log: File,
    next_seq: u64,
    snapshot_every: u64,
}

impl TenantStore {
    /// Opens or creates a tenant, recovering state from snapshot and log.
    pub fn open(data: &DataDir, tenant_id: &str, global: &GlobalModel) -> Result<Self, StoreError> {
        let dir = data.tenant_dir(tenant_id)?;
        let tables = TableDir::new(&dir);
        fs::create_dir_all(&tables.dir).map_err(io_err(&tables.dir))?;
        let log_path = dir.join("feedback.jsonl");
        if let (events, true) = read_log(&log_path)? {
            // Drop the torn tail so the next append starts on a fresh line.
            let text: String = events.iter().map(|e| format!("{}\n", serde_json::to_string(e).expect("serializes"))).collect();
            write_atomic(&log_path, text.as_bytes())?;
        }
        let model = load_tenant(data, tenant_id, global)?;
        let log = OpenOptions::new().create(true).append(true).open(&log_path).map_err(io_err(&log_path))?;
        let next_seq = tables.last_seq()? + 1;
        Ok(TenantStore { dir, tables, model: Arc::new(model), log, next_seq, snapshot_every: SNAPSHOT_EVERY })
    }

    pub fn with_snapshot_every(mut self, every: u64) -> Self {
        self.snapshot_every = every.max(1);
        self
    }

    pub fn model(&self) -> Arc<TenantModel> {
        Arc::clone(&self.model)
    }

    pub fn tables(&self) -> &TableDir {
        &self.tables
    }

    pub fn log_path(&self) -> PathBuf {
        self.dir.join("feedback.jsonl")
    }

    pub fn snapshot_path(&self) -> PathBuf {
        self.dir.join("snapshot.snap")
    }

    /// Parses and persists an upload under the next `tbl-NNNNNN` id.
    pub fn put_table(&mut self, bytes: &[u8], name: &str, options: &ParseOptions) -> Result<Table, StoreError> {
        let table_id = format!("tbl-{:06}", self.next_seq);
        let table = parse_table(bytes, options)
            .map_err(|source| StoreError::Table { id: table_id.clone(), source })?
            .with_id(table_id.clone(), name);
        let (csv, meta_path) = self.tables.paths(&table_id);
        let meta = TableMeta { table_id, name: name.to_string(), options: *options };
        write_atomic(&csv, bytes)?;
        write_atomic(&meta_path, &serde_json::to_vec(&meta).expect("serializes"))?;
        self.next_seq += 1;
        Ok(table)
    }

    /// Applies one event. The event is on disk before this returns `Ok`,
    /// and the in-memory state only changes after that.
    pub fn submit(&mut self, global: &GlobalModel, event: &FeedbackEvent) -> Result<FeedbackResult, StoreError> {
        if let Some(report) = self.model.reports.get(&event.event_id) {
            return Ok(FeedbackResult { report: report.clone(), duplicate: true });
        }
        let table = self.tables.load(&event.table_id)?;
        let mut next = (*self.model).clone();
        let result = process_feedback(global, &mut next, event, &table)?;
        let mut line = serde_json::to_string(event).expect("serializes");
        line.push('\n');
        let log_path = self.log_path();
        self.log.write_all(line.as_bytes()).map_err(io_err(&log_path))?;
        self.log.sync_data().map_err(io_err(&log_path))?;
        self.model = Arc::new(next);
        if self.model.events_applied % self.snapshot_every == 0 {
            self.snapshot(global)?;
        }
        Ok(result)
    }

    pub fn snapshot(&self, global: &GlobalModel) -> Result<(), StoreError> {
        write_atomic(&self.snapshot_path(), &snapshot_bytes(&self.model, global))
    }

    /// Re-derives state from the log alone against `global`, without
    /// installing it.
    pub fn replay_with(&self, global: &GlobalModel) -> Result<TenantModel, StoreError> {
        let (events, _) = read_log(&self.log_path())?;
        let fresh = TenantModel::new(&self.model.tenant_id);
        let (model, _) = replay_events(global, fresh, &events, |id| self.tables.load(id))?;
        Ok(model)
    }

    /// Replaces the in-memory state, typically with the result of
    /// [`TenantStore::replay_with`] after a global reload.
    pub fn install(&mut self, model: TenantModel, global: &GlobalModel) -> Result<(), StoreError> {
        self.model = Arc::new(model);
        self.snapshot(global)
    }
}
