//! Labeled table corpora: a directory of CSV files, each with an optional
//! sidecar `<name>.labels.tsv` holding `column_index<TAB>type_id` lines.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::table::{parse_table, ParseOptions, Table, TableError};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Table { path: PathBuf, source: TableError },
    #[error("{path}:{line}: {message}")]
    Labels { path: PathBuf, line: usize, message: String },
}

/// A table plus its gold (or source) column annotations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedTable {
    pub table: Table,
    pub labels: BTreeMap<usize, String>,
}

impl AnnotatedTable {
    pub fn new(table: Table, labels: BTreeMap<usize, String>) -> Self {
        AnnotatedTable { table, labels }
    }

    pub fn label(&self, column: usize) -> Option<&str> {
        self.labels.get(&column).map(String::as_str)
    }
}

pub fn parse_labels(text: &str, path: &Path) -> Result<BTreeMap<usize, String>, CorpusError> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |message: &str| CorpusError::Labels { path: path.to_path_buf(), line: i + 1, message: message.into() };
        let (idx, ty) = line.split_once('\t').ok_or_else(|| err("expected `column_index<TAB>type_id`"))?;
        let idx: usize = idx.trim().parse().map_err(|_| err("bad column index"))?;
        let ty = ty.trim();
        if ty.is_empty() {
            return Err(err("empty type id"));
        }
        out.insert(idx, ty.to_string());
    }
    Ok(out)
}

/// Loads every `*.csv` in `dir` (sorted by file name). The table id is the
/// file stem.
pub fn load_labeled_corpus(dir: &Path, options: &ParseOptions) -> Result<Vec<AnnotatedTable>, CorpusError> {
    fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
        move |source| CorpusError::Io { path: path.to_path_buf(), source }
    }
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "csv"))
        .collect();
    paths.sort();
    let mut out = Vec::with_capacity(paths.len());
    for path in paths {
        let bytes = fs::read(&path).map_err(io(&path))?;
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        let table = parse_table(&bytes, options)
            .map_err(|source| CorpusError::Table { path: path.clone(), source })?
            .with_id(stem.clone(), stem.clone());
        let label_path = path.with_file_name(format!("{stem}.labels.tsv"));
        let labels = match fs::read_to_string(&label_path) {
            Ok(text) => parse_labels(&text, &label_path)?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => BTreeMap::new(),
            Err(e) => return Err(CorpusError::Io { path: label_path, source: e }),
        };
        out.push(AnnotatedTable { table, labels });
    }
    Ok(out)
}

/// Serializes a table as RFC 4180 CSV with a header row.
pub fn table_to_csv(table: &Table) -> String {
    fn cell(s: &str) -> String {
        if s.contains([',', '"', '\n', '\r']) {
            format!("\"{}\"", s.replace('"', "\"\""))
        } else {
            s.to_string()
        }
    }
    let mut out = String::new();
    // A lone empty cell is quoted so the line is not read back as blank.
    let row = |cells: Vec<&str>| match cells.as_slice() {
        [""] => "\"\"".to_string(),
        _ => cells.into_iter().map(cell).collect::<Vec<_>>().join(","),
    };
    out.push_str(&row(table.headers.iter().map(String::as_str).collect()));
    out.push('\n');
    for r in 0..table.n_rows() {
        out.push_str(&row(table.columns.iter().map(|c| c.values[r].as_str()).collect()));
        out.push('\n');
    }
    out
}

/// Writes `<table_id>.csv` and `<table_id>.labels.tsv` for each table.
pub fn write_labeled_corpus(dir: &Path, tables: &[AnnotatedTable]) -> std::io::Result<()> {
    fs::create_dir_all(dir)?;
    for t in tables {
        let id = &t.table.table_id;
        fs::write(dir.join(format!("{id}.csv")), table_to_csv(&t.table))?;
        let labels: String = t.labels.iter().map(|(i, ty)| format!("{i}\t{ty}\n")).collect();
        fs::write(dir.join(format!("{id}.labels.tsv")), labels)?;
    }
    Ok(())
}
