//! CSV tables, primitive type inference and column profiling.

use std::collections::HashMap;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_MAX_ROWS: usize = 10_000;

/// Share of non-missing values that must parse for a primitive to apply.
pub const NUMERIC_THRESHOLD: f64 = 0.80;
pub const DATE_THRESHOLD: f64 = 0.80;
pub const BOOLEAN_THRESHOLD: f64 = 0.95;

pub const TOP_VALUES_CAP: usize = 10;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TableError {
    #[error("table has no columns")]
    EmptyTable,
    #[error("unclosed quote starting at byte {offset}")]
    UnclosedQuote { offset: usize },
    #[error("delimiter must be a single ASCII byte other than quote or newline")]
    InvalidDelimiter,
    #[error("inconsistent table shape: {0}")]
    Shape(String),
}

impl TableError {
    /// Byte offset for parse errors, if any.
    pub fn offset(&self) -> Option<usize> {
        match self {
            TableError::UnclosedQuote { offset } => Some(*offset),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseOptions {
    pub delimiter: u8,
    pub has_header: bool,
    pub max_rows: usize,
}

impl Default for ParseOptions {
    fn default() -> Self {
        ParseOptions { delimiter: b',', has_header: true, max_rows: DEFAULT_MAX_ROWS }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Primitive {
    Numeric,
    Text,
    Date,
    Boolean,
    Empty,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Column {
    pub header: String,
    /// Raw cells; the empty string marks a missing value.
    pub values: Vec<String>,
    pub primitive: Primitive,
}

impl Column {
    pub fn new(header: impl Into<String>, values: Vec<String>) -> Self {
        let primitive = infer_primitive(&values);
        Column { header: header.into(), values, primitive }
    }

    pub fn from_strs(header: &str, values: &[&str]) -> Self {
        Column::new(header, values.iter().map(|s| s.to_string()).collect())
    }

    pub fn non_missing(&self) -> impl Iterator<Item = &str> {
        self.values.iter().map(String::as_str).filter(|v| !v.is_empty())
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub table_id: String,
    pub name: String,
    pub headers: Vec<String>,
    pub columns: Vec<Column>,
}

impl Table {
    pub fn new(
        table_id: impl Into<String>,
        name: impl Into<String>,
        columns: Vec<Column>,
    ) -> Result<Self, TableError> {
        if columns.is_empty() {
            return Err(TableError::EmptyTable);
        }
        let rows = columns[0].values.len();
        if let Some(c) = columns.iter().find(|c| c.values.len() != rows) {
            return Err(TableError::Shape(format!(
                "column `{}` has {} rows, expected {rows}",
                c.header,
                c.values.len()
            )));
        }
        Ok(Table {
            table_id: table_id.into(),
            name: name.into(),
            headers: columns.iter().map(|c| c.header.clone()).collect(),
            columns,
        })
    }

    pub fn with_id(mut self, table_id: impl Into<String>, name: impl Into<String>) -> Self {
        self.table_id = table_id.into();
        self.name = name.into();
        self
    }

    pub fn n_rows(&self) -> usize {
        self.columns.first().map_or(0, |c| c.values.len())
    }

    pub fn n_columns(&self) -> usize {
        self.columns.len()
    }
}

/// Parses RFC 4180 CSV. Ragged rows are padded with missing cells; blank
/// lines are skipped. The returned table has empty `table_id` and `name`.
pub fn parse_table(bytes: &[u8], options: &ParseOptions) -> Result<Table, TableError> {
    let delim = options.delimiter;
    if !delim.is_ascii() || matches!(delim, b'"' | b'\n' | b'\r') {
        return Err(TableError::InvalidDelimiter);
    }
    let delim = delim as char;
    let text = String::from_utf8_lossy(bytes);
    let text = text.strip_prefix('\u{feff}').unwrap_or(&text);

    let wanted = options.max_rows.saturating_add(usize::from(options.has_header));
    let mut records: Vec<Vec<String>> = Vec::new();
    let mut record: Vec<String> = Vec::new();
    let mut field = String::new();
    let mut field_quoted = false;
    let mut in_quotes = false;
    let mut quote_start = 0;
    let mut chars = text.char_indices().peekable();

    let finish_record = |record: &mut Vec<String>, records: &mut Vec<Vec<String>>| {
        let blank = record.len() == 1 && record[0].is_empty();
        let rec = std::mem::take(record);
        if !blank {
            records.push(rec);
        }
    };

    while let Some((i, c)) = chars.next() {
        if records.len() >= wanted {
            break;
        }
        if in_quotes {
            if c == '"' {
                if chars.peek().is_some_and(|&(_, n)| n == '"') {
                    chars.next();
                    field.push('"');
                } else {
                    in_quotes = false;
                }
            } else {
                field.push(c);
            }
            continue;
        }
        match c {
            '"' if field.is_empty() && !field_quoted => {
                in_quotes = true;
                field_quoted = true;
                quote_start = i;
            }
            c if c == delim => {
                record.push(std::mem::take(&mut field));
                field_quoted = false;
            }
            '\n' | '\r' => {
                if c == '\r' && chars.peek().is_some_and(|&(_, n)| n == '\n') {
                    chars.next();
                }
                let quoted_blank = field_quoted && record.is_empty() && field.is_empty();
                record.push(std::mem::take(&mut field));
                if quoted_blank {
                    // `""` on its own line is a real (missing) cell, not a blank line.
                    records.push(std::mem::take(&mut record));
                } else {
                    finish_record(&mut record, &mut records);
                }
                field_quoted = false;
            }
            c => field.push(c),
        }
    }
    if in_quotes {
        return Err(TableError::UnclosedQuote { offset: quote_start });
    }
    if (!field.is_empty() || field_quoted || !record.is_empty()) && records.len() < wanted {
        record.push(field);
        finish_record(&mut record, &mut records);
    }

    let width = records.iter().map(Vec::len).max().unwrap_or(0);
    if width == 0 {
        return Err(TableError::EmptyTable);
    }
    let mut rows = records.into_iter();
    let headers: Vec<String> = if options.has_header {
        let mut h = rows.next().unwrap_or_default();
        h.resize(width, String::new());
        h
    } else {
        vec![String::new(); width]
    };
    let mut cols: Vec<Vec<String>> = vec![Vec::new(); width];
    for mut row in rows.take(options.max_rows) {
        row.resize(width, String::new());
        for (col, cell) in cols.iter_mut().zip(row) {
            col.push(cell);
        }
    }
    let columns = headers.into_iter().zip(cols).map(|(h, v)| Column::new(h, v)).collect();
    Table::new("", "", columns)
}

static DECIMAL: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^[+-]?(\d+\.?\d*|\.\d+)([eE][+-]?\d+)?$").unwrap());
static THOUSANDS: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^[+-]?\d{1,3}(,\d{3})+(\.\d*)?$").unwrap());
static ISO_DATE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(
        r"^(\d{4})[-/](\d{1,2})[-/](\d{1,2})([T ]\d{1,2}:\d{2}(:\d{2}(\.\d+)?)?(Z|[+-]\d{2}:?\d{2})?)?$",
    )
    .unwrap()
});
static US_DATE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^(\d{1,2})/(\d{1,2})/(\d{2}|\d{4})$").unwrap());

/// Parses a plain decimal number, allowing `,` thousands separators.
pub fn parse_number(s: &str) -> Option<f64> {
    let s = s.trim();
    if DECIMAL.is_match(s) {
        s.parse().ok()
    } else if THOUSANDS.is_match(s) {
        s.replace(',', "").parse().ok()
    } else {
        None
    }
    .filter(|v: &f64| v.is_finite())
}

/// ISO (`YYYY-MM-DD`, `YYYY/MM/DD`, optional time) or US (`M/D/YY[YY]`) date.
pub fn is_date(s: &str) -> bool {
    let s = s.trim();
    let valid = |m: &str, d: &str| {
        let (m, d): (u32, u32) = (m.parse().unwrap_or(0), d.parse().unwrap_or(0));
        (1..=12).contains(&m) && (1..=31).contains(&d)
    };
    if let Some(c) = ISO_DATE.captures(s) {
        return valid(&c[2], &c[3]);
    }
    if let Some(c) = US_DATE.captures(s) {
        return valid(&c[1], &c[2]);
    }
    false
}

pub fn is_boolean(s: &str) -> bool {
    matches!(s.trim().to_ascii_lowercase().as_str(), "true" | "false" | "0" | "1" | "yes" | "no")
}

/// Classifies a column by parse rates: boolean, then date, then numeric,
/// falling back to text.
pub fn infer_primitive(values: &[String]) -> Primitive {
    let present: Vec<&str> = values.iter().map(String::as_str).filter(|v| !v.is_empty()).collect();
    if present.is_empty() {
        return Primitive::Empty;
    }
    let n = present.len() as f64;
    let rate = |f: fn(&str) -> bool| present.iter().filter(|v| f(v)).count() as f64 / n;
    if rate(is_boolean) >= BOOLEAN_THRESHOLD {
        Primitive::Boolean
    } else if rate(is_date) >= DATE_THRESHOLD {
        Primitive::Date
    } else if rate(|v| parse_number(v).is_some()) >= NUMERIC_THRESHOLD {
        Primitive::Numeric
    } else {
        Primitive::Text
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NumericStats {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub fraction_integer: f64,
}

/// Fractions of characters per class; all zero when there are no characters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CharClassHistogram {
    pub digit: f64,
    pub alpha: f64,
    pub punct: f64,
    pub space: f64,
    pub other: f64,
}

impl CharClassHistogram {
    pub fn as_array(&self) -> [f64; 5] {
        [self.digit, self.alpha, self.punct, self.space, self.other]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TextStats {
    pub mean_length: f64,
    pub char_class_histogram: CharClassHistogram,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnProfile {
    pub primitive: Primitive,
    pub n_rows: usize,
    pub n_missing: usize,
    pub n_unique: usize,
    /// Most frequent values, by count descending then value ascending.
    pub top_values: Vec<(String, usize)>,
    pub numeric_stats: Option<NumericStats>,
    pub text_stats: Option<TextStats>,
}

impl ColumnProfile {
    pub fn n_present(&self) -> usize {
        self.n_rows - self.n_missing
    }

    pub fn unique_ratio(&self) -> f64 {
        match self.n_present() {
            0 => 0.0,
            n => self.n_unique as f64 / n as f64,
        }
    }
}

pub fn profile_column(column: &Column) -> ColumnProfile {
    let present: Vec<&str> = column.non_missing().collect();
    let n_rows = column.values.len();
    let n_missing = n_rows - present.len();

    let mut counts: HashMap<&str, usize> = HashMap::new();
    for v in &present {
        *counts.entry(v).or_default() += 1;
    }
    let n_unique = counts.len();
    let mut top: Vec<(&str, usize)> = counts.into_iter().collect();
    top.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let top_values = top.into_iter().take(TOP_VALUES_CAP).map(|(v, c)| (v.to_string(), c)).collect();

    let numeric_stats = if column.primitive == Primitive::Numeric {
        let mut xs: Vec<f64> = present.iter().filter_map(|v| parse_number(v)).collect();
        // Sorting makes the sums independent of row order.
        xs.sort_by(f64::total_cmp);
        numeric_stats(&xs)
    } else {
        None
    };

    let text_stats = (!present.is_empty()).then(|| {
        let mut classes = [0usize; 5];
        let mut total = 0usize;
        for v in &present {
            for c in v.chars() {
                total += 1;
                let k = if c.is_ascii_digit() {
                    0
                } else if c.is_alphabetic() {
                    1
                } else if c.is_ascii_punctuation() {
                    2
                } else if c.is_whitespace() {
                    3
                } else {
                    4
                };
                classes[k] += 1;
            }
        }
        let frac = |k: usize| if total == 0 { 0.0 } else { classes[k] as f64 / total as f64 };
        TextStats {
            mean_length: total as f64 / present.len() as f64,
            char_class_histogram: CharClassHistogram {
                digit: frac(0),
                alpha: frac(1),
                punct: frac(2),
                space: frac(3),
                other: frac(4),
            },
        }
    });

    ColumnProfile {
        primitive: column.primitive,
        n_rows,
        n_missing,
        n_unique,
        top_values,
        numeric_stats,
        text_stats,
    }
}

fn numeric_stats(xs: &[f64]) -> Option<NumericStats> {
    let (&min, &max) = (xs.first()?, xs.last()?);
    let n = xs.len() as f64;
    let mean = (xs.iter().sum::<f64>() / n).clamp(min, max);
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let ints = xs.iter().filter(|x| x.fract() == 0.0).count();
    Some(NumericStats { min, max, mean, std: var.sqrt(), fraction_integer: ints as f64 / n })
}
