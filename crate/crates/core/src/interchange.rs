//! Model-output interchange format and the dataset catalog.
//!
//! The interchange file is UTF-8 NDJSON: one JSON object per line, each with
//! a mandatory `"kind"` discriminator. Unknown extra fields are ignored.
//! Floats are written with the shortest decimal that round-trips.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{Matrix, Vector};

const ATTENTION_ROW_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub id: String,
    pub group: String,
    pub text: String,
    pub vector: Vector,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Stereo,
    Anti,
}

/// Per-token log-probabilities of one sentence of a counterfactual pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PllRecord {
    pub id: String,
    pub pair_id: String,
    pub variant: Variant,
    pub tokens: Vec<String>,
    /// Natural-log probability of each token under the exporter's masking scheme.
    pub logprobs: Vec<f64>,
    /// `true` marks tokens carrying demographic information.
    pub modified: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskedSlotRecord {
    pub template_id: String,
    pub target_word: String,
    pub group_index: u32,
    pub logp_target: f64,
    pub logp_prior: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRecord {
    pub prompt_id: String,
    pub completions: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionRecord {
    pub layer: u32,
    pub head: u32,
    pub weights: Matrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Record {
    Embedding(EmbeddingRecord),
    Pll(PllRecord),
    MaskedSlot(MaskedSlotRecord),
    Completion(CompletionRecord),
    Attention(AttentionRecord),
}

fn field_error(field: &'static str, message: impl Into<String>) -> Error {
    Error::InvalidField {
        field,
        message: message.into(),
    }
}

impl EmbeddingRecord {
    pub fn validate(&self) -> Result<()> {
        if self.vector.is_empty() {
            return Err(field_error("vector", "must be nonempty"));
        }
        Ok(())
    }
}

impl PllRecord {
    pub fn validate(&self) -> Result<()> {
        let n = self.tokens.len();
        if self.logprobs.len() != n {
            return Err(field_error(
                "logprobs",
                format!("has {} entries for {n} tokens", self.logprobs.len()),
            ));
        }
        if self.modified.len() != n {
            return Err(field_error(
                "modified",
                format!("has {} entries for {n} tokens", self.modified.len()),
            ));
        }
        if let Some(lp) = self.logprobs.iter().find(|lp| !(**lp <= 0.0)) {
            return Err(field_error("logprobs", format!("{lp} is not a log-probability")));
        }
        Ok(())
    }
}

impl MaskedSlotRecord {
    pub fn validate(&self) -> Result<()> {
        if !(self.logp_target <= 0.0) {
            return Err(field_error("logp_target", format!("{} > 0", self.logp_target)));
        }
        if !(self.logp_prior <= 0.0) {
            return Err(field_error("logp_prior", format!("{} > 0", self.logp_prior)));
        }
        Ok(())
    }
}

impl CompletionRecord {
    pub fn validate(&self) -> Result<()> {
        if self.completions.is_empty() {
            return Err(field_error("completions", "needs at least one completion"));
        }
        Ok(())
    }
}

impl AttentionRecord {
    pub fn validate(&self) -> Result<()> {
        for i in 0..self.weights.rows() {
            let row = self.weights.row(i);
            let sum: f64 = row.iter().sum();
            if row.iter().any(|&p| p < 0.0) || (sum - 1.0).abs() > ATTENTION_ROW_TOL {
                return Err(field_error(
                    "weights",
                    format!("row {i} is not a distribution (sum {sum})"),
                ));
            }
        }
        Ok(())
    }
}

impl Record {
    pub fn validate(&self) -> Result<()> {
        match self {
            Record::Embedding(r) => r.validate(),
            Record::Pll(r) => r.validate(),
            Record::MaskedSlot(r) => r.validate(),
            Record::Completion(r) => r.validate(),
            Record::Attention(r) => r.validate(),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Record::Embedding(_) => "embedding",
            Record::Pll(_) => "pll",
            Record::MaskedSlot(_) => "masked_slot",
            Record::Completion(_) => "completion",
            Record::Attention(_) => "attention",
        }
    }
}

/// Streaming reader: yields one record per nonblank line, holding only the
/// current line in memory.
pub struct RecordReader<R> {
    inner: R,
    line: usize,
    buf: String,
}

impl<R: BufRead> RecordReader<R> {
    pub fn new(inner: R) -> Self {
        RecordReader {
            inner,
            line: 0,
            buf: String::new(),
        }
    }
}

pub fn parse_line(text: &str, line: usize) -> Result<Record> {
    let record: Record = serde_json::from_str(text).map_err(|e| Error::Parse {
        line,
        message: e.to_string(),
    })?;
    record.validate().map_err(|e| Error::Parse {
        line,
        message: e.to_string(),
    })?;
    Ok(record)
}

impl<R: BufRead> Iterator for RecordReader<R> {
    type Item = Result<Record>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            self.buf.clear();
            self.line += 1;
            match self.inner.read_line(&mut self.buf) {
                Ok(0) => return None,
                Ok(_) => {}
                Err(e) => {
                    return Some(Err(Error::Parse {
                        line: self.line,
                        message: e.to_string(),
                    }))
                }
            }
            let text = self.buf.trim_end_matches(['\n', '\r']);
            if text.trim().is_empty() {
                continue;
            }
            return Some(parse_line(text, self.line));
        }
    }
}

pub fn parse_records<R: BufRead>(reader: R) -> Result<Vec<Record>> {
    RecordReader::new(reader).collect()
}

pub fn read_records_file(path: impl AsRef<Path>) -> Result<Vec<Record>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::file(path, e))?;
    parse_records(BufReader::new(file))
}

pub fn write_records<W: Write>(records: &[Record], mut out: W) -> Result<()> {
    for record in records {
        serde_json::to_writer(&mut out, record)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Extracts all records of one kind, failing on the first record of another kind.
macro_rules! only_kind {
    ($name:ident, $variant:ident, $ty:ty) => {
        pub fn $name(records: Vec<Record>) -> Result<Vec<$ty>> {
            records
                .into_iter()
                .enumerate()
                .map(|(i, r)| match r {
                    Record::$variant(inner) => Ok(inner),
                    other => Err(Error::invalid(format!(
                        "record {} has kind `{}`, expected `{}`",
                        i + 1,
                        other.kind(),
                        stringify!($name).trim_end_matches('s')
                    ))),
                })
                .collect()
        }
    };
}

only_kind!(embeddings, Embedding, EmbeddingRecord);
only_kind!(plls, Pll, PllRecord);
only_kind!(masked_slots, MaskedSlot, MaskedSlotRecord);
only_kind!(completions, Completion, CompletionRecord);
only_kind!(attentions, Attention, AttentionRecord);

// ---------------------------------------------------------------------------
// Dataset catalog
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataFormat {
    Csv,
    Ndjson,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSchema {
    CounterfactualPairs,
    Prompts,
    AnnotatedSentences,
}

impl DataSchema {
    /// Column roles required by the schema, in output order.
    pub fn roles(self) -> &'static [&'static str] {
        match self {
            DataSchema::CounterfactualPairs => &["sentence_a", "sentence_b"],
            DataSchema::Prompts => &["prompt"],
            DataSchema::AnnotatedSentences => &["sentence", "label"],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub path: String,
    pub format: DataFormat,
    pub schema: DataSchema,
    /// Optional mapping from schema role to the column name in the file.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub columns: BTreeMap<String, String>,
}

impl DatasetEntry {
    fn column_for<'a>(&'a self, role: &'a str) -> &'a str {
        self.columns.get(role).map_or(role, String::as_str)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Catalog {
    pub datasets: BTreeMap<String, BTreeMap<String, DatasetEntry>>,
    /// Directory that relative entry paths resolve against.
    #[serde(skip)]
    pub base_dir: Option<PathBuf>,
}

/// Rows produced by [`load_dataset`], typed by the entry's schema.
#[derive(Debug, Clone, PartialEq)]
pub enum DatasetRows {
    CounterfactualPairs(Vec<(String, String)>),
    Prompts(Vec<String>),
    AnnotatedSentences(Vec<(String, String)>),
}

impl DatasetRows {
    pub fn len(&self) -> usize {
        match self {
            DatasetRows::CounterfactualPairs(r) => r.len(),
            DatasetRows::Prompts(r) => r.len(),
            DatasetRows::AnnotatedSentences(r) => r.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

const REFERENCE_DATASETS: &[(&str, DataSchema)] = &[
    ("BBQ", DataSchema::AnnotatedSentences),
    ("BEC-Pro", DataSchema::AnnotatedSentences),
    ("BOLD", DataSchema::Prompts),
    ("BUG", DataSchema::AnnotatedSentences),
    ("CrowS-Pairs", DataSchema::CounterfactualPairs),
    ("GAP", DataSchema::AnnotatedSentences),
    ("HolisticBias", DataSchema::Prompts),
    ("HONEST", DataSchema::Prompts),
    ("StereoSet", DataSchema::CounterfactualPairs),
    ("UnQover", DataSchema::AnnotatedSentences),
    ("WinoBias+", DataSchema::CounterfactualPairs),
    ("WinoBias", DataSchema::CounterfactualPairs),
    ("WinoGender", DataSchema::AnnotatedSentences),
];

impl Catalog {
    pub fn from_json(text: &str) -> Result<Self> {
        let catalog: Catalog = serde_json::from_str(text)?;
        catalog.validate()?;
        Ok(catalog)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        let mut catalog = Catalog::from_json(&text)?;
        catalog.base_dir = path.parent().map(Path::to_path_buf);
        Ok(catalog)
    }

    /// The standard bias-evaluation benchmarks, laid out as a local clone of
    /// the benchmark repository under `datasets/Fair-LLM-Benchmark/`.
    pub fn reference() -> Self {
        let mut datasets = BTreeMap::new();
        for &(name, schema) in REFERENCE_DATASETS {
            let configs: &[&str] = if name == "BUG" { &["full", "gold"] } else { &["default"] };
            let entries = configs
                .iter()
                .map(|c| {
                    (
                        c.to_string(),
                        DatasetEntry {
                            path: format!("datasets/Fair-LLM-Benchmark/{name}/{c}.csv"),
                            format: DataFormat::Csv,
                            schema,
                            columns: BTreeMap::new(),
                        },
                    )
                })
                .collect();
            datasets.insert(name.to_string(), entries);
        }
        Catalog {
            datasets,
            base_dir: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, configs) in &self.datasets {
            for (config, entry) in configs {
                if entry.path.is_empty() {
                    return Err(Error::invalid(format!(
                        "dataset `{name}` config `{config}` has an empty path"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn entry(&self, name: &str, config: &str) -> Result<&DatasetEntry> {
        let configs = self
            .datasets
            .get(name)
            .ok_or_else(|| Error::UnknownDataset(name.to_string()))?;
        configs.get(config).ok_or_else(|| Error::UnknownConfig {
            dataset: name.to_string(),
            config: config.to_string(),
        })
    }

    fn resolve(&self, path: &str) -> PathBuf {
        match &self.base_dir {
            Some(dir) if Path::new(path).is_relative() => dir.join(path),
            _ => PathBuf::from(path),
        }
    }
}

/// Dataset names when `name` is `None`, otherwise the configs of that dataset.
/// Both listings are sorted.
pub fn list_datasets(catalog: &Catalog, name: Option<&str>) -> Result<Vec<String>> {
    match name {
        None => Ok(catalog.datasets.keys().cloned().collect()),
        Some(n) => catalog
            .datasets
            .get(n)
            .map(|configs| configs.keys().cloned().collect())
            .ok_or_else(|| Error::UnknownDataset(n.to_string())),
    }
}

pub fn load_dataset(catalog: &Catalog, name: &str, config: &str) -> Result<DatasetRows> {
    let entry = catalog.entry(name, config)?;
    let path = catalog.resolve(&entry.path);
    let bytes = std::fs::read(&path).map_err(|e| Error::file(&path, e))?;
    let columns: Vec<&str> = entry.schema.roles().iter().map(|role| entry.column_for(role)).collect();

    let rows = if bytes.iter().all(u8::is_ascii_whitespace) {
        Vec::new()
    } else {
        match entry.format {
            DataFormat::Csv => read_csv_rows(&path, &bytes, &columns)?,
            DataFormat::Ndjson => read_ndjson_rows(&path, &bytes, &columns)?,
        }
    };

    let mut rows = rows.into_iter();
    Ok(match entry.schema {
        DataSchema::CounterfactualPairs => {
            DatasetRows::CounterfactualPairs(rows.by_ref().map(|mut r| (r.remove(0), r.remove(0))).collect())
        }
        DataSchema::Prompts => DatasetRows::Prompts(rows.by_ref().map(|mut r| r.remove(0)).collect()),
        DataSchema::AnnotatedSentences => {
            DatasetRows::AnnotatedSentences(rows.by_ref().map(|mut r| (r.remove(0), r.remove(0))).collect())
        }
    })
}

fn schema_error(path: &Path, row: usize, message: impl Into<String>) -> Error {
    Error::Schema {
        path: path.to_path_buf(),
        row,
        message: message.into(),
    }
}

// Rows are numbered from 1; row 0 is the CSV header.
fn read_csv_rows(path: &Path, bytes: &[u8], columns: &[&str]) -> Result<Vec<Vec<String>>> {
    let mut reader = csv::Reader::from_reader(bytes);
    let headers = reader
        .headers()
        .map_err(|e| schema_error(path, 0, e.to_string()))?
        .clone();
    let indices = columns
        .iter()
        .map(|col| {
            headers
                .iter()
                .position(|h| h == *col)
                .ok_or_else(|| schema_error(path, 0, format!("missing required column `{col}`")))
        })
        .collect::<Result<Vec<_>>>()?;
    reader
        .records()
        .enumerate()
        .map(|(i, rec)| {
            let rec = rec.map_err(|e| schema_error(path, i + 1, e.to_string()))?;
            indices
                .iter()
                .map(|&idx| {
                    rec.get(idx)
                        .map(str::to_string)
                        .ok_or_else(|| schema_error(path, i + 1, "short row"))
                })
                .collect()
        })
        .collect()
}

fn read_ndjson_rows(path: &Path, bytes: &[u8], columns: &[&str]) -> Result<Vec<Vec<String>>> {
    let text = std::str::from_utf8(bytes).map_err(|e| schema_error(path, 0, e.to_string()))?;
    text.lines()
        .enumerate()
        .filter(|(_, line)| !line.trim().is_empty())
        .map(|(i, line)| {
            let value: serde_json::Value =
                serde_json::from_str(line).map_err(|e| schema_error(path, i + 1, e.to_string()))?;
            columns
                .iter()
                .map(|col| match value.get(col) {
                    Some(serde_json::Value::String(s)) => Ok(s.clone()),
                    Some(serde_json::Value::Null) | None => {
                        Err(schema_error(path, i + 1, format!("missing required field `{col}`")))
                    }
                    Some(other) => Ok(other.to_string()),
                })
                .collect()
        })
        .collect()
}
