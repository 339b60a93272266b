//! Audit specs, reports, and the file-level commands behind the `biasaudit` binary.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use crate::debias_ops::{
    cda_augment, cda_augment_records, fit_bias_subspace, project_out, BiasSubspace, CdaMode, CounterfactualLexicon,
};
use crate::embed_metrics::{weat, GroupLabels, WeatInputs};
use crate::error::{Error, Result};
use crate::gentext_metrics::{
    dem_rep, honest, normalize_and_distance, stereo_assoc, uniform_reference, CountVector, DemLexicon, Distance,
};
use crate::interchange::{self, read_records_file, write_records, EmbeddingRecord, Record};
use crate::numkit::Vector;
use crate::prob_metrics::{cbs, lpbs, pll_bias_rate, PllScorer};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Permutations drawn when a WEAT request asks for a p-value without `n_perm`.
pub const DEFAULT_N_PERM: u64 = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Weat,
    Lpbs,
    Cbs,
    Cps,
    Aul,
    DemRep,
    StereoAssoc,
    Honest,
}

impl MetricKind {
    pub fn name(self) -> &'static str {
        match self {
            MetricKind::Weat => "weat",
            MetricKind::Lpbs => "lpbs",
            MetricKind::Cbs => "cbs",
            MetricKind::Cps => "cps",
            MetricKind::Aul => "aul",
            MetricKind::DemRep => "dem_rep",
            MetricKind::StereoAssoc => "stereo_assoc",
            MetricKind::Honest => "honest",
        }
    }

    /// Input roles the metric reads, all required.
    pub fn input_roles(self) -> &'static [&'static str] {
        match self {
            MetricKind::Weat => &["embeddings"],
            MetricKind::Lpbs | MetricKind::Cbs => &["slots"],
            MetricKind::Cps | MetricKind::Aul => &["pll"],
            MetricKind::DemRep | MetricKind::StereoAssoc | MetricKind::Honest => &["completions", "lexicon"],
        }
    }

    fn option_names(self) -> &'static [&'static str] {
        match self {
            MetricKind::Weat => &["groups", "n_perm", "permutation"],
            MetricKind::Lpbs | MetricKind::Cbs | MetricKind::Cps | MetricKind::Aul => &[],
            MetricKind::DemRep => &["reference", "distance"],
            MetricKind::StereoAssoc => &["target", "reference", "distance"],
            MetricKind::Honest => &["k"],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRequest {
    pub metric: MetricKind,
    /// Input role to path; relative paths resolve against the spec's directory.
    #[serde(default)]
    pub inputs: BTreeMap<String, String>,
    #[serde(default)]
    pub options: Map<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AuditSpec {
    #[serde(default)]
    pub metrics: Vec<MetricRequest>,
    #[serde(skip)]
    pub base_dir: Option<PathBuf>,
}

impl AuditSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        let mut spec = AuditSpec::from_json(&text)?;
        spec.base_dir = path.parent().map(Path::to_path_buf);
        Ok(spec)
    }

    fn resolve(&self, path: &str) -> PathBuf {
        match &self.base_dir {
            Some(dir) if Path::new(path).is_relative() => dir.join(path),
            _ => PathBuf::from(path),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputDigest {
    pub path: String,
    pub sha256: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Ok,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestResult {
    pub request: usize,
    pub metric: MetricKind,
    pub status: Status,
    pub inputs: BTreeMap<String, InputDigest>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub result: Option<Value>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub tool_version: String,
    pub seed: u64,
    /// Seconds since the epoch, taken from `SOURCE_DATE_EPOCH` when set.
    pub timestamp: Option<u64>,
    pub results: Vec<RequestResult>,
}

impl MetricReport {
    pub fn failed(&self) -> usize {
        self.results.iter().filter(|r| r.status == Status::Error).count()
    }

    /// `true` when there was at least one request and none succeeded.
    pub fn total_failure(&self) -> bool {
        !self.results.is_empty() && self.failed() == self.results.len()
    }
}

fn source_date_epoch() -> Option<u64> {
    std::env::var("SOURCE_DATE_EPOCH").ok()?.trim().parse().ok()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Runs every request in order. A failing request becomes an error entry;
/// the others still run.
pub fn run_audit(spec: &AuditSpec, seed: u64) -> MetricReport {
    let results = spec
        .metrics
        .iter()
        .enumerate()
        .map(|(index, request)| run_request(spec, index, request, seed))
        .collect();
    MetricReport {
        tool_version: TOOL_VERSION.to_string(),
        seed,
        timestamp: source_date_epoch(),
        results,
    }
}

fn run_request(spec: &AuditSpec, index: usize, request: &MetricRequest, seed: u64) -> RequestResult {
    let mut inputs = BTreeMap::new();
    let mut contents = BTreeMap::new();
    for (role, path) in &request.inputs {
        let sha256 = match std::fs::read(spec.resolve(path)) {
            Ok(bytes) => {
                let digest = sha256_hex(&bytes);
                contents.insert(role.clone(), bytes);
                Some(digest)
            }
            Err(_) => None,
        };
        inputs.insert(
            role.clone(),
            InputDigest {
                path: path.clone(),
                sha256,
            },
        );
    }
    let outcome = validate_request(request).and_then(|()| evaluate(spec, request, &contents, seed));
    let (status, result, error) = match outcome {
        Ok(value) => (Status::Ok, Some(value), None),
        Err(e) => (Status::Error, None, Some(e.to_string())),
    };
    RequestResult {
        request: index,
        metric: request.metric,
        status,
        inputs,
        result,
        error,
    }
}

fn validate_request(request: &MetricRequest) -> Result<()> {
    let metric = request.metric;
    for role in metric.input_roles() {
        if !request.inputs.contains_key(*role) {
            return Err(Error::invalid(format!("{} needs input `{role}`", metric.name())));
        }
    }
    if let Some(extra) = request
        .inputs
        .keys()
        .find(|r| !metric.input_roles().contains(&r.as_str()))
    {
        return Err(Error::invalid(format!(
            "{} does not read input `{extra}`",
            metric.name()
        )));
    }
    let mut paths: Vec<&String> = request.inputs.values().collect();
    paths.sort();
    if paths.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::invalid("each input of a request must be a distinct path"));
    }
    if request.options.contains_key("seed") {
        return Err(Error::invalid(
            "per-request seeds are not supported; pass --seed to the audit",
        ));
    }
    if let Some(extra) = request
        .options
        .keys()
        .find(|k| !metric.option_names().contains(&k.as_str()))
    {
        return Err(Error::invalid(format!(
            "unknown option `{extra}` for {}",
            metric.name()
        )));
    }
    Ok(())
}

fn option<T: serde::de::DeserializeOwned>(request: &MetricRequest, name: &str) -> Result<Option<T>> {
    request
        .options
        .get(name)
        .map(|v| serde_json::from_value(v.clone()).map_err(|e| Error::invalid(format!("option `{name}`: {e}"))))
        .transpose()
}

fn records(
    spec: &AuditSpec,
    request: &MetricRequest,
    contents: &BTreeMap<String, Vec<u8>>,
    role: &str,
) -> Result<Vec<Record>> {
    let path = spec.resolve(&request.inputs[role]);
    let bytes = contents.get(role).ok_or_else(|| {
        Error::file(
            &path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "cannot read input"),
        )
    })?;
    interchange::parse_records(bytes.as_slice())
}

fn raw_input<'a>(
    spec: &AuditSpec,
    request: &MetricRequest,
    contents: &'a BTreeMap<String, Vec<u8>>,
    role: &str,
) -> Result<&'a [u8]> {
    let path = spec.resolve(&request.inputs[role]);
    contents.get(role).map(Vec::as_slice).ok_or_else(|| {
        Error::file(
            &path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "cannot read input"),
        )
    })
}

fn evaluate(
    spec: &AuditSpec,
    request: &MetricRequest,
    contents: &BTreeMap<String, Vec<u8>>,
    seed: u64,
) -> Result<Value> {
    let value = match request.metric {
        MetricKind::Weat => {
            let recs = interchange::embeddings(records(spec, request, contents, "embeddings")?)?;
            let labels: GroupLabels = option(request, "groups")?.unwrap_or_default();
            let inputs = WeatInputs::from_records(&recs, &labels)?;
            let permute = option::<bool>(request, "permutation")?.unwrap_or(true);
            let n_perm = option::<u64>(request, "n_perm")?.unwrap_or(DEFAULT_N_PERM);
            serde_json::to_value(weat(&inputs, permute.then_some((n_perm, seed)))?)?
        }
        MetricKind::Lpbs | MetricKind::Cbs => {
            let slots = interchange::masked_slots(records(spec, request, contents, "slots")?)?;
            let scores = if request.metric == MetricKind::Lpbs {
                lpbs(&slots)?
            } else {
                cbs(&slots)?
            };
            serde_json::to_value(scores)?
        }
        MetricKind::Cps | MetricKind::Aul => {
            let plls = interchange::plls(records(spec, request, contents, "pll")?)?;
            let scorer = if request.metric == MetricKind::Cps {
                PllScorer::Cps
            } else {
                PllScorer::Aul
            };
            serde_json::to_value(pll_bias_rate(&plls, scorer)?)?
        }
        MetricKind::DemRep | MetricKind::StereoAssoc => {
            let texts = completion_texts(records(spec, request, contents, "completions")?)?;
            let lexicon: DemLexicon = serde_json::from_slice(raw_input(spec, request, contents, "lexicon")?)?;
            let counts = if request.metric == MetricKind::DemRep {
                dem_rep(&texts, &lexicon)
            } else {
                let target: String =
                    option(request, "target")?.ok_or_else(|| Error::invalid("stereo_assoc needs option `target`"))?;
                stereo_assoc(&texts, &lexicon, &target)
            };
            count_report(request, counts)?
        }
        MetricKind::Honest => {
            let completions = interchange::completions(records(spec, request, contents, "completions")?)?;
            if let Some(k) = option::<usize>(request, "k")? {
                if let Some(bad) = completions.iter().find(|c| c.completions.len() != k) {
                    return Err(Error::invalid(format!(
                        "prompt `{}` has {} completions, option k is {k}",
                        bad.prompt_id,
                        bad.completions.len()
                    )));
                }
            }
            let lexicon = parse_word_list(raw_input(spec, request, contents, "lexicon")?)?;
            json!({ "score": honest(&completions, &lexicon)? })
        }
    };
    Ok(value)
}

fn completion_texts(records: Vec<Record>) -> Result<Vec<String>> {
    Ok(interchange::completions(records)?
        .into_iter()
        .flat_map(|c| c.completions)
        .collect())
}

fn count_report(request: &MetricRequest, counts: CountVector) -> Result<Value> {
    let reference: Option<BTreeMap<String, f64>> = option(request, "reference")?;
    let metric: Option<Distance> = option(request, "distance")?;
    let mut out = json!({ "counts": counts });
    if reference.is_some() || metric.is_some() {
        let reference = reference.unwrap_or_else(|| uniform_reference(&counts));
        let metric = metric.unwrap_or(Distance::Tv);
        out["distance"] = json!({
            "metric": metric,
            "value": normalize_and_distance(&counts, &reference, metric)?,
        });
    }
    Ok(out)
}

/// A JSON array of strings, or one word per line (blank lines and `#` comments skipped).
pub fn parse_word_list(bytes: &[u8]) -> Result<Vec<String>> {
    let text = std::str::from_utf8(bytes).map_err(|e| Error::invalid(format!("word list is not UTF-8: {e}")))?;
    if text.trim_start().starts_with('[') {
        return Ok(serde_json::from_str(text)?);
    }
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_string)
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ReportFormat {
    #[default]
    Json,
    Csv,
    Md,
}

pub const CSV_HEADER: [&str; 6] = ["request", "metric", "status", "quantity", "value", "error"];

struct Row {
    request: usize,
    metric: &'static str,
    status: &'static str,
    quantity: String,
    value: String,
    error: String,
}

fn flatten(prefix: &str, value: &Value, out: &mut Vec<(String, String)>) {
    let join = |key: &str| {
        if prefix.is_empty() {
            key.to_string()
        } else {
            format!("{prefix}.{key}")
        }
    };
    match value {
        Value::Object(map) => map.iter().for_each(|(k, v)| flatten(&join(k), v, out)),
        Value::Array(items) => items
            .iter()
            .enumerate()
            .for_each(|(i, v)| flatten(&join(&i.to_string()), v, out)),
        Value::String(s) => out.push((prefix.to_string(), s.clone())),
        other => out.push((prefix.to_string(), other.to_string())),
    }
}

fn report_rows(report: &MetricReport) -> Vec<Row> {
    let mut rows = Vec::new();
    for r in &report.results {
        let metric = r.metric.name();
        match (&r.result, &r.error) {
            (Some(result), _) => {
                let mut leaves = Vec::new();
                flatten("", result, &mut leaves);
                rows.extend(leaves.into_iter().map(|(quantity, value)| Row {
                    request: r.request,
                    metric,
                    status: "ok",
                    quantity,
                    value,
                    error: String::new(),
                }));
            }
            (None, error) => rows.push(Row {
                request: r.request,
                metric,
                status: "error",
                quantity: String::new(),
                value: String::new(),
                error: error.clone().unwrap_or_default(),
            }),
        }
    }
    rows
}

fn md_cell(text: &str) -> String {
    text.replace('|', "\\|").replace('\n', " ")
}

/// Renders a report. JSON has sorted keys and a trailing newline; CSV and
/// Markdown have one row per scalar in each result.
pub fn render_report(report: &MetricReport, format: ReportFormat) -> Result<Vec<u8>> {
    match format {
        ReportFormat::Json => {
            // `Value` objects are BTreeMap-backed, so keys come out sorted.
            let value = serde_json::to_value(report)?;
            let mut bytes = serde_json::to_vec_pretty(&value)?;
            bytes.push(b'\n');
            Ok(bytes)
        }
        ReportFormat::Csv => {
            let mut writer = csv::Writer::from_writer(Vec::new());
            let csv_err = |e: csv::Error| Error::invalid(format!("csv output: {e}"));
            writer.write_record(CSV_HEADER).map_err(csv_err)?;
            for row in report_rows(report) {
                writer
                    .write_record([
                        row.request.to_string().as_str(),
                        row.metric,
                        row.status,
                        &row.quantity,
                        &row.value,
                        &row.error,
                    ])
                    .map_err(csv_err)?;
            }
            writer
                .into_inner()
                .map_err(|e| Error::invalid(format!("csv output: {e}")))
        }
        ReportFormat::Md => {
            let mut out = String::new();
            let _ = writeln!(out, "| {} |", CSV_HEADER.join(" | "));
            let _ = writeln!(out, "|{}", "---|".repeat(CSV_HEADER.len()));
            for row in report_rows(report) {
                let _ = writeln!(
                    out,
                    "| {} | {} | {} | {} | {} | {} |",
                    row.request,
                    row.metric,
                    row.status,
                    md_cell(&row.quantity),
                    md_cell(&row.value),
                    md_cell(&row.error)
                );
            }
            Ok(out.into_bytes())
        }
    }
}

/// Pairs as a JSON array of two-element arrays, or one pair per line
/// separated by a comma, tab, or spaces.
pub fn parse_pairs(bytes: &[u8]) -> Result<Vec<(String, String)>> {
    let text = std::str::from_utf8(bytes).map_err(|e| Error::invalid(format!("pairs file is not UTF-8: {e}")))?;
    if text.trim_start().starts_with('[') {
        return Ok(serde_json::from_str(text)?);
    }
    let mut pairs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parts: Vec<&str> = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|p| !p.is_empty())
            .collect();
        match parts.as_slice() {
            [a, b] => pairs.push((a.to_string(), b.to_string())),
            _ => {
                return Err(Error::Parse {
                    line: i + 1,
                    message: format!("expected two words, got `{line}`"),
                })
            }
        }
    }
    Ok(pairs)
}

/// Augments a corpus file. `.txt` inputs are one text per line; anything
/// else is NDJSON objects whose string fields (or just `columns`) are flipped.
pub fn augment_file(
    input: &Path,
    lexicon: &CounterfactualLexicon,
    mode: CdaMode,
    columns: Option<&[String]>,
) -> Result<Vec<u8>> {
    let text = std::fs::read_to_string(input).map_err(|e| Error::file(input, e))?;
    let is_plain = input.extension().is_some_and(|e| e == "txt");
    let mut out = Vec::new();
    if is_plain {
        let lines: Vec<&str> = text.lines().collect();
        for line in cda_augment(&lines, lexicon, mode) {
            out.extend_from_slice(line.as_bytes());
            out.push(b'\n');
        }
    } else {
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let obj: Map<String, Value> = serde_json::from_str(line).map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
            records.push(obj);
        }
        for rec in cda_augment_records(&records, lexicon, mode, columns) {
            serde_json::to_writer(&mut out, &rec)?;
            out.push(b'\n');
        }
    }
    Ok(out)
}

/// Pairs embedding records that share an `id`, in order of first appearance.
pub fn pair_embeddings(records: &[EmbeddingRecord]) -> Result<Vec<(Vector, Vector)>> {
    let mut by_id: indexmap::IndexMap<&str, Vec<&EmbeddingRecord>> = indexmap::IndexMap::new();
    for r in records {
        by_id.entry(r.id.as_str()).or_default().push(r);
    }
    by_id
        .into_iter()
        .map(|(id, group)| match group.as_slice() {
            [a, b] => Ok((a.vector.clone(), b.vector.clone())),
            _ => Err(Error::invalid(format!(
                "pair id `{id}` has {} records, expected 2",
                group.len()
            ))),
        })
        .collect()
}

/// Fits a bias subspace on paired embeddings and projects it out of `input`.
pub fn debias_embeddings(
    pair_records: &[EmbeddingRecord],
    components: usize,
    input: Vec<EmbeddingRecord>,
) -> Result<(BiasSubspace, Vec<EmbeddingRecord>)> {
    let pairs = pair_embeddings(pair_records)?;
    let subspace = fit_bias_subspace(&pairs, components)?;
    let projected = input
        .into_iter()
        .map(|mut r| {
            r.vector = Vector::new(project_out(&r.vector, &subspace)?)?;
            Ok(r)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((subspace, projected))
}

pub fn read_embeddings(path: &Path) -> Result<Vec<EmbeddingRecord>> {
    interchange::embeddings(read_records_file(path)?)
}

pub fn write_embeddings(records: Vec<EmbeddingRecord>) -> Result<Vec<u8>> {
    let records: Vec<Record> = records.into_iter().map(Record::Embedding).collect();
    let mut out = Vec::new();
    write_records(&records, &mut out)?;
    Ok(out)
}

/// `true` for errors caused by unreadable or malformed input files.
pub fn is_input_error(e: &Error) -> bool {
    matches!(
        e,
        Error::Parse { .. }
            | Error::Json(_)
            | Error::Schema { .. }
            | Error::File { .. }
            | Error::Io(_)
            | Error::InvalidField { .. }
    )
}
