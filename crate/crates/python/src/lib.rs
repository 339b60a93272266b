//! Python bindings for `biasaudit-core`.
//!
//! Records cross the boundary as plain dicts shaped like the NDJSON lines
//! (each with a `"kind"` key) and are validated on the way in.

use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::IntoPyDict;
use serde::Serialize;

use biasaudit_core::cli::{run_audit as core_run_audit, AuditSpec};
use biasaudit_core::debias_ops::{self, CdaMode};
use biasaudit_core::embed_metrics::{self, WeatInputs};
use biasaudit_core::gentext_metrics::{self, DemLexicon};
use biasaudit_core::gradcheck;
use biasaudit_core::interchange::{parse_line, CompletionRecord, MaskedSlotRecord, PllRecord, Record};
use biasaudit_core::loss_kernels::{self, HardConcreteParams};
use biasaudit_core::prob_metrics::{self, PllScorer};
use biasaudit_core::{Error, Matrix, Vector};

create_exception!(biasaudit, BiasAuditError, PyValueError);

fn to_py_err(e: Error) -> PyErr {
    match e {
        Error::File { .. } | Error::Io(_) => PyOSError::new_err(e.to_string()),
        other => BiasAuditError::new_err(other.to_string()),
    }
}

trait OrRaise<T> {
    fn or_raise(self) -> PyResult<T>;
}

impl<T> OrRaise<T> for biasaudit_core::Result<T> {
    fn or_raise(self) -> PyResult<T> {
        self.map_err(to_py_err)
    }
}

fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| BiasAuditError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn json_text(obj: &Bound<'_, PyAny>) -> PyResult<String> {
    obj.py()
        .import("json")?
        .call_method("dumps", (obj,), Some(&[("allow_nan", false)].into_py_dict(obj.py())?))?
        .extract()
}

fn records_from_py(objs: &Bound<'_, PyAny>) -> PyResult<Vec<Record>> {
    let mut out = Vec::new();
    for (i, item) in objs.try_iter()?.enumerate() {
        out.push(parse_line(&json_text(&item?)?, i + 1).or_raise()?);
    }
    Ok(out)
}

fn of_kind<T>(records: Vec<Record>, kind: &str, pick: impl Fn(Record) -> Option<T>) -> PyResult<Vec<T>> {
    records
        .into_iter()
        .enumerate()
        .map(|(i, r)| {
            let got = r.kind();
            pick(r).ok_or_else(|| BiasAuditError::new_err(format!("record {i} is `{got}`, expected `{kind}`")))
        })
        .collect()
}

fn slots(objs: &Bound<'_, PyAny>) -> PyResult<Vec<MaskedSlotRecord>> {
    of_kind(records_from_py(objs)?, "masked_slot", |r| match r {
        Record::MaskedSlot(s) => Some(s),
        _ => None,
    })
}

fn plls(objs: &Bound<'_, PyAny>) -> PyResult<Vec<PllRecord>> {
    of_kind(records_from_py(objs)?, "pll", |r| match r {
        Record::Pll(p) => Some(p),
        _ => None,
    })
}

fn completions(objs: &Bound<'_, PyAny>) -> PyResult<Vec<CompletionRecord>> {
    of_kind(records_from_py(objs)?, "completion", |r| match r {
        Record::Completion(c) => Some(c),
        _ => None,
    })
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Matrix> {
    Matrix::from_rows(&rows).or_raise()
}

fn parse_mode(mode: &str) -> PyResult<CdaMode> {
    match mode {
        "one-sided" => Ok(CdaMode::OneSided),
        "two-sided" => Ok(CdaMode::TwoSided),
        other => Err(PyValueError::new_err(format!(
            "mode must be `one-sided` or `two-sided`, got `{other}`"
        ))),
    }
}

/// Parse NDJSON text into a list of record dicts.
#[pyfunction]
fn parse_records<'py>(py: Python<'py>, text: &str) -> PyResult<Bound<'py, PyAny>> {
    let records = biasaudit_core::interchange::parse_records(text.as_bytes()).or_raise()?;
    to_py(py, &records)
}

/// Validate record dicts and serialize them as NDJSON text.
#[pyfunction]
fn dump_records(records: &Bound<'_, PyAny>) -> PyResult<String> {
    let records = records_from_py(records)?;
    let mut out = Vec::new();
    biasaudit_core::interchange::write_records(&records, &mut out).or_raise()?;
    String::from_utf8(out).map_err(|e| BiasAuditError::new_err(e.to_string()))
}

#[pyfunction]
fn association_score(a: Vec<f64>, w1: Vec<Vec<f64>>, w2: Vec<Vec<f64>>) -> PyResult<f64> {
    embed_metrics::association_score(&a, &w1, &w2).or_raise()
}

/// Effect size and, when `n_perm` is given, the permutation p-value.
#[pyfunction]
#[pyo3(signature = (a1, a2, w1, w2, n_perm=None, seed=0))]
fn weat<'py>(
    py: Python<'py>,
    a1: Vec<Vec<f64>>,
    a2: Vec<Vec<f64>>,
    w1: Vec<Vec<f64>>,
    w2: Vec<Vec<f64>>,
    n_perm: Option<u64>,
    seed: u64,
) -> PyResult<Bound<'py, PyAny>> {
    let inputs = WeatInputs::new(a1, a2, w1, w2).or_raise()?;
    let result = py
        .detach(|| embed_metrics::weat(&inputs, n_perm.map(|n| (n, seed))))
        .or_raise()?;
    to_py(py, &result)
}

#[pyfunction]
fn lpbs<'py>(py: Python<'py>, records: &Bound<'py, PyAny>) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &prob_metrics::lpbs(&slots(records)?).or_raise()?)
}

#[pyfunction]
fn cbs<'py>(py: Python<'py>, records: &Bound<'py, PyAny>) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &prob_metrics::cbs(&slots(records)?).or_raise()?)
}

fn single_pll(record: &Bound<'_, PyAny>) -> PyResult<PllRecord> {
    let list = pyo3::types::PyList::new(record.py(), [record])?;
    Ok(plls(list.as_any())?.remove(0))
}

#[pyfunction]
fn cps(record: &Bound<'_, PyAny>) -> PyResult<f64> {
    prob_metrics::cps(&single_pll(record)?).or_raise()
}

#[pyfunction]
fn aul(record: &Bound<'_, PyAny>) -> PyResult<f64> {
    prob_metrics::aul(&single_pll(record)?).or_raise()
}

/// Share of pairs whose stereotypical sentence scores higher.
#[pyfunction]
#[pyo3(signature = (records, scorer="cps"))]
fn pll_bias_rate<'py>(py: Python<'py>, records: &Bound<'py, PyAny>, scorer: &str) -> PyResult<Bound<'py, PyAny>> {
    let scorer = match scorer {
        "cps" => PllScorer::Cps,
        "aul" => PllScorer::Aul,
        other => {
            return Err(PyValueError::new_err(format!(
                "scorer must be `cps` or `aul`, got `{other}`"
            )))
        }
    };
    to_py(py, &prob_metrics::pll_bias_rate(&plls(records)?, scorer).or_raise()?)
}

#[pyfunction]
fn dem_rep(texts: Vec<String>, lexicon: BTreeMap<String, Vec<String>>) -> PyResult<BTreeMap<String, u64>> {
    let lexicon = DemLexicon::new(lexicon).or_raise()?;
    Ok(gentext_metrics::dem_rep(&texts, &lexicon))
}

#[pyfunction]
fn stereo_assoc(
    texts: Vec<String>,
    lexicon: BTreeMap<String, Vec<String>>,
    target: &str,
) -> PyResult<BTreeMap<String, u64>> {
    let lexicon = DemLexicon::new(lexicon).or_raise()?;
    Ok(gentext_metrics::stereo_assoc(&texts, &lexicon, target))
}

/// Fraction of completions containing a word from `hurt_lexicon`.
#[pyfunction]
fn honest(records: &Bound<'_, PyAny>, hurt_lexicon: Vec<String>) -> PyResult<f64> {
    gentext_metrics::honest(&completions(records)?, &hurt_lexicon).or_raise()
}

#[pyclass(frozen, module = "biasaudit")]
struct CounterfactualLexicon {
    inner: debias_ops::CounterfactualLexicon,
}

#[pymethods]
impl CounterfactualLexicon {
    #[new]
    fn new(pairs: Vec<(String, String)>) -> PyResult<Self> {
        Ok(CounterfactualLexicon {
            inner: debias_ops::CounterfactualLexicon::new(&pairs).or_raise()?,
        })
    }

    fn pairs(&self) -> Vec<(String, String)> {
        self.inner.pairs().to_vec()
    }

    fn counterpart(&self, word: &str) -> Option<String> {
        self.inner.counterpart(word).map(str::to_string)
    }

    fn flip(&self, text: &str) -> String {
        self.inner.flip(text)
    }

    #[pyo3(signature = (texts, mode="two-sided"))]
    fn augment(&self, texts: Vec<String>, mode: &str) -> PyResult<Vec<String>> {
        Ok(debias_ops::cda_augment(&texts, &self.inner, parse_mode(mode)?))
    }

    fn __repr__(&self) -> String {
        format!("CounterfactualLexicon({} pairs)", self.inner.pairs().len())
    }
}

#[pyclass(frozen, module = "biasaudit")]
struct BiasSubspace {
    inner: debias_ops::BiasSubspace,
}

#[pymethods]
impl BiasSubspace {
    /// Top principal directions of the centred pair differences.
    #[staticmethod]
    fn fit(pairs: Vec<(Vec<f64>, Vec<f64>)>, n_components: usize) -> PyResult<Self> {
        Ok(BiasSubspace {
            inner: debias_ops::fit_bias_subspace(&pairs, n_components).or_raise()?,
        })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(BiasSubspace {
            inner: debias_ops::BiasSubspace::from_json(text).or_raise()?,
        })
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.to_json().or_raise()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn basis(&self) -> Vec<Vec<f64>> {
        self.inner.basis().iter().map(|v| v.to_vec()).collect()
    }

    #[getter]
    fn explained(&self) -> Vec<f64> {
        self.inner.explained().to_vec()
    }

    fn project_out(&self, h: Vec<f64>) -> PyResult<Vec<f64>> {
        debias_ops::project_out(&h, &self.inner).or_raise()
    }

    fn __repr__(&self) -> String {
        format!("BiasSubspace(dim={}, k={})", self.inner.dim(), self.inner.basis().len())
    }
}

/// Returns `(value, d_task_loss, d_logit)`.
#[pyfunction]
fn blind_weighted_loss(task_loss: f64, blind_logit: f64, gamma: f64) -> PyResult<(f64, f64, f64)> {
    let l = loss_kernels::blind_weighted_loss(task_loss, blind_logit, gamma).or_raise()?;
    Ok((l.value, l.d_task_loss, l.d_logit))
}

/// Returns `(value, d_log_alpha)`.
#[pyfunction]
#[pyo3(signature = (log_alpha, stretch_lo=-0.1, stretch_hi=1.1))]
fn hard_concrete_l0(log_alpha: Vec<f64>, stretch_lo: f64, stretch_hi: f64) -> PyResult<(f64, Vec<f64>)> {
    let params = HardConcreteParams::new(Vector::new(log_alpha).or_raise()?, stretch_lo, stretch_hi).or_raise()?;
    let l = loss_kernels::hard_concrete_l0(&params);
    Ok((l.value, l.d_log_alpha))
}

type PairGrads = Vec<(Vec<f64>, Vec<f64>)>;

/// Returns `(value, [(grad_a, grad_b), ...])`.
#[pyfunction]
fn embedding_pair_regularizer(pairs: Vec<(Vec<f64>, Vec<f64>)>, strength: f64) -> PyResult<(f64, PairGrads)> {
    let r = loss_kernels::embedding_pair_regularizer(&pairs, strength).or_raise()?;
    Ok((r.value, r.grads))
}

/// Returns `(value, grads)` with one gradient matrix per attention record.
#[pyfunction]
fn ear_regularizer(records: &Bound<'_, PyAny>, strength: f64) -> PyResult<(f64, Vec<Vec<Vec<f64>>>)> {
    let attention = of_kind(records_from_py(records)?, "attention", |r| match r {
        Record::Attention(a) => Some(a),
        _ => None,
    })?;
    let l = loss_kernels::ear_regularizer(&attention, strength).or_raise()?;
    Ok((l.value, l.grads.iter().map(Matrix::to_rows).collect()))
}

#[pyfunction]
fn eat_attention(q: Vec<Vec<f64>>, k: Vec<Vec<f64>>, v: Vec<Vec<f64>>, beta: f64, d_k: f64) -> PyResult<Vec<Vec<f64>>> {
    let out = loss_kernels::eat_attention(&matrix(q)?, &matrix(k)?, &matrix(v)?, beta, d_k).or_raise()?;
    Ok(out.to_rows())
}

/// Finite-difference check of every loss kernel (or just `kernel`).
#[pyfunction]
#[pyo3(signature = (kernel=None, trials=gradcheck::DEFAULT_TRIALS, seed=0))]
fn grad_check<'py>(py: Python<'py>, kernel: Option<&str>, trials: usize, seed: u64) -> PyResult<Bound<'py, PyAny>> {
    let kernel = kernel.map(str::to_string);
    let reports = py
        .detach(|| gradcheck::run_suite(kernel.as_deref(), trials, seed))
        .or_raise()?;
    to_py(py, &reports)
}

/// Run an audit spec file and return the report as a dict.
#[pyfunction]
#[pyo3(signature = (spec_path, seed=0))]
fn run_audit<'py>(py: Python<'py>, spec_path: PathBuf, seed: u64) -> PyResult<Bound<'py, PyAny>> {
    let spec = AuditSpec::load(&spec_path).or_raise()?;
    let report = py.detach(|| core_run_audit(&spec, seed));
    to_py(py, &report)
}

#[pymodule]
fn biasaudit(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("BiasAuditError", m.py().get_type::<BiasAuditError>())?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<CounterfactualLexicon>()?;
    m.add_class::<BiasSubspace>()?;
    m.add_function(wrap_pyfunction!(parse_records, m)?)?;
    m.add_function(wrap_pyfunction!(dump_records, m)?)?;
    m.add_function(wrap_pyfunction!(association_score, m)?)?;
    m.add_function(wrap_pyfunction!(weat, m)?)?;
    m.add_function(wrap_pyfunction!(lpbs, m)?)?;
    m.add_function(wrap_pyfunction!(cbs, m)?)?;
    m.add_function(wrap_pyfunction!(cps, m)?)?;
    m.add_function(wrap_pyfunction!(aul, m)?)?;
    m.add_function(wrap_pyfunction!(pll_bias_rate, m)?)?;
    m.add_function(wrap_pyfunction!(dem_rep, m)?)?;
    m.add_function(wrap_pyfunction!(stereo_assoc, m)?)?;
    m.add_function(wrap_pyfunction!(honest, m)?)?;
    m.add_function(wrap_pyfunction!(blind_weighted_loss, m)?)?;
    m.add_function(wrap_pyfunction!(hard_concrete_l0, m)?)?;
    m.add_function(wrap_pyfunction!(embedding_pair_regularizer, m)?)?;
    m.add_function(wrap_pyfunction!(ear_regularizer, m)?)?;
    m.add_function(wrap_pyfunction!(eat_attention, m)?)?;
    m.add_function(wrap_pyfunction!(grad_check, m)?)?;
    m.add_function(wrap_pyfunction!(run_audit, m)?)?;
    Ok(())
}
