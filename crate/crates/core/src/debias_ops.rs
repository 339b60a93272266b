//! Input- and representation-level debiasing.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gentext_metrics::tokenize;
use crate::numkit::{dot, ensure_same_dim, norm, top_eigenvectors, EigenOptions, Matrix, Vector};

/// Swappable word pairs, stored lowercase.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CounterfactualLexicon {
    pairs: Vec<(String, String)>,
    swap: HashMap<String, String>,
}

impl CounterfactualLexicon {
    pub fn new<S: AsRef<str>>(pairs: &[(S, S)]) -> Result<Self> {
        let mut swap: HashMap<String, String> = HashMap::new();
        let mut kept = Vec::with_capacity(pairs.len());
        for (a, b) in pairs {
            let a = a.as_ref().to_lowercase();
            let b = b.as_ref().to_lowercase();
            for w in [&a, &b] {
                if tokenize(w) != [w.as_str()] {
                    return Err(Error::invalid(format!(
                        "counterfactual word `{w}` is not a single word token"
                    )));
                }
            }
            if a == b {
                return Err(Error::invalid(format!("pair ({a}, {b}) swaps a word with itself")));
            }
            match (swap.get(&a), swap.get(&b)) {
                (None, None) => {
                    swap.insert(a.clone(), b.clone());
                    swap.insert(b.clone(), a.clone());
                    kept.push((a, b));
                }
                (Some(x), Some(y)) if *x == b && *y == a => {}
                _ => {
                    return Err(Error::invalid(format!(
                        "pair ({a}, {b}) reuses a word from another pair"
                    )))
                }
            }
        }
        Ok(CounterfactualLexicon { pairs: kept, swap })
    }

    pub fn pairs(&self) -> &[(String, String)] {
        &self.pairs
    }

    pub fn counterpart(&self, word: &str) -> Option<&str> {
        self.swap.get(&word.to_lowercase()).map(String::as_str)
    }

    pub fn contains_pair_word(&self, text: &str) -> bool {
        tokenize(text).iter().any(|t| self.swap.contains_key(t))
    }

    /// Swaps every pair word in one pass. A leading capital on the original
    /// word carries over to the replacement; the rest is lowercase.
    pub fn flip(&self, text: &str) -> String {
        let mut out = String::with_capacity(text.len());
        let mut word_start: Option<usize> = None;
        for (i, c) in text.char_indices() {
            if c.is_alphanumeric() {
                word_start.get_or_insert(i);
            } else {
                if let Some(start) = word_start.take() {
                    self.push_word(&text[start..i], &mut out);
                }
                out.push(c);
            }
        }
        if let Some(start) = word_start {
            self.push_word(&text[start..], &mut out);
        }
        out
    }

    fn push_word(&self, word: &str, out: &mut String) {
        match self.swap.get(&word.to_lowercase()) {
            Some(replacement) => {
                if word.chars().next().is_some_and(char::is_uppercase) {
                    let mut chars = replacement.chars();
                    if let Some(first) = chars.next() {
                        out.extend(first.to_uppercase());
                        out.push_str(chars.as_str());
                    }
                } else {
                    out.push_str(replacement);
                }
            }
            None => out.push_str(word),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CdaMode {
    /// Replace each text by its flipped version.
    OneSided,
    /// Keep every original and append the flipped texts that differ.
    TwoSided,
}

pub fn cda_augment<S: AsRef<str>>(texts: &[S], lexicon: &CounterfactualLexicon, mode: CdaMode) -> Vec<String> {
    let flipped = texts.iter().map(|t| lexicon.flip(t.as_ref()));
    match mode {
        CdaMode::OneSided => flipped.collect(),
        CdaMode::TwoSided => {
            let mut out: Vec<String> = texts.iter().map(|t| t.as_ref().to_string()).collect();
            let extra: Vec<String> = texts
                .iter()
                .zip(flipped)
                .filter(|(orig, f)| orig.as_ref() != f)
                .map(|(_, f)| f)
                .collect();
            out.extend(extra);
            out
        }
    }
}

/// Record-level augmentation: flips the string fields named in `columns`
/// (all string fields when `None`) of each JSON object.
pub fn cda_augment_records(
    records: &[serde_json::Map<String, serde_json::Value>],
    lexicon: &CounterfactualLexicon,
    mode: CdaMode,
    columns: Option<&[String]>,
) -> Vec<serde_json::Map<String, serde_json::Value>> {
    let flip_record = |rec: &serde_json::Map<String, serde_json::Value>| {
        let mut out = rec.clone();
        for (key, value) in out.iter_mut() {
            let selected = columns.is_none_or(|cols| cols.iter().any(|c| c == key));
            if let (true, serde_json::Value::String(s)) = (selected, &*value) {
                *value = serde_json::Value::String(lexicon.flip(s));
            }
        }
        out
    };
    match mode {
        CdaMode::OneSided => records.iter().map(flip_record).collect(),
        CdaMode::TwoSided => {
            let mut out = records.to_vec();
            for rec in records {
                let flipped = flip_record(rec);
                if flipped != *rec {
                    out.push(flipped);
                }
            }
            out
        }
    }
}

/// Orthonormal basis of the bias directions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawSubspace")]
pub struct BiasSubspace {
    dim: usize,
    basis: Vec<Vector>,
    explained: Vec<f64>,
}

#[derive(Deserialize)]
struct RawSubspace {
    dim: usize,
    basis: Vec<Vector>,
    explained: Vec<f64>,
}

impl TryFrom<RawSubspace> for BiasSubspace {
    type Error = Error;

    fn try_from(raw: RawSubspace) -> Result<Self> {
        BiasSubspace::new(raw.dim, raw.basis, raw.explained)
    }
}

impl BiasSubspace {
    pub fn new(dim: usize, basis: Vec<Vector>, explained: Vec<f64>) -> Result<Self> {
        if explained.len() != basis.len() {
            return Err(Error::invalid(format!(
                "{} basis vectors but {} explained values",
                basis.len(),
                explained.len()
            )));
        }
        for (i, v) in basis.iter().enumerate() {
            if v.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: v.len(),
                });
            }
            if (norm(v) - 1.0).abs() > 1e-12 {
                return Err(Error::invalid(format!("basis vector {i} is not unit length")));
            }
            for u in &basis[..i] {
                if dot(u, v).abs() > 1e-10 {
                    return Err(Error::invalid("basis vectors are not orthogonal"));
                }
            }
        }
        Ok(BiasSubspace { dim, basis, explained })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn basis(&self) -> &[Vector] {
        &self.basis
    }

    pub fn explained(&self) -> &[f64] {
        &self.explained
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Top principal directions of counterfactual-pair deviations.
///
/// Each pair `(x, y)` contributes `x - μ` and `y - μ` with `μ` the pair mean.
/// The covariance is uncentered and averaged over all deviations.
pub fn fit_bias_subspace<V: AsRef<[f64]>>(pairs: &[(V, V)], n_components: usize) -> Result<BiasSubspace> {
    let Some((first, _)) = pairs.first() else {
        return Err(Error::invalid("at least one embedding pair is required"));
    };
    let dim = first.as_ref().len();
    if n_components == 0 || n_components > dim {
        return Err(Error::invalid(format!(
            "n_components must be in 1..={dim}, got {n_components}"
        )));
    }
    let mut cov = Matrix::zeros(dim, dim);
    for (x, y) in pairs {
        let (x, y) = (x.as_ref(), y.as_ref());
        if x.len() != dim || y.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: if x.len() != dim { x.len() } else { y.len() },
            });
        }
        // x - μ = (x - y)/2 and y - μ = -(x - y)/2 give the same outer product.
        let half: Vec<f64> = x.iter().zip(y).map(|(a, b)| 0.5 * (a - b)).collect();
        for i in 0..dim {
            for j in 0..dim {
                let updated = cov.get(i, j) + 2.0 * half[i] * half[j];
                cov.set(i, j, updated);
            }
        }
    }
    let count = (2 * pairs.len()) as f64;
    cov.data_mut().iter_mut().for_each(|c| *c /= count);
    crate::numkit::ensure_finite(cov.data(), "pair embeddings")?;
    if cov.data().iter().all(|&c| c == 0.0) {
        return Err(Error::Degenerate("all pairs are identical; no bias direction".into()));
    }
    let pairs = top_eigenvectors(&cov, n_components, EigenOptions::default())?;
    let (explained, basis) = pairs.into_iter().unzip();
    BiasSubspace::new(dim, basis, explained)
}

/// Removes the component of `h` that lies in the subspace.
pub fn project_out(h: &[f64], subspace: &BiasSubspace) -> Result<Vec<f64>> {
    if h.len() != subspace.dim {
        return Err(Error::DimensionMismatch {
            expected: subspace.dim,
            got: h.len(),
        });
    }
    let mut out = h.to_vec();
    for v in &subspace.basis {
        ensure_same_dim(&out, v)?;
        let c = dot(h, v);
        for (o, vi) in out.iter_mut().zip(v.iter()) {
            *o -= c * vi;
        }
    }
    Ok(out)
}

/// `true` for every parameter name containing one of `substrings`; those stay trainable.
pub fn select_unfrozen<S: AsRef<str>, T: AsRef<str>>(param_names: &[S], substrings: &[T]) -> Vec<bool> {
    param_names
        .iter()
        .map(|name| substrings.iter().any(|s| name.as_ref().contains(s.as_ref())))
        .collect()
}
