//! Value-and-gradient kernels for the debiasing losses and transforms.
//!
//! Every kernel is a pure function. Kernels with vector or matrix outputs
//! expose a backward function that maps an upstream gradient to gradients
//! of every real-valued input.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interchange::AttentionRecord;
use crate::numkit::{
    dot, ensure_distribution, ensure_finite, ensure_same_dim, norm, sigmoid, softmax_in_place, Matrix, Vector,
};

fn ensure_nonnegative(value: f64, name: &str) -> Result<()> {
    if !(value >= 0.0) || !value.is_finite() {
        return Err(Error::invalid(format!(
            "{name} must be finite and nonnegative, got {value}"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlindLoss {
    pub value: f64,
    pub d_task_loss: f64,
    pub d_logit: f64,
}

/// Task loss scaled by `(1 - σ(logit))^γ`, where `σ(logit)` is the predicted
/// probability that the main model gets the example right.
pub fn blind_weighted_loss(task_loss: f64, blind_logit: f64, gamma: f64) -> Result<BlindLoss> {
    ensure_nonnegative(gamma, "gamma")?;
    if !task_loss.is_finite() {
        return Err(Error::NonFinite("task_loss"));
    }
    if blind_logit.is_nan() {
        return Err(Error::NonFinite("blind_logit"));
    }
    // 1 - σ(z) = σ(-z) keeps precision for large z.
    let weight = sigmoid(-blind_logit).powf(gamma);
    Ok(BlindLoss {
        value: weight * task_loss,
        d_task_loss: weight,
        d_logit: -gamma * sigmoid(blind_logit) * weight * task_loss,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairRegularizer {
    pub value: f64,
    /// Gradients with respect to each pair's first and second embedding.
    pub grads: Vec<(Vec<f64>, Vec<f64>)>,
}

/// `strength · Σ ‖a - b‖` over counterfactual embedding pairs.
pub fn embedding_pair_regularizer<V: AsRef<[f64]>>(pairs: &[(V, V)], strength: f64) -> Result<PairRegularizer> {
    ensure_nonnegative(strength, "strength")?;
    let mut value = 0.0;
    let mut grads = Vec::with_capacity(pairs.len());
    for (a, b) in pairs {
        let (a, b) = (a.as_ref(), b.as_ref());
        ensure_same_dim(a, b)?;
        ensure_finite(a, "pair embedding")?;
        ensure_finite(b, "pair embedding")?;
        let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
        let dist = norm(&diff);
        value += dist;
        let ga: Vec<f64> = if dist > 0.0 {
            diff.iter().map(|d| strength * d / dist).collect()
        } else {
            vec![0.0; diff.len()]
        };
        let gb = ga.iter().map(|g| -g).collect();
        grads.push((ga, gb));
    }
    Ok(PairRegularizer {
        value: strength * value,
        grads,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EarLoss {
    pub value: f64,
    /// Gradient with respect to each record's weights, in input order.
    pub grads: Vec<Matrix>,
}

const ATTENTION_ROW_TOL: f64 = 1e-6;

/// Negated attention entropy summed over layers, times `strength`.
///
/// A layer's entropy is the mean over its heads and query rows. Records are
/// grouped by their `layer` field.
pub fn ear_regularizer(attention: &[AttentionRecord], strength: f64) -> Result<EarLoss> {
    ensure_nonnegative(strength, "strength")?;
    if attention.is_empty() {
        return Err(Error::invalid("no attention records"));
    }
    for rec in attention {
        if rec.weights.rows() == 0 {
            return Err(Error::invalid(format!(
                "layer {} head {} has no rows",
                rec.layer, rec.head
            )));
        }
        for i in 0..rec.weights.rows() {
            ensure_distribution(rec.weights.row(i), i, ATTENTION_ROW_TOL)?;
        }
    }
    Ok(ear_unchecked(attention, strength))
}

/// Same formula without the stochasticity check; rows are treated as free
/// nonnegative vectors.
pub(crate) fn ear_unchecked(attention: &[AttentionRecord], strength: f64) -> EarLoss {
    let mut rows_per_layer: BTreeMap<u32, usize> = BTreeMap::new();
    for rec in attention {
        *rows_per_layer.entry(rec.layer).or_insert(0) += rec.weights.rows();
    }
    let mut value = 0.0;
    let mut grads = Vec::with_capacity(attention.len());
    for rec in attention {
        let n = rows_per_layer[&rec.layer] as f64;
        let mut g = Matrix::zeros(rec.weights.rows(), rec.weights.cols());
        for (gi, &p) in g.data_mut().iter_mut().zip(rec.weights.data()) {
            if p > 0.0 {
                value += strength * p * p.ln() / n;
                *gi = strength * (p.ln() + 1.0) / n;
            }
        }
        grads.push(g);
    }
    EarLoss { value, grads }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
        }
    }

    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterGrads {
    pub d_h: Vec<f64>,
    pub d_r: Vec<f64>,
    pub d_down: Matrix,
    pub d_up: Matrix,
}

fn adapter_shapes(h: &[f64], r: &[f64], down: &Matrix, up: &Matrix) -> Result<()> {
    let d = h.len();
    let m = down.rows();
    if r.len() != d || down.cols() != d || up.rows() != d || up.cols() != m {
        return Err(Error::ShapeMismatch(format!(
            "adapter expects down {m}x{d} and up {d}x{m} for hidden size {d}; got h {}, r {}, down {}x{}, up {}x{}",
            h.len(),
            r.len(),
            down.rows(),
            down.cols(),
            up.rows(),
            up.cols()
        )));
    }
    Ok(())
}

/// Bottleneck adapter `up · g(down · h) + r`.
pub fn adapter_forward(h: &[f64], r: &[f64], down: &Matrix, up: &Matrix, activation: Activation) -> Result<Vec<f64>> {
    adapter_shapes(h, r, down, up)?;
    let hidden: Vec<f64> = down.matvec(h)?.into_iter().map(|z| activation.apply(z)).collect();
    let mut out = up.matvec(&hidden)?;
    out.iter_mut().zip(r).for_each(|(o, ri)| *o += ri);
    Ok(out)
}

/// Gradients of `upstream · adapter_forward(..)`.
pub fn adapter_backward(
    h: &[f64],
    r: &[f64],
    down: &Matrix,
    up: &Matrix,
    activation: Activation,
    upstream: &[f64],
) -> Result<AdapterGrads> {
    adapter_shapes(h, r, down, up)?;
    ensure_same_dim(upstream, r)?;
    let z = down.matvec(h)?;
    let a: Vec<f64> = z.iter().map(|&zi| activation.apply(zi)).collect();
    let mut d_up = Matrix::zeros(up.rows(), up.cols());
    for (i, ui) in upstream.iter().enumerate() {
        for (j, aj) in a.iter().enumerate() {
            d_up.set(i, j, ui * aj);
        }
    }
    let d_z: Vec<f64> = up
        .matvec_transposed(upstream)?
        .into_iter()
        .zip(&z)
        .map(|(da, &zi)| da * activation.derivative(zi))
        .collect();
    let mut d_down = Matrix::zeros(down.rows(), down.cols());
    for (i, dz) in d_z.iter().enumerate() {
        for (j, hj) in h.iter().enumerate() {
            d_down.set(i, j, dz * hj);
        }
    }
    Ok(AdapterGrads {
        d_h: down.matvec_transposed(&d_z)?,
        d_r: upstream.to_vec(),
        d_down,
        d_up,
    })
}

/// Gate parameters of the stretched hard-concrete distribution on `(lo, hi)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HardConcreteParams {
    log_alpha: Vector,
    stretch_lo: f64,
    stretch_hi: f64,
}

impl HardConcreteParams {
    pub fn new(log_alpha: Vector, stretch_lo: f64, stretch_hi: f64) -> Result<Self> {
        if !(stretch_lo < 0.0) || !stretch_lo.is_finite() {
            return Err(Error::invalid(format!("stretch_lo must be negative, got {stretch_lo}")));
        }
        if !(stretch_hi > 1.0) || !stretch_hi.is_finite() {
            return Err(Error::invalid(format!("stretch_hi must exceed 1, got {stretch_hi}")));
        }
        Ok(HardConcreteParams {
            log_alpha,
            stretch_lo,
            stretch_hi,
        })
    }

    pub fn log_alpha(&self) -> &[f64] {
        &self.log_alpha
    }

    pub fn stretch_lo(&self) -> f64 {
        self.stretch_lo
    }

    pub fn stretch_hi(&self) -> f64 {
        self.stretch_hi
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct L0Penalty {
    pub value: f64,
    pub d_log_alpha: Vec<f64>,
}

/// Expected number of open gates, `Σ σ(log α - ln(-lo/hi))`.
pub fn hard_concrete_l0(params: &HardConcreteParams) -> L0Penalty {
    let shift = (-params.stretch_lo / params.stretch_hi).ln();
    let mut value = 0.0;
    let d_log_alpha = params
        .log_alpha
        .iter()
        .map(|&la| {
            let s = sigmoid(la - shift);
            value += s;
            s * (1.0 - s)
        })
        .collect();
    L0Penalty { value, d_log_alpha }
}

/// Feature map applied to embeddings before comparing group means.
pub trait Kernel {
    fn apply(&self, x: &[f64]) -> Vec<f64>;
    /// `Jᵀ · upstream` for the Jacobian `J` of `apply` at `x`.
    fn vjp(&self, x: &[f64], upstream: &[f64]) -> Vec<f64>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityKernel;

impl Kernel for IdentityKernel {
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.to_vec()
    }

    fn vjp(&self, _x: &[f64], upstream: &[f64]) -> Vec<f64> {
        upstream.to_vec()
    }
}

/// Elementwise `tanh`.
#[derive(Debug, Clone, Copy, Default)]
pub struct TanhKernel;

impl Kernel for TanhKernel {
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter().map(|v| v.tanh()).collect()
    }

    fn vjp(&self, x: &[f64], upstream: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(upstream)
            .map(|(v, u)| {
                let t = v.tanh();
                u * (1.0 - t * t)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DebiasLoss {
    pub value: f64,
    pub grad_a: Vec<Vec<f64>>,
    pub grad_b: Vec<Vec<f64>>,
}

/// `strength · ‖mean_A φ(x) - mean_B φ(x)‖²`; `φ` defaults to the identity.
pub fn moddiffy_debias_loss<V: AsRef<[f64]>>(
    emb_a: &[V],
    emb_b: &[V],
    kernel: Option<&dyn Kernel>,
    strength: f64,
) -> Result<DebiasLoss> {
    ensure_nonnegative(strength, "strength")?;
    if emb_a.is_empty() || emb_b.is_empty() {
        return Err(Error::invalid("both embedding groups must be nonempty"));
    }
    let kernel = kernel.unwrap_or(&IdentityKernel);
    let dim = emb_a[0].as_ref().len();
    let mut mean_gap: Vec<f64> = Vec::new();
    for (group, sign) in [(emb_a, 1.0), (emb_b, -1.0)] {
        let scale = sign / group.len() as f64;
        for x in group {
            let x = x.as_ref();
            if x.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: x.len(),
                });
            }
            ensure_finite(x, "embedding")?;
            let fx = kernel.apply(x);
            if mean_gap.is_empty() {
                mean_gap = vec![0.0; fx.len()];
            }
            ensure_same_dim(&fx, &mean_gap)?;
            mean_gap.iter_mut().zip(&fx).for_each(|(m, f)| *m += scale * f);
        }
    }
    let value = strength * dot(&mean_gap, &mean_gap);
    let grads = |group: &[V], sign: f64| -> Vec<Vec<f64>> {
        let coeff = sign * 2.0 * strength / group.len() as f64;
        let upstream: Vec<f64> = mean_gap.iter().map(|m| coeff * m).collect();
        group.iter().map(|x| kernel.vjp(x.as_ref(), &upstream)).collect()
    };
    Ok(DebiasLoss {
        value,
        grad_a: grads(emb_a, 1.0),
        grad_b: grads(emb_b, -1.0),
    })
}

/// Frozen base parameters plus one sparse difference `mask ⊙ magnitude`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffParams {
    theta: Vector,
    mask: Vector,
    magnitude: Vector,
}

impl DiffParams {
    pub fn new(theta: Vector, mask: Vector, magnitude: Vector) -> Result<Self> {
        ensure_same_dim(&theta, &mask)?;
        ensure_same_dim(&theta, &magnitude)?;
        if let Some(bad) = mask.iter().find(|&&m| m != 0.0 && m != 1.0) {
            return Err(Error::invalid(format!("mask entries must be 0 or 1, got {bad}")));
        }
        Ok(DiffParams { theta, mask, magnitude })
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn mask(&self) -> &[f64] {
        &self.mask
    }

    pub fn magnitude(&self) -> &[f64] {
        &self.magnitude
    }

    pub fn delta(&self) -> Vec<f64> {
        self.mask
            .iter()
            .zip(self.magnitude.iter())
            .map(|(m, w)| m * w)
            .collect()
    }
}

/// `θ + mask ⊙ magnitude + Σ extra`, stacking differences trained for other attributes.
pub fn compose_diff_params<V: AsRef<[f64]>>(params: &DiffParams, extra_deltas: &[V]) -> Result<Vec<f64>> {
    let mut out: Vec<f64> = params.theta.iter().zip(params.delta()).map(|(t, d)| t + d).collect();
    for delta in extra_deltas {
        let delta = delta.as_ref();
        ensure_same_dim(&out, delta)?;
        out.iter_mut().zip(delta).for_each(|(o, d)| *o += d);
    }
    Ok(out)
}

fn attention_shapes(q: &Matrix, k: &Matrix, v: &Matrix, d_k: f64) -> Result<()> {
    if q.cols() != k.cols() || k.rows() != v.rows() {
        return Err(Error::ShapeMismatch(format!(
            "attention expects Q n×d, K m×d, V m×d_v; got Q {}x{}, K {}x{}, V {}x{}",
            q.rows(),
            q.cols(),
            k.rows(),
            k.cols(),
            v.rows(),
            v.cols()
        )));
    }
    if k.rows() == 0 {
        return Err(Error::ShapeMismatch("attention needs at least one key".into()));
    }
    if !(d_k > 0.0) || !d_k.is_finite() {
        return Err(Error::invalid(format!("d_k must be positive, got {d_k}")));
    }
    ensure_finite(q.data(), "Q")?;
    ensure_finite(k.data(), "K")?;
    ensure_finite(v.data(), "V")?;
    Ok(())
}

fn scores(q: &Matrix, k: &Matrix, d_k: f64) -> Matrix {
    let scale = d_k.sqrt();
    let mut s = Matrix::zeros(q.rows(), k.rows());
    for i in 0..q.rows() {
        for j in 0..k.rows() {
            s.set(i, j, dot(q.row(i), k.row(j)) / scale);
        }
    }
    s
}

/// Plain `softmax(Q·Kᵀ/√d_k)·V`.
pub fn scaled_dot_product_attention(q: &Matrix, k: &Matrix, v: &Matrix, d_k: f64) -> Result<Matrix> {
    attention_shapes(q, k, v, d_k)?;
    let mut p = scores(q, k, d_k);
    for i in 0..p.rows() {
        softmax_in_place(p.row_mut(i));
    }
    p.matmul(v)
}

fn eat_probabilities(q: &Matrix, k: &Matrix, beta: f64, d_k: f64) -> (Matrix, Matrix) {
    let s = scores(q, k, d_k);
    let mut p = s.clone();
    for i in 0..p.rows() {
        let row = p.row_mut(i);
        row.iter_mut().for_each(|x| *x *= beta);
        softmax_in_place(row);
    }
    (s, p)
}

fn ensure_beta(beta: f64) -> Result<()> {
    ensure_nonnegative(beta, "beta")
}

/// Attention with logits scaled by the temperature `beta`: `1` leaves the head
/// unchanged, `0` makes every query attend uniformly.
pub fn eat_attention(q: &Matrix, k: &Matrix, v: &Matrix, beta: f64, d_k: f64) -> Result<Matrix> {
    ensure_beta(beta)?;
    attention_shapes(q, k, v, d_k)?;
    let (_, p) = eat_probabilities(q, k, beta, d_k);
    p.matmul(v)
}

/// Row weights of [`eat_attention`] (one distribution over keys per query).
pub fn eat_attention_weights(q: &Matrix, k: &Matrix, beta: f64, d_k: f64) -> Result<Matrix> {
    ensure_beta(beta)?;
    if q.cols() != k.cols() {
        return Err(Error::ShapeMismatch("Q and K must share their column count".into()));
    }
    attention_shapes(q, k, &Matrix::zeros(k.rows(), 0), d_k)?;
    Ok(eat_probabilities(q, k, beta, d_k).1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EatGrads {
    pub d_q: Matrix,
    pub d_k: Matrix,
    pub d_v: Matrix,
    pub d_beta: f64,
}

/// Gradients of `Σ upstream ⊙ eat_attention(..)`.
pub fn eat_attention_backward(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    beta: f64,
    d_k: f64,
    upstream: &Matrix,
) -> Result<EatGrads> {
    ensure_beta(beta)?;
    attention_shapes(q, k, v, d_k)?;
    if upstream.rows() != q.rows() || upstream.cols() != v.cols() {
        return Err(Error::ShapeMismatch(format!(
            "upstream gradient must be {}x{}, got {}x{}",
            q.rows(),
            v.cols(),
            upstream.rows(),
            upstream.cols()
        )));
    }
    let (s, p) = eat_probabilities(q, k, beta, d_k);
    let d_v = p.transpose().matmul(upstream)?;
    let d_p = upstream.matmul(&v.transpose())?;
    let mut d_s = Matrix::zeros(p.rows(), p.cols());
    let mut d_beta = 0.0;
    for i in 0..p.rows() {
        let centre = dot(p.row(i), d_p.row(i));
        for j in 0..p.cols() {
            let dz = p.get(i, j) * (d_p.get(i, j) - centre);
            d_beta += dz * s.get(i, j);
            d_s.set(i, j, beta * dz);
        }
    }
    let scale = d_k.sqrt();
    let mut d_q = d_s.matmul(k)?;
    d_q.data_mut().iter_mut().for_each(|x| *x /= scale);
    let mut d_key = d_s.transpose().matmul(q)?;
    d_key.data_mut().iter_mut().for_each(|x| *x /= scale);
    Ok(EatGrads {
        d_q,
        d_k: d_key,
        d_v,
        d_beta,
    })
}
