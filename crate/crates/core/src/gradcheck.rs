//! Finite-difference checks of the analytic gradients in [`crate::loss_kernels`].
//!
//! Each kernel is reduced to a scalar function of one flat parameter vector;
//! kernels with vector outputs are contracted with a random upstream vector.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::interchange::AttentionRecord;
use crate::loss_kernels::{
    adapter_backward, adapter_forward, blind_weighted_loss, ear_unchecked, eat_attention, eat_attention_backward,
    embedding_pair_regularizer, hard_concrete_l0, moddiffy_debias_loss, Activation, HardConcreteParams, Kernel,
    TanhKernel,
};
use crate::numkit::{dot, finite_diff_grad, Matrix, Vector, DEFAULT_STEP_SCALE};

pub const KERNELS: [&str; 7] = [
    "blind",
    "embedding_pair",
    "ear",
    "adapter",
    "hard_concrete_l0",
    "moddiffy",
    "eat",
];

pub const DEFAULT_TRIALS: usize = 100;

/// Componentwise bound on `|analytic - numeric| / max(1, |analytic|)`.
pub const TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KernelReport {
    pub kernel: String,
    pub trials: usize,
    pub failures: usize,
    pub max_rel_error: f64,
}

impl KernelReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

type Objective = Box<dyn Fn(&[f64]) -> f64>;

/// One random test point: parameters plus the scalar function and its gradient.
struct Case {
    x: Vec<f64>,
    f: Objective,
    grad: Vec<f64>,
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

fn matrix(rows: usize, cols: usize, data: &[f64]) -> Matrix {
    Matrix::new(rows, cols, data.to_vec()).expect("sized by construction")
}

fn blind_case(rng: &mut ChaCha8Rng) -> Case {
    let gamma = rng.random_range(0.0..4.0);
    let x = vec![rng.random_range(0.0..5.0), rng.random_range(-6.0..6.0)];
    let g = blind_weighted_loss(x[0], x[1], gamma).unwrap();
    Case {
        grad: vec![g.d_task_loss, g.d_logit],
        f: Box::new(move |p| blind_weighted_loss(p[0], p[1], gamma).map_or(f64::NAN, |l| l.value)),
        x,
    }
}

fn pairs_from(p: &[f64], n: usize, d: usize) -> Vec<(Vec<f64>, Vec<f64>)> {
    (0..n)
        .map(|i| {
            let base = 2 * i * d;
            (p[base..base + d].to_vec(), p[base + d..base + 2 * d].to_vec())
        })
        .collect()
}

fn embedding_pair_case(rng: &mut ChaCha8Rng) -> Case {
    let n = rng.random_range(1..=4);
    let d = rng.random_range(1..=5);
    let strength = rng.random_range(0.1..3.0);
    let mut x = uniform(rng, 2 * n * d, -2.0, 2.0);
    // Keep pairs apart from the kink at coincidence.
    for i in 0..n {
        x[2 * i * d] += 1.0;
    }
    let r = embedding_pair_regularizer(&pairs_from(&x, n, d), strength).unwrap();
    let grad = r.grads.into_iter().flat_map(|(a, b)| a.into_iter().chain(b)).collect();
    Case {
        f: Box::new(move |p| embedding_pair_regularizer(&pairs_from(p, n, d), strength).map_or(f64::NAN, |r| r.value)),
        grad,
        x,
    }
}

fn ear_records(p: &[f64], shapes: &[(u32, usize, usize)]) -> Vec<AttentionRecord> {
    let mut offset = 0;
    shapes
        .iter()
        .enumerate()
        .map(|(head, &(layer, rows, cols))| {
            let weights = matrix(rows, cols, &p[offset..offset + rows * cols]);
            offset += rows * cols;
            AttentionRecord {
                layer,
                head: head as u32,
                weights,
            }
        })
        .collect()
}

fn ear_case(rng: &mut ChaCha8Rng) -> Case {
    let records = rng.random_range(1..=4);
    let shapes: Vec<(u32, usize, usize)> = (0..records)
        .map(|_| (rng.random_range(0..2), rng.random_range(1..=3), rng.random_range(2..=4)))
        .collect();
    let mut x = Vec::new();
    for &(_, rows, cols) in &shapes {
        for _ in 0..rows {
            let row = uniform(rng, cols, 0.1, 1.0);
            let sum: f64 = row.iter().sum();
            x.extend(row.iter().map(|v| v / sum));
        }
    }
    let strength = rng.random_range(0.1..2.0);
    let grad = ear_unchecked(&ear_records(&x, &shapes), strength)
        .grads
        .iter()
        .flat_map(|g| g.data().to_vec())
        .collect();
    Case {
        f: Box::new(move |p| ear_unchecked(&ear_records(p, &shapes), strength).value),
        grad,
        x,
    }
}

fn adapter_case(rng: &mut ChaCha8Rng) -> Case {
    let d = rng.random_range(1..=4);
    let m = rng.random_range(1..=3);
    let upstream = uniform(rng, d, -1.0, 1.0);
    // Resample until no pre-activation sits near the ReLU kink.
    let x = loop {
        let x = uniform(rng, 2 * d + 2 * m * d, -1.5, 1.5);
        let down = matrix(m, d, &x[2 * d..2 * d + m * d]);
        if down.matvec(&x[..d]).unwrap().iter().all(|z| z.abs() > 1e-3) {
            break x;
        }
    };
    let split = move |p: &[f64]| {
        let h = p[..d].to_vec();
        let r = p[d..2 * d].to_vec();
        let down = matrix(m, d, &p[2 * d..2 * d + m * d]);
        let up = matrix(d, m, &p[2 * d + m * d..]);
        (h, r, down, up)
    };
    let (h, r, down, up) = split(&x);
    let g = adapter_backward(&h, &r, &down, &up, Activation::Relu, &upstream).unwrap();
    let grad = [g.d_h, g.d_r, g.d_down.data().to_vec(), g.d_up.data().to_vec()].concat();
    Case {
        f: Box::new(move |p| {
            let (h, r, down, up) = split(p);
            adapter_forward(&h, &r, &down, &up, Activation::Relu).map_or(f64::NAN, |o| dot(&o, &upstream))
        }),
        grad,
        x,
    }
}

fn hard_concrete_case(rng: &mut ChaCha8Rng) -> Case {
    let n = rng.random_range(1..=6);
    let lo = rng.random_range(-1.0..-0.01);
    let hi = rng.random_range(1.01..2.0);
    let x = uniform(rng, n, -6.0, 6.0);
    let value = move |p: &[f64]| {
        let params = HardConcreteParams::new(Vector::new(p.to_vec()).unwrap(), lo, hi).unwrap();
        hard_concrete_l0(&params)
    };
    let grad = value(&x).d_log_alpha;
    Case {
        f: Box::new(move |p| value(p).value),
        grad,
        x,
    }
}

fn moddiffy_case(rng: &mut ChaCha8Rng) -> Case {
    let na = rng.random_range(1..=3);
    let nb = rng.random_range(1..=3);
    let d = rng.random_range(1..=4);
    let strength = rng.random_range(0.1..2.0);
    let tanh = rng.random_bool(0.5);
    let x = uniform(rng, (na + nb) * d, -2.0, 2.0);
    let eval = move |p: &[f64]| {
        let rows: Vec<Vec<f64>> = p.chunks(d).map(<[f64]>::to_vec).collect();
        let kernel: Option<&dyn Kernel> = if tanh { Some(&TanhKernel) } else { None };
        moddiffy_debias_loss(&rows[..na], &rows[na..], kernel, strength).unwrap()
    };
    let loss = eval(&x);
    let grad = loss.grad_a.into_iter().chain(loss.grad_b).flatten().collect();
    Case {
        f: Box::new(move |p| eval(p).value),
        grad,
        x,
    }
}

fn eat_case(rng: &mut ChaCha8Rng) -> Case {
    let n = rng.random_range(1..=4);
    let m = rng.random_range(1..=4);
    let d = rng.random_range(1..=3);
    let dv = rng.random_range(1..=3);
    let d_k = d as f64;
    let upstream = matrix(n, dv, &uniform(rng, n * dv, -1.0, 1.0));
    let mut x = uniform(rng, n * d + m * d + m * dv, -1.5, 1.5);
    x.push(rng.random_range(0.0..2.0));
    let split = move |p: &[f64]| {
        let q = matrix(n, d, &p[..n * d]);
        let k = matrix(m, d, &p[n * d..n * d + m * d]);
        let v = matrix(m, dv, &p[n * d + m * d..p.len() - 1]);
        (q, k, v, p[p.len() - 1])
    };
    let (q, k, v, beta) = split(&x);
    let g = eat_attention_backward(&q, &k, &v, beta, d_k, &upstream).unwrap();
    let grad = [g.d_q.data(), g.d_k.data(), g.d_v.data(), &[g.d_beta][..]].concat();
    Case {
        f: Box::new(move |p| {
            let (q, k, v, beta) = split(p);
            eat_attention(&q, &k, &v, beta, d_k).map_or(f64::NAN, |o| dot(o.data(), upstream.data()))
        }),
        grad,
        x,
    }
}

fn make_case(kernel: &str, rng: &mut ChaCha8Rng) -> Case {
    match kernel {
        "blind" => blind_case(rng),
        "embedding_pair" => embedding_pair_case(rng),
        "ear" => ear_case(rng),
        "adapter" => adapter_case(rng),
        "hard_concrete_l0" => hard_concrete_case(rng),
        "moddiffy" => moddiffy_case(rng),
        "eat" => eat_case(rng),
        _ => unreachable!("kernel names are validated first"),
    }
}

fn kernel_index(kernel: &str) -> Result<usize> {
    KERNELS.iter().position(|k| *k == kernel).ok_or_else(|| {
        Error::invalid(format!(
            "unknown kernel `{kernel}`; expected one of {}",
            KERNELS.join(", ")
        ))
    })
}

/// Checks one kernel at `trials` random points. The point stream depends
/// only on `seed` and the kernel, so kernels can be checked independently.
pub fn check_kernel(kernel: &str, trials: usize, seed: u64) -> Result<KernelReport> {
    let index = kernel_index(kernel)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let mut failures = 0;
    let mut max_rel_error: f64 = 0.0;
    for _ in 0..trials {
        let case = make_case(kernel, &mut rng);
        let numeric = finite_diff_grad(&case.f, &case.x, DEFAULT_STEP_SCALE)?;
        let worst = case
            .grad
            .iter()
            .zip(&numeric)
            .map(|(a, n)| (a - n).abs() / a.abs().max(1.0))
            .fold(0.0, f64::max);
        let worst = if worst.is_nan() { f64::INFINITY } else { worst };
        max_rel_error = max_rel_error.max(worst);
        if !(worst < TOLERANCE) {
            failures += 1;
        }
    }
    Ok(KernelReport {
        kernel: kernel.to_string(),
        trials,
        failures,
        max_rel_error,
    })
}

/// Runs one named kernel, or all of them in [`KERNELS`] order.
pub fn run_suite(kernel: Option<&str>, trials: usize, seed: u64) -> Result<Vec<KernelReport>> {
    match kernel {
        Some(name) => Ok(vec![check_kernel(name, trials, seed)?]),
        None => KERNELS.iter().map(|k| check_kernel(k, trials, seed)).collect(),
    }
}
