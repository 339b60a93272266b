use biasaudit_core::numkit::{cosine, entropy_rows, finite_diff_grad, softmax_rows, top_eigenvectors, EigenOptions};
use biasaudit_core::Matrix;
use proptest::prelude::*;

/// Cyclic Jacobi eigenvalue sweep, run until the off-diagonal mass vanishes.
/// Returns (eigenvalue, eigenvector) pairs sorted by descending eigenvalue.
#[allow(clippy::needless_range_loop)]
fn jacobi(m: &Matrix) -> Vec<(f64, Vec<f64>)> {
    let n = m.rows();
    let mut a: Vec<Vec<f64>> = m.to_rows();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| f64::from(u8::from(i == j))).collect())
        .collect();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for row in a.iter_mut() {
                    let (akp, akq) = (row[p], row[q]);
                    row[p] = c * akp - s * akq;
                    row[q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for row in v.iter_mut() {
                    let (vkp, vkq) = (row[p], row[q]);
                    row[p] = c * vkp - s * vkq;
                    row[q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut pairs: Vec<(f64, Vec<f64>)> = (0..n)
        .map(|i| (a[i][i], v.iter().map(|row| row[i]).collect()))
        .collect();
    pairs.sort_by(|x, y| y.0.total_cmp(&x.0));
    pairs
}

fn reconstruct(pairs: &[(f64, Vec<f64>)], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for (lambda, v) in pairs {
        for i in 0..n {
            for j in 0..n {
                out[i * n + j] += lambda * v[i] * v[j];
            }
        }
    }
    out
}

fn psd(n: usize) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(-1.0..1.0f64, n * n).prop_map(move |b| {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                data[i * n + j] = (0..n).map(|k| b[i * n + k] * b[j * n + k]).sum();
            }
        }
        Matrix::new(n, n, data).unwrap()
    })
}

fn vec_pair() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (1usize..8).prop_flat_map(|d| {
        (
            prop::collection::vec(-100.0..100.0f64, d),
            prop::collection::vec(-100.0..100.0f64, d),
        )
    })
}

fn matrix(max_rows: usize, max_cols: usize, range: f64) -> impl Strategy<Value = Matrix> {
    (1..=max_rows, 1..=max_cols).prop_flat_map(move |(r, c)| {
        prop::collection::vec(-range..range, r * c).prop_map(move |d| Matrix::new(r, c, d).unwrap())
    })
}

proptest! {
    #[test]
    fn cosine_is_symmetric((a, b) in vec_pair()) {
        prop_assume!(a.iter().any(|&x| x != 0.0) && b.iter().any(|&x| x != 0.0));
        let ab = cosine(&a, &b).unwrap();
        prop_assert_eq!(ab, cosine(&b, &a).unwrap());
        prop_assert!((-1.0..=1.0).contains(&ab));
    }

    #[test]
    fn softmax_rows_are_distributions(m in matrix(5, 6, 50.0), shift in -100.0..100.0f64) {
        let p = softmax_rows(&m).unwrap();
        for i in 0..p.rows() {
            prop_assert!((p.row(i).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
        let shifted = Matrix::new(m.rows(), m.cols(), m.data().iter().map(|x| x + shift).collect()).unwrap();
        let q = softmax_rows(&shifted).unwrap();
        for (a, b) in p.data().iter().zip(q.data()) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn entropy_rows_is_bounded(m in matrix(5, 6, 5.0)) {
        let p = softmax_rows(&m).unwrap();
        let h = entropy_rows(&p).unwrap();
        prop_assert!(h >= 0.0 && h <= (p.cols() as f64).ln() + 1e-12);
    }

    #[test]
    fn eigen_reconstruction_matches_jacobi(m in psd(8), k in 1usize..=8) {
        let ours = top_eigenvectors(&m, k, EigenOptions::default()).unwrap();
        let ours: Vec<(f64, Vec<f64>)> = ours.into_iter().map(|(l, v)| (l, v.into_inner())).collect();
        let oracle = jacobi(&m);
        // The top-k projector is only well defined with a gap after the k-th value.
        prop_assume!(k == 8 || oracle[k - 1].0 - oracle[k].0 > 1e-3);
        let a = reconstruct(&ours, 8);
        let b = reconstruct(&oracle[..k], 8);
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= 1e-8, "{x} vs {y}");
        }
        for (i, (_, u)) in ours.iter().enumerate() {
            for (j, (_, v)) in ours.iter().enumerate() {
                let d: f64 = u.iter().zip(v).map(|(p, q)| p * q).sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                prop_assert!((d - expect).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn finite_diff_matches_quadratic(x in prop::collection::vec(-10.0..10.0f64, 1..6)) {
        let f = |p: &[f64]| p.iter().enumerate().map(|(i, v)| (i as f64 + 1.0) * v * v).sum::<f64>();
        let g = finite_diff_grad(f, &x, 1e-6).unwrap();
        for (i, (gi, xi)) in g.iter().zip(&x).enumerate() {
            let exact = 2.0 * (i as f64 + 1.0) * xi;
            prop_assert!((gi - exact).abs() / exact.abs().max(1.0) < 1e-6);
        }
    }
}
