//! Embedding association test: per-word association score, effect size and a
//! one-sided permutation p-value over balanced re-partitions of the two
//! demographic sets.
//!
//! Feeding sentence embeddings instead of word embeddings gives the sentence
//! level variant with no change to the math.

use itertools::Itertools;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interchange::EmbeddingRecord;
use crate::numkit::{cosine, norm};

/// Above this many balanced partitions the test switches to Monte Carlo.
pub const EXHAUSTIVE_LIMIT: u64 = 20_000;

/// The four embedding sets of one association test.
#[derive(Debug, Clone, PartialEq)]
pub struct WeatInputs {
    pub a1: Vec<Vec<f64>>,
    pub a2: Vec<Vec<f64>>,
    pub w1: Vec<Vec<f64>>,
    pub w2: Vec<Vec<f64>>,
}

/// Group labels used to pick the four sets out of embedding records.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupLabels {
    pub a1: String,
    pub a2: String,
    pub w1: String,
    pub w2: String,
}

impl Default for GroupLabels {
    fn default() -> Self {
        GroupLabels {
            a1: "A1".into(),
            a2: "A2".into(),
            w1: "W1".into(),
            w2: "W2".into(),
        }
    }
}

impl WeatInputs {
    pub fn new(a1: Vec<Vec<f64>>, a2: Vec<Vec<f64>>, w1: Vec<Vec<f64>>, w2: Vec<Vec<f64>>) -> Result<Self> {
        let inputs = WeatInputs { a1, a2, w1, w2 };
        inputs.validate()?;
        Ok(inputs)
    }

    pub fn from_records(records: &[EmbeddingRecord], labels: &GroupLabels) -> Result<Self> {
        let pick = |label: &str| -> Vec<Vec<f64>> {
            records
                .iter()
                .filter(|r| r.group == label)
                .map(|r| r.vector.to_vec())
                .collect()
        };
        WeatInputs::new(pick(&labels.a1), pick(&labels.a2), pick(&labels.w1), pick(&labels.w2))
    }

    fn validate(&self) -> Result<()> {
        let sets = [("A1", &self.a1), ("A2", &self.a2), ("W1", &self.w1), ("W2", &self.w2)];
        let dim = self.a1.first().map(Vec::len).unwrap_or(0);
        for (name, set) in sets {
            if set.is_empty() {
                return Err(Error::invalid(format!("group {name} is empty")));
            }
            for v in set {
                if v.len() != dim {
                    return Err(Error::DimensionMismatch {
                        expected: dim,
                        got: v.len(),
                    });
                }
                if v.iter().any(|x| !x.is_finite()) {
                    return Err(Error::NonFinite("embedding"));
                }
                if norm(v) == 0.0 {
                    return Err(Error::ZeroNorm);
                }
            }
        }
        Ok(())
    }

    /// Association scores of every vector in A1 followed by every vector in A2.
    fn scores(&self) -> Result<Vec<f64>> {
        self.a1
            .iter()
            .chain(&self.a2)
            .map(|a| association_score(a, &self.w1, &self.w2))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeatResult {
    pub effect_size: f64,
    pub p_value: Option<f64>,
    pub n_permutations_used: Option<u64>,
    pub exact: Option<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PermutationOutcome {
    pub p_value: f64,
    pub exact: bool,
    pub n_used: u64,
}

/// How [`permutation_test`] explores the re-partitions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PermutationMode {
    /// Exhaustive up to [`EXHAUSTIVE_LIMIT`] partitions, Monte Carlo beyond.
    #[default]
    Auto,
    Exhaustive,
    MonteCarlo,
}

/// Mean cosine to `w1` minus mean cosine to `w2`.
pub fn association_score<V: AsRef<[f64]>>(a: &[f64], w1: &[V], w2: &[V]) -> Result<f64> {
    if w1.is_empty() || w2.is_empty() {
        return Err(Error::invalid("attribute sets must be nonempty"));
    }
    let mean_cos = |set: &[V]| -> Result<f64> {
        let total = set.iter().map(|w| cosine(a, w.as_ref())).sum::<Result<f64>>()?;
        Ok(total / set.len() as f64)
    };
    Ok(mean_cos(w1)? - mean_cos(w2)?)
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn population_std(xs: &[f64]) -> f64 {
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64).sqrt()
}

/// Difference of mean association between A1 and A2, divided by the
/// population standard deviation of the association over A1 ∪ A2.
pub fn weat_effect_size(inputs: &WeatInputs) -> Result<f64> {
    inputs.validate()?;
    let scores = inputs.scores()?;
    let (s1, s2) = scores.split_at(inputs.a1.len());
    let std = population_std(&scores);
    if std == 0.0 {
        return Err(Error::Degenerate(
            "all association scores are equal; effect size undefined".into(),
        ));
    }
    Ok((mean(s1) - mean(s2)) / std)
}

/// Number of ways to split `2n` items into two labelled halves, saturating
/// just above `limit`.
fn balanced_partitions(n: usize, limit: u64) -> u64 {
    // C(2n, n) built incrementally; every prefix product is itself a binomial.
    let mut c: u128 = 1;
    for i in 0..n as u128 {
        c = c * (2 * n as u128 - i) / (i + 1);
        if c > limit as u128 {
            return limit + 1;
        }
    }
    c as u64
}

/// One-sided permutation p-value with automatic exhaustive/Monte Carlo choice.
pub fn weat_permutation_pvalue(inputs: &WeatInputs, n_perm: u64, seed: u64) -> Result<PermutationOutcome> {
    permutation_test(inputs, n_perm, seed, PermutationMode::Auto)
}

/// Test statistic: mean association over A1 minus mean over A2. Only balanced
/// re-partitions of A1 ∪ A2 are considered, which makes the statistic a
/// monotone function of the A1 score sum; comparisons are done on that sum.
pub fn permutation_test(
    inputs: &WeatInputs,
    n_perm: u64,
    seed: u64,
    mode: PermutationMode,
) -> Result<PermutationOutcome> {
    inputs.validate()?;
    let n = inputs.a1.len();
    if inputs.a2.len() != n {
        return Err(Error::invalid(format!(
            "permutation test needs balanced groups, got |A1|={} and |A2|={}",
            n,
            inputs.a2.len()
        )));
    }
    if n_perm == 0 {
        return Err(Error::invalid("n_perm must be at least 1"));
    }
    let scores = inputs.scores()?;
    let observed: f64 = scores[..n].iter().sum();
    // Re-summing the same multiset in another order can move the last bits.
    let tie_tol = 1e-12 * scores.iter().map(|s| s.abs()).sum::<f64>();
    let at_least_observed = |sum: f64| sum >= observed - tie_tol;

    let total = balanced_partitions(n, EXHAUSTIVE_LIMIT);
    let exhaustive = match mode {
        PermutationMode::Auto => total <= EXHAUSTIVE_LIMIT,
        PermutationMode::Exhaustive => true,
        PermutationMode::MonteCarlo => false,
    };

    if exhaustive {
        let mut count = 0u64;
        let mut seen = 0u64;
        for subset in (0..2 * n).combinations(n) {
            seen += 1;
            let sum: f64 = subset.iter().map(|&i| scores[i]).sum();
            if at_least_observed(sum) {
                count += 1;
            }
        }
        Ok(PermutationOutcome {
            p_value: count as f64 / seen as f64,
            exact: true,
            n_used: seen,
        })
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..2 * n).collect();
        let mut count = 0u64;
        for _ in 0..n_perm {
            order.shuffle(&mut rng);
            let sum: f64 = order[..n].iter().map(|&i| scores[i]).sum();
            if at_least_observed(sum) {
                count += 1;
            }
        }
        Ok(PermutationOutcome {
            p_value: (1 + count) as f64 / (1 + n_perm) as f64,
            exact: false,
            n_used: n_perm,
        })
    }
}

/// Effect size plus, when `permutations` is `Some((n_perm, seed))`, the
/// permutation p-value.
pub fn weat(inputs: &WeatInputs, permutations: Option<(u64, u64)>) -> Result<WeatResult> {
    let effect_size = weat_effect_size(inputs)?;
    let mut result = WeatResult {
        effect_size,
        p_value: None,
        n_permutations_used: None,
        exact: None,
    };
    if let Some((n_perm, seed)) = permutations {
        let outcome = weat_permutation_pvalue(inputs, n_perm, seed)?;
        result.p_value = Some(outcome.p_value);
        result.n_permutations_used = Some(outcome.n_used);
        result.exact = Some(outcome.exact);
    }
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_fixture() -> WeatInputs {
        WeatInputs::new(
            vec![vec![1.0, 0.0]],
            vec![vec![0.0, 1.0]],
            vec![vec![1.0, 0.0]],
            vec![vec![0.0, 1.0]],
        )
        .unwrap()
    }

    #[test]
    fn association_examples() {
        let w1 = [vec![1.0, 0.0]];
        let w2 = [vec![0.0, 1.0]];
        assert_eq!(association_score(&[1.0, 0.0], &w1, &w2).unwrap(), 1.0);
        assert_eq!(association_score(&[0.0, 1.0], &w1, &w2).unwrap(), -1.0);
        let same = [vec![0.3, 0.7], vec![-1.0, 2.0]];
        assert_eq!(association_score(&[0.5, 0.5], &same, &same).unwrap(), 0.0);
        assert!(matches!(association_score(&[0.0, 0.0], &w1, &w2), Err(Error::ZeroNorm)));
    }

    #[test]
    fn effect_size_examples() {
        let inputs = unit_fixture();
        assert!((weat_effect_size(&inputs).unwrap() - 2.0).abs() < 1e-12);

        let set = vec![vec![1.0, 0.2], vec![0.1, 1.0], vec![0.5, 0.5]];
        let identical = WeatInputs::new(set.clone(), set, vec![vec![1.0, 0.0]], vec![vec![0.0, 1.0]]).unwrap();
        assert_eq!(weat_effect_size(&identical).unwrap(), 0.0);

        let swapped = WeatInputs::new(
            inputs.a2.clone(),
            inputs.a1.clone(),
            inputs.w1.clone(),
            inputs.w2.clone(),
        )
        .unwrap();
        assert!((weat_effect_size(&swapped).unwrap() + 2.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_statistic() {
        let inputs = WeatInputs::new(
            vec![vec![1.0, 1.0]],
            vec![vec![1.0, 1.0]],
            vec![vec![1.0, 0.0]],
            vec![vec![0.0, 1.0]],
        )
        .unwrap();
        assert!(matches!(weat_effect_size(&inputs), Err(Error::Degenerate(_))));
    }

    #[test]
    fn pvalue_examples() {
        let out = weat_permutation_pvalue(&unit_fixture(), 1000, 7).unwrap();
        assert_eq!(out.p_value, 0.5);
        assert!(out.exact);
        assert_eq!(out.n_used, 2);

        // Every target vector equal, so every partition ties.
        let set = vec![vec![1.0, 0.2], vec![1.0, 0.2]];
        let identical = WeatInputs::new(set.clone(), set, vec![vec![1.0, 0.0]], vec![vec![0.0, 1.0]]).unwrap();
        let out = weat_permutation_pvalue(&identical, 1000, 7).unwrap();
        assert_eq!(out.p_value, 1.0);
        assert!(out.exact);

        // Equal multisets with distinct members: the {x, x} split beats the observed one.
        let set = vec![vec![1.0, 0.2], vec![0.1, 1.0]];
        let mirrored = WeatInputs::new(set.clone(), set, vec![vec![1.0, 0.0]], vec![vec![0.0, 1.0]]).unwrap();
        let out = weat_permutation_pvalue(&mirrored, 1000, 7).unwrap();
        assert!((out.p_value - 5.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn unbalanced_groups_rejected() {
        let inputs = WeatInputs::new(
            vec![vec![1.0, 0.0], vec![1.0, 0.5]],
            vec![vec![0.0, 1.0]],
            vec![vec![1.0, 0.0]],
            vec![vec![0.0, 1.0]],
        )
        .unwrap();
        assert!(weat_permutation_pvalue(&inputs, 100, 0).is_err());
    }

    #[test]
    fn partition_counts() {
        assert_eq!(balanced_partitions(1, EXHAUSTIVE_LIMIT), 2);
        assert_eq!(balanced_partitions(3, EXHAUSTIVE_LIMIT), 20);
        assert_eq!(balanced_partitions(8, EXHAUSTIVE_LIMIT), 12_870);
        assert_eq!(balanced_partitions(9, EXHAUSTIVE_LIMIT), EXHAUSTIVE_LIMIT + 1);
        assert_eq!(balanced_partitions(200, EXHAUSTIVE_LIMIT), EXHAUSTIVE_LIMIT + 1);
    }

    #[test]
    fn monte_carlo_is_seeded() {
        let inputs = unit_fixture();
        let a = permutation_test(&inputs, 500, 42, PermutationMode::MonteCarlo).unwrap();
        let b = permutation_test(&inputs, 500, 42, PermutationMode::MonteCarlo).unwrap();
        assert_eq!(a, b);
        assert!(!a.exact);
        assert!(a.p_value > 0.0 && a.p_value <= 1.0);
    }

    #[test]
    fn missing_group_rejected() {
        let records = vec![EmbeddingRecord {
            id: "a".into(),
            group: "A1".into(),
            text: "he".into(),
            vector: crate::Vector::new(vec![1.0, 0.0]).unwrap(),
        }];
        assert!(WeatInputs::from_records(&records, &GroupLabels::default()).is_err());
    }
}
