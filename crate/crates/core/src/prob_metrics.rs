//! Probability-based bias metrics over exported log-probabilities.
//!
//! Masked-slot metrics (LPBS, CBS) compare prior-normalized target
//! probabilities across demographic fillers of a template. Pseudo-likelihood
//! metrics (CPS, AUL) score each sentence of a stereotype/anti-stereotype
//! pair, and [`pll_bias_rate`] counts how often the stereotypical one wins.

use std::collections::HashMap;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interchange::{MaskedSlotRecord, PllRecord, Variant};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplateScore {
    pub template_id: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplateScores {
    pub per_template: Vec<TemplateScore>,
    pub mean: f64,
}

fn group_by_template(slots: &[MaskedSlotRecord]) -> Result<IndexMap<&str, Vec<&MaskedSlotRecord>>> {
    let mut groups: IndexMap<&str, Vec<&MaskedSlotRecord>> = IndexMap::new();
    for slot in slots {
        slot.validate()?;
        groups.entry(slot.template_id.as_str()).or_default().push(slot);
    }
    for (template, records) in &groups {
        let mut seen = std::collections::HashSet::new();
        for r in records {
            if !seen.insert(r.group_index) {
                return Err(Error::invalid(format!(
                    "template `{template}` has duplicate group_index {}",
                    r.group_index
                )));
            }
        }
    }
    Ok(groups)
}

fn normalized(slot: &MaskedSlotRecord) -> f64 {
    slot.logp_target - slot.logp_prior
}

fn summarize(per_template: Vec<TemplateScore>) -> Result<TemplateScores> {
    if per_template.is_empty() {
        return Err(Error::invalid("no templates to score"));
    }
    let mean = per_template.iter().map(|t| t.score).sum::<f64>() / per_template.len() as f64;
    Ok(TemplateScores { per_template, mean })
}

/// Log-probability bias score: for each template, the prior-normalized log
/// probability of group 0 minus that of group 1.
pub fn lpbs(slots: &[MaskedSlotRecord]) -> Result<TemplateScores> {
    let groups = group_by_template(slots)?;
    let per_template = groups
        .into_iter()
        .map(|(template, records)| {
            let find = |g: u32| records.iter().find(|r| r.group_index == g);
            match (records.len(), find(0), find(1)) {
                (2, Some(first), Some(second)) => Ok(TemplateScore {
                    template_id: template.to_string(),
                    score: normalized(first) - normalized(second),
                }),
                _ => Err(Error::invalid(format!(
                    "template `{template}` needs exactly two records with group_index 0 and 1, got {}",
                    records.len()
                ))),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    summarize(per_template)
}

/// Categorical bias score: population variance of the prior-normalized log
/// probabilities across a template's groups.
pub fn cbs(slots: &[MaskedSlotRecord]) -> Result<TemplateScores> {
    let groups = group_by_template(slots)?;
    let per_template = groups
        .into_iter()
        .map(|(template, records)| {
            if records.len() < 2 {
                return Err(Error::invalid(format!(
                    "template `{template}` needs at least two groups, got {}",
                    records.len()
                )));
            }
            let ratios: Vec<f64> = records.iter().map(|r| normalized(r)).collect();
            let n = ratios.len() as f64;
            let mean = ratios.iter().sum::<f64>() / n;
            let var = ratios.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
            Ok(TemplateScore {
                template_id: template.to_string(),
                score: var,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    summarize(per_template)
}

/// Sum of log-probabilities over the unmodified tokens.
pub fn cps(record: &PllRecord) -> Result<f64> {
    record.validate()?;
    let mut any = false;
    let mut total = 0.0;
    for (lp, modified) in record.logprobs.iter().zip(&record.modified) {
        if !modified {
            any = true;
            total += lp;
        }
    }
    if !any {
        return Err(Error::invalid(format!(
            "record `{}` has no unmodified tokens",
            record.id
        )));
    }
    Ok(total)
}

/// Mean log-probability over all tokens.
pub fn aul(record: &PllRecord) -> Result<f64> {
    record.validate()?;
    if record.tokens.is_empty() {
        return Err(Error::invalid(format!("record `{}` has no tokens", record.id)));
    }
    Ok(record.logprobs.iter().sum::<f64>() / record.tokens.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PllScorer {
    Cps,
    Aul,
}

impl PllScorer {
    pub fn score(self, record: &PllRecord) -> Result<f64> {
        match self {
            PllScorer::Cps => cps(record),
            PllScorer::Aul => aul(record),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PllScore {
    pub pair_id: String,
    pub score_stereo: f64,
    pub score_anti: f64,
    pub biased: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasRate {
    pub pairs: Vec<PllScore>,
    /// Fraction of pairs where the stereotypical sentence scores strictly
    /// higher; 0.5 is the unbiased reference.
    pub rate: f64,
}

pub fn pll_bias_rate(records: &[PllRecord], scorer: PllScorer) -> Result<BiasRate> {
    let mut pairs: IndexMap<&str, HashMap<Variant, &PllRecord>> = IndexMap::new();
    for r in records {
        let slot = pairs.entry(r.pair_id.as_str()).or_default();
        if slot.insert(r.variant, r).is_some() {
            return Err(Error::invalid(format!(
                "pair `{}` has more than one {:?} record",
                r.pair_id, r.variant
            )));
        }
    }
    if pairs.is_empty() {
        return Err(Error::invalid("no pairs to score"));
    }
    let scored = pairs
        .into_iter()
        .map(|(pair_id, variants)| {
            let (Some(stereo), Some(anti)) = (variants.get(&Variant::Stereo), variants.get(&Variant::Anti)) else {
                return Err(Error::invalid(format!(
                    "pair `{pair_id}` is incomplete: needs one stereo and one anti record"
                )));
            };
            let score_stereo = scorer.score(stereo)?;
            let score_anti = scorer.score(anti)?;
            Ok(PllScore {
                pair_id: pair_id.to_string(),
                score_stereo,
                score_anti,
                biased: score_stereo > score_anti,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let rate = scored.iter().filter(|p| p.biased).count() as f64 / scored.len() as f64;
    Ok(BiasRate { pairs: scored, rate })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn slot(template: &str, group: u32, target: f64, prior: f64) -> MaskedSlotRecord {
        MaskedSlotRecord {
            template_id: template.into(),
            target_word: format!("w{group}"),
            group_index: group,
            logp_target: target,
            logp_prior: prior,
        }
    }

    fn pll(pair: &str, variant: Variant, logprobs: &[f64], modified: &[bool]) -> PllRecord {
        PllRecord {
            id: format!("{pair}-{variant:?}"),
            pair_id: pair.into(),
            variant,
            tokens: (0..logprobs.len()).map(|i| format!("t{i}")).collect(),
            logprobs: logprobs.to_vec(),
            modified: modified.to_vec(),
        }
    }

    #[test]
    fn lpbs_examples() {
        let slots = [
            slot("t", 0, 0.4f64.ln(), 0.2f64.ln()),
            slot("t", 1, 0.1f64.ln(), 0.2f64.ln()),
        ];
        let s = lpbs(&slots).unwrap();
        assert!((s.mean - 4f64.ln()).abs() < 1e-12);
        assert!((s.mean - 1.3863).abs() < 1e-4);

        let equal = [slot("t", 0, -1.0, -0.5), slot("t", 1, -2.0, -1.5)];
        assert_eq!(lpbs(&equal).unwrap().mean, 0.0);

        let swapped = [
            slot("t", 1, 0.4f64.ln(), 0.2f64.ln()),
            slot("t", 0, 0.1f64.ln(), 0.2f64.ln()),
        ];
        assert!((lpbs(&swapped).unwrap().mean + s.mean).abs() < 1e-15);
    }

    #[test]
    fn lpbs_errors() {
        assert!(lpbs(&[slot("t", 0, -1.0, -1.0)]).is_err());
        assert!(lpbs(&[slot("t", 0, -1.0, -1.0), slot("t", 0, -2.0, -1.0)]).is_err());
        assert!(lpbs(&[
            slot("t", 0, -1.0, -1.0),
            slot("t", 1, -2.0, -1.0),
            slot("t", 2, -2.0, -1.0)
        ])
        .is_err());
    }

    #[test]
    fn cbs_examples() {
        let half = 0.5f64.ln();
        let flat = [
            slot("t", 0, half, 0.0),
            slot("t", 1, half - 1.0, -1.0),
            slot("t", 2, half - 2.0, -2.0),
        ];
        assert!(cbs(&flat).unwrap().mean.abs() < 1e-15);

        let two = [slot("t", 0, -1.0, -1.0), slot("t", 1, -1.0, -3.0)];
        assert_eq!(cbs(&two).unwrap().mean, 1.0);

        let shifted = [slot("t", 0, -3.0, -1.0), slot("t", 1, -3.0, -3.0)];
        assert_eq!(cbs(&shifted).unwrap().mean, 1.0);

        assert!(cbs(&[slot("t", 0, -1.0, -1.0)]).is_err());
    }

    #[test]
    fn cps_and_aul_examples() {
        let r = pll(
            "p",
            Variant::Stereo,
            &[-1.0, -5.0, -2.0, -0.5],
            &[false, true, false, false],
        );
        assert_eq!(cps(&r).unwrap(), -3.5);

        let r = pll("p", Variant::Stereo, &[-1.0, -1.0], &[false, false]);
        assert_eq!(cps(&r).unwrap(), -2.0);

        let r = pll("p", Variant::Stereo, &[-0.3], &[false]);
        assert_eq!(cps(&r).unwrap(), -0.3);

        let r = pll("p", Variant::Stereo, &[-1.0, -2.0], &[true, true]);
        assert!(cps(&r).is_err());

        let r = pll(
            "p",
            Variant::Stereo,
            &[-1.0, -2.0, -3.0, -2.0],
            &[false, true, false, false],
        );
        assert_eq!(aul(&r).unwrap(), -2.0);
        assert_eq!(aul(&pll("p", Variant::Anti, &[-0.7], &[true])).unwrap(), -0.7);
        assert_eq!(
            aul(&pll("p", Variant::Anti, &[0.0, 0.0], &[false, false])).unwrap(),
            0.0
        );
        assert!(aul(&pll("p", Variant::Anti, &[], &[])).is_err());
    }

    #[test]
    fn bias_rate_examples() {
        let stereo = pll(
            "p",
            Variant::Stereo,
            &[-1.0, -5.0, -2.0, -0.5],
            &[false, true, false, false],
        );
        let anti = pll(
            "p",
            Variant::Anti,
            &[-1.0, -5.0, -2.0, -1.0],
            &[false, true, false, false],
        );
        let out = pll_bias_rate(&[stereo.clone(), anti], PllScorer::Cps).unwrap();
        assert!(out.pairs[0].biased);
        assert_eq!(out.pairs[0].score_stereo, -3.5);
        assert_eq!(out.pairs[0].score_anti, -4.0);
        assert_eq!(out.rate, 1.0);

        let mut twin = stereo.clone();
        twin.variant = Variant::Anti;
        let out = pll_bias_rate(&[stereo, twin], PllScorer::Cps).unwrap();
        assert!(!out.pairs[0].biased);
        assert_eq!(out.rate, 0.0);

        let recs = [
            pll("a", Variant::Stereo, &[-1.0], &[false]),
            pll("a", Variant::Anti, &[-2.0], &[false]),
            pll("b", Variant::Stereo, &[-2.0], &[false]),
            pll("b", Variant::Anti, &[-1.0], &[false]),
        ];
        assert_eq!(pll_bias_rate(&recs, PllScorer::Aul).unwrap().rate, 0.5);
    }

    #[test]
    fn incomplete_pair_rejected() {
        let recs = [pll("a", Variant::Stereo, &[-1.0], &[false])];
        assert!(pll_bias_rate(&recs, PllScorer::Cps).is_err());
        let recs = [
            pll("a", Variant::Stereo, &[-1.0], &[false]),
            pll("a", Variant::Stereo, &[-1.0], &[false]),
        ];
        assert!(pll_bias_rate(&recs, PllScorer::Cps).is_err());
    }
}
