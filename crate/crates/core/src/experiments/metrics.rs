// SPDX-License-Identifier: MIT OR Apache-2.0

use serde::{Deserialize, Serialize};

use crate::datasets::PromptPair;
use crate::error::{Error, Result};
use crate::model::{LogitRows, Model};
use crate::scalar::Scalar;
use crate::tokenizer::{with_leading_space, TokenId};

/// First token of the answer as it would follow a prompt (leading space).
pub fn answer_token<T: Scalar>(model: &Model<T>, answer: &str) -> Result<TokenId> {
    if answer.trim().is_empty() {
        return Err(Error::InvalidArgument("empty answer".into()));
    }
    model
        .encode(&with_leading_space(answer))?
        .first()
        .copied()
        .ok_or_else(|| Error::InvalidArgument(format!("answer {answer:?} tokenizes to nothing")))
}

/// Probability of the answer's first token after `prompt`.
pub fn answer_probability<T: Scalar>(model: &Model<T>, prompt: &str, answer: &str) -> Result<T> {
    let target = answer_token(model, answer)?;
    let tokens = model.encode(prompt)?;
    let out = model.forward_with(&tokens, &[], &[], LogitRows::Last)?;
    Ok(out.next_token_distribution().data()[target as usize])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LogBase {
    #[default]
    Natural,
    Two,
}

pub fn surprisal(p: f64, base: LogBase) -> Result<f64> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::InvalidArgument(format!("surprisal of probability {p}")));
    }
    Ok(match base {
        LogBase::Natural => -p.ln(),
        LogBase::Two => -p.log2(),
    })
}

/// `100·(post − pre)/pre`.
pub fn percent_difference(p_pre: f64, p_post: f64) -> Result<f64> {
    if !(p_pre > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "percent difference against baseline {p_pre}"
        )));
    }
    Ok(100.0 * (p_post - p_pre) / p_pre)
}

/// Mean after dropping values strictly outside `μ ± 2σ` (population σ).
/// Returns the mean and how many values were dropped.
pub fn robust_mean(values: &[f64]) -> Result<(f64, usize)> {
    if values.is_empty() {
        return Err(Error::InvalidArgument("robust mean of no values".into()));
    }
    let n = values.len() as f64;
    let mu = values.iter().sum::<f64>() / n;
    let sigma = (values.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n).sqrt();
    let (lo, hi) = (mu - 2.0 * sigma, mu + 2.0 * sigma);
    let kept: Vec<f64> = values.iter().copied().filter(|&v| v >= lo && v <= hi).collect();
    if kept.is_empty() {
        // only reachable through rounding when σ is ~0
        return Ok((mu, 0));
    }
    Ok((kept.iter().sum::<f64>() / kept.len() as f64, values.len() - kept.len()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HopStats {
    pub mean_probability: f64,
    pub mean_surprisal: f64,
    pub mean_length: f64,
}

/// Per-dataset summary for single- and multi-hop prompts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub model: String,
    pub n_pairs: usize,
    pub single_hop: HopStats,
    pub multi_hop: HopStats,
}

/// Surprisal is averaged per prompt, not taken of the mean probability.
pub fn dataset_stats<T: Scalar>(model: &Model<T>, pairs: &[PromptPair], base: LogBase) -> Result<DatasetStats> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("no prompt pairs".into()));
    }
    let hop = |pick: fn(&PromptPair) -> &str| -> Result<HopStats> {
        let (mut p_sum, mut s_sum, mut len_sum) = (0.0, 0.0, 0usize);
        for pair in pairs {
            let prompt = pick(pair);
            let p = answer_probability(model, prompt, &pair.answer)?.as_f64();
            p_sum += p;
            s_sum += surprisal(p, base)?;
            len_sum += model.encode(prompt)?.len();
        }
        let n = pairs.len() as f64;
        Ok(HopStats {
            mean_probability: p_sum / n,
            mean_surprisal: s_sum / n,
            mean_length: len_sum as f64 / n,
        })
    };
    Ok(DatasetStats {
        model: model.id(),
        n_pairs: pairs.len(),
        single_hop: hop(|p| &p.single_hop)?,
        multi_hop: hop(|p| &p.multi_hop)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn surprisal_examples() {
        assert_eq!(surprisal(1.0, LogBase::Natural).unwrap(), 0.0);
        assert_abs_diff_eq!(
            surprisal((-1.0f64).exp(), LogBase::Natural).unwrap(),
            1.0,
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(surprisal(0.25, LogBase::Two).unwrap(), 2.0, epsilon = 1e-12);
        assert!(surprisal(0.0, LogBase::Natural).is_err());
        assert!(surprisal(1.5, LogBase::Natural).is_err());
    }

    #[test]
    fn percent_difference_examples() {
        assert_eq!(percent_difference(0.3, 0.3).unwrap(), 0.0);
        assert_abs_diff_eq!(percent_difference(0.02, 0.01).unwrap(), -50.0, epsilon = 1e-9);
        // 3.37% after vs 0.84% before
        assert_abs_diff_eq!(percent_difference(0.0084, 0.0337).unwrap(), 301.190476, epsilon = 1e-5);
        assert!(percent_difference(0.0, 0.5).is_err());
    }

    #[test]
    fn robust_mean_examples() {
        assert_eq!(robust_mean(&[5.0]).unwrap(), (5.0, 0));
        assert_eq!(robust_mean(&[2.0, 2.0, 2.0]).unwrap(), (2.0, 0));
        let mut v = vec![1.0; 9];
        v.push(101.0);
        assert_eq!(robust_mean(&v).unwrap(), (1.0, 1));
        assert!(robust_mean(&[]).is_err());
    }

    #[test]
    fn robust_mean_keeps_boundary_values() {
        // μ = 0, σ = 1: both points sit exactly at ±σ, well inside ±2σ
        assert_eq!(robust_mean(&[-1.0, 1.0]).unwrap(), (0.0, 0));
        // four 0s and one 5: μ = 1, σ = 2, 5 = μ + 2σ is kept
        assert_eq!(robust_mean(&[0.0, 0.0, 0.0, 0.0, 5.0]).unwrap(), (1.0, 0));
    }

    proptest! {
        #[test]
        fn percent_difference_sign(pre in 1e-6f64..1.0, post in 0.0f64..1.0) {
            let d = percent_difference(pre, post).unwrap();
            prop_assert_eq!(d > 0.0, post > pre);
            prop_assert_eq!(d < 0.0, post < pre);
            prop_assert_eq!(percent_difference(pre, pre).unwrap(), 0.0);
        }

        #[test]
        fn robust_mean_is_permutation_invariant(
            mut v in proptest::collection::vec(-1e3f64..1e3, 1..40),
            seed in any::<u64>(),
        ) {
            let (a, na) = robust_mean(&v).unwrap();
            let k = (seed as usize) % v.len();
            v.rotate_left(k);
            v.reverse();
            let (b, nb) = robust_mean(&v).unwrap();
            prop_assert_eq!(na, nb);
            prop_assert!((a - b).abs() <= 1e-9 * (1.0 + a.abs()));
        }

        #[test]
        fn robust_mean_without_exclusions_is_plain_mean(v in proptest::collection::vec(-1e3f64..1e3, 1..40)) {
            let (m, excluded) = robust_mean(&v).unwrap();
            if excluded == 0 {
                let plain = v.iter().sum::<f64>() / v.len() as f64;
                prop_assert!((m - plain).abs() <= 1e-9 * (1.0 + plain.abs()));
            }
        }
    }
}
