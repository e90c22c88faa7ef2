//! Answer normalization and rule-based QA rewards.
//!
//! Three signals: binary exact match, token-level F1 over normalized token
//! multisets, and their weighted combination `r = r_em + alpha * r_f1`.
//! All functions here are pure and safe to call from any number of threads.

use std::collections::HashMap;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Unicode punctuation (categories P*).
static PUNCT: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\p{P}+").unwrap());

/// How multiple gold aliases are aggregated by [`combined_reward`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum F1Aggregation {
    /// Best score over all gold aliases.
    #[default]
    Max,
    /// Score against the first gold only.
    First,
}

/// Reward weighting configuration.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardConfig {
    /// Weight of the F1 term. 0 disables it, leaving the pure exact-match
    /// reward used by the EM-only ablation.
    pub alpha: f64,
    pub f1_aggregation: F1Aggregation,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            alpha: 0.3,
            f1_aggregation: F1Aggregation::Max,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.alpha.is_finite() || !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Validation(format!(
                "alpha must be in [0, 1], got {}",
                self.alpha
            )));
        }
        Ok(())
    }
}

/// Per-answer reward decomposition.
///
/// `p_n`, `r_n`, `i_n` are the predicted, gold, and intersecting token counts
/// behind `r_f1`, taken from the gold alias that maximizes F1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub r_em: f64,
    pub r_f1: f64,
    pub p_n: usize,
    pub r_n: usize,
    pub i_n: usize,
    pub combined: f64,
}

/// Normalizes an answer into tokens: Unicode lowercasing, punctuation
/// (categories P*) removed, whitespace split, English articles dropped.
/// Idempotent: normalizing the joined output reproduces the token list.
pub fn normalize_answer(text: &str) -> Vec<String> {
    let lowered = text.to_lowercase();
    let stripped = PUNCT.replace_all(&lowered, "");
    stripped
        .split_whitespace()
        .filter(|t| !matches!(*t, "a" | "an" | "the"))
        .map(str::to_string)
        .collect()
}

fn require_golds(golds: &[String]) -> Result<()> {
    if golds.is_empty() {
        return Err(Error::Validation("gold answer list is empty".into()));
    }
    Ok(())
}

/// Binary exact match: 1 iff the normalized prediction equals some
/// normalized gold alias.
pub fn exact_match(prediction: &str, golds: &[String]) -> Result<f64> {
    require_golds(golds)?;
    let pred = normalize_answer(prediction);
    let hit = golds.iter().any(|g| normalize_answer(g) == pred);
    Ok(if hit { 1.0 } else { 0.0 })
}

/// Size of the multiset intersection of two token bags.
fn bag_intersection(a: &[String], b: &[String]) -> usize {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in a {
        *counts.entry(t.as_str()).or_insert(0) += 1;
    }
    let mut common = 0;
    for t in b {
        if let Some(c) = counts.get_mut(t.as_str()) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    common
}

fn f1_counts(pred: &[String], gold: &[String]) -> (usize, usize, usize, f64) {
    let p_n = pred.len();
    let r_n = gold.len();
    let i_n = bag_intersection(pred, gold);
    // Both empty is a perfect match; the 2i/(p+r) form handles the rest.
    let f1 = if p_n + r_n == 0 {
        1.0
    } else {
        2.0 * i_n as f64 / (p_n + r_n) as f64
    };
    (p_n, r_n, i_n, f1)
}

/// Token-level F1 against the best gold alias.
pub fn token_f1(prediction: &str, golds: &[String]) -> Result<f64> {
    require_golds(golds)?;
    let pred = normalize_answer(prediction);
    let mut best = 0.0f64;
    for g in golds {
        let (_, _, _, f1) = f1_counts(&pred, &normalize_answer(g));
        best = best.max(f1);
    }
    Ok(best)
}

/// Full reward: `combined = r_em + alpha * r_f1`, with the token counts of
/// the F1-maximizing gold. Under [`F1Aggregation::First`] only the first gold
/// is considered for both signals, keeping the breakdown internally
/// consistent (an exact match always implies F1 = 1).
pub fn combined_reward(
    prediction: &str,
    golds: &[String],
    cfg: &RewardConfig,
) -> Result<RewardBreakdown> {
    require_golds(golds)?;
    cfg.validate()?;
    let considered: &[String] = match cfg.f1_aggregation {
        F1Aggregation::Max => golds,
        F1Aggregation::First => &golds[..1],
    };
    let pred = normalize_answer(prediction);
    let r_em = if considered.iter().any(|g| normalize_answer(g) == pred) {
        1.0
    } else {
        0.0
    };
    let mut best: Option<(usize, usize, usize, f64)> = None;
    for g in considered {
        let counts = f1_counts(&pred, &normalize_answer(g));
        if best.is_none() || counts.3 > best.unwrap().3 {
            best = Some(counts);
        }
    }
    let (p_n, r_n, i_n, r_f1) = best.unwrap();
    Ok(RewardBreakdown {
        r_em,
        r_f1,
        p_n,
        r_n,
        i_n,
        combined: r_em + cfg.alpha * r_f1,
    })
}
