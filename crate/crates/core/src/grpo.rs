//! Group-relative policy optimization: advantage normalization, the clipped
//! importance-weighted surrogate, the per-sample KL penalty, and the
//! assembled objective with its gradient with respect to each new log-prob.
//!
//! Everything in this module is a pure function over immutable groups; the
//! trainer owns the single-writer parameter update that consumes gradients.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One sampled summary with the log-probs needed by the objective.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RolloutRecord {
    pub summary: String,
    /// log pi_new(s | x)
    pub logp_new: f64,
    /// log pi_old(s | x) — the sampling policy.
    pub logp_old: f64,
    /// log pi_ref(s | x) — the fixed reference policy.
    pub logp_ref: f64,
    pub reward: f64,
    /// Group-normalized advantage; `None` until [`RolloutGroup::fill_advantages`].
    pub advantage: Option<f64>,
}

/// The G rollouts sampled for one input.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RolloutGroup {
    pub input_id: String,
    pub records: Vec<RolloutRecord>,
}

impl RolloutGroup {
    /// Normalizes rewards into advantages in place. Returns whether the
    /// group was degenerate (reward std below the floor, all advantages 0).
    pub fn fill_advantages(&mut self, std_floor: f64) -> Result<bool> {
        let rewards: Vec<f64> = self.records.iter().map(|r| r.reward).collect();
        let advantages = group_advantages(&rewards, std_floor)?;
        let degenerate = advantages.iter().all(|&a| a == 0.0);
        for (rec, a) in self.records.iter_mut().zip(advantages) {
            rec.advantage = Some(a);
        }
        Ok(degenerate)
    }
}

/// Objective hyperparameters.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GrpoConfig {
    /// Rollouts per input (G).
    pub group_size: usize,
    /// Importance-ratio clip width (epsilon).
    pub clip_eps: f64,
    /// KL penalty coefficient (beta).
    pub kl_coeff: f64,
    /// Below this reward std a group is degenerate and contributes no
    /// policy gradient; common early in training when all rollouts tie.
    pub std_floor: f64,
    pub learning_rate: f64,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            group_size: 5,
            clip_eps: 0.2,
            kl_coeff: 0.001,
            std_floor: 1e-6,
            learning_rate: 1e-5,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.group_size < 2 {
            return Err(Error::Validation("group_size must be >= 2".into()));
        }
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return Err(Error::Validation("clip_eps must be in (0, 1)".into()));
        }
        if self.kl_coeff < 0.0 {
            return Err(Error::Validation("kl_coeff must be >= 0".into()));
        }
        if self.std_floor <= 0.0 {
            return Err(Error::Validation("std_floor must be > 0".into()));
        }
        Ok(())
    }
}

/// Standardizes rewards within a group: `A_i = (r_i - mean) / std` with the
/// population (divide-by-G) standard deviation. Groups whose std falls below
/// `std_floor` yield all-zero advantages.
pub fn group_advantages(rewards: &[f64], std_floor: f64) -> Result<Vec<f64>> {
    let g = rewards.len();
    if g < 2 {
        return Err(Error::Validation(format!(
            "advantage normalization needs a group of >= 2 rewards, got {g}"
        )));
    }
    if rewards.iter().any(|r| !r.is_finite()) {
        return Err(Error::Validation("rewards must be finite".into()));
    }
    let mean = rewards.iter().sum::<f64>() / g as f64;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / g as f64;
    let std = var.sqrt();
    if std < std_floor {
        return Ok(vec![0.0; g]);
    }
    Ok(rewards.iter().map(|r| (r - mean) / std).collect())
}

/// `min(ratio * A, clip(ratio, 1-eps, 1+eps) * A)`.
pub fn clipped_surrogate(ratio: f64, advantage: f64, clip_eps: f64) -> Result<f64> {
    if !ratio.is_finite() || ratio <= 0.0 {
        return Err(Error::Validation(format!(
            "importance ratio must be positive and finite, got {ratio} (corrupted log-probs?)"
        )));
    }
    let clipped = ratio.clamp(1.0 - clip_eps, 1.0 + clip_eps);
    Ok((ratio * advantage).min(clipped * advantage))
}

/// Per-sample KL estimator `exp(d) - d - 1` with `d = logp_ref - logp_new`.
/// Nonnegative everywhere; zero exactly when the two log-probs agree.
pub fn kl_penalty(logp_new: f64, logp_ref: f64) -> Result<f64> {
    if !logp_new.is_finite() || !logp_ref.is_finite() {
        return Err(Error::Validation("log-probs must be finite".into()));
    }
    let d = logp_ref - logp_new;
    Ok(d.exp() - d - 1.0)
}

/// Per-record contributions to the assembled objective.
#[derive(Clone, Debug)]
pub struct RecordTerms {
    pub ratio: f64,
    pub surrogate: f64,
    pub kl: f64,
    /// The clipped branch was strictly the minimum; the surrogate gradient
    /// is zero for this record.
    pub clip_active: bool,
    /// d objective / d logp_new for this record, including the 1/G factor.
    pub dobj_dlogp_new: f64,
}

/// The objective value with its decomposition.
#[derive(Clone, Debug)]
pub struct GrpoObjective {
    /// `(1/G) * sum_i [surrogate_i - beta * kl_i]`, the maximized quantity.
    pub objective: f64,
    pub surrogate_sum: f64,
    pub kl_sum: f64,
    pub clip_active: usize,
    pub records: Vec<RecordTerms>,
}

/// Assembles the objective over one group. Advantages must be filled.
///
/// The KL penalty is subtracted per rollout, outside the clipped min. Some
/// implementations fold it inside the min; the two only differ while
/// clipping is active.
pub fn grpo_objective(group: &RolloutGroup, cfg: &GrpoConfig) -> Result<GrpoObjective> {
    cfg.validate()?;
    if group.records.is_empty() {
        return Err(Error::Validation("empty rollout group".into()));
    }
    let g = group.records.len() as f64;
    let mut records = Vec::with_capacity(group.records.len());
    let mut surrogate_sum = 0.0;
    let mut kl_sum = 0.0;
    let mut clip_active_count = 0usize;
    for rec in &group.records {
        let advantage = rec.advantage.ok_or_else(|| {
            Error::State(format!(
                "rollout in group '{}' has no advantage; normalize the group first",
                group.input_id
            ))
        })?;
        let ratio = (rec.logp_new - rec.logp_old).exp();
        let surrogate = clipped_surrogate(ratio, advantage, cfg.clip_eps)?;
        let unclipped = ratio * advantage;
        let clip_active = surrogate < unclipped;
        let kl = kl_penalty(rec.logp_new, rec.logp_ref)?;
        let surrogate_grad = if clip_active { 0.0 } else { ratio * advantage };
        let kl_grad = 1.0 - (rec.logp_ref - rec.logp_new).exp();
        let dobj_dlogp_new = (surrogate_grad - cfg.kl_coeff * kl_grad) / g;
        surrogate_sum += surrogate;
        kl_sum += kl;
        clip_active_count += clip_active as usize;
        records.push(RecordTerms {
            ratio,
            surrogate,
            kl,
            clip_active,
            dobj_dlogp_new,
        });
    }
    Ok(GrpoObjective {
        objective: (surrogate_sum - cfg.kl_coeff * kl_sum) / g,
        surrogate_sum,
        kl_sum,
        clip_active: clip_active_count,
        records,
    })
}
