//! Training orchestration: snapshot the old policy, sample rollout groups,
//! obtain downstream answers, convert answer quality into rewards and
//! normalized advantages, assemble the objective gradient, and update the
//! toy policy — or export scored rollouts for an external trainer.
//!
//! Rollout randomness is derived per (example id, group index, iteration)
//! from the master seed, so runs are reproducible regardless of how the
//! generation fan-out is scheduled, and a resumed run continues exactly as
//! the uninterrupted one would have at iteration granularity.

use std::collections::HashMap;
use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backend::{Backend, GenerationRequest, PromptTemplates, Role};
use crate::corpus::QAExample;
use crate::error::{Error, Result};
use crate::grpo::{grpo_objective, GrpoConfig, RolloutGroup, RolloutRecord};
use crate::metrics::{combined_reward, RewardBreakdown, RewardConfig};
use crate::toypolicy::{
    apply_update, featurize, grad_logp_features, logp_of_features, sample_from_features, Action,
    Featurized, ToyPolicyParams,
};

/// What the KL penalty tethers the policy to.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefPolicySource {
    /// The parameters the run starts from (the warm-start snapshot).
    #[default]
    WarmStartSnapshot,
    /// Pristine zero-weight parameters (the uniform policy).
    InitialParams,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub grpo: GrpoConfig,
    pub reward: RewardConfig,
    pub epochs: usize,
    pub batch_size: usize,
    /// When set, run exactly this many batch iterations (cycling the
    /// dataset) instead of `epochs` full passes.
    pub iterations: Option<usize>,
    /// Policy updates per rollout batch. Above 1 the importance ratios
    /// leave 1 and clipping starts to bind.
    pub inner_updates: usize,
    pub seed: u64,
    pub ref_policy_source: RefPolicySource,
    pub answer_max_tokens: usize,
    pub answer_temperature: f64,
    pub summary_max_tokens: usize,
    pub summary_temperature: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            grpo: GrpoConfig::default(),
            reward: RewardConfig::default(),
            epochs: 2,
            batch_size: 256,
            iterations: None,
            inner_updates: 1,
            seed: 42,
            ref_policy_source: RefPolicySource::WarmStartSnapshot,
            answer_max_tokens: 64,
            answer_temperature: 0.0,
            summary_max_tokens: 256,
            summary_temperature: 0.7,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.grpo.validate()?;
        self.reward.validate()?;
        if self.epochs == 0 {
            return Err(Error::Validation("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Validation("batch_size must be >= 1".into()));
        }
        if self.inner_updates == 0 {
            return Err(Error::Validation("inner_updates must be >= 1".into()));
        }
        Ok(())
    }
}

/// Per-iteration diagnostics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationStats {
    pub iteration: usize,
    pub mean_reward: f64,
    pub mean_em: f64,
    pub mean_f1: f64,
    pub mean_kl: f64,
    pub clip_active_fraction: f64,
    pub degenerate_group_fraction: f64,
}

/// Full-run report. Wall time is informational and excluded from the
/// serialized report so identical runs emit identical files.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TrainReport {
    pub iterations: Vec<IterationStats>,
    #[serde(skip)]
    pub wall_time_ms: u128,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "iteration,mean_reward,mean_em,mean_f1,mean_kl,clip_active_fraction,degenerate_group_fraction\n",
        );
        for s in &self.iterations {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                s.iteration,
                s.mean_reward,
                s.mean_em,
                s.mean_f1,
                s.mean_kl,
                s.clip_active_fraction,
                s.degenerate_group_fraction
            ));
        }
        out
    }

    pub fn final_mean_em(&self) -> Option<f64> {
        self.iterations.last().map(|s| s.mean_em)
    }

    /// First iteration (0-based position in the run) whose mean EM reaches
    /// the threshold.
    pub fn iterations_to_em(&self, threshold: f64) -> Option<usize> {
        self.iterations.iter().position(|s| s.mean_em >= threshold)
    }
}

/// Deterministic per-rollout seed, independent of scheduling order.
/// FNV-1a over (master seed, example id, group index, iteration).
pub fn derive_seed(master: u64, example_id: &str, group_index: u64, iteration: u64) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    fn eat(mut h: u64, bytes: &[u8]) -> u64 {
        for &b in bytes {
            h ^= b as u64;
            h = h.wrapping_mul(PRIME);
        }
        h
    }
    let mut h = OFFSET;
    h = eat(h, &master.to_le_bytes());
    h = eat(h, example_id.as_bytes());
    h = eat(h, &group_index.to_le_bytes());
    h = eat(h, &iteration.to_le_bytes());
    h
}

struct Rollout {
    example_idx: usize,
    actions: Vec<Action>,
    summary: String,
    logp_old: f64,
    breakdown: RewardBreakdown,
}

const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    version: u32,
    iteration: usize,
    params: ToyPolicyParams,
    ref_params: ToyPolicyParams,
    stats: Vec<IterationStats>,
}

/// Stateful GRPO training over the toy policy.
pub struct GrpoTrainer<'a> {
    cfg: TrainConfig,
    dataset: &'a [QAExample],
    answerer: &'a dyn Backend,
    templates: &'a PromptTemplates,
    features: HashMap<String, Featurized>,
    params: ToyPolicyParams,
    ref_params: ToyPolicyParams,
    iteration: usize,
    stats: Vec<IterationStats>,
    wall_time_ms: u128,
}

impl<'a> GrpoTrainer<'a> {
    pub fn new(
        cfg: TrainConfig,
        dataset: &'a [QAExample],
        answerer: &'a dyn Backend,
        templates: &'a PromptTemplates,
        initial_params: ToyPolicyParams,
    ) -> Result<Self> {
        cfg.validate()?;
        initial_params.validate()?;
        if dataset.is_empty() {
            return Err(Error::Validation("training dataset is empty".into()));
        }
        let features = build_feature_cache(dataset)?;
        let ref_params = match cfg.ref_policy_source {
            RefPolicySource::WarmStartSnapshot => initial_params.clone(),
            RefPolicySource::InitialParams => {
                ToyPolicyParams::uniform(initial_params.select_k, initial_params.temperature)
            }
        };
        Ok(Self {
            cfg,
            dataset,
            answerer,
            templates,
            features,
            params: initial_params,
            ref_params,
            iteration: 0,
            stats: Vec::new(),
            wall_time_ms: 0,
        })
    }

    pub fn params(&self) -> &ToyPolicyParams {
        &self.params
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    /// Total iterations this run targets.
    pub fn target_iterations(&self) -> usize {
        match self.cfg.iterations {
            Some(n) => n,
            None => self.cfg.epochs * self.dataset.len().div_ceil(self.cfg.batch_size),
        }
    }

    fn fz(&self, example: &QAExample) -> &Featurized {
        &self.features[&example.id]
    }

    fn batch_indices(&self, iteration: usize) -> Vec<usize> {
        let n = self.dataset.len();
        (0..self.cfg.batch_size)
            .map(|j| (iteration * self.cfg.batch_size + j) % n)
            .collect()
    }

    fn generate_batch(&self, iteration: usize) -> Result<Vec<Rollout>> {
        let indices = self.batch_indices(iteration);
        let g = self.cfg.grpo.group_size;
        let jobs: Vec<(usize, u64)> = indices
            .iter()
            .flat_map(|&idx| (0..g as u64).map(move |gi| (idx, gi)))
            .collect();
        let results: Vec<Result<Rollout>> = jobs
            .par_iter()
            .map(|&(example_idx, group_idx)| {
                let example = &self.dataset[example_idx];
                let seed = derive_seed(self.cfg.seed, &example.id, group_idx, iteration as u64);
                let (summary, actions, logp_old) =
                    sample_from_features(&self.params, self.fz(example), seed)?;
                let prompt =
                    self.templates
                        .render_answerer_prompt(&[], &summary, &example.question);
                let response = self.answerer.generate(&GenerationRequest {
                    role: Role::Answerer,
                    prompt,
                    max_tokens: self.cfg.answer_max_tokens,
                    temperature: self.cfg.answer_temperature,
                    seed: Some(seed),
                })?;
                let breakdown =
                    combined_reward(&response.text, &example.gold_answers, &self.cfg.reward)?;
                Ok(Rollout {
                    example_idx,
                    actions,
                    summary,
                    logp_old,
                    breakdown,
                })
            })
            .collect();
        results.into_iter().collect()
    }

    /// Runs one batch iteration: rollouts under the frozen old policy,
    /// rewards from the answerer, advantages, gradient, update. A failed
    /// batch is retried once before the error propagates.
    pub fn step(&mut self) -> Result<IterationStats> {
        let start = Instant::now();
        let iteration = self.iteration;
        let rollouts = match self.generate_batch(iteration) {
            Ok(r) => r,
            Err(e) => {
                log::warn!("iteration {iteration}: batch failed ({e}); retrying once");
                self.generate_batch(iteration)?
            }
        };
        let g = self.cfg.grpo.group_size;
        let groups: Vec<&[Rollout]> = rollouts.chunks(g).collect();
        let n_groups = groups.len();
        let n_records = rollouts.len();

        // Group-normalized advantages from the rewards.
        let mut advantage_of = vec![0.0; n_records];
        let mut degenerate_groups = 0usize;
        for (gi, group) in groups.iter().enumerate() {
            let rewards: Vec<f64> = group.iter().map(|r| r.breakdown.combined).collect();
            let advs = crate::grpo::group_advantages(&rewards, self.cfg.grpo.std_floor)?;
            if advs.iter().all(|&a| a == 0.0) {
                degenerate_groups += 1;
            }
            for (k, a) in advs.into_iter().enumerate() {
                advantage_of[gi * g + k] = a;
            }
        }

        let logp_ref: Vec<f64> = rollouts
            .iter()
            .map(|r| {
                logp_of_features(
                    &self.ref_params,
                    self.fz(&self.dataset[r.example_idx]),
                    &r.actions,
                )
            })
            .collect::<Result<_>>()?;

        let mut mean_kl = 0.0;
        let mut clip_active_total = 0usize;
        for inner in 0..self.cfg.inner_updates {
            let mut grad = vec![0.0; self.params.weights.len()];
            let mut kl_sum = 0.0;
            for (gi, group) in groups.iter().enumerate() {
                let records: Vec<RolloutRecord> = group
                    .iter()
                    .enumerate()
                    .map(|(k, r)| {
                        let fz = self.fz(&self.dataset[r.example_idx]);
                        Ok(RolloutRecord {
                            summary: r.summary.clone(),
                            logp_new: logp_of_features(&self.params, fz, &r.actions)?,
                            logp_old: r.logp_old,
                            logp_ref: logp_ref[gi * g + k],
                            reward: r.breakdown.combined,
                            advantage: Some(advantage_of[gi * g + k]),
                        })
                    })
                    .collect::<Result<_>>()?;
                let group_obj = grpo_objective(
                    &RolloutGroup {
                        input_id: self.dataset[group[0].example_idx].id.clone(),
                        records,
                    },
                    &self.cfg.grpo,
                )?;
                clip_active_total += group_obj.clip_active;
                if inner == 0 {
                    kl_sum += group_obj.kl_sum;
                }
                for (term, r) in group_obj.records.iter().zip(group.iter()) {
                    if term.dobj_dlogp_new == 0.0 {
                        continue;
                    }
                    let fz = self.fz(&self.dataset[r.example_idx]);
                    let glp = grad_logp_features(&self.params, fz, &r.actions)?;
                    for (acc, dlp) in grad.iter_mut().zip(glp) {
                        *acc += term.dobj_dlogp_new * dlp / n_groups as f64;
                    }
                }
            }
            if inner == 0 {
                mean_kl = kl_sum / n_records as f64;
            }
            self.params = apply_update(&self.params, &grad, self.cfg.grpo.learning_rate)?;
        }

        let n = n_records as f64;
        let stats = IterationStats {
            iteration,
            mean_reward: rollouts.iter().map(|r| r.breakdown.combined).sum::<f64>() / n,
            mean_em: rollouts.iter().map(|r| r.breakdown.r_em).sum::<f64>() / n,
            mean_f1: rollouts.iter().map(|r| r.breakdown.r_f1).sum::<f64>() / n,
            mean_kl,
            clip_active_fraction: clip_active_total as f64
                / (n_records * self.cfg.inner_updates) as f64,
            degenerate_group_fraction: degenerate_groups as f64 / n_groups as f64,
        };
        self.stats.push(stats.clone());
        self.iteration += 1;
        self.wall_time_ms += start.elapsed().as_millis();
        Ok(stats)
    }

    /// Runs to the configured iteration target.
    pub fn run(&mut self) -> Result<()> {
        let target = self.target_iterations();
        while self.iteration < target {
            self.step()?;
        }
        Ok(())
    }

    pub fn finish(self) -> (ToyPolicyParams, TrainReport) {
        (
            self.params,
            TrainReport {
                iterations: self.stats,
                wall_time_ms: self.wall_time_ms,
            },
        )
    }

    pub fn report(&self) -> TrainReport {
        TrainReport {
            iterations: self.stats.clone(),
            wall_time_ms: self.wall_time_ms,
        }
    }

    /// Writes the full training state. Weights round-trip bit-exactly.
    pub fn checkpoint(&self, path: &Path) -> Result<()> {
        let file = CheckpointFile {
            version: CHECKPOINT_VERSION,
            iteration: self.iteration,
            params: self.params.clone(),
            ref_params: self.ref_params.clone(),
            stats: self.stats.clone(),
        };
        let json = serde_json::to_string_pretty(&file)
            .map_err(|e| Error::Integrity(format!("serializing checkpoint: {e}")))?;
        fs::write(path, json)?;
        Ok(())
    }

    /// Restores a checkpointed run. With the same config, dataset, and
    /// backend it continues identically to the uninterrupted run.
    pub fn resume(
        path: &Path,
        cfg: TrainConfig,
        dataset: &'a [QAExample],
        answerer: &'a dyn Backend,
        templates: &'a PromptTemplates,
    ) -> Result<Self> {
        let file = load_checkpoint(path)?;
        let mut trainer = Self::new(cfg, dataset, answerer, templates, file.params)?;
        trainer.ref_params = file.ref_params;
        trainer.iteration = file.iteration;
        trainer.stats = file.stats;
        Ok(trainer)
    }
}

fn load_checkpoint(path: &Path) -> Result<CheckpointFile> {
    let raw = fs::read_to_string(path)?;
    let file: CheckpointFile = serde_json::from_str(&raw)
        .map_err(|e| Error::Integrity(format!("corrupt checkpoint {}: {e}", path.display())))?;
    if file.version != CHECKPOINT_VERSION {
        return Err(Error::Integrity(format!(
            "checkpoint version {} unsupported (expected {CHECKPOINT_VERSION})",
            file.version
        )));
    }
    if file.params.weights.len() != crate::toypolicy::FEATURE_DIM {
        return Err(Error::Integrity(format!(
            "checkpoint has {} weights; the feature map has {}",
            file.params.weights.len(),
            crate::toypolicy::FEATURE_DIM
        )));
    }
    file.params
        .validate()
        .map_err(|e| Error::Integrity(e.to_string()))?;
    Ok(file)
}

/// Reads just the parameters out of a checkpoint.
pub fn resume_params(path: &Path) -> Result<ToyPolicyParams> {
    Ok(load_checkpoint(path)?.params)
}

fn build_feature_cache(dataset: &[QAExample]) -> Result<HashMap<String, Featurized>> {
    dataset
        .iter()
        .map(|ex| Ok((ex.id.clone(), featurize(ex)?)))
        .collect()
}

/// Convenience wrapper: train over the dataset and return the final params
/// and report.
pub fn run_grpo(
    dataset: &[QAExample],
    policy: ToyPolicyParams,
    answerer: &dyn Backend,
    templates: &PromptTemplates,
    cfg: TrainConfig,
) -> Result<(ToyPolicyParams, TrainReport)> {
    let mut trainer = GrpoTrainer::new(cfg, dataset, answerer, templates, policy)?;
    trainer.run()?;
    Ok(trainer.finish())
}

/// One exported rollout line.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExportRecord {
    pub input_id: String,
    pub prompt: String,
    pub summary: String,
    pub reward: RewardBreakdown,
    pub group_index: usize,
    pub advantage: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ExportStats {
    pub groups_written: usize,
    pub groups_dropped: usize,
    pub records_written: usize,
}

/// Samples G summaries per example through the compressor backend, scores
/// them through the answerer, normalizes advantages within each complete
/// group, and writes one JSONL record per rollout. Groups with any failed
/// member are dropped whole: advantage normalization needs complete groups.
pub fn export_rollouts(
    dataset: &[QAExample],
    compressor: &dyn Backend,
    answerer: &dyn Backend,
    templates: &PromptTemplates,
    cfg: &TrainConfig,
    path: &Path,
) -> Result<ExportStats> {
    cfg.validate()?;
    let g = cfg.grpo.group_size;
    let mut out = fs::File::create(path)?;
    let mut stats = ExportStats::default();

    for example in dataset {
        let rollouts: Vec<Result<(String, String, RewardBreakdown)>> = (0..g as u64)
            .into_par_iter()
            .map(|group_idx| {
                let seed = derive_seed(cfg.seed, &example.id, group_idx, 0);
                let prompt =
                    templates.render_compressor_prompt(&example.question, &example.documents);
                let summary = compressor.generate(&GenerationRequest {
                    role: Role::Compressor,
                    prompt: prompt.clone(),
                    max_tokens: cfg.summary_max_tokens,
                    temperature: cfg.summary_temperature,
                    seed: Some(seed),
                })?;
                let answer_prompt =
                    templates.render_answerer_prompt(&[], &summary.text, &example.question);
                let answer = answerer.generate(&GenerationRequest {
                    role: Role::Answerer,
                    prompt: answer_prompt,
                    max_tokens: cfg.answer_max_tokens,
                    temperature: cfg.answer_temperature,
                    seed: Some(seed),
                })?;
                let breakdown = combined_reward(&answer.text, &example.gold_answers, &cfg.reward)?;
                Ok((prompt, summary.text, breakdown))
            })
            .collect();

        let ok: Vec<&(String, String, RewardBreakdown)> =
            rollouts.iter().filter_map(|r| r.as_ref().ok()).collect();
        if ok.len() < g {
            for e in rollouts.iter().filter_map(|r| r.as_ref().err()) {
                log::warn!("export: rollout for '{}' failed: {e}", example.id);
            }
            log::warn!("export: dropping incomplete group for '{}'", example.id);
            stats.groups_dropped += 1;
            continue;
        }
        let rewards: Vec<f64> = ok.iter().map(|(_, _, b)| b.combined).collect();
        let advantages = crate::grpo::group_advantages(&rewards, cfg.grpo.std_floor)?;
        for (group_index, ((prompt, summary, breakdown), advantage)) in
            ok.into_iter().zip(advantages).enumerate()
        {
            let record = ExportRecord {
                input_id: example.id.clone(),
                prompt: prompt.clone(),
                summary: summary.clone(),
                reward: breakdown.clone(),
                group_index,
                advantage,
            };
            let line = serde_json::to_string(&record)
                .map_err(|e| Error::Validation(format!("serialize export record: {e}")))?;
            writeln!(out, "{line}")?;
            stats.records_written += 1;
        }
        stats.groups_written += 1;
    }
    Ok(stats)
}
