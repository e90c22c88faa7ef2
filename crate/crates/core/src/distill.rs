//! Distillation warm-start: score teacher summaries by downstream answer
//! quality, apply the three-way retention rule, emit the SFT dataset, and
//! provide the cross-entropy loss for the toy policy.
//!
//! Retention rule over per-candidate scores:
//! - `p_summary > p_original` — the summary helps: keep it as the target.
//! - `p_original = 1` and `p_summary < p_original` — the answerer succeeds
//!   unaided and the summary hurts: keep with an empty target.
//! - everything else is discarded.

use std::collections::HashMap;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backend::{Backend, GenerationRequest, PromptTemplates, Role};
use crate::corpus::QAExample;
use crate::error::{Error, Result};
use crate::metrics::{exact_match, token_f1};
use crate::toypolicy::{
    featurize, grad_logp_features, logp_of_features, split_sentences, Action, Featurized,
    ToyPolicyParams,
};

/// Which downstream score drives the retention rule.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistillMetric {
    #[default]
    Em,
    F1,
}

impl DistillMetric {
    fn score(&self, prediction: &str, golds: &[String]) -> Result<f64> {
        match self {
            DistillMetric::Em => exact_match(prediction, golds),
            DistillMetric::F1 => token_f1(prediction, golds),
        }
    }
}

/// A teacher summary with its downstream scores. `None` scores mark a
/// candidate that could not be scored (backend failure).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DistillCandidate {
    pub example_id: String,
    pub teacher_summary: String,
    pub p_summary: Option<f64>,
    pub p_original: Option<f64>,
}

impl DistillCandidate {
    pub fn is_scored(&self) -> bool {
        self.p_summary.is_some() && self.p_original.is_some()
    }
}

/// A retained training instance: the teacher summary or the empty string.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DistillRecord {
    pub example_id: String,
    pub target_summary: String,
}

/// One line of the emitted SFT dataset.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftRecord {
    pub question: String,
    pub documents: Vec<WireDoc>,
    pub target_summary: String,
}

/// Document layout shared with the dataset wire format.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WireDoc {
    pub title: String,
    pub text: String,
    pub rank: usize,
}

/// Generation settings for scoring runs.
#[derive(Clone, Copy, Debug)]
pub struct ScoreSettings {
    pub max_tokens: usize,
    pub temperature: f64,
}

impl Default for ScoreSettings {
    fn default() -> Self {
        Self {
            max_tokens: 64,
            temperature: 0.0,
        }
    }
}

/// Scores one teacher summary: the answerer runs once with the summary as
/// context and once with no context at all. A backend failure leaves the
/// candidate unscored with a logged reason.
pub fn score_candidate(
    example: &QAExample,
    teacher_summary: &str,
    answerer: &dyn Backend,
    templates: &PromptTemplates,
    metric: DistillMetric,
    settings: &ScoreSettings,
) -> DistillCandidate {
    let mut candidate = DistillCandidate {
        example_id: example.id.clone(),
        teacher_summary: teacher_summary.to_string(),
        p_summary: None,
        p_original: None,
    };
    let run = |context: &str| -> Result<f64> {
        let prompt = templates.render_answerer_prompt(&[], context, &example.question);
        let response = answerer.generate(&GenerationRequest {
            role: Role::Answerer,
            prompt,
            max_tokens: settings.max_tokens,
            temperature: settings.temperature,
            seed: Some(0),
        })?;
        metric.score(&response.text, &example.gold_answers)
    };
    match run(teacher_summary) {
        Ok(p) => candidate.p_summary = Some(p),
        Err(e) => log::warn!("distill: '{}' summary scoring failed: {e}", example.id),
    }
    match run("") {
        Ok(p) => candidate.p_original = Some(p),
        Err(e) => log::warn!("distill: '{}' baseline scoring failed: {e}", example.id),
    }
    candidate
}

/// Scores every (example, teacher summary) pair, fanning out under the
/// backend's in-flight cap. Teacher entries are joined to examples by id;
/// examples without a teacher summary are skipped with a warning.
pub fn score_candidates(
    dataset: &[QAExample],
    teachers: &[(String, String)],
    answerer: &dyn Backend,
    templates: &PromptTemplates,
    metric: DistillMetric,
    settings: &ScoreSettings,
) -> Vec<DistillCandidate> {
    use rayon::prelude::*;
    let summary_of: HashMap<&str, &str> = teachers
        .iter()
        .map(|(id, s)| (id.as_str(), s.as_str()))
        .collect();
    let known: std::collections::HashSet<&str> = dataset.iter().map(|ex| ex.id.as_str()).collect();
    for (id, _) in teachers {
        if !known.contains(id.as_str()) {
            log::warn!("distill: teacher summary for unknown example '{id}'");
        }
    }
    let pairs: Vec<(&QAExample, &str)> = dataset
        .iter()
        .filter_map(|ex| match summary_of.get(ex.id.as_str()) {
            Some(s) => Some((ex, *s)),
            None => {
                log::warn!(
                    "distill: example '{}' has no teacher summary; skipped",
                    ex.id
                );
                None
            }
        })
        .collect();
    pairs
        .par_iter()
        .map(|(ex, summary)| score_candidate(ex, summary, answerer, templates, metric, settings))
        .collect()
}

/// What the retention rule decides for one candidate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Retention {
    KeepSummary,
    KeepEmpty,
    Discard,
}

/// The rule predicate on raw scores.
pub fn retention_rule(p_summary: f64, p_original: f64) -> Retention {
    if p_summary > p_original {
        Retention::KeepSummary
    } else if p_original == 1.0 && p_summary < p_original {
        Retention::KeepEmpty
    } else {
        Retention::Discard
    }
}

/// Splits off unscored candidates (logged and dropped).
pub fn partition_scored(candidates: Vec<DistillCandidate>) -> (Vec<DistillCandidate>, usize) {
    let total = candidates.len();
    let scored: Vec<DistillCandidate> = candidates.into_iter().filter(|c| c.is_scored()).collect();
    let dropped = total - scored.len();
    if dropped > 0 {
        log::warn!("distill: excluding {dropped} unscored candidates");
    }
    (scored, dropped)
}

/// Applies the retention rule. Every input must be scored.
pub fn filter_candidates(candidates: &[DistillCandidate]) -> Result<Vec<DistillRecord>> {
    let mut records = Vec::new();
    for c in candidates {
        let (Some(p_summary), Some(p_original)) = (c.p_summary, c.p_original) else {
            return Err(Error::Validation(format!(
                "candidate '{}' is unscored; score or exclude it before filtering",
                c.example_id
            )));
        };
        match retention_rule(p_summary, p_original) {
            Retention::KeepSummary => records.push(DistillRecord {
                example_id: c.example_id.clone(),
                target_summary: c.teacher_summary.clone(),
            }),
            Retention::KeepEmpty => records.push(DistillRecord {
                example_id: c.example_id.clone(),
                target_summary: String::new(),
            }),
            Retention::Discard => {}
        }
    }
    Ok(records)
}

/// Joins retained records with their examples into emit-ready SFT rows.
pub fn build_sft_records(
    records: &[DistillRecord],
    dataset: &[QAExample],
) -> Result<Vec<SftRecord>> {
    let by_id: HashMap<&str, &QAExample> = dataset.iter().map(|ex| (ex.id.as_str(), ex)).collect();
    records
        .iter()
        .map(|r| {
            let ex = by_id.get(r.example_id.as_str()).ok_or_else(|| {
                Error::Validation(format!("record '{}' has no dataset example", r.example_id))
            })?;
            Ok(SftRecord {
                question: ex.question.clone(),
                documents: ex
                    .documents
                    .iter()
                    .map(|d| WireDoc {
                        title: d.title.clone(),
                        text: d.body.clone(),
                        rank: d.rank,
                    })
                    .collect(),
                target_summary: r.target_summary.clone(),
            })
        })
        .collect()
}

/// Writes the SFT dataset as JSONL, one record per line. Empty targets are
/// preserved, not dropped. Re-emitting a loaded file is byte-identical.
pub fn emit_sft_dataset(records: &[SftRecord], path: &Path) -> Result<()> {
    if records.is_empty() {
        return Err(Error::Validation("no SFT records to emit".into()));
    }
    let mut out = fs::File::create(path)?;
    for r in records {
        let line = serde_json::to_string(r)
            .map_err(|e| Error::Validation(format!("serialize SFT record: {e}")))?;
        writeln!(out, "{line}")?;
    }
    Ok(())
}

pub fn load_sft_dataset(path: &Path) -> Result<Vec<SftRecord>> {
    let raw = fs::read_to_string(path)?;
    raw.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

/// Teacher-summary input, JSONL records of `{id, summary}`.
pub fn load_teacher_summaries(path: &Path) -> Result<Vec<(String, String)>> {
    #[derive(Deserialize)]
    struct TeacherLine {
        id: String,
        summary: String,
    }
    let raw = fs::read_to_string(path)?;
    raw.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let t: TeacherLine = serde_json::from_str(l).map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
            Ok((t.id, t.summary))
        })
        .collect()
}

/// Maps a target summary onto a policy action sequence by exact sentence
/// matching. An empty target maps to an immediate stop. Target sentences
/// that match no candidate are reported, never silently approximated.
pub fn actions_for_target(
    fz: &Featurized,
    target_summary: &str,
    select_k: usize,
) -> Result<Vec<Action>> {
    let targets = split_sentences(target_summary);
    if targets.is_empty() {
        return Ok(if select_k == 0 {
            vec![]
        } else {
            vec![Action::Stop]
        });
    }
    let mut picks = Vec::new();
    let mut unmatched = Vec::new();
    for t in &targets {
        // Exact match against candidates not already used.
        let found = fz
            .sentences
            .iter()
            .enumerate()
            .find(|(i, s)| s.text == *t && !picks.contains(&Action::Select(*i)));
        match found {
            Some((i, _)) => picks.push(Action::Select(i)),
            None => unmatched.push(t.clone()),
        }
    }
    if !unmatched.is_empty() {
        return Err(Error::Mapping(unmatched));
    }
    if picks.len() > select_k {
        return Err(Error::Mapping(vec![format!(
            "target has {} sentences but select_k is {select_k}",
            picks.len()
        )]));
    }
    // Selection follows document order, matching how summaries are emitted.
    picks.sort_by_key(|a| match a {
        Action::Select(i) => *i,
        Action::Stop => usize::MAX,
    });
    if picks.len() < select_k {
        picks.push(Action::Stop);
    }
    Ok(picks)
}

/// Cross-entropy loss of one target under the toy policy:
/// `loss = -logp(target)`, `gradient = -grad_logp(target)`.
pub fn toy_distill_loss(
    params: &ToyPolicyParams,
    example: &QAExample,
    target_actions: &[Action],
) -> Result<(f64, Vec<f64>)> {
    let fz = featurize(example)?;
    toy_distill_loss_features(params, &fz, target_actions)
}

/// As [`toy_distill_loss`] over precomputed features.
pub fn toy_distill_loss_features(
    params: &ToyPolicyParams,
    fz: &Featurized,
    target_actions: &[Action],
) -> Result<(f64, Vec<f64>)> {
    let loss = -logp_of_features(params, fz, target_actions)?;
    let mut grad = grad_logp_features(params, fz, target_actions)?;
    for g in &mut grad {
        *g = -*g;
    }
    Ok((loss, grad))
}

/// One full-batch gradient-descent epoch on the mapped targets. Returns the
/// updated params and the mean loss before the step.
pub fn distill_epoch(
    params: &ToyPolicyParams,
    targets: &[(&Featurized, Vec<Action>)],
    learning_rate: f64,
) -> Result<(ToyPolicyParams, f64)> {
    if targets.is_empty() {
        return Err(Error::Validation("no distillation targets".into()));
    }
    let mut mean_loss = 0.0;
    let mut mean_grad = vec![0.0; params.weights.len()];
    for (fz, actions) in targets {
        let (loss, grad) = toy_distill_loss_features(params, fz, actions)?;
        mean_loss += loss;
        for (m, g) in mean_grad.iter_mut().zip(grad) {
            *m += g;
        }
    }
    let n = targets.len() as f64;
    mean_loss /= n;
    for m in &mut mean_grad {
        *m /= n;
    }
    // Descend the loss: step against the mean gradient.
    let next = crate::toypolicy::apply_update(params, &mean_grad, -learning_rate)?;
    Ok((next, mean_loss))
}
