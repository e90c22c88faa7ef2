//! A small extractive compression policy: an autoregressive softmax sentence
//! selector over hand-built features, standing in for a generative compressor
//! at desk scale. The action space is finite and the log-probability is exact,
//! so the full training loop can be checked against enumeration and finite
//! differences.
//!
//! At each step the policy scores the remaining candidate sentences plus an
//! explicit stop action with `logit = dot(weights, features) / temperature`,
//! samples one without replacement, and terminates on stop or after
//! `select_k` picks. The summary is the selected sentences joined in document
//! order, so compression never reorders or expands the source.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::QAExample;
use crate::error::{Error, Result};
use crate::metrics::normalize_answer;

/// Fixed feature map: question term overlap, normalized source-document
/// rank, sentence length fraction, position-in-document fraction, bias.
/// The stop action carries the all-zero vector.
pub const FEATURE_DIM: usize = 5;
pub const FEATURE_NAMES: [&str; FEATURE_DIM] =
    ["term_overlap", "doc_rank", "len_frac", "pos_frac", "bias"];

const PARAMS_HEADER: &str = "toy-policy v1";

/// Policy parameters. Immutable snapshots: updates return fresh values, and
/// old/reference policies are frozen clones.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyPolicyParams {
    pub weights: Vec<f64>,
    /// Maximum sentences to select before forced termination.
    pub select_k: usize,
    /// Applied identically at sampling and scoring; part of the policy.
    pub temperature: f64,
}

impl ToyPolicyParams {
    /// Zero weights: the uniform policy over candidates at every step.
    pub fn uniform(select_k: usize, temperature: f64) -> Self {
        Self {
            weights: vec![0.0; FEATURE_DIM],
            select_k,
            temperature,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.weights.len()
    }

    pub fn validate(&self) -> Result<()> {
        if !self.temperature.is_finite() || self.temperature <= 0.0 {
            return Err(Error::Validation(format!(
                "temperature must be positive and finite, got {}",
                self.temperature
            )));
        }
        if self.weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::Validation("weights must be finite".into()));
        }
        Ok(())
    }
}

/// One selectable sentence with its provenance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateSentence {
    pub text: String,
    pub doc_rank: usize,
    pub index_in_doc: usize,
    pub token_count: usize,
}

/// Feature view of one example, computed once and shared.
#[derive(Clone, Debug, PartialEq)]
pub struct Featurized {
    pub sentences: Vec<CandidateSentence>,
    /// One vector of [`FEATURE_DIM`] per sentence.
    pub features: Vec<Vec<f64>>,
    /// Fixed vector for the stop action (all zeros).
    pub stop_features: Vec<f64>,
}

impl Featurized {
    pub fn total_tokens(&self) -> usize {
        self.sentences.iter().map(|s| s.token_count).sum()
    }
}

/// A policy step: select a candidate sentence or stop.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Select(usize),
    Stop,
}

/// Splits text into sentences on terminal punctuation (`.`, `!`, `?`).
/// Segments without any alphanumeric content are dropped.
pub fn split_sentences(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars() {
        cur.push(ch);
        if matches!(ch, '.' | '!' | '?') {
            push_sentence(&mut out, &cur);
            cur.clear();
        }
    }
    push_sentence(&mut out, &cur);
    out
}

fn push_sentence(out: &mut Vec<String>, raw: &str) {
    let t = raw.trim();
    if !t.is_empty() && t.chars().any(char::is_alphanumeric) {
        out.push(t.to_string());
    }
}

/// Builds the per-sentence feature vectors for one example.
pub fn featurize(example: &QAExample) -> Result<Featurized> {
    if example.documents.is_empty() {
        return Err(Error::Validation(format!(
            "example '{}' has no documents to featurize",
            example.id
        )));
    }
    let question_tokens: HashSet<String> =
        normalize_answer(&example.question).into_iter().collect();
    let max_rank = example.documents.iter().map(|d| d.rank).max().unwrap() as f64;

    let mut sentences = Vec::new();
    let mut doc_len_of = Vec::new();
    for doc in &example.documents {
        let split = split_sentences(&doc.body);
        let n_in_doc = split.len();
        for (i, text) in split.into_iter().enumerate() {
            let token_count = text.split_whitespace().count();
            sentences.push(CandidateSentence {
                text,
                doc_rank: doc.rank,
                index_in_doc: i,
                token_count,
            });
            doc_len_of.push(n_in_doc);
        }
    }
    if sentences.is_empty() {
        return Err(Error::Validation(format!(
            "example '{}' has zero sentences after splitting",
            example.id
        )));
    }
    let total_tokens: usize = sentences.iter().map(|s| s.token_count).sum();

    let features = sentences
        .iter()
        .zip(&doc_len_of)
        .map(|(s, &n_in_doc)| {
            let sentence_tokens: HashSet<String> = normalize_answer(&s.text).into_iter().collect();
            let overlap = question_tokens
                .iter()
                .filter(|t| sentence_tokens.contains(*t))
                .count() as f64;
            vec![
                overlap,
                s.doc_rank as f64 / max_rank,
                s.token_count as f64 / total_tokens.max(1) as f64,
                s.index_in_doc as f64 / n_in_doc as f64,
                1.0,
            ]
        })
        .collect();

    Ok(Featurized {
        sentences,
        features,
        stop_features: vec![0.0; FEATURE_DIM],
    })
}

fn dot(w: &[f64], f: &[f64]) -> f64 {
    w.iter().zip(f).map(|(a, b)| a * b).sum()
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln() + max;
    logits.iter().map(|l| l - lse).collect()
}

/// Logits for the remaining candidates plus stop (last entry).
fn step_logits(params: &ToyPolicyParams, fz: &Featurized, remaining: &[usize]) -> Result<Vec<f64>> {
    let dim = params.weights.len();
    if fz.stop_features.len() != dim {
        return Err(Error::Validation(format!(
            "policy has {dim} weights but features have dimension {}",
            fz.stop_features.len()
        )));
    }
    let mut logits: Vec<f64> = remaining
        .iter()
        .map(|&i| dot(&params.weights, &fz.features[i]) / params.temperature)
        .collect();
    logits.push(dot(&params.weights, &fz.stop_features) / params.temperature);
    Ok(logits)
}

fn sample_index(rng: &mut ChaCha8Rng, log_probs: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, lp) in log_probs.iter().enumerate() {
        acc += lp.exp();
        if u < acc {
            return i;
        }
    }
    log_probs.len() - 1
}

/// Joins the selected sentences in document order.
pub fn summary_from_actions(fz: &Featurized, actions: &[Action]) -> String {
    let mut picked: Vec<usize> = actions
        .iter()
        .filter_map(|a| match a {
            Action::Select(i) => Some(*i),
            Action::Stop => None,
        })
        .collect();
    picked.sort_unstable();
    picked
        .iter()
        .map(|&i| fz.sentences[i].text.as_str())
        .collect::<Vec<_>>()
        .join(" ")
}

/// Samples one summary. Deterministic given the seed; returns the summary
/// text, the action sequence, and its exact log-probability.
pub fn sample_summary(
    params: &ToyPolicyParams,
    example: &QAExample,
    rng_seed: u64,
) -> Result<(String, Vec<Action>, f64)> {
    let fz = featurize(example)?;
    sample_from_features(params, &fz, rng_seed)
}

/// As [`sample_summary`] but over precomputed features.
pub fn sample_from_features(
    params: &ToyPolicyParams,
    fz: &Featurized,
    rng_seed: u64,
) -> Result<(String, Vec<Action>, f64)> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut remaining: Vec<usize> = (0..fz.sentences.len()).collect();
    let mut actions = Vec::new();
    let mut picks = 0usize;
    let mut logp = 0.0;
    while picks < params.select_k {
        let logsm = log_softmax(&step_logits(params, fz, &remaining)?);
        let idx = sample_index(&mut rng, &logsm);
        logp += logsm[idx];
        if idx == remaining.len() {
            actions.push(Action::Stop);
            break;
        }
        let cand = remaining.remove(idx);
        actions.push(Action::Select(cand));
        picks += 1;
    }
    Ok((summary_from_actions(fz, &actions), actions, logp))
}

/// Greedy decode: argmax at every step (the temperature → 0 limit).
pub fn greedy_from_features(
    params: &ToyPolicyParams,
    fz: &Featurized,
) -> Result<(String, Vec<Action>)> {
    params.validate()?;
    let mut remaining: Vec<usize> = (0..fz.sentences.len()).collect();
    let mut actions = Vec::new();
    let mut picks = 0usize;
    while picks < params.select_k {
        let logits = step_logits(params, fz, &remaining)?;
        let idx = logits
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, _)| i)
            .unwrap();
        if idx == remaining.len() {
            actions.push(Action::Stop);
            break;
        }
        let cand = remaining.remove(idx);
        actions.push(Action::Select(cand));
        picks += 1;
    }
    Ok((summary_from_actions(fz, &actions), actions))
}

/// Walks a complete action sequence, validating it against the policy's
/// generative process and visiting every step.
fn walk_actions<F>(
    params: &ToyPolicyParams,
    fz: &Featurized,
    actions: &[Action],
    mut visit: F,
) -> Result<()>
where
    F: FnMut(&[f64], usize, &[usize]),
{
    params.validate()?;
    let n = fz.sentences.len();
    let mut remaining: Vec<usize> = (0..n).collect();
    let mut picks = 0usize;
    for (t, action) in actions.iter().enumerate() {
        if picks == params.select_k {
            return Err(Error::Validation(format!(
                "action sequence continues past the select_k = {} budget",
                params.select_k
            )));
        }
        let logsm = log_softmax(&step_logits(params, fz, &remaining)?);
        match *action {
            Action::Stop => {
                if t + 1 != actions.len() {
                    return Err(Error::Validation("stop must be the terminal action".into()));
                }
                visit(&logsm, remaining.len(), &remaining);
                return Ok(());
            }
            Action::Select(i) => {
                let pos = remaining.iter().position(|&r| r == i).ok_or_else(|| {
                    Error::Validation(format!(
                        "action selects sentence {i} which is out of range or already taken"
                    ))
                })?;
                visit(&logsm, pos, &remaining);
                remaining.remove(pos);
                picks += 1;
            }
        }
    }
    if picks != params.select_k {
        return Err(Error::Validation(format!(
            "incomplete action sequence: {picks} picks without a terminal stop (select_k = {})",
            params.select_k
        )));
    }
    Ok(())
}

/// Exact sequence log-probability of a complete action sequence.
pub fn logp_of(params: &ToyPolicyParams, example: &QAExample, actions: &[Action]) -> Result<f64> {
    let fz = featurize(example)?;
    logp_of_features(params, &fz, actions)
}

/// As [`logp_of`] over precomputed features.
pub fn logp_of_features(
    params: &ToyPolicyParams,
    fz: &Featurized,
    actions: &[Action],
) -> Result<f64> {
    let mut logp = 0.0;
    walk_actions(params, fz, actions, |logsm, chosen, _| {
        logp += logsm[chosen];
    })?;
    Ok(logp)
}

/// Analytic gradient of the sequence log-probability with respect to the
/// weights: per step, `(f(chosen) - E_softmax[f]) / temperature`.
pub fn grad_logp(
    params: &ToyPolicyParams,
    example: &QAExample,
    actions: &[Action],
) -> Result<Vec<f64>> {
    let fz = featurize(example)?;
    grad_logp_features(params, &fz, actions)
}

/// As [`grad_logp`] over precomputed features.
pub fn grad_logp_features(
    params: &ToyPolicyParams,
    fz: &Featurized,
    actions: &[Action],
) -> Result<Vec<f64>> {
    let dim = params.weights.len();
    let mut grad = vec![0.0; dim];
    let temp = params.temperature;
    walk_actions(params, fz, actions, |logsm, chosen, remaining| {
        let feat_of = |pos: usize| -> &[f64] {
            if pos == remaining.len() {
                &fz.stop_features
            } else {
                &fz.features[remaining[pos]]
            }
        };
        let chosen_f = feat_of(chosen);
        for j in 0..dim {
            let mut expectation = 0.0;
            for (pos, lp) in logsm.iter().enumerate() {
                expectation += lp.exp() * feat_of(pos)[j];
            }
            grad[j] += (chosen_f[j] - expectation) / temp;
        }
    })?;
    Ok(grad)
}

/// Gradient-ascent step: returns new params with `w' = w + lr * grad`.
pub fn apply_update(
    params: &ToyPolicyParams,
    grad: &[f64],
    learning_rate: f64,
) -> Result<ToyPolicyParams> {
    if grad.len() != params.weights.len() {
        return Err(Error::Validation(format!(
            "gradient dimension {} does not match parameter dimension {}",
            grad.len(),
            params.weights.len()
        )));
    }
    let mut next = params.clone();
    for (w, g) in next.weights.iter_mut().zip(grad) {
        *w += learning_rate * g;
    }
    Ok(next)
}

/// Every complete action sequence reachable with `n_sentences` candidates
/// and a budget of `select_k` picks. Exponential; for test-scale inputs only.
pub fn enumerate_action_sequences(n_sentences: usize, select_k: usize) -> Vec<Vec<Action>> {
    let mut out = Vec::new();
    let remaining: Vec<usize> = (0..n_sentences).collect();
    let mut prefix = Vec::new();
    enumerate_rec(&remaining, select_k, &mut prefix, &mut out);
    out
}

fn enumerate_rec(
    remaining: &[usize],
    budget: usize,
    prefix: &mut Vec<Action>,
    out: &mut Vec<Vec<Action>>,
) {
    if budget == 0 {
        out.push(prefix.clone());
        return;
    }
    prefix.push(Action::Stop);
    out.push(prefix.clone());
    prefix.pop();
    for (pos, &i) in remaining.iter().enumerate() {
        let mut rest = remaining.to_vec();
        rest.remove(pos);
        prefix.push(Action::Select(i));
        enumerate_rec(&rest, budget - 1, prefix, out);
        prefix.pop();
    }
}

/// Exact KL divergence `KL(new || reference)` for one example, by
/// enumerating the action space. Cross-validates the sampled estimator.
pub fn exact_kl(
    params_new: &ToyPolicyParams,
    params_ref: &ToyPolicyParams,
    example: &QAExample,
) -> Result<f64> {
    if params_new.select_k != params_ref.select_k {
        return Err(Error::Validation(
            "exact KL requires both policies to share select_k".into(),
        ));
    }
    let fz = featurize(example)?;
    let mut kl = 0.0;
    for seq in enumerate_action_sequences(fz.sentences.len(), params_new.select_k) {
        let lp_new = logp_of_features(params_new, &fz, &seq)?;
        let lp_ref = logp_of_features(params_ref, &fz, &seq)?;
        kl += lp_new.exp() * (lp_new - lp_ref);
    }
    Ok(kl)
}

/// Writes params in the versioned flat text format (header, scalars, one
/// `name weight` line per feature). Weights round-trip bit-exactly.
pub fn save_params(params: &ToyPolicyParams, path: &Path) -> Result<()> {
    fs::write(path, params_to_string(params)?)?;
    Ok(())
}

pub fn params_to_string(params: &ToyPolicyParams) -> Result<String> {
    if params.weights.len() != FEATURE_DIM {
        return Err(Error::Integrity(format!(
            "cannot serialize params with {} weights; the feature map has {FEATURE_DIM}",
            params.weights.len()
        )));
    }
    let mut s = String::new();
    let _ = writeln!(s, "{PARAMS_HEADER}");
    let _ = writeln!(s, "select_k {}", params.select_k);
    let _ = writeln!(s, "temperature {}", params.temperature);
    for (name, w) in FEATURE_NAMES.iter().zip(&params.weights) {
        let _ = writeln!(s, "{name} {w}");
    }
    Ok(s)
}

pub fn load_params(path: &Path) -> Result<ToyPolicyParams> {
    params_from_string(&fs::read_to_string(path)?)
}

pub fn params_from_string(text: &str) -> Result<ToyPolicyParams> {
    let bad = |msg: String| Error::Integrity(msg);
    let mut lines = text.lines();
    if lines.next() != Some(PARAMS_HEADER) {
        return Err(bad(format!("expected header '{PARAMS_HEADER}'")));
    }
    let mut scalar = |key: &str| -> Result<String> {
        let line = lines
            .next()
            .ok_or_else(|| bad(format!("missing '{key}' line")))?;
        line.strip_prefix(key)
            .map(|v| v.trim().to_string())
            .ok_or_else(|| bad(format!("expected '{key}' line, got '{line}'")))
    };
    let select_k: usize = scalar("select_k")?
        .parse()
        .map_err(|e| bad(format!("select_k: {e}")))?;
    let temperature: f64 = scalar("temperature")?
        .parse()
        .map_err(|e| bad(format!("temperature: {e}")))?;
    let mut weights = Vec::with_capacity(FEATURE_DIM);
    for name in FEATURE_NAMES {
        let value = scalar(name)?;
        weights.push(
            value
                .parse::<f64>()
                .map_err(|e| bad(format!("weight '{name}': {e}")))?,
        );
    }
    if lines.next().is_some() {
        return Err(bad(format!(
            "unexpected trailing content; the feature map has exactly {FEATURE_DIM} weights"
        )));
    }
    let params = ToyPolicyParams {
        weights,
        select_k,
        temperature,
    };
    params.validate().map_err(|e| bad(e.to_string()))?;
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Document;

    pub(crate) fn example_with(bodies: &[&str], question: &str) -> QAExample {
        QAExample {
            id: "t-0".into(),
            question: question.into(),
            gold_answers: vec!["gold".into()],
            documents: bodies
                .iter()
                .enumerate()
                .map(|(i, b)| Document {
                    title: format!("d{i}"),
                    body: b.to_string(),
                    rank: i + 1,
                })
                .collect(),
        }
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1.0)
    }

    #[test]
    fn featurize_counts_candidates() {
        let ex = example_with(&["just one sentence."], "a question");
        let fz = featurize(&ex).unwrap();
        assert_eq!(fz.sentences.len(), 1);
        assert_eq!(fz.stop_features, vec![0.0; FEATURE_DIM]);
    }

    #[test]
    fn identical_sentences_differ_only_in_rank() {
        let ex = example_with(&["same words here.", "same words here."], "unrelated");
        let fz = featurize(&ex).unwrap();
        let (a, b) = (&fz.features[0], &fz.features[1]);
        assert_ne!(a[1], b[1]);
        for j in [0usize, 2, 3, 4] {
            assert_eq!(a[j], b[j], "feature {j}");
        }
    }

    #[test]
    fn zero_overlap_question() {
        let ex = example_with(&["alpha beta. gamma delta."], "totally different words");
        let fz = featurize(&ex).unwrap();
        for f in &fz.features {
            assert_eq!(f[0], 0.0);
        }
    }

    #[test]
    fn featurize_rejects_empty() {
        let ex = example_with(&["..."], "q");
        assert!(featurize(&ex).is_err());
    }

    #[test]
    fn sampling_is_deterministic_per_seed() {
        let ex = example_with(&["one two. three four. five six."], "three");
        let params = ToyPolicyParams::uniform(2, 1.0);
        let a = sample_summary(&params, &ex, 99).unwrap();
        let b = sample_summary(&params, &ex, 99).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sample_logp_matches_scoring() {
        let ex = example_with(&["one two. three four. five six. seven e."], "three seven");
        let mut params = ToyPolicyParams::uniform(3, 0.8);
        params.weights = vec![0.7, -0.2, 1.1, 0.4, -0.3];
        for seed in 0..50u64 {
            let (_, actions, logp) = sample_summary(&params, &ex, seed).unwrap();
            let scored = logp_of(&params, &ex, &actions).unwrap();
            assert!((logp - scored).abs() < 1e-12, "seed {seed}");
        }
    }

    #[test]
    fn uniform_first_step_probability() {
        let ex = example_with(&["a b. c d. e f."], "q");
        let params = ToyPolicyParams::uniform(2, 1.0);
        // 3 sentences + stop: any first action has probability 1/4.
        let lp = logp_of(&params, &ex, &[Action::Stop]).unwrap();
        assert!((lp - (1.0f64 / 4.0).ln()).abs() < 1e-12);
    }

    #[test]
    fn single_candidate_stop_logp() {
        let ex = example_with(&["only sentence."], "q");
        let mut params = ToyPolicyParams::uniform(1, 1.0);
        params.weights = vec![0.3, 0.1, -0.4, 0.2, 0.5];
        let fz = featurize(&ex).unwrap();
        let logit_sentence = fz.features[0]
            .iter()
            .zip(&params.weights)
            .map(|(f, w)| f * w)
            .sum::<f64>();
        let expected = -((logit_sentence).exp() + 1.0).ln();
        let lp = logp_of(&params, &ex, &[Action::Stop]).unwrap();
        assert!((lp - expected).abs() < 1e-12);
    }

    #[test]
    fn probabilities_sum_to_one() {
        let ex = example_with(
            &["one two. three four.", "five six. seven eight. nine ten."],
            "five nine",
        );
        for select_k in [0usize, 1, 2, 3, 5] {
            let mut params = ToyPolicyParams::uniform(select_k, 1.3);
            params.weights = vec![0.9, -0.5, 0.3, 0.2, -0.1];
            let fz = featurize(&ex).unwrap();
            let total: f64 = enumerate_action_sequences(fz.sentences.len(), select_k)
                .iter()
                .map(|seq| logp_of_features(&params, &fz, seq).unwrap().exp())
                .sum();
            assert!((total - 1.0).abs() < 1e-10, "select_k={select_k}: {total}");
        }
    }

    #[test]
    fn invalid_action_sequences_rejected() {
        let ex = example_with(&["a b. c d. e f."], "q");
        let params = ToyPolicyParams::uniform(2, 1.0);
        // repeat
        assert!(logp_of(&params, &ex, &[Action::Select(0), Action::Select(0)]).is_err());
        // stop not terminal
        assert!(logp_of(&params, &ex, &[Action::Stop, Action::Select(0)]).is_err());
        // out of range
        assert!(logp_of(&params, &ex, &[Action::Select(9)]).is_err());
        // incomplete: one pick, no stop, budget 2
        assert!(logp_of(&params, &ex, &[Action::Select(0)]).is_err());
        // past budget
        assert!(logp_of(
            &params,
            &ex,
            &[Action::Select(0), Action::Select(1), Action::Select(2)]
        )
        .is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let ex = example_with(
            &["one two three. four five.", "six seven. eight nine ten."],
            "four eight ten",
        );
        let fz = featurize(&ex).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for trial in 0..100 {
            let mut params = ToyPolicyParams::uniform(2, 0.5 + rng.random::<f64>());
            for w in &mut params.weights {
                *w = rng.random::<f64>() * 4.0 - 2.0;
            }
            let (_, actions, _) = sample_from_features(&params, &fz, trial).unwrap();
            let grad = grad_logp_features(&params, &fz, &actions).unwrap();
            let h = 1e-5;
            for (j, &g) in grad.iter().enumerate() {
                let mut up = params.clone();
                up.weights[j] += h;
                let mut down = params.clone();
                down.weights[j] -= h;
                let fd = (logp_of_features(&up, &fz, &actions).unwrap()
                    - logp_of_features(&down, &fz, &actions).unwrap())
                    / (2.0 * h);
                assert!(rel_err(g, fd) < 1e-5, "trial {trial} dim {j}: {g} vs {fd}");
            }
        }
    }

    #[test]
    fn forced_stop_step_adds_no_gradient() {
        let ex = example_with(&["only sentence here."], "q");
        let mut long = ToyPolicyParams::uniform(3, 1.0);
        long.weights = vec![0.4, -0.1, 0.9, 0.0, 0.2];
        let mut short = long.clone();
        short.select_k = 1;
        // With the single sentence taken, the trailing stop is forced and
        // contributes neither probability nor gradient.
        let g_forced = grad_logp(&long, &ex, &[Action::Select(0), Action::Stop]).unwrap();
        let g_plain = grad_logp(&short, &ex, &[Action::Select(0)]).unwrap();
        assert_eq!(g_forced, g_plain);
        let lp_forced = logp_of(&long, &ex, &[Action::Select(0), Action::Stop]).unwrap();
        let lp_plain = logp_of(&short, &ex, &[Action::Select(0)]).unwrap();
        assert!((lp_forced - lp_plain).abs() < 1e-15);
    }

    #[test]
    fn greedy_matches_tiny_temperature_sampling() {
        let ex = example_with(&["one two. three four. five six."], "five");
        let mut params = ToyPolicyParams::uniform(2, 1.0);
        params.weights = vec![2.0, 0.3, -0.5, 0.1, 0.7];
        let fz = featurize(&ex).unwrap();
        let (greedy_summary, greedy_actions) = greedy_from_features(&params, &fz).unwrap();
        let mut cold = params.clone();
        cold.temperature = 1e-9;
        let (cold_summary, cold_actions, _) = sample_from_features(&cold, &fz, 3).unwrap();
        assert_eq!(greedy_actions, cold_actions);
        assert_eq!(greedy_summary, cold_summary);
    }

    #[test]
    fn apply_update_cases() {
        let mut params = ToyPolicyParams::uniform(1, 1.0);
        params.weights = vec![0.0, 0.0, 0.0, 0.0, 0.0];
        let same = apply_update(&params, &[0.0; FEATURE_DIM], 0.1).unwrap();
        assert_eq!(same.weights, params.weights);
        let same = apply_update(&params, &[1.0; FEATURE_DIM], 0.0).unwrap();
        assert_eq!(same.weights, params.weights);
        let moved = apply_update(&params, &[1.0, -2.0, 0.0, 0.0, 0.0], 0.1).unwrap();
        assert!((moved.weights[0] - 0.1).abs() < 1e-15);
        assert!((moved.weights[1] - (-0.2)).abs() < 1e-15);
        assert!(apply_update(&params, &[1.0, 2.0], 0.1).is_err());
    }

    #[test]
    fn summary_respects_document_order() {
        let ex = example_with(&["alpha one. beta two. gamma three."], "q");
        let fz = featurize(&ex).unwrap();
        let s = summary_from_actions(&fz, &[Action::Select(2), Action::Select(0), Action::Stop]);
        assert_eq!(s, "alpha one. gamma three.");
    }

    #[test]
    fn params_round_trip_bitwise() {
        let params = ToyPolicyParams {
            weights: vec![0.1 + 0.2, -1.5e-7, 3.0, f64::MIN_POSITIVE, 42.4242424242],
            select_k: 3,
            temperature: 0.731,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("params.txt");
        save_params(&params, &path).unwrap();
        let loaded = load_params(&path).unwrap();
        assert_eq!(params, loaded);
        for (a, b) in params.weights.iter().zip(&loaded.weights) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn params_load_rejects_dimension_mismatch() {
        let text = "toy-policy v1\nselect_k 1\ntemperature 1\nterm_overlap 0\ndoc_rank 0\n";
        match params_from_string(text) {
            Err(Error::Integrity(_)) => {}
            other => panic!("expected integrity error, got {other:?}"),
        }
        let extra = format!(
            "{}bogus 1\n",
            params_to_string(&ToyPolicyParams::uniform(1, 1.0)).unwrap()
        );
        assert!(params_from_string(&extra).is_err());
        assert!(params_from_string("garbage").is_err());
    }

    #[test]
    fn sampling_frequencies_match_probabilities() {
        let ex = example_with(&["one two. three four. five six."], "three five");
        let mut params = ToyPolicyParams::uniform(2, 1.0);
        params.weights = vec![0.8, -0.3, 0.5, 0.2, -0.4];
        let fz = featurize(&ex).unwrap();
        let sequences = enumerate_action_sequences(fz.sentences.len(), params.select_k);
        let n = 100_000usize;
        let mut counts = vec![0usize; sequences.len()];
        for seed in 0..n as u64 {
            let (_, actions, _) = sample_from_features(&params, &fz, seed).unwrap();
            let idx = sequences.iter().position(|s| s == &actions).unwrap();
            counts[idx] += 1;
        }
        for (seq, &count) in sequences.iter().zip(&counts) {
            let p = logp_of_features(&params, &fz, seq).unwrap().exp();
            let se = (p * (1.0 - p) / n as f64).sqrt();
            let freq = count as f64 / n as f64;
            assert!(
                (freq - p).abs() <= 3.0 * se + 1e-12,
                "{seq:?}: freq {freq} vs p {p} (se {se})"
            );
        }
    }
}
