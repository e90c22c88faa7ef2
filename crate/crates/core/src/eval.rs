//! Evaluation harness: run a compression condition over a dataset, query
//! the answerer, and report EM, F1, context token counts, and compression
//! ratio, one row per condition.
//!
//! Context tokens count only the context block, never the few-shot
//! exemplars. Compression ratio is per-example summary tokens over
//! full-document tokens, then averaged; full-document conditions are 1 by
//! definition and no-retrieval is 0. Examples whose backend call fails are
//! excluded from aggregates and counted, not scored as wrong.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backend::{
    count_tokens, render_documents, Backend, GenerationRequest, PromptTemplates, Role,
    TokenCountMode,
};
use crate::corpus::QAExample;
use crate::error::{Error, Result};
use crate::metrics::{exact_match, token_f1};
use crate::toypolicy::{featurize, greedy_from_features, ToyPolicyParams};
use crate::trainer::derive_seed;

/// How the context for the answerer is built.
pub enum EvalCondition<'a> {
    /// Question only.
    NoRetrieval,
    /// Full text of the top-k documents.
    TopKFull,
    /// Greedy summary from a trained toy policy.
    CompressedToy(&'a ToyPolicyParams),
    /// Summary generated by a compressor backend.
    CompressedBackend(&'a dyn Backend),
}

impl EvalCondition<'_> {
    pub fn label(&self) -> String {
        match self {
            EvalCondition::NoRetrieval => "no_retrieval".into(),
            EvalCondition::TopKFull => "top_k_full".into(),
            EvalCondition::CompressedToy(_) => "compressed(toy)".into(),
            EvalCondition::CompressedBackend(_) => "compressed(backend)".into(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Document cap applied on top of whatever the dataset already holds.
    pub k: usize,
    pub answer_max_tokens: usize,
    pub answer_temperature: f64,
    pub token_mode: TokenCountMode,
    pub fewshot: Vec<(String, String)>,
    pub seed: u64,
    pub summary_max_tokens: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            k: 5,
            answer_max_tokens: 64,
            answer_temperature: 0.0,
            token_mode: TokenCountMode::Whitespace,
            fewshot: Vec::new(),
            seed: 0,
            summary_max_tokens: 256,
        }
    }
}

/// Per-example audit record.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExampleRecord {
    pub id: String,
    pub em: f64,
    pub f1: f64,
    pub context_tokens: usize,
    pub full_tokens: usize,
    pub compression_ratio: f64,
    pub answer: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// One condition's aggregated results plus the per-example audit trail.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub condition: String,
    pub n_scored: usize,
    pub n_errored: usize,
    pub em_percent: f64,
    pub f1_percent: f64,
    pub mean_context_tokens: f64,
    pub compression_ratio: f64,
    pub records: Vec<ExampleRecord>,
}

/// Evaluates one condition over the dataset.
pub fn evaluate(
    dataset: &[QAExample],
    condition: &EvalCondition<'_>,
    answerer: &dyn Backend,
    templates: &PromptTemplates,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    if cfg.k == 0 {
        return Err(Error::Validation("k must be >= 1".into()));
    }
    let records: Vec<ExampleRecord> = dataset
        .par_iter()
        .map(
            |ex| match evaluate_example(ex, condition, answerer, templates, cfg) {
                Ok(rec) => rec,
                Err(e) => ExampleRecord {
                    id: ex.id.clone(),
                    em: 0.0,
                    f1: 0.0,
                    context_tokens: 0,
                    full_tokens: 0,
                    compression_ratio: 0.0,
                    answer: String::new(),
                    error: Some(e.to_string()),
                },
            },
        )
        .collect();

    let scored: Vec<&ExampleRecord> = records.iter().filter(|r| r.error.is_none()).collect();
    let n_scored = scored.len();
    let n_errored = records.len() - n_scored;
    if n_errored > 0 {
        log::warn!(
            "evaluate({}): {n_errored} examples errored and were excluded",
            condition.label()
        );
    }
    let mean = |f: &dyn Fn(&ExampleRecord) -> f64| -> f64 {
        if n_scored == 0 {
            0.0
        } else {
            scored.iter().map(|r| f(r)).sum::<f64>() / n_scored as f64
        }
    };
    Ok(EvalReport {
        condition: condition.label(),
        n_scored,
        n_errored,
        em_percent: 100.0 * mean(&|r| r.em),
        f1_percent: 100.0 * mean(&|r| r.f1),
        mean_context_tokens: mean(&|r| r.context_tokens as f64),
        compression_ratio: mean(&|r| r.compression_ratio),
        records,
    })
}

fn evaluate_example(
    ex: &QAExample,
    condition: &EvalCondition<'_>,
    answerer: &dyn Backend,
    templates: &PromptTemplates,
    cfg: &EvalConfig,
) -> Result<ExampleRecord> {
    let top_k: Vec<crate::corpus::Document> = ex.documents.iter().take(cfg.k).cloned().collect();
    let full_text = render_documents(&top_k);
    let full_tokens = count_tokens(&full_text, &cfg.token_mode);

    let context = match condition {
        EvalCondition::NoRetrieval => String::new(),
        EvalCondition::TopKFull => full_text.clone(),
        EvalCondition::CompressedToy(params) => {
            let capped = QAExample {
                documents: top_k.clone(),
                ..ex.clone()
            };
            let fz = featurize(&capped)?;
            greedy_from_features(params, &fz)?.0
        }
        EvalCondition::CompressedBackend(compressor) => {
            let prompt = templates.render_compressor_prompt(&ex.question, &top_k);
            compressor
                .generate(&GenerationRequest {
                    role: Role::Compressor,
                    prompt,
                    max_tokens: cfg.summary_max_tokens,
                    temperature: 0.0,
                    seed: Some(derive_seed(cfg.seed, &ex.id, 0, 0)),
                })?
                .text
        }
    };
    let context_tokens = count_tokens(&context, &cfg.token_mode);
    let compression_ratio = match condition {
        EvalCondition::NoRetrieval => 0.0,
        EvalCondition::TopKFull => 1.0,
        _ => {
            if full_tokens == 0 {
                0.0
            } else {
                context_tokens as f64 / full_tokens as f64
            }
        }
    };

    let prompt = templates.render_answerer_prompt(&cfg.fewshot, &context, &ex.question);
    let response = answerer.generate(&GenerationRequest {
        role: Role::Answerer,
        prompt,
        max_tokens: cfg.answer_max_tokens,
        temperature: cfg.answer_temperature,
        seed: Some(derive_seed(cfg.seed, &ex.id, 0, 1)),
    })?;
    Ok(ExampleRecord {
        id: ex.id.clone(),
        em: exact_match(&response.text, &ex.gold_answers)?,
        f1: token_f1(&response.text, &ex.gold_answers)?,
        context_tokens,
        full_tokens,
        compression_ratio,
        answer: response.text,
        error: None,
    })
}

/// A comparison row in the final table.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub condition: String,
    pub em: f64,
    pub f1: f64,
    pub tokens: f64,
    pub compression_ratio: f64,
    pub examples: usize,
    pub errored: usize,
}

/// Table of per-condition results, renderable as text, CSV, or JSON with
/// byte-stable output for identical inputs.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub rows: Vec<ComparisonRow>,
}

/// Aligns one row per report in EM / F1 / # tok shape.
pub fn compare_report(reports: &[EvalReport]) -> Result<ComparisonTable> {
    if reports.is_empty() {
        return Err(Error::Validation("no reports to compare".into()));
    }
    Ok(ComparisonTable {
        rows: reports
            .iter()
            .map(|r| ComparisonRow {
                condition: r.condition.clone(),
                em: r.em_percent,
                f1: r.f1_percent,
                tokens: r.mean_context_tokens,
                compression_ratio: r.compression_ratio,
                examples: r.n_scored,
                errored: r.n_errored,
            })
            .collect(),
    })
}

impl ComparisonTable {
    pub fn to_text(&self) -> String {
        let width = self
            .rows
            .iter()
            .map(|r| r.condition.len())
            .max()
            .unwrap_or(9)
            .max("condition".len());
        let mut out = format!(
            "{:<width$}  {:>7}  {:>7}  {:>8}  {:>7}  {:>8}  {:>7}\n",
            "condition", "EM", "F1", "# tok", "ratio", "examples", "errored"
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{:<width$}  {:>7.2}  {:>7.2}  {:>8.1}  {:>7.3}  {:>8}  {:>7}\n",
                r.condition, r.em, r.f1, r.tokens, r.compression_ratio, r.examples, r.errored
            ));
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("condition,em,f1,tokens,compression_ratio,examples,errored\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{:.2},{:.2},{:.1},{:.3},{},{}\n",
                r.condition, r.em, r.f1, r.tokens, r.compression_ratio, r.examples, r.errored
            ));
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("comparison table serializes")
    }
}

/// Writes the per-example audit trail as JSONL.
pub fn write_audit_jsonl(report: &EvalReport, path: &Path) -> Result<()> {
    let mut out = fs::File::create(path)?;
    for rec in &report.records {
        let line = serde_json::to_string(rec)
            .map_err(|e| Error::Validation(format!("serialize audit record: {e}")))?;
        writeln!(out, "{line}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::MockAnswerer;
    use crate::corpus::{make_synthetic, SyntheticSpec};

    fn corpus() -> Vec<QAExample> {
        make_synthetic(&SyntheticSpec {
            n_examples: 12,
            sentences_per_example: 8,
            vocab_size: 40,
            seed: 9,
        })
        .unwrap()
    }

    #[test]
    fn no_retrieval_scores_zero_on_synthetic() {
        let dataset = corpus();
        let answerer = MockAnswerer::new(&dataset);
        let templates = PromptTemplates::default();
        let report = evaluate(
            &dataset,
            &EvalCondition::NoRetrieval,
            &answerer,
            &templates,
            &EvalConfig::default(),
        )
        .unwrap();
        assert_eq!(report.em_percent, 0.0);
        assert_eq!(report.mean_context_tokens, 0.0);
        assert_eq!(report.compression_ratio, 0.0);
    }

    #[test]
    fn full_documents_score_perfect_on_synthetic() {
        let dataset = corpus();
        let answerer = MockAnswerer::new(&dataset);
        let templates = PromptTemplates::default();
        let report = evaluate(
            &dataset,
            &EvalCondition::TopKFull,
            &answerer,
            &templates,
            &EvalConfig::default(),
        )
        .unwrap();
        assert_eq!(report.em_percent, 100.0);
        assert_eq!(report.f1_percent, 100.0);
        assert_eq!(report.compression_ratio, 1.0);
        assert!(report.mean_context_tokens > 0.0);
    }

    #[test]
    fn em_never_exceeds_f1() {
        let dataset = corpus();
        let answerer = MockAnswerer::new(&dataset);
        let templates = PromptTemplates::default();
        for condition in [EvalCondition::NoRetrieval, EvalCondition::TopKFull] {
            let report = evaluate(
                &dataset,
                &condition,
                &answerer,
                &templates,
                &EvalConfig::default(),
            )
            .unwrap();
            assert!(report.em_percent <= report.f1_percent + 1e-9);
            for rec in report.records.iter().filter(|r| r.error.is_none()) {
                if rec.em == 1.0 {
                    assert_eq!(rec.f1, 1.0);
                }
            }
        }
    }

    #[test]
    fn aggregates_invariant_to_permutation() {
        let mut dataset = corpus();
        let answerer = MockAnswerer::new(&dataset);
        let templates = PromptTemplates::default();
        let a = evaluate(
            &dataset,
            &EvalCondition::TopKFull,
            &answerer,
            &templates,
            &EvalConfig::default(),
        )
        .unwrap();
        dataset.reverse();
        let b = evaluate(
            &dataset,
            &EvalCondition::TopKFull,
            &answerer,
            &templates,
            &EvalConfig::default(),
        )
        .unwrap();
        assert_eq!(a.em_percent, b.em_percent);
        assert_eq!(a.mean_context_tokens, b.mean_context_tokens);
    }

    #[test]
    fn compressed_backend_condition_runs_deterministically() {
        let dataset = corpus();
        let answerer = MockAnswerer::new(&dataset);
        let compressor = crate::backend::MockCompressor::default();
        let templates = PromptTemplates::default();
        let run = || {
            evaluate(
                &dataset,
                &EvalCondition::CompressedBackend(&compressor),
                &answerer,
                &templates,
                &EvalConfig::default(),
            )
            .unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.em_percent, b.em_percent);
        assert_eq!(a.compression_ratio, b.compression_ratio);
        assert!(a.compression_ratio < 1.0);
        for rec in a.records.iter().filter(|r| r.error.is_none()) {
            assert!(rec.context_tokens <= rec.full_tokens);
        }
    }

    #[test]
    fn compressed_context_never_longer_than_full() {
        let dataset = corpus();
        let answerer = MockAnswerer::new(&dataset);
        let templates = PromptTemplates::default();
        let params = ToyPolicyParams::uniform(2, 1.0);
        let report = evaluate(
            &dataset,
            &EvalCondition::CompressedToy(&params),
            &answerer,
            &templates,
            &EvalConfig::default(),
        )
        .unwrap();
        for rec in report.records.iter().filter(|r| r.error.is_none()) {
            assert!(rec.context_tokens <= rec.full_tokens);
            assert!((0.0..=1.0).contains(&rec.compression_ratio));
        }
    }

    #[test]
    fn comparison_table_is_byte_stable() {
        let dataset = corpus();
        let answerer = MockAnswerer::new(&dataset);
        let templates = PromptTemplates::default();
        let make = || {
            let reports = vec![
                evaluate(
                    &dataset,
                    &EvalCondition::NoRetrieval,
                    &answerer,
                    &templates,
                    &EvalConfig::default(),
                )
                .unwrap(),
                evaluate(
                    &dataset,
                    &EvalCondition::TopKFull,
                    &answerer,
                    &templates,
                    &EvalConfig::default(),
                )
                .unwrap(),
            ];
            compare_report(&reports).unwrap()
        };
        let (a, b) = (make(), make());
        assert_eq!(a.to_csv(), b.to_csv());
        assert_eq!(a.to_text(), b.to_text());
        assert_eq!(a.to_json(), b.to_json());
        assert!(a.to_text().contains("EM"));
        assert!(a.to_text().contains("F1"));
        assert!(a.to_text().contains("# tok"));
        assert_eq!(a.to_csv().lines().count(), 3);
    }

    #[test]
    fn single_report_renders_one_row() {
        let dataset = corpus();
        let answerer = MockAnswerer::new(&dataset);
        let templates = PromptTemplates::default();
        let report = evaluate(
            &dataset,
            &EvalCondition::NoRetrieval,
            &answerer,
            &templates,
            &EvalConfig::default(),
        )
        .unwrap();
        let table = compare_report(std::slice::from_ref(&report)).unwrap();
        assert_eq!(table.to_csv().lines().count(), 2);
        assert!(compare_report(&[]).is_err());
    }

    #[test]
    fn rounding_matches_two_decimal_convention() {
        let table = ComparisonTable {
            rows: vec![ComparisonRow {
                condition: "x".into(),
                em: 41.015,
                f1: 50.404,
                tokens: 46.04,
                compression_ratio: 0.0646,
                examples: 10,
                errored: 0,
            }],
        };
        let csv = table.to_csv();
        assert!(csv.contains("41.02"), "{csv}");
        assert!(csv.contains("50.40"), "{csv}");
        assert!(csv.contains("46.0"), "{csv}");
    }
}
