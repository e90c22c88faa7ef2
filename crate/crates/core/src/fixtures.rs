//! Golden regression fixtures: question/answer case studies with expected
//! exact-match outcomes, stored exactly as printed at the source (diacritics
//! included) so normalization is exercised rather than pre-applied.

use serde::{Deserialize, Serialize};

/// A candidate prediction with its expected exact-match score.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GoldenPrediction {
    pub text: String,
    pub expected_em: f64,
}

/// One case study: a question, its gold answers, and predictions whose EM
/// outcome is pinned.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GoldenCase {
    /// Dataset the case comes from (e.g. "nq", "2wiki").
    pub source: String,
    pub question: String,
    pub gold_answers: Vec<String>,
    pub predictions: Vec<GoldenPrediction>,
}

const GOLDEN_CASES: &str = include_str!("../fixtures/golden_cases.jsonl");

/// All bundled golden cases.
pub fn load_golden_cases() -> Vec<GoldenCase> {
    GOLDEN_CASES
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).expect("bundled golden fixtures parse"))
        .collect()
}
