//! QA dataset ingestion and synthetic corpus generation.
//!
//! Datasets are JSON Lines, one example per line:
//!
//! ```json
//! {"id": "nq-1", "question": "...", "answers": ["..."], "contexts": [{"title": "...", "text": "...", "rank": 1}]}
//! ```
//!
//! Documents are assumed pre-retrieved; `rank` is the retrieval rank
//! (1 = best). A missing `rank` defaults to the context's position + 1.
//! Loaded examples are immutable values and safe to share across threads.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One retrieved document.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub title: String,
    pub body: String,
    /// Retrieval rank, 1 = top.
    pub rank: usize,
}

/// One question with its gold answers and retrieved documents, the unit of
/// rollout and evaluation.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QAExample {
    pub id: String,
    pub question: String,
    /// Non-empty; datasets may carry multiple aliases of the answer.
    pub gold_answers: Vec<String>,
    /// Ordered by rank, ranks contiguous from 1.
    pub documents: Vec<Document>,
}

#[derive(Serialize, Deserialize)]
struct WireContext {
    title: String,
    text: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    rank: Option<usize>,
}

#[derive(Serialize, Deserialize)]
struct WireExample {
    id: String,
    question: String,
    answers: Vec<String>,
    contexts: Vec<WireContext>,
}

/// Loads a JSONL dataset, capping each example's documents at the top `k`
/// by rank. Documents beyond `k` are dropped; a summary count is logged.
pub fn load_dataset(path: &Path, k: usize) -> Result<Vec<QAExample>> {
    if k == 0 {
        return Err(Error::Validation("document cap k must be >= 1".into()));
    }
    let raw = fs::read_to_string(path)?;
    let mut examples = Vec::new();
    let mut truncated_docs = 0usize;
    for (idx, line) in raw.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let wire: WireExample = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        let example = validate_example(wire, line_no, k, &mut truncated_docs)?;
        examples.push(example);
    }
    if truncated_docs > 0 {
        log::info!("load_dataset: dropped {truncated_docs} documents beyond the top-{k} cap");
    }
    Ok(examples)
}

fn validate_example(
    wire: WireExample,
    line_no: usize,
    k: usize,
    truncated_docs: &mut usize,
) -> Result<QAExample> {
    let fail = |message: String| Error::Parse {
        line: line_no,
        message,
    };
    if wire.answers.is_empty() {
        return Err(fail(format!(
            "example '{}' has an empty answers list",
            wire.id
        )));
    }
    if wire.contexts.is_empty() {
        return Err(fail(format!("example '{}' has no contexts", wire.id)));
    }
    let mut documents = Vec::with_capacity(wire.contexts.len());
    for (pos, ctx) in wire.contexts.into_iter().enumerate() {
        if ctx.text.trim().is_empty() {
            return Err(fail(format!(
                "example '{}': context {} has an empty body",
                wire.id, pos
            )));
        }
        let rank = ctx.rank.unwrap_or(pos + 1);
        if rank == 0 {
            return Err(fail(format!(
                "example '{}': rank must be a positive integer",
                wire.id
            )));
        }
        documents.push(Document {
            title: ctx.title,
            body: ctx.text,
            rank,
        });
    }
    documents.sort_by_key(|d| d.rank);
    for (i, doc) in documents.iter().enumerate() {
        if doc.rank != i + 1 {
            return Err(fail(format!(
                "example '{}': ranks must be unique and contiguous from 1 (found {} at position {})",
                wire.id, doc.rank, i
            )));
        }
    }
    if documents.len() > k {
        *truncated_docs += documents.len() - k;
        documents.truncate(k);
    }
    Ok(QAExample {
        id: wire.id,
        question: wire.question,
        gold_answers: wire.answers,
        documents,
    })
}

/// Writes examples back to JSONL in the wire format. Round-trips with
/// [`load_dataset`] losslessly up to field ordering.
pub fn save_dataset(examples: &[QAExample], path: &Path) -> Result<()> {
    let mut out = fs::File::create(path)?;
    for ex in examples {
        let wire = WireExample {
            id: ex.id.clone(),
            question: ex.question.clone(),
            answers: ex.gold_answers.clone(),
            contexts: ex
                .documents
                .iter()
                .map(|d| WireContext {
                    title: d.title.clone(),
                    text: d.body.clone(),
                    rank: Some(d.rank),
                })
                .collect(),
        };
        let line = serde_json::to_string(&wire)
            .map_err(|e| Error::Validation(format!("serialize example '{}': {e}", ex.id)))?;
        writeln!(out, "{line}")?;
    }
    Ok(())
}

/// Recipe for a seeded desk-scale corpus.
///
/// Each generated example has exactly one sentence containing its gold answer
/// token; distractor sentences share no token with the answer or the question.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_examples: usize,
    pub sentences_per_example: usize,
    pub vocab_size: usize,
    pub seed: u64,
}

const SENTENCES_PER_DOC: usize = 5;
const QUESTION_CUES: usize = 3;
/// Words reserved per example: the answer plus the question cues.
const RESERVED_WORDS: usize = 1 + QUESTION_CUES;

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < self.sentences_per_example {
            return Err(Error::Validation(format!(
                "vocab_size ({}) must be >= sentences_per_example ({})",
                self.vocab_size, self.sentences_per_example
            )));
        }
        if self.n_examples > 0 && self.sentences_per_example == 0 {
            return Err(Error::Validation(
                "sentences_per_example must be >= 1".into(),
            ));
        }
        if self.n_examples > 0 && self.vocab_size < RESERVED_WORDS + 2 {
            return Err(Error::Validation(format!(
                "vocab_size must be >= {} to leave words for distractors",
                RESERVED_WORDS + 2
            )));
        }
        Ok(())
    }
}

/// Generates a seeded corpus. Pure function of `spec`: the same recipe
/// yields byte-identical examples across runs and processes.
pub fn make_synthetic(spec: &SyntheticSpec) -> Result<Vec<QAExample>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let vocab: Vec<String> = (0..spec.vocab_size).map(|i| format!("w{i}")).collect();
    let mut examples = Vec::with_capacity(spec.n_examples);
    for n in 0..spec.n_examples {
        examples.push(synth_example(spec, &vocab, n, &mut rng));
    }
    Ok(examples)
}

fn synth_example(
    spec: &SyntheticSpec,
    vocab: &[String],
    index: usize,
    rng: &mut ChaCha8Rng,
) -> QAExample {
    let n_sentences = spec.sentences_per_example;
    // Reserve the answer and the cue words the question shares with the
    // answer-bearing sentence; distractors draw from the rest.
    let mut reserved: Vec<usize> =
        rand::seq::index::sample(rng, vocab.len(), RESERVED_WORDS).into_vec();
    let answer = vocab[reserved.remove(0)].clone();
    let cues: Vec<&str> = reserved.iter().map(|&i| vocab[i].as_str()).collect();
    let pool: Vec<&str> = vocab
        .iter()
        .enumerate()
        .filter(|(i, _)| !reserved.contains(i) && vocab[*i] != answer)
        .map(|(_, w)| w.as_str())
        .collect();

    let answer_at = rng.random_range(0..n_sentences);
    let mut sentences = Vec::with_capacity(n_sentences);
    for s in 0..n_sentences {
        if s == answer_at {
            let f1 = pool.choose(rng).unwrap();
            let f2 = pool.choose(rng).unwrap();
            sentences.push(format!(
                "{} {} {} {answer} {f1} {f2}.",
                cues[0], cues[1], cues[2]
            ));
        } else {
            let words: Vec<&str> = (0..6).map(|_| *pool.choose(rng).unwrap()).collect();
            sentences.push(format!("{}.", words.join(" ")));
        }
    }

    let mut documents = Vec::new();
    for (d, chunk) in sentences.chunks(SENTENCES_PER_DOC).enumerate() {
        documents.push(Document {
            title: format!("doc {}", d + 1),
            body: chunk.join(" "),
            rank: d + 1,
        });
    }
    QAExample {
        id: format!("syn-{index:05}"),
        question: format!("where do {} {} {} appear", cues[0], cues[1], cues[2]),
        gold_answers: vec![answer],
        documents,
    }
}
