//! Prompt assembly for the compressor and answerer roles.
//!
//! Templates are plain text with `{slot}` markers. The compressor template
//! takes `{question}` and `{documents}`; the answerer template takes
//! `{fewshot}`, `{context}`, and `{question}`. Slots receive pre-rendered
//! blocks, so an empty context yields a valid no-retrieval prompt with no
//! dangling labels. Templates are validated once at construction; rendering
//! is then total.

use std::fs;
use std::path::Path;
use std::sync::LazyLock;

use regex::Regex;

use crate::corpus::Document;
use crate::error::{Error, Result};

static SLOT: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\{([a-z_]+)\}").unwrap());

pub const DEFAULT_COMPRESSOR_TEMPLATE: &str = "Summarize the documents below so that the summary \
is sufficient to answer the question. Use at most three sentences.\n\n\
Question: {question}\n\n\
Documents:\n{documents}\n\n\
Summary:";

pub const DEFAULT_ANSWERER_TEMPLATE: &str = "{fewshot}{context}Question: {question}\nAnswer:";

/// Validated pair of templates for the two generation roles.
#[derive(Clone, Debug)]
pub struct PromptTemplates {
    compressor: String,
    answerer: String,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        Self::new(
            DEFAULT_COMPRESSOR_TEMPLATE.to_string(),
            DEFAULT_ANSWERER_TEMPLATE.to_string(),
        )
        .expect("default templates are valid")
    }
}

impl PromptTemplates {
    pub fn new(compressor: String, answerer: String) -> Result<Self> {
        validate_template(&compressor, "compressor", &["question", "documents"])?;
        validate_template(&answerer, "answerer", &["fewshot", "context", "question"])?;
        Ok(Self {
            compressor,
            answerer,
        })
    }

    /// Loads overrides from files; `None` keeps the built-in default.
    pub fn from_files(compressor: Option<&Path>, answerer: Option<&Path>) -> Result<Self> {
        let compressor = match compressor {
            Some(p) => fs::read_to_string(p)?,
            None => DEFAULT_COMPRESSOR_TEMPLATE.to_string(),
        };
        let answerer = match answerer {
            Some(p) => fs::read_to_string(p)?,
            None => DEFAULT_ANSWERER_TEMPLATE.to_string(),
        };
        Self::new(compressor, answerer)
    }

    /// Renders the summarization prompt: question plus the documents in
    /// rank order with title headers.
    pub fn render_compressor_prompt(&self, question: &str, documents: &[Document]) -> String {
        self.compressor
            .replace("{question}", question)
            .replace("{documents}", &render_documents(documents))
    }

    /// Renders the QA prompt: few-shot exemplars, then the context block
    /// (a summary, full documents, or nothing), then the question.
    pub fn render_answerer_prompt(
        &self,
        fewshot: &[(String, String)],
        context: &str,
        question: &str,
    ) -> String {
        let mut fewshot_block = String::new();
        for (q, a) in fewshot {
            fewshot_block.push_str(&format!("Question: {q}\nAnswer: {a}\n\n"));
        }
        let context_block = if context.trim().is_empty() {
            String::new()
        } else {
            format!("Context: {context}\n\n")
        };
        self.answerer
            .replace("{fewshot}", &fewshot_block)
            .replace("{context}", &context_block)
            .replace("{question}", question)
    }
}

/// Concatenates documents in rank order with `[rank] title` headers.
pub fn render_documents(documents: &[Document]) -> String {
    let mut docs: Vec<&Document> = documents.iter().collect();
    docs.sort_by_key(|d| d.rank);
    docs.iter()
        .map(|d| format!("[{}] {}\n{}", d.rank, d.title, d.body))
        .collect::<Vec<_>>()
        .join("\n\n")
}

fn validate_template(template: &str, which: &str, slots: &[&str]) -> Result<()> {
    for slot in slots {
        let marker = format!("{{{slot}}}");
        let count = template.matches(&marker).count();
        if count != 1 {
            return Err(Error::Template(format!(
                "{which} template must contain {{{slot}}} exactly once, found {count}"
            )));
        }
    }
    for cap in SLOT.captures_iter(template) {
        let name = &cap[1];
        if !slots.contains(&name) {
            return Err(Error::Template(format!(
                "{which} template has unknown slot {{{name}}}"
            )));
        }
    }
    Ok(())
}
