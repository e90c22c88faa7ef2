//! Training and evaluation harness for reward-driven context compression in
//! retrieval-augmented QA.
//!
//! A compression policy maps a question and its retrieved documents to a
//! short summary; a frozen black-box answerer turns that summary into an
//! answer; rule-based answer quality (exact match plus weighted token F1)
//! feeds back as the policy's reward through a group-relative clipped
//! policy-gradient objective with a KL tether to a reference policy.
//!
//! The crate ships a small fully differentiable extractive policy so the
//! whole loop runs and verifies on one laptop core, a deterministic mock
//! answerer, and an HTTP backend plus rollout export for driving real
//! models.
//!
//! Module map:
//! - [`corpus`] — dataset ingestion and seeded synthetic corpora
//! - [`metrics`] — answer normalization, EM, token F1, combined reward
//! - [`grpo`] — advantages, clipped surrogate, KL penalty, the objective
//! - [`toypolicy`] — the extractive softmax policy with exact gradients
//! - [`backend`] — prompt assembly, mock and HTTP generation backends
//! - [`distill`] — warm-start dataset construction and toy CE loss
//! - [`trainer`] — the training loop, checkpointing, rollout export
//! - [`eval`] — condition evaluation and comparison reports
//! - [`fixtures`] — golden regression cases

pub mod backend;
pub mod corpus;
pub mod distill;
pub mod error;
pub mod eval;
pub mod fixtures;
pub mod grpo;
pub mod metrics;
pub mod toypolicy;
pub mod trainer;

pub use backend::{
    Backend, GenerationRequest, GenerationResponse, HttpBackend, HttpBackendConfig, MockAnswerer,
    MockCompressor, PromptTemplates, Role, TokenCountMode,
};
pub use corpus::{Document, QAExample, SyntheticSpec};
pub use error::{Error, Result};
pub use eval::{EvalCondition, EvalConfig, EvalReport};
pub use grpo::{GrpoConfig, RolloutGroup, RolloutRecord};
pub use metrics::{RewardBreakdown, RewardConfig};
pub use toypolicy::ToyPolicyParams;
pub use trainer::{GrpoTrainer, RefPolicySource, TrainConfig, TrainReport};
