//! Single entry point for dataset tooling, distillation building, toy
//! training, rollout export, evaluation, and ad-hoc scoring.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};

use config::GlobalConfig;
use corerag::backend::{Backend, HttpBackend, MockAnswerer, MockCompressor};
use corerag::corpus::{load_dataset, make_synthetic, save_dataset, QAExample, SyntheticSpec};
use corerag::distill::{
    build_sft_records, emit_sft_dataset, filter_candidates, load_teacher_summaries,
    partition_scored, score_candidates, DistillMetric, ScoreSettings,
};
use corerag::eval::{compare_report, evaluate, write_audit_jsonl, EvalCondition};
use corerag::metrics::{combined_reward, F1Aggregation, RewardConfig};
use corerag::toypolicy::{load_params, save_params, ToyPolicyParams};
use corerag::trainer::{export_rollouts, GrpoTrainer};

#[derive(Parser)]
#[command(
    name = "corerag",
    version,
    about = "Reward-driven context compression harness for retrieval-augmented QA"
)]
struct Cli {
    /// TOML config file; command-line flags override file values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum BackendKind {
    /// Deterministic in-process mock.
    Mock,
    /// Chat-completions HTTP backend from the [backend] config section.
    Http,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum MetricArg {
    Em,
    F1,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum AggregationArg {
    Max,
    First,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum ConditionArg {
    /// Question only, no context.
    NoRetrieval,
    /// Full text of the top-k documents.
    TopKFull,
    /// Summary from a toy policy (--policy) or a compressor backend.
    Compressed,
}

#[derive(Subcommand)]
enum Command {
    /// Score a prediction against gold answers; prints the reward breakdown as JSON.
    Score {
        /// Predicted answer text.
        #[arg(long)]
        pred: String,
        /// Gold answer (repeat for aliases).
        #[arg(long, required = true)]
        gold: Vec<String>,
        /// Weight of the F1 term in the combined reward.
        #[arg(long, default_value_t = 0.3)]
        alpha: f64,
        /// Gold-alias aggregation for the combined reward.
        #[arg(long, value_enum, default_value_t = AggregationArg::Max)]
        f1_aggregation: AggregationArg,
    },
    /// Generate a seeded synthetic dataset for desk-scale runs.
    MakeSynthetic {
        /// Number of examples.
        #[arg(long = "synthetic-n")]
        synthetic_n: usize,
        /// Generation seed; identical seeds give byte-identical files.
        #[arg(long = "synthetic-seed", default_value_t = 42)]
        synthetic_seed: u64,
        /// Sentences per example (exactly one carries the answer).
        #[arg(long = "synthetic-sentences", default_value_t = 10)]
        synthetic_sentences: usize,
        /// Vocabulary size.
        #[arg(long = "synthetic-vocab", default_value_t = 50)]
        synthetic_vocab: usize,
        /// Output JSONL path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score teacher summaries against the answerer and emit the filtered SFT dataset.
    BuildDistill {
        /// Dataset JSONL with pre-retrieved documents.
        #[arg(long)]
        dataset: PathBuf,
        /// Teacher summaries JSONL ({"id": ..., "summary": ...}).
        #[arg(long)]
        teacher_file: PathBuf,
        /// Downstream score driving the retention rule.
        #[arg(long, value_enum, default_value_t = MetricArg::Em)]
        metric: MetricArg,
        /// Output SFT JSONL path.
        #[arg(long)]
        out: PathBuf,
        /// Cap documents per example at the top k by rank.
        #[arg(long, default_value_t = 5)]
        k: usize,
        /// Answerer backend.
        #[arg(long, value_enum, default_value_t = BackendKind::Mock)]
        backend: BackendKind,
    },
    /// Train the toy policy with group-relative policy optimization.
    TrainToy {
        /// Dataset JSONL.
        #[arg(long)]
        dataset: PathBuf,
        /// Output directory for checkpoints, params, and reports.
        #[arg(long)]
        out_dir: PathBuf,
        /// Cap documents per example at the top k by rank.
        #[arg(long, default_value_t = 5)]
        k: usize,
        /// Override [trainer].iterations.
        #[arg(long)]
        iterations: Option<usize>,
        /// Override [trainer].seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override [trainer].batch_size.
        #[arg(long)]
        batch_size: Option<usize>,
        /// Override [trainer.grpo].learning_rate.
        #[arg(long)]
        lr: Option<f64>,
        /// Override [trainer.grpo].kl_coeff.
        #[arg(long)]
        beta: Option<f64>,
        /// Override [trainer.reward].alpha.
        #[arg(long)]
        alpha: Option<f64>,
        /// Start from a saved params file instead of the uniform policy.
        #[arg(long)]
        init_params: Option<PathBuf>,
        /// Resume from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Write a checkpoint every N iterations.
        #[arg(long, default_value_t = 100)]
        checkpoint_interval: usize,
        /// Answerer backend.
        #[arg(long, value_enum, default_value_t = BackendKind::Mock)]
        backend: BackendKind,
    },
    /// Sample scored rollout groups through backends and export them as JSONL.
    RolloutExport {
        /// Dataset JSONL.
        #[arg(long)]
        dataset: PathBuf,
        /// Output JSONL path.
        #[arg(long)]
        out: PathBuf,
        /// Cap documents per example at the top k by rank.
        #[arg(long, default_value_t = 5)]
        k: usize,
        /// Compressor backend.
        #[arg(long, value_enum, default_value_t = BackendKind::Mock)]
        compressor: BackendKind,
        /// Answerer backend.
        #[arg(long, value_enum, default_value_t = BackendKind::Mock)]
        backend: BackendKind,
    },
    /// Evaluate conditions over a dataset and report EM / F1 / # tok.
    Evaluate {
        /// Dataset JSONL.
        #[arg(long)]
        dataset: PathBuf,
        /// Condition to evaluate (repeat to compare several).
        #[arg(long, value_enum, required = true)]
        condition: Vec<ConditionArg>,
        /// Toy policy params file for the compressed condition.
        #[arg(long)]
        policy: Option<PathBuf>,
        /// Cap documents per example at the top k by rank.
        #[arg(long)]
        k: Option<usize>,
        /// Path prefix for report files (.csv, .json, per-condition .audit.jsonl).
        #[arg(long)]
        report_out: Option<PathBuf>,
        /// Answerer backend.
        #[arg(long, value_enum, default_value_t = BackendKind::Mock)]
        backend: BackendKind,
        /// Compressor backend for the compressed condition without --policy.
        #[arg(long, value_enum, default_value_t = BackendKind::Mock)]
        compressor: BackendKind,
    },
}

fn make_backend(
    kind: BackendKind,
    dataset: &[QAExample],
    cfg: &GlobalConfig,
) -> anyhow::Result<Box<dyn Backend>> {
    Ok(match kind {
        BackendKind::Mock => Box::new(MockAnswerer::new(dataset)),
        BackendKind::Http => Box::new(HttpBackend::new(cfg.backend.clone())?),
    })
}

fn make_compressor(kind: BackendKind, cfg: &GlobalConfig) -> anyhow::Result<Box<dyn Backend>> {
    Ok(match kind {
        BackendKind::Mock => Box::new(MockCompressor::default()),
        BackendKind::Http => Box::new(HttpBackend::new(cfg.backend.clone())?),
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = GlobalConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::Score {
            pred,
            gold,
            alpha,
            f1_aggregation,
        } => {
            let reward_cfg = RewardConfig {
                alpha,
                f1_aggregation: match f1_aggregation {
                    AggregationArg::Max => F1Aggregation::Max,
                    AggregationArg::First => F1Aggregation::First,
                },
            };
            let breakdown = combined_reward(&pred, &gold, &reward_cfg)?;
            println!("{}", serde_json::to_string_pretty(&breakdown)?);
        }
        Command::MakeSynthetic {
            synthetic_n,
            synthetic_seed,
            synthetic_sentences,
            synthetic_vocab,
            out,
        } => {
            let examples = make_synthetic(&SyntheticSpec {
                n_examples: synthetic_n,
                sentences_per_example: synthetic_sentences,
                vocab_size: synthetic_vocab,
                seed: synthetic_seed,
            })?;
            save_dataset(&examples, &out)?;
            println!("wrote {} examples to {}", examples.len(), out.display());
        }
        Command::BuildDistill {
            dataset,
            teacher_file,
            metric,
            out,
            k,
            backend,
        } => {
            let examples = load_dataset(&dataset, k)?;
            let teachers = load_teacher_summaries(&teacher_file)?;
            let templates = cfg.templates()?;
            let answerer = make_backend(backend, &examples, &cfg)?;
            let metric = match metric {
                MetricArg::Em => DistillMetric::Em,
                MetricArg::F1 => DistillMetric::F1,
            };
            let settings = ScoreSettings {
                max_tokens: cfg.trainer.answer_max_tokens,
                temperature: cfg.trainer.answer_temperature,
            };
            let candidates = score_candidates(
                &examples,
                &teachers,
                answerer.as_ref(),
                &templates,
                metric,
                &settings,
            );
            let total = candidates.len();
            let (scored, unscored) = partition_scored(candidates);
            let records = filter_candidates(&scored)?;
            let kept_empty = records
                .iter()
                .filter(|r| r.target_summary.is_empty())
                .count();
            let sft = build_sft_records(&records, &examples)?;
            emit_sft_dataset(&sft, &out)?;
            println!(
                "scored {total} candidates ({unscored} unscored); kept {} ({} with empty target, {} discarded); wrote {}",
                records.len(),
                kept_empty,
                scored.len() - records.len(),
                out.display()
            );
        }
        Command::TrainToy {
            dataset,
            out_dir,
            k,
            iterations,
            seed,
            batch_size,
            lr,
            beta,
            alpha,
            init_params,
            resume,
            checkpoint_interval,
            backend,
        } => {
            let mut tcfg = cfg.trainer.clone();
            if let Some(v) = iterations {
                tcfg.iterations = Some(v);
            }
            if let Some(v) = seed {
                tcfg.seed = v;
            }
            if let Some(v) = batch_size {
                tcfg.batch_size = v;
            }
            if let Some(v) = lr {
                tcfg.grpo.learning_rate = v;
            }
            if let Some(v) = beta {
                tcfg.grpo.kl_coeff = v;
            }
            if let Some(v) = alpha {
                tcfg.reward.alpha = v;
            }
            let examples = load_dataset(&dataset, k)?;
            let templates = cfg.templates()?;
            let answerer = make_backend(backend, &examples, &cfg)?;
            std::fs::create_dir_all(&out_dir)
                .with_context(|| format!("creating {}", out_dir.display()))?;

            let mut trainer = match &resume {
                Some(ckpt) => {
                    GrpoTrainer::resume(ckpt, tcfg, &examples, answerer.as_ref(), &templates)?
                }
                None => {
                    let initial = match &init_params {
                        Some(p) => load_params(p)?,
                        None => {
                            ToyPolicyParams::uniform(cfg.policy.select_k, cfg.policy.temperature)
                        }
                    };
                    GrpoTrainer::new(tcfg, &examples, answerer.as_ref(), &templates, initial)?
                }
            };

            let target = trainer.target_iterations();
            let progress_every = (target / 10).max(1);
            while trainer.iteration() < target {
                let stats = match trainer.step() {
                    Ok(s) => s,
                    Err(e) => {
                        let rescue = out_dir.join("checkpoint_failed.json");
                        trainer.checkpoint(&rescue)?;
                        bail!(
                            "training failed at iteration {} ({e}); state saved to {}",
                            trainer.iteration(),
                            rescue.display()
                        );
                    }
                };
                let done = trainer.iteration();
                if done % checkpoint_interval == 0 || done == target {
                    trainer.checkpoint(&out_dir.join(format!("checkpoint_{done:06}.json")))?;
                }
                if done % progress_every == 0 || done == target {
                    println!(
                        "iter {done}/{target}: reward {:.3}, em {:.3}, f1 {:.3}, kl {:.5}",
                        stats.mean_reward, stats.mean_em, stats.mean_f1, stats.mean_kl
                    );
                }
            }

            let report = trainer.report();
            std::fs::write(out_dir.join("report.csv"), report.to_csv())?;
            std::fs::write(
                out_dir.join("report.json"),
                serde_json::to_string_pretty(&report)?,
            )?;
            let (params, report) = trainer.finish();
            save_params(&params, &out_dir.join("params.txt"))?;
            println!(
                "trained {} iterations in {} ms; final mean EM {:.3}; artifacts in {}",
                report.iterations.len(),
                report.wall_time_ms,
                report.final_mean_em().unwrap_or(0.0),
                out_dir.display()
            );
        }
        Command::RolloutExport {
            dataset,
            out,
            k,
            compressor,
            backend,
        } => {
            let examples = load_dataset(&dataset, k)?;
            let templates = cfg.templates()?;
            let answerer = make_backend(backend, &examples, &cfg)?;
            let compressor = make_compressor(compressor, &cfg)?;
            let stats = export_rollouts(
                &examples,
                compressor.as_ref(),
                answerer.as_ref(),
                &templates,
                &cfg.trainer,
                &out,
            )?;
            println!(
                "wrote {} records ({} groups, {} dropped) to {}",
                stats.records_written,
                stats.groups_written,
                stats.groups_dropped,
                out.display()
            );
        }
        Command::Evaluate {
            dataset,
            condition,
            policy,
            k,
            report_out,
            backend,
            compressor,
        } => {
            let mut eval_cfg = cfg.eval.clone();
            if let Some(k) = k {
                eval_cfg.k = k;
            }
            let examples = load_dataset(&dataset, eval_cfg.k)?;
            let templates = cfg.templates()?;
            let answerer = make_backend(backend, &examples, &cfg)?;
            let policy_params = policy.as_deref().map(load_params).transpose()?;
            let compressor_backend = make_compressor(compressor, &cfg)?;

            let mut reports = Vec::new();
            for c in &condition {
                let cond = match c {
                    ConditionArg::NoRetrieval => EvalCondition::NoRetrieval,
                    ConditionArg::TopKFull => EvalCondition::TopKFull,
                    ConditionArg::Compressed => match &policy_params {
                        Some(p) => EvalCondition::CompressedToy(p),
                        None => EvalCondition::CompressedBackend(compressor_backend.as_ref()),
                    },
                };
                reports.push(evaluate(
                    &examples,
                    &cond,
                    answerer.as_ref(),
                    &templates,
                    &eval_cfg,
                )?);
            }
            let table = compare_report(&reports)?;
            print!("{}", table.to_text());
            if let Some(prefix) = report_out {
                write_reports(&prefix, &table, &reports)?;
            }
        }
    }
    Ok(())
}

fn write_reports(
    prefix: &Path,
    table: &corerag::eval::ComparisonTable,
    reports: &[corerag::eval::EvalReport],
) -> anyhow::Result<()> {
    if let Some(parent) = prefix.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let with_ext = |ext: &str| -> PathBuf {
        let mut p = prefix.to_path_buf();
        p.set_extension(ext);
        p
    };
    std::fs::write(with_ext("csv"), table.to_csv())?;
    std::fs::write(with_ext("json"), table.to_json())?;
    for report in reports {
        let slug: String = report
            .condition
            .chars()
            .map(|c| if c.is_alphanumeric() { c } else { '_' })
            .collect();
        let audit = with_ext(&format!("{slug}.audit.jsonl"));
        write_audit_jsonl(report, &audit)?;
    }
    println!("reports written with prefix {}", prefix.display());
    Ok(())
}
