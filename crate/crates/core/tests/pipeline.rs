//! Cross-module integration: the distillation pipeline end to end, the
//! sampled KL estimator against exact enumeration, and the train → evaluate
//! → report flow.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use corerag::backend::{MockAnswerer, PromptTemplates};
use corerag::corpus::{load_dataset, make_synthetic, save_dataset, SyntheticSpec};
use corerag::distill::{
    actions_for_target, build_sft_records, distill_epoch, emit_sft_dataset, filter_candidates,
    load_sft_dataset, load_teacher_summaries, partition_scored, score_candidate, DistillMetric,
    ScoreSettings,
};
use corerag::eval::{compare_report, evaluate, EvalCondition, EvalConfig};
use corerag::grpo::kl_penalty;
use corerag::metrics::normalize_answer;
use corerag::toypolicy::{
    exact_kl, featurize, logp_of_features, sample_from_features, Featurized, ToyPolicyParams,
};
use corerag::trainer::{run_grpo, TrainConfig};

fn corpus(n: usize, seed: u64) -> Vec<corerag::QAExample> {
    make_synthetic(&SyntheticSpec {
        n_examples: n,
        sentences_per_example: 8,
        vocab_size: 40,
        seed,
    })
    .unwrap()
}

/// The answer-bearing sentence of a synthetic example, used as a stand-in
/// teacher summary.
fn answer_sentence(ex: &corerag::QAExample, fz: &Featurized) -> String {
    let gold = &ex.gold_answers[0];
    fz.sentences
        .iter()
        .find(|s| normalize_answer(&s.text).contains(gold))
        .map(|s| s.text.clone())
        .unwrap()
}

#[test]
fn distill_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let dataset = corpus(20, 21);
    let answerer = MockAnswerer::new(&dataset);
    let templates = PromptTemplates::default();

    // Teacher file: helpful summaries for even examples, useless ones for
    // odd examples (which the mock then answers wrong both ways -> discard).
    let teacher_path = dir.path().join("teacher.jsonl");
    let mut lines = Vec::new();
    for (i, ex) in dataset.iter().enumerate() {
        let fz = featurize(ex).unwrap();
        let summary = if i % 2 == 0 {
            answer_sentence(ex, &fz)
        } else {
            "nothing useful here.".to_string()
        };
        lines.push(serde_json::json!({"id": ex.id, "summary": summary}).to_string());
    }
    std::fs::write(&teacher_path, lines.join("\n")).unwrap();

    let teachers = load_teacher_summaries(&teacher_path).unwrap();
    assert_eq!(teachers.len(), dataset.len());

    let candidates: Vec<_> = dataset
        .iter()
        .zip(&teachers)
        .map(|(ex, (id, summary))| {
            assert_eq!(&ex.id, id);
            score_candidate(
                ex,
                summary,
                &answerer,
                &templates,
                DistillMetric::Em,
                &ScoreSettings::default(),
            )
        })
        .collect();
    let (scored, dropped) = partition_scored(candidates);
    assert_eq!(dropped, 0);
    let records = filter_candidates(&scored).unwrap();
    // Helpful summaries (p_summary 1 > p_original 0) are kept with text.
    assert_eq!(records.len(), 10);
    assert!(records.iter().all(|r| !r.target_summary.is_empty()));

    let sft = build_sft_records(&records, &dataset).unwrap();
    let out = dir.path().join("sft.jsonl");
    emit_sft_dataset(&sft, &out).unwrap();
    let reloaded = load_sft_dataset(&out).unwrap();
    assert_eq!(sft, reloaded);

    // The retained targets are expressible and trainable for the policy.
    let featured: Vec<Featurized> = dataset.iter().map(|ex| featurize(ex).unwrap()).collect();
    let by_id: std::collections::HashMap<&str, usize> = dataset
        .iter()
        .enumerate()
        .map(|(i, ex)| (ex.id.as_str(), i))
        .collect();
    let params = ToyPolicyParams::uniform(1, 1.0);
    let targets: Vec<(&Featurized, Vec<corerag::toypolicy::Action>)> = records
        .iter()
        .map(|r| {
            let fz = &featured[by_id[r.example_id.as_str()]];
            (
                fz,
                actions_for_target(fz, &r.target_summary, params.select_k).unwrap(),
            )
        })
        .collect();
    let (next, before) = distill_epoch(&params, &targets, 1e-3).unwrap();
    let (_, after) = distill_epoch(&next, &targets, 1e-3).unwrap();
    assert!(after < before);
}

#[test]
fn sampled_kl_estimator_agrees_with_enumeration() {
    let dataset = corpus(1, 33);
    let example = &dataset[0];
    let fz = featurize(example).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);

    let mut new_params = ToyPolicyParams::uniform(2, 1.0);
    let mut ref_params = new_params.clone();
    for w in &mut new_params.weights {
        *w = rng.random::<f64>() - 0.5;
    }
    for w in &mut ref_params.weights {
        *w = rng.random::<f64>() - 0.5;
    }

    let exact = exact_kl(&new_params, &ref_params, example).unwrap();
    // Monte Carlo mean of the per-sample estimator under the new policy.
    let n = 60_000;
    let mut mean = 0.0;
    for seed in 0..n as u64 {
        let (_, actions, logp_new) = sample_from_features(&new_params, &fz, seed).unwrap();
        let logp_ref = logp_of_features(&ref_params, &fz, &actions).unwrap();
        mean += kl_penalty(logp_new, logp_ref).unwrap();
    }
    mean /= n as f64;
    assert!(
        (mean - exact).abs() < 0.01,
        "sampled {mean} vs exact {exact}"
    );
    assert!(exact >= 0.0);
}

#[test]
fn train_evaluate_report_flow() {
    let dir = tempfile::tempdir().unwrap();
    let dataset = corpus(40, 77);

    // Round-trip the dataset through disk first, as the CLI does.
    let data_path = dir.path().join("data.jsonl");
    save_dataset(&dataset, &data_path).unwrap();
    let dataset = load_dataset(&data_path, 5).unwrap();

    let answerer = MockAnswerer::new(&dataset);
    let templates = PromptTemplates::default();
    let cfg = TrainConfig {
        grpo: corerag::GrpoConfig {
            learning_rate: 0.05,
            ..Default::default()
        },
        batch_size: 8,
        iterations: Some(120),
        seed: 5,
        ..Default::default()
    };
    let (trained, report) = run_grpo(
        &dataset,
        ToyPolicyParams::uniform(1, 1.0),
        &answerer,
        &templates,
        cfg,
    )
    .unwrap();
    assert!(report.final_mean_em().unwrap() > 0.8);

    let eval_cfg = EvalConfig::default();
    let reports = vec![
        evaluate(
            &dataset,
            &EvalCondition::NoRetrieval,
            &answerer,
            &templates,
            &eval_cfg,
        )
        .unwrap(),
        evaluate(
            &dataset,
            &EvalCondition::TopKFull,
            &answerer,
            &templates,
            &eval_cfg,
        )
        .unwrap(),
        evaluate(
            &dataset,
            &EvalCondition::CompressedToy(&trained),
            &answerer,
            &templates,
            &eval_cfg,
        )
        .unwrap(),
    ];
    assert_eq!(reports[0].em_percent, 0.0);
    assert_eq!(reports[1].em_percent, 100.0);
    assert!(reports[2].em_percent > 80.0);
    assert!(reports[2].compression_ratio < reports[1].compression_ratio);

    let table = compare_report(&reports).unwrap();
    assert_eq!(table.rows.len(), 3);
    assert!(table.to_text().contains("# tok"));
}
