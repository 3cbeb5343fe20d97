//! End-to-end curriculum on the desk corpus: contrastive pretraining, LM
//! warm-up, then stages 1 to 3 from checkpoint to checkpoint.

use std::time::Instant;

use anyecg_core::nn::ParamGroup;
use anyecg_curriculum::desk::{desk_corpus, prepare_desk_base, tiny_model_config, DeskSizes};
use anyecg_curriculum::{run_stage, ContrastiveConfig, StageSpec, TrainError, WarmupConfig};

fn toy_spec(stage: u8) -> StageSpec {
    let mut s = StageSpec::table3(stage);
    s.batch = 8;
    s.lr = 1e-3;
    s.seed = 5;
    s
}

#[test]
fn three_stages_end_to_end() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let desk = desk_corpus(&DeskSizes::default(), 11).unwrap();
    assert_eq!(desk.corpus.samples.len(), 256, "{:?}", desk.counts);
    let cfg = tiny_model_config(11);
    let base = prepare_desk_base(
        &desk,
        &cfg,
        &ContrastiveConfig {
            epochs: 2,
            ..ContrastiveConfig::default()
        },
        &WarmupConfig {
            steps: 150,
            ..WarmupConfig::default()
        },
        dir.path(),
    )
    .unwrap();
    eprintln!("base ready after {:?}", start.elapsed());

    let mut init = base;
    for stage in 1..=3u8 {
        let out = dir.path().join(format!("stage{stage}.safetensors"));
        let metrics = dir.path().join("metrics.jsonl");
        let (_, report) = run_stage(&toy_spec(stage), &desk.corpus, &init, &out, Some(&metrics)).unwrap();
        eprintln!(
            "stage {stage}: {} steps, held-out {:.4} -> {:.4}, {:?}",
            report.steps.len(),
            report.heldout_before,
            report.heldout_after,
            start.elapsed()
        );
        assert!(report.frozen_violations.is_empty(), "{:?}", report.frozen_violations);
        assert!(!report.changed_groups.contains(&ParamGroup::LmBase));
        assert_eq!(report.changed_groups.contains(&ParamGroup::Lora), stage > 1);
        if stage == 2 {
            assert!(report.heldout_after < report.heldout_before);
        }
        init = out;
    }
    let log = std::fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    for key in ["step", "loss", "lr", "tasks"] {
        assert!(first.get(key).is_some(), "metrics line lacks {key}");
    }
    assert!(start.elapsed().as_secs() < 20 * 60);
}

#[test]
fn stages_refuse_wrong_prerequisites() {
    let dir = tempfile::tempdir().unwrap();
    let desk = desk_corpus(
        &DeskSizes {
            report_records: 8,
            arrhythmia_records: 2,
            patients: 2,
            ..DeskSizes::default()
        },
        3,
    )
    .unwrap();
    let missing = dir.path().join("nope.safetensors");
    let err = run_stage(&toy_spec(1), &desk.corpus, &missing, &dir.path().join("o"), None).unwrap_err();
    assert!(matches!(err, TrainError::MissingPrerequisite(_)), "{err}");

    let base = prepare_desk_base(
        &desk,
        &tiny_model_config(3),
        &ContrastiveConfig {
            epochs: 1,
            batch: 4,
            ..ContrastiveConfig::default()
        },
        &WarmupConfig {
            steps: 1,
            ..WarmupConfig::default()
        },
        dir.path(),
    )
    .unwrap();
    // stage 2 needs a stage-1 checkpoint, not the base
    let err = run_stage(&toy_spec(2), &desk.corpus, &base, &dir.path().join("o"), None).unwrap_err();
    assert!(matches!(err, TrainError::MissingPrerequisite(_)), "{err}");

    let mut empty = desk.corpus.clone();
    empty.samples.retain(|s| s.subset != anyecg_datagen::Subset::Reportgen);
    let err = run_stage(&toy_spec(1), &empty, &base, &dir.path().join("o"), None).unwrap_err();
    assert!(matches!(err, TrainError::EmptyDataset(_)), "{err}");
}
