use std::path::Path;
use std::time::Instant;

use dforge::error::Error;
use dforge::io::content_hash;
use dforge::pipeline::{read_manifests, report, run_pipeline, Halt, PipelineOptions, PipelineRecipe, LOCK_FILE};

fn final_hashes(wd: &Path) -> Vec<(String, String)> {
    let mut out: Vec<(String, String)> = read_manifests(wd)
        .unwrap()
        .into_iter()
        .filter(|m| m.stage != "evaluate")
        .flat_map(|m| m.outputs.into_iter())
        .collect();
    out.sort();
    out
}

/// The shipped toy recipe cut down to a few seconds.
fn small_recipe() -> PipelineRecipe {
    let vars = [
        ("TOKENIZER__VOCAB_SIZE", "200"),
        ("DATA__NLU_TRAIN", "120"),
        ("DATA__NLU_VAL", "40"),
        ("DATA__NLU_TEST", "60"),
        ("STAGE1__MAX_STEPS", "300"),
        ("STAGE2__MAX_STEPS", "150"),
        ("STAGE2__EVAL_EVERY", "50"),
        ("STAGE2__CHECKPOINT_EVERY", "50"),
        ("FINETUNE__EPOCHS", "3"),
        ("TASK_DISTILL__TRAIN__EPOCHS", "3"),
        ("EVALUATE__FROZEN__EPOCHS", "3"),
    ]
    .map(|(k, v)| (format!("DFORGE_{k}"), v.to_string()));
    PipelineRecipe::from_toml(dforge::pipeline::TOY_RECIPE, Path::new("."), vars).unwrap()
}

#[test]
fn toy_recipe_end_to_end_resume_and_staleness() {
    let recipe = small_recipe();
    let a = tempfile::tempdir().unwrap();
    let t0 = Instant::now();
    let run = run_pipeline(&recipe, a.path(), &PipelineOptions::default()).unwrap();
    eprintln!("full toy pipeline: {:.1}s", t0.elapsed().as_secs_f64());
    assert!(run.halted.is_none());
    assert_eq!(run.manifests.len(), 10);
    let text = run.report.unwrap();
    assert!(text.contains("relative change vs stage1"), "{text}");
    assert!(!a.path().join(LOCK_FILE).exists());

    // Every manifest input is the output of an earlier manifest.
    let manifests = read_manifests(a.path()).unwrap();
    let produced: std::collections::BTreeMap<String, String> =
        manifests.iter().flat_map(|m| m.outputs.clone()).collect();
    for m in &manifests {
        for (p, h) in &m.inputs {
            assert_eq!(produced.get(p), Some(h), "{} input {p}", m.stage);
        }
    }

    let again = run_pipeline(&recipe, a.path(), &PipelineOptions::default()).unwrap();
    assert_eq!(again.steps_executed(), 0);
    assert!(again.stages.iter().all(|s| s.skipped));
    assert_eq!(report(a.path(), Some("stage1")).unwrap(), text);

    // Interrupted mid-pretraining, then resumed.
    let b = tempfile::tempdir().unwrap();
    let halt = PipelineOptions { halt: Some(Halt { stage: "stage2".into(), step: 70 }) };
    let first = run_pipeline(&recipe, b.path(), &halt).unwrap();
    assert_eq!(first.halted.as_deref(), Some("stage2"));
    let halt = PipelineOptions { halt: Some(Halt { stage: "final".into(), step: 0 }) };
    assert_eq!(run_pipeline(&recipe, b.path(), &halt).unwrap().halted.as_deref(), Some("final"));
    let resumed = run_pipeline(&recipe, b.path(), &PipelineOptions::default()).unwrap();
    assert!(resumed.halted.is_none());
    assert_eq!(final_hashes(a.path()), final_hashes(b.path()));

    // Tampering with a completed artifact is detected.
    std::fs::write(a.path().join("data/nlu_test.jsonl"), "{}\n").unwrap();
    let err = run_pipeline(&recipe, a.path(), &PipelineOptions::default()).unwrap_err();
    assert!(matches!(&err, Error::Stage { source, .. } if matches!(**source, Error::StaleArtifact(_))), "{err}");
    assert_eq!(err.exit_code(), 2);
    assert!(content_hash(&a.path().join("stage1/model")).is_ok());
}

#[test]
fn locked_workdir_is_refused() {
    let d = tempfile::tempdir().unwrap();
    std::fs::write(d.path().join(LOCK_FILE), "1\n").unwrap();
    let err = run_pipeline(&small_recipe(), d.path(), &PipelineOptions::default()).unwrap_err();
    assert!(matches!(err, Error::Validation(_)));
}
