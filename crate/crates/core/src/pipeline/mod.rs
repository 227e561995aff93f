//! End-to-end orchestration: recipes with environment overrides, stage
//! manifests with content hashes, resumable pipeline runs and reports.

mod env;
mod manifest;
mod recipe;
mod report;
mod run;

pub use env::{apply_env_overrides, parse_with_overrides, ENV_PREFIX};
pub use manifest::{hash_paths, manifest_path, read_manifests, run_id, RunManifest, WorkdirLock, LOCK_FILE, MANIFEST_DIR};
pub use recipe::{DataSpec, DistillStage, EvalSpec, ModelShape, PipelineRecipe, TokenizerSpec, TOY_RECIPE};
pub use report::{report, REPORTS_DIR, REPORT_DIR};
pub use run::{run_pipeline, Halt, PipelineOptions, PipelineRun, SeedSummary, StageOutcome, STAGES};
