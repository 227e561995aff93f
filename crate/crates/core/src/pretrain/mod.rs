//! Masked-LM pretraining: masking policy, learning-rate schedule, AdamW,
//! the resumable training loop and Stage-2 continuation.

mod accumulate;
mod masking;
mod optim;
mod train;

pub use accumulate::accumulate_gradients;
pub use masking::{apply_masking, mask_for_training, Masked, MaskingPolicy};
pub use optim::{
    clip_global_norm, decay_mask, global_norm, optimizer_step, AdamConfig, AdamState, Schedule, WarmupShape,
};
pub use train::{
    checkpoint_name, encode_sequences, latest_checkpoint, mlm_batch_gradient, stage2_continue, train_mlm, BatchPlan,
    CheckpointMeta, EvalHook, MetricRecord, Stage, Start, TrainCheckpoint, TrainConfig, TrainOutcome, TrainSpec, LATEST,
    META, METRICS, OPT_BLOB, OPT_MANIFEST,
};
