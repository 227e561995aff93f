//! Measurement: masked-LM perplexity, noun mask-filling accuracy, SemER,
//! exact match, intent/slot error rates and correlation statistics.

mod lm;
mod nlu;
mod report;
mod stats;

pub use lm::{
    build_mask_fill_tasks, ensure_held_out, mask_fill_accuracy, mask_fill_hits, masked_lm_loss, masked_lm_totals, perplexity,
    score_predictions, MaskFillTask,
};
pub use nlu::{
    chunk_f1, corpus_semer, exact_match_error, ic_sf_errors, nlu_metrics, semer, semer_counts, token_slot_error, weighted_mean,
    NluMetrics, Prediction, SemErCounts,
};
pub use report::{delta_table, relative_delta, EvalReport, TSV_HEADER};
pub use stats::{correlation_report, mean, median, ranks, stddev, Correlation};
