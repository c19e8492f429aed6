// SPDX-License-Identifier: MIT OR Apache-2.0

//! Injection metrics, the (layer, magnitude) sweep harness, dataset
//! statistics and FLOP accounting for memory encodings.

mod flops;
mod metrics;
mod sweep;

pub use flops::{average_total_flops, flops_for_encoding, FlopReport, REFERENCE_MEMORY_LENGTHS};
pub use metrics::{
    answer_probability, answer_token, dataset_stats, percent_difference, robust_mean, surprisal, DatasetStats,
    HopStats, LogBase,
};
pub use sweep::{
    prepare_prompt, read_sweep_sidecar, run_injection_sweep, run_pos_sweep, run_random_injection, sweep_csv,
    write_sweep, MemorySource, PosResult, PreparedPrompt, PromptResult, SweepCell, SweepConfig, SweepGrid,
};
