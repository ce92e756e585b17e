//! End-to-end face swapping, evaluation and image I/O.

mod blend;
mod config;
mod dataset;
mod evaluate;
mod io;
mod metrics;
mod swap;

pub use blend::{blend_restore, composite, distance_to_mask, feather_mask, RING_WIDTH};
pub use config::SwapConfig;
pub use dataset::{load_landmarks, load_pairs, write_dataset, FaceRecord, PairEntry};
pub use evaluate::{evaluate, format_table, synthetic_pairs, EvalReport, MetricRow, PairResult, SwapPair};
pub use io::{load_png, quantize, save_png};
pub use metrics::{cosine_id, estimates_l1, param_l1, params_l1, ParamDistances};
pub use swap::{condition_maps, swap, swap_with_adapter, train_identity, SwapContext, SwapMetrics, SwapReport};
