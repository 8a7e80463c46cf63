//! Post-processing, segmentation metrics and paired statistics.

pub mod metrics;
pub mod postprocess;
pub mod report;
pub mod stats;

pub use metrics::{boundary, dsc, hd95, nearest_rank_percentile, squared_distance_transform};
pub use postprocess::{
    clean_mask, fill_holes_3d, label_components, largest_component, postprocess, threshold, DEFAULT_THRESHOLD,
};
pub use report::{box_stats, pair_by_case, summarize, BoxStats, MetricsReport, MetricsRow, Summary};
pub use stats::{paired_t_test, student_t_two_sided_p, wilcoxon_signed_rank, PairedTestResult, TestMethod};
