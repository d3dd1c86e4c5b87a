//! Segmentation overlap and boundary metrics, and paired significance tests.

mod mask;
mod overlap;
mod report;
mod stats;
mod surface;

pub use mask::{Mask, MaskPair};
pub use overlap::dice_jaccard;
pub use report::{evaluate, evaluate_sample, Aggregate, MetricsReport, SampleMetrics};
pub use stats::{inc_beta, ln_gamma, paired_t_test, t_two_tailed, TTest};
pub use surface::{boundary_distances, percentile_sorted, surface_metrics};
