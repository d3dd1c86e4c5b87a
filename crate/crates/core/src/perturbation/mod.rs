//! Distance-weighted codeword resampling and its divergence analytics.

mod dropout;
mod kernel;
mod report;
mod sampling;

pub use dropout::{gaussian_kl, kl_dropout, kl_dropout_with_prior, DropoutKl};
pub use kernel::{
    bounds_eps1, bounds_eps1_with, bounds_from_range, distance_matrix, kl_qpm, perturbed_marginal, transition_kernel,
    transition_kernel_with, KernelDistance, MarginalBounds, PerturbationKernel, PerturbedMarginal,
};
pub use report::{compare_report, report_csv, PerturbationKind, ReportRow};
pub use sampling::{keyed_uniform, sample_indices, sample_perturbed, sample_row};
