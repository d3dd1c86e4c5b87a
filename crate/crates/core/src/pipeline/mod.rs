//! Semi-supervised segmentation training on synthetic images.

mod config;
mod data;
mod losses;
mod model;
mod train;

pub use config::{CutmixTarget, PerturbMode, TrainConfig};
pub use data::{dataset_csv, gen_synthetic_dataset, stack_images, SyntheticSample};
pub use losses::{
    cutmix_apply, cutmix_pair, ema_update, labeled_loss, mask_unconfident, pseudo_label, recon_l1, seg_ce, Geometric, Rect, ViewAug, IGNORE,
};
pub use model::{encode, forward, slot, Arch, ForwardOut, FrozenAssignment, ModelVars, Perturbation, QuantMode, SegModel, PARAM_NAMES};
pub use train::{
    arch_of, evaluate_model, load_checkpoint, save_checkpoint, teacher_pseudo_labels, test_dataset, total_loss, train, Batch, LossContext, LossTerms, StepLog,
    TrainRun, Trainer,
};
