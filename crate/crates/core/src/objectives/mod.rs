//! Losses, pseudo-label filters, prototypes and schedules. Every loss with a
//! `_grad` variant returns its value together with the gradient w.r.t. the
//! probability map (class-major, like [`ProbMap::data`](crate::volume::ProbMap::data))
//! or the embedding map (dim-major).

pub mod compose;
pub mod proto;
pub mod pseudo;
pub mod schedule;
pub mod supervised;

pub use compose::{total_loss, unsupervised_loss, LossWeights};
pub use proto::{
    compute_prototypes, contrastive_loss, contrastive_loss_grad, proto_distribution, ContrastiveItem,
    ContrastiveParams, Distance, Prototypes,
};
pub use pseudo::{
    diff_mask, entropy_filter, entropy_map, reg_loss, reg_loss_grad, reliability_partition, ReliabilityPartition,
};
pub use schedule::{lambda_c_schedule, lr_schedule, threshold_schedule, LambdaC, LrSchedule, ThresholdSchedule};
pub use supervised::{
    ce_dice_grad, ce_loss, ce_loss_grad, dice_loss, dice_loss_grad, supervised_loss, supervised_loss_batch,
    CE_CLAMP, DICE_EPS,
};
