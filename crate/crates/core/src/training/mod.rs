//! Target assignment, losses, the optimiser and the training loop.

mod adam;
mod fit;
mod loss;
mod targets;

pub use adam::Adam;
pub use fit::{
    compute_gradients, fit, stack_images, train_step, EpochRecord, History, NoObserver, StepResult,
    TrainConfig, TrainObserver, BN_MOMENTUM,
};
pub use loss::{detection_loss, detection_loss_graph, domain_loss, domain_loss_graph, LossBreakdown};
pub use targets::{assign_targets, Assignment, GtObject, ImageTargets, ScaleTargets, TargetAssignment};
