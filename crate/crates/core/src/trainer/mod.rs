//! Adversarial training: loss terms, data augmentation, the Adam
//! optimizer with linear learning-rate decay, and the many-to-one
//! training loop with validation-based model selection.

pub mod adam;
pub mod augment;
pub mod losses;
pub mod train;

pub use adam::{collect_grads, lr_at, Adam, GradMap};
pub use augment::{apply_augment, augment, draw_augment, AugmentDraw, AugmentParams, RotationPlane};
pub use losses::{
    adversarial_loss, cycle_loss, discriminator_loss, generator_objective, identity_loss,
};
pub use train::{
    denormalize_age, eval_generator_objective, net_input, net_output_to_volume, normalize_age,
    pretrain_predictors, train, validate, validation_score, write_log_jsonl, Ablation, LogRecord,
    ModelBundle, SiteSet, TrainData, TrainImage, TrainOutcome, Trainer, TrainingConfig,
    ValidationResult,
};
