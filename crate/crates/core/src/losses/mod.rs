//! Continual-learning loss terms, importance estimators and the RWC rotation.

pub mod classification;
pub mod importance;
pub mod lucir;
mod objective;
pub mod rwc;

pub use classification::{
    cross_distillation, cross_entropy, distillation_loss, ilos_adjust_logits, ilos_loss,
    old_class_ratio, recorded_probabilities, softmax, LossGrad,
};
pub use importance::{
    empirical_fisher, estimate_fisher, ewc_penalty, mas_importance, mas_penalty, ImportanceKind,
    MasFunctional, ParameterImportance,
};
pub use lucir::{lucir_dis, lucir_lambda, lucir_mr, margin_ranking};
pub use objective::{objective, LossConfig, Method, Objective, PreviousTasks, TrainingBatch};
pub use rwc::{reexpress_importance, rwc_rotate, RotationContext};
