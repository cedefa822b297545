//! Dense linear algebra, the MLP and its optimizer.

mod matrix;
mod mlp;
mod optim;
mod params;

pub use matrix::{dot, Matrix};
pub use mlp::{
    l2_normalize, Activation, DenseLayer, ForwardCache, LayerRotation, MlpNetwork, Normalized,
    TeacherSnapshot,
};
pub use optim::{OptimizerState, StepScheduler};
pub use params::{LayerParams, ParamSet};
