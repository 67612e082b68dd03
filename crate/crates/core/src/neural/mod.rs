//! Dense + batch-norm networks with exact manual gradients.

pub mod forward;
pub mod losses;
pub mod matrix;
pub mod ops;
pub mod params;
pub mod scalar;
pub mod spec;

pub use forward::{
    backward, forward, grad_inputs, grad_params, Adjoint, ForwardTrace, LossFn, LossGrads, Objective,
    StatsMode, SumLoss, TraceLoss, BN_EPS,
};
pub use losses::{Constant, MeanEntropy, Rows, SoftTargetCe, SumObjective, ZeroOneError};
pub use matrix::Matrix;
pub use ops::{bn_batch_statistics, entropy, param_axpy, softmax};
pub use params::{ParamDelta, ParamLayout, ParamRole, ParamSlot, ParamVector, RoleMask};
pub use scalar::{Dual, Real};
pub use spec::{LayerKind, LayerSpec, ModelSpec};
