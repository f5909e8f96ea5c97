//! Dense-tensor numerical core: layer primitives with explicit gradient rules,
//! the parameter registry, Adam, and a finite-difference gradient checker.

pub mod adam;
pub mod gradcheck;
pub mod ops;
pub mod params;

pub use adam::{adam_step, AdamConfig};
pub use gradcheck::{finite_diff_check, relative_error, CoordSample, GradCheck};
pub use ops::{
    agent_max_pool, agent_max_pool_backward, conv2d, conv2d_backward, linear, linear_backward, relu,
    relu_backward, scale_shift, scale_shift_backward, Conv2dGrads, LinearGrads, PoolArgmax,
    ScaleShiftGrads,
};
pub use params::{GradMap, ParamEntry, ParamRegistry};
