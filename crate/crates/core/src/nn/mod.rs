//! Minimal differentiable core: flat parameters, dense networks, action
//! distributions with analytic gradients, and Adam.

mod adam;
pub mod dist;
mod mlp;
mod params;
mod policy;

pub use adam::{Adam, StepInfo};
pub use dist::{Categorical, DiagGaussian, GaussianGrad};
pub use mlp::{orthogonal, Mlp, MlpCache};
pub use params::{ParamSlice, ParameterVector};
pub use policy::{
    ActionHead, Actor, Critic, OutputGrad, PolicyOutput, DEFAULT_HIDDEN, INITIAL_LOG_STD, POLICY_OUTPUT_GAIN,
    VALUE_OUTPUT_GAIN,
};
