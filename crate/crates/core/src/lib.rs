//! Causal event extraction with evaluator-guided reinforcement learning.
//!
//! The numeric code is generic over [`scalar::Scalar`] (`f32` or `f64`);
//! the aliases below fix it to `f64`, which every tool in the workspace uses.

pub mod dataset;
pub mod evaluator;
pub mod extractor;
pub mod gradcheck;
pub mod io;
pub mod metrics;
pub mod optim;
pub mod rl;
pub mod scalar;
pub mod synth;
pub mod tagged;
pub mod weak;

pub type Evaluator = evaluator::EvaluatorModel<f64>;
pub type Policy = extractor::PolicyModel<f64>;
pub type Reward = rl::RewardModel<f64>;
pub type Trace = extractor::ActionTrace<f64>;
