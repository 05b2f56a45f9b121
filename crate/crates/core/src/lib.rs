//! Implicit grasp policies over synthetic tabletop scenes.
//!
//! A grasp value function maps tool-center-point poses and a differentiable
//! scene field to scalar values; inference runs Adam ascent on that value.
//! Training combines a contrastive value loss over demonstrated grasps with
//! an auxiliary loss that aligns the value function's pose-gradients with
//! demonstrated trajectories, which requires nested differentiation.

pub mod autodiff;
pub mod config;
pub mod envs;
pub mod nn;
pub mod policy;
pub mod pose;
pub mod scene;
pub mod seeds;
pub mod training;
pub mod tuner;
pub mod value;
