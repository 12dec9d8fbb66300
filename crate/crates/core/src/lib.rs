//! Discovering sets of diverse, near-optimal policies in tabular
//! average-reward MDPs.
//!
//! Policies are compared through their successor features (the expected
//! feature vector under the stationary distribution). Starting from an
//! optimal policy for the extrinsic reward, [`dsp::run_dsp`] repeatedly
//! solves a constrained MDP that maximizes an intrinsic diversity reward
//! while keeping the extrinsic value above `α·v_e*`.

pub mod error;
pub mod lp;
pub mod diversity;
pub mod envs;
pub mod mdp;
pub mod oracle;
pub mod robustness;
pub mod cmdp;
pub mod dsp;

pub use error::{Error, Result};
