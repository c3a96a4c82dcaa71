//! Multilevel proximal policy optimization over a hierarchy of
//! finite-volume porous-media flow environments.
//!
//! * [`fvsim`]: pressure and transport solver used as the transition function.
//! * [`perm`]: channel and kriged permeability samplers.
//! * [`scenario`]: connectivity-distance clustering of permeability samples.
//! * [`env`]: episodic waterflooding environment.
//! * [`multilevel`]: grid transfers and synchronized level stacks.
//! * [`policy`]: Gaussian MLP policy with manual gradients and Adam.
//! * [`ppo`]: rollout buffers, GAE, batching, losses and training loops.
//! * [`analysis`]: multilevel Monte Carlo analysis of the PPO objective.

pub mod analysis;
pub mod error;
pub mod fvsim;
pub mod env;
pub mod multilevel;
pub mod perm;
pub mod policy;
pub mod ppo;
pub mod scenario;

pub use error::{Error, Result};
