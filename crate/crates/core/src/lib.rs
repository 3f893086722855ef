//! Selective-scan object detector, knowledge distillation, synthetic scene
//! data, a room navigation simulator and PPO.

pub mod bench;
pub mod checkpoint;
pub mod detector;
pub mod distill;
pub mod error;
pub mod layers;
pub mod navsim;
pub mod ppo;
pub mod scenegen;
pub mod ssm;

pub use error::{Error, Result};
