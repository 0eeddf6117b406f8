//! Synthetic interconnected-knowledge QA worlds, a micro language model
//! trained to memorize them, and unlearning algorithms evaluated for faithful
//! versus superficial forgetting.

pub mod autograd;
pub mod evalkit;
pub mod microlm;
pub mod rng;
pub mod unlearn;
pub mod worldgen;
