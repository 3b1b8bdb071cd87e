pub mod agents;
pub mod engine;
pub mod envs;
pub mod harness;
pub mod nn;
pub mod shields;
