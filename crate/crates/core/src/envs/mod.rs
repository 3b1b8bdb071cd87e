//! Game environments with a common joint-action interface.

pub mod cartsafe;
pub mod centipede;
pub mod epgg;
pub mod msh;
pub mod staghunt;

use thiserror::Error;

pub use cartsafe::{CartSafe, CartSafeConfig, CartState};
pub use centipede::{CentipedeConfig, CentipedeGame};
pub use epgg::{Epgg, EpggConfig};
pub use msh::{MarkovStagHunt, MshConfig, CELL_CATEGORIES};
pub use staghunt::{
    staghunt_mixed_nash, staghunt_payoff_matrix, PayoffMatrix, StagHuntConfig, StagHuntGame,
};

#[derive(Debug, Clone, Error, PartialEq)]
pub enum EnvError {
    #[error("invalid environment config: {0}")]
    InvalidConfig(String),
    #[error("action {action} of agent {agent} is out of range")]
    OutOfRangeAction { agent: usize, action: usize },
    #[error("expected {expected} actions, got {found}")]
    WrongActionCount { expected: usize, found: usize },
    #[error("episode is over; call reset")]
    EpisodeOver,
}

/// Per-step event counters, indexed by agent where applicable.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepInfo {
    pub plants: Vec<u32>,
    pub stags: Vec<u32>,
    pub penalties: Vec<u32>,
    pub pot: f64,
    pub f_t: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub observations: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
    pub done: bool,
    pub info: StepInfo,
}

/// The state a sensor pipeline reads for one agent.
#[derive(Debug, Clone, PartialEq)]
pub enum ShieldView {
    None,
    Multiplier(f64),
    Grid {
        own: (usize, usize),
        others: Vec<(usize, usize)>,
        stag: (usize, usize),
    },
    Cart {
        x: f64,
        x_max: f64,
    },
    /// Sensor values supplied directly by the environment.
    Sensors(Vec<f64>),
}

pub trait Environment: Send {
    fn num_agents(&self) -> usize;
    fn num_actions(&self) -> usize;
    fn observation_len(&self) -> usize;
    fn t_max(&self) -> usize;
    /// Starts an episode; deterministic in `seed`.
    fn reset(&mut self, seed: u64) -> Vec<Vec<f64>>;
    fn step(&mut self, actions: &[usize]) -> Result<StepResult, EnvError>;
    fn observation(&self, agent: usize) -> Vec<f64>;
    fn shield_view(&self, agent: usize) -> ShieldView;
}

pub(crate) fn check_actions(
    actions: &[usize],
    n: usize,
    num_actions: usize,
) -> Result<(), EnvError> {
    if actions.len() != n {
        return Err(EnvError::WrongActionCount {
            expected: n,
            found: actions.len(),
        });
    }
    match actions.iter().position(|&a| a >= num_actions) {
        Some(agent) => Err(EnvError::OutOfRangeAction {
            agent,
            action: actions[agent],
        }),
        None => Ok(()),
    }
}

pub(crate) fn seeded(seed: u64) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    rand_chacha::ChaCha8Rng::seed_from_u64(seed)
}
