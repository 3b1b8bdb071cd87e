use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{check_actions, seeded, EnvError, Environment, ShieldView, StepInfo, StepResult};

pub const LEFT: usize = 0;
pub const RIGHT: usize = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CartSafeConfig {
    pub gravity: f64,
    pub mass_cart: f64,
    pub mass_pole: f64,
    /// Half the pole length.
    pub length: f64,
    pub force_mag: f64,
    pub tau: f64,
    pub x_max: f64,
    pub t_max: usize,
    /// Reward threshold on the pole angle, in degrees.
    pub angle_limit_deg: f64,
}

impl Default for CartSafeConfig {
    fn default() -> Self {
        Self {
            gravity: 9.8,
            mass_cart: 1.0,
            mass_pole: 0.1,
            length: 0.5,
            force_mag: 10.0,
            tau: 0.02,
            x_max: 2.4,
            t_max: 200,
            angle_limit_deg: 15.0,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CartState {
    pub x: f64,
    pub x_dot: f64,
    pub theta: f64,
    pub theta_dot: f64,
}

/// Cart-pole without angle termination. The pole may swing freely; each
/// step pays +1 while the wrapped angle is within the limit and -1
/// otherwise. Episodes end at `t_max` or when the cart leaves the track.
///
/// Observation: `(x, x_dot, theta, theta_dot)`.
#[derive(Debug, Clone)]
pub struct CartSafe {
    config: CartSafeConfig,
    rng: ChaCha8Rng,
    state: CartState,
    t: usize,
    done: bool,
}

/// One explicit Euler step of the cart-pole equations of motion.
pub fn cartpole_euler(c: &CartSafeConfig, s: CartState, action: usize) -> CartState {
    let force = if action == RIGHT {
        c.force_mag
    } else {
        -c.force_mag
    };
    let total_mass = c.mass_cart + c.mass_pole;
    let pml = c.mass_pole * c.length;
    let (sin, cos) = s.theta.sin_cos();
    let temp = (force + pml * s.theta_dot * s.theta_dot * sin) / total_mass;
    let theta_acc = (c.gravity * sin - cos * temp)
        / (c.length * (4.0 / 3.0 - c.mass_pole * cos * cos / total_mass));
    let x_acc = temp - pml * theta_acc * cos / total_mass;
    CartState {
        x: s.x + c.tau * s.x_dot,
        x_dot: s.x_dot + c.tau * x_acc,
        theta: s.theta + c.tau * s.theta_dot,
        theta_dot: s.theta_dot + c.tau * theta_acc,
    }
}

/// Angle mapped to `(-pi, pi]`.
pub fn wrap_angle(theta: f64) -> f64 {
    use std::f64::consts::PI;
    let w = (theta + PI).rem_euclid(2.0 * PI) - PI;
    if w == -PI {
        PI
    } else {
        w
    }
}

impl CartSafe {
    pub fn new(config: CartSafeConfig) -> Result<Self, EnvError> {
        if config.x_max <= 0.0 || config.tau <= 0.0 || config.t_max == 0 {
            return Err(EnvError::InvalidConfig(
                "CartSafe needs positive x_max, tau and t_max".into(),
            ));
        }
        Ok(Self {
            config,
            rng: seeded(0),
            state: CartState::default(),
            t: 0,
            done: false,
        })
    }

    pub fn state(&self) -> CartState {
        self.state
    }

    pub fn set_state(&mut self, state: CartState) {
        self.state = state;
    }

    pub fn x_max(&self) -> f64 {
        self.config.x_max
    }

    pub fn config(&self) -> &CartSafeConfig {
        &self.config
    }
}

impl Environment for CartSafe {
    fn num_agents(&self) -> usize {
        1
    }

    fn num_actions(&self) -> usize {
        2
    }

    fn observation_len(&self) -> usize {
        4
    }

    fn t_max(&self) -> usize {
        self.config.t_max
    }

    fn reset(&mut self, seed: u64) -> Vec<Vec<f64>> {
        self.rng = seeded(seed);
        let mut u = || self.rng.random_range(-0.05..0.05);
        self.state = CartState {
            x: u(),
            x_dot: u(),
            theta: u(),
            theta_dot: u(),
        };
        self.t = 0;
        self.done = false;
        vec![self.observation(0)]
    }

    fn step(&mut self, actions: &[usize]) -> Result<StepResult, EnvError> {
        check_actions(actions, 1, 2)?;
        if self.done {
            return Err(EnvError::EpisodeOver);
        }
        self.state = cartpole_euler(&self.config, self.state, actions[0]);
        self.t += 1;
        let upright =
            wrap_angle(self.state.theta).abs() <= self.config.angle_limit_deg.to_radians();
        let reward = if upright { 1.0 } else { -1.0 };
        self.done = self.t >= self.config.t_max || self.state.x.abs() > self.config.x_max;
        Ok(StepResult {
            observations: vec![self.observation(0)],
            rewards: vec![reward],
            done: self.done,
            info: StepInfo::default(),
        })
    }

    fn observation(&self, _agent: usize) -> Vec<f64> {
        let s = self.state;
        vec![s.x, s.x_dot, s.theta, s.theta_dot]
    }

    fn shield_view(&self, _agent: usize) -> ShieldView {
        ShieldView::Cart {
            x: self.state.x,
            x_max: self.config.x_max,
        }
    }
}
