use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{check_actions, seeded, EnvError, Environment, ShieldView, StepInfo, StepResult};

pub const COOPERATE: usize = 0;
pub const DEFECT: usize = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EpggConfig {
    pub n: usize,
    pub endowment: f64,
    pub mu: f64,
    pub sigma: f64,
    pub t_max: usize,
}

impl Default for EpggConfig {
    fn default() -> Self {
        Self {
            n: 2,
            endowment: 2.0,
            mu: 2.5,
            sigma: 1.0,
            t_max: 25,
        }
    }
}

/// Extended public goods game with a random multiplier.
///
/// Cooperators invest their endowment; the pot times `f_t` is split evenly
/// among all players and defectors keep their endowment. `f_t` is drawn
/// from `N(mu, sigma)` and clamped at zero, fresh for every step.
///
/// Observation: one-hot previous action of each other agent in index
/// order (zeros at the start), then the current `f_t`.
#[derive(Debug, Clone)]
pub struct Epgg {
    config: EpggConfig,
    normal: Normal<f64>,
    rng: ChaCha8Rng,
    f_t: f64,
    t: usize,
    last: Option<Vec<usize>>,
}

impl Epgg {
    pub fn new(config: EpggConfig) -> Result<Self, EnvError> {
        if config.n < 2 || config.t_max == 0 {
            return Err(EnvError::InvalidConfig(
                "EPGG needs n >= 2 and t_max > 0".into(),
            ));
        }
        let normal = Normal::new(config.mu, config.sigma)
            .map_err(|e| EnvError::InvalidConfig(e.to_string()))?;
        Ok(Self {
            config,
            normal,
            rng: seeded(0),
            f_t: 0.0,
            t: 0,
            last: None,
        })
    }

    pub fn f_t(&self) -> f64 {
        self.f_t
    }

    /// Sets the multiplier for the next step.
    pub fn set_f_t(&mut self, f: f64) {
        self.f_t = f.max(0.0);
    }

    fn draw(&mut self) {
        self.f_t = self.normal.sample(&mut self.rng).max(0.0);
    }

    /// `r_i = (1/n) sum_j c_j I_j f + c_i (1 - I_i)`.
    pub fn payoffs(&self, actions: &[usize], f: f64) -> Vec<f64> {
        let c = self.config.endowment;
        let n = self.config.n as f64;
        let invested: f64 = actions.iter().filter(|&&a| a == COOPERATE).map(|_| c).sum();
        let share = invested * f / n;
        actions
            .iter()
            .map(|&a| share + if a == COOPERATE { 0.0 } else { c })
            .collect()
    }
}

impl Environment for Epgg {
    fn num_agents(&self) -> usize {
        self.config.n
    }

    fn num_actions(&self) -> usize {
        2
    }

    fn observation_len(&self) -> usize {
        2 * (self.config.n - 1) + 1
    }

    fn t_max(&self) -> usize {
        self.config.t_max
    }

    fn reset(&mut self, seed: u64) -> Vec<Vec<f64>> {
        self.rng = seeded(seed);
        self.t = 0;
        self.last = None;
        self.draw();
        (0..self.config.n).map(|i| self.observation(i)).collect()
    }

    fn step(&mut self, actions: &[usize]) -> Result<StepResult, EnvError> {
        check_actions(actions, self.config.n, 2)?;
        if self.t >= self.config.t_max {
            return Err(EnvError::EpisodeOver);
        }
        let f = self.f_t;
        let rewards = self.payoffs(actions, f);
        self.last = Some(actions.to_vec());
        self.t += 1;
        self.draw();
        Ok(StepResult {
            observations: (0..self.config.n).map(|i| self.observation(i)).collect(),
            rewards,
            done: self.t >= self.config.t_max,
            info: StepInfo {
                f_t: f,
                ..StepInfo::default()
            },
        })
    }

    fn observation(&self, agent: usize) -> Vec<f64> {
        let mut obs = vec![0.0; self.observation_len()];
        if let Some(last) = &self.last {
            for (slot, j) in (0..self.config.n).filter(|&j| j != agent).enumerate() {
                obs[2 * slot + last[j]] = 1.0;
            }
        }
        obs[2 * (self.config.n - 1)] = self.f_t;
        obs
    }

    fn shield_view(&self, _agent: usize) -> ShieldView {
        ShieldView::Multiplier(self.f_t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn payoff_example() {
        let g = Epgg::new(EpggConfig::default()).unwrap();
        assert_eq!(g.payoffs(&[COOPERATE, DEFECT], 3.0), vec![3.0, 5.0]);
        assert_eq!(g.payoffs(&[COOPERATE, COOPERATE], 3.0), vec![6.0, 6.0]);
    }

    #[test]
    fn payout_conservation() {
        let g = Epgg::new(EpggConfig {
            n: 5,
            ..EpggConfig::default()
        })
        .unwrap();
        let a = [0, 1, 0, 0, 1];
        let f = 1.7;
        let total: f64 = g.payoffs(&a, f).iter().sum();
        assert!((total - (f * 6.0 + 4.0)).abs() < 1e-12);
    }

    #[test]
    fn observation_layout() {
        let mut g = Epgg::new(EpggConfig {
            n: 3,
            ..EpggConfig::default()
        })
        .unwrap();
        let obs = g.reset(1);
        assert_eq!(obs[0].len(), 5);
        assert_eq!(&obs[0][..4], &[0.0; 4]);
        let r = g.step(&[0, 1, 0]).unwrap();
        assert_eq!(&r.observations[0][..4], &[0.0, 1.0, 1.0, 0.0]);
        assert_eq!(&r.observations[1][..4], &[1.0, 0.0, 1.0, 0.0]);
        assert_eq!(r.observations[0][4], g.f_t());
    }

    #[test]
    fn first_draw_replays_rng() {
        let mut g = Epgg::new(EpggConfig::default()).unwrap();
        let obs = g.reset(11);
        let mut rng = seeded(11);
        let expect = Normal::new(2.5f64, 1.0).unwrap().sample(&mut rng).max(0.0);
        assert_eq!(obs[0][2], expect);
    }
}
