use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{check_actions, seeded, EnvError, Environment, ShieldView, StepInfo, StepResult};

pub const CONTINUE: usize = 0;
pub const STOP: usize = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CentipedeConfig {
    pub p0: f64,
    /// Pot growth per Continue action.
    pub growth: f64,
    /// Number of combined rounds.
    pub t_max: usize,
}

impl Default for CentipedeConfig {
    fn default() -> Self {
        Self {
            p0: 1.0,
            growth: 2.0,
            t_max: 50,
        }
    }
}

/// Two-player Centipede encoded as repeated simultaneous rounds.
///
/// Each step is one combined round: the first mover decides, then the
/// second. A Continue adds `growth` to the pot, so a round where both
/// continue adds `2 * growth`. The player who stops at pot `p` receives
/// `p/2 + 1` and the other `p/2 - 1`; after `t_max` rounds both get `p/2`.
/// The first mover is drawn at reset.
///
/// Observation: `(pot / final pot, is first mover, round / t_max)`.
#[derive(Debug, Clone)]
pub struct CentipedeGame {
    config: CentipedeConfig,
    rng: ChaCha8Rng,
    pot: f64,
    t: usize,
    first: usize,
    done: bool,
}

impl CentipedeGame {
    pub fn new(config: CentipedeConfig) -> Result<Self, EnvError> {
        if config.t_max == 0 || config.growth <= 0.0 {
            return Err(EnvError::InvalidConfig(
                "centipede needs t_max > 0 and positive growth".into(),
            ));
        }
        let pot = config.p0;
        Ok(Self {
            config,
            rng: seeded(0),
            pot,
            t: 0,
            first: 0,
            done: false,
        })
    }

    /// Pot after `t_max` rounds of mutual Continue.
    pub fn final_pot(&self) -> f64 {
        self.config.p0 + 2.0 * self.config.growth * self.config.t_max as f64
    }

    /// Per-agent return when both players always continue.
    pub fn full_cooperation_return(&self) -> f64 {
        self.final_pot() / 2.0
    }

    pub fn pot(&self) -> f64 {
        self.pot
    }

    pub fn first_mover(&self) -> usize {
        self.first
    }
}

impl Environment for CentipedeGame {
    fn num_agents(&self) -> usize {
        2
    }

    fn num_actions(&self) -> usize {
        2
    }

    fn observation_len(&self) -> usize {
        3
    }

    fn t_max(&self) -> usize {
        self.config.t_max
    }

    fn reset(&mut self, seed: u64) -> Vec<Vec<f64>> {
        self.rng = seeded(seed);
        self.first = self.rng.random_range(0..2);
        self.pot = self.config.p0;
        self.t = 0;
        self.done = false;
        (0..2).map(|i| self.observation(i)).collect()
    }

    fn step(&mut self, actions: &[usize]) -> Result<StepResult, EnvError> {
        check_actions(actions, 2, 2)?;
        if self.done {
            return Err(EnvError::EpisodeOver);
        }
        let (first, second) = (self.first, 1 - self.first);
        let mut rewards = vec![0.0; 2];
        if actions[first] == STOP {
            rewards[first] = self.pot / 2.0 + 1.0;
            rewards[second] = self.pot / 2.0 - 1.0;
            self.done = true;
        } else {
            self.pot += self.config.growth;
            if actions[second] == STOP {
                rewards[second] = self.pot / 2.0 + 1.0;
                rewards[first] = self.pot / 2.0 - 1.0;
                self.done = true;
            } else {
                self.pot += self.config.growth;
                self.t += 1;
                if self.t >= self.config.t_max {
                    rewards = vec![self.pot / 2.0; 2];
                    self.done = true;
                }
            }
        }
        Ok(StepResult {
            observations: (0..2).map(|i| self.observation(i)).collect(),
            rewards,
            done: self.done,
            info: StepInfo {
                pot: self.pot,
                ..StepInfo::default()
            },
        })
    }

    fn observation(&self, agent: usize) -> Vec<f64> {
        vec![
            self.pot / self.final_pot(),
            if agent == self.first { 1.0 } else { 0.0 },
            self.t as f64 / self.config.t_max as f64,
        ]
    }

    fn shield_view(&self, _agent: usize) -> ShieldView {
        ShieldView::None
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_cooperation() {
        let mut g = CentipedeGame::new(CentipedeConfig::default()).unwrap();
        g.reset(3);
        let mut total = [0.0; 2];
        let mut steps = 0;
        loop {
            let r = g.step(&[CONTINUE, CONTINUE]).unwrap();
            total[0] += r.rewards[0];
            total[1] += r.rewards[1];
            steps += 1;
            if r.done {
                break;
            }
        }
        assert_eq!(steps, 50);
        assert_eq!(total, [100.5, 100.5]);
        assert_eq!(g.full_cooperation_return(), 100.5);
    }

    #[test]
    fn stop_payoffs() {
        let mut g = CentipedeGame::new(CentipedeConfig::default()).unwrap();
        g.reset(5);
        let f = g.first_mover();
        let mut a = [CONTINUE; 2];
        a[f] = STOP;
        let r = g.step(&a).unwrap();
        assert!(r.done);
        assert_eq!(r.rewards[f], 1.5);
        assert_eq!(r.rewards[1 - f], -0.5);

        g.reset(5);
        let mut a = [CONTINUE; 2];
        a[1 - f] = STOP;
        let r = g.step(&a).unwrap();
        assert_eq!(r.rewards[1 - f], 3.0 / 2.0 + 1.0);
        assert_eq!(r.rewards[f], 3.0 / 2.0 - 1.0);
    }

    #[test]
    fn first_mover_varies_with_seed() {
        let mut g = CentipedeGame::new(CentipedeConfig::default()).unwrap();
        let movers: std::collections::HashSet<_> = (0..20)
            .map(|s| {
                g.reset(s);
                g.first_mover()
            })
            .collect();
        assert_eq!(movers.len(), 2);
    }
}
