use super::{check_actions, EnvError, Environment, ShieldView, StepInfo, StepResult};
use serde::{Deserialize, Serialize};

pub const STAG: usize = 0;
pub const HARE: usize = 1;

/// `u[a_row][a_col] = (row reward, column reward)`.
pub type PayoffMatrix = [[(f64, f64); 2]; 2];

pub fn staghunt_payoff_matrix() -> PayoffMatrix {
    [[(5.0, 5.0), (-1.0, 3.0)], [(3.0, -1.0), (2.0, 2.0)]]
}

/// Symmetric mixed equilibrium `(p_stag, p_hare)` of the payoff matrix,
/// from the row player's indifference condition.
pub fn staghunt_mixed_nash() -> [f64; 2] {
    let u = staghunt_payoff_matrix();
    let (a, c) = (u[STAG][STAG].0, u[STAG][HARE].0);
    let (g, d) = (u[HARE][STAG].0, u[HARE][HARE].0);
    let p = (d - c) / (a - c - g + d);
    [p, 1.0 - p]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StagHuntConfig {
    pub t_max: usize,
}

impl Default for StagHuntConfig {
    fn default() -> Self {
        Self { t_max: 25 }
    }
}

/// Repeated two-player Stag-Hunt. Action 0 is stag, 1 is hare.
///
/// Observation: one-hot of the previous joint action seen from the agent's
/// side (`own * 2 + other`) followed by an episode-start flag.
#[derive(Debug, Clone)]
pub struct StagHuntGame {
    config: StagHuntConfig,
    payoff: PayoffMatrix,
    t: usize,
    last: Option<[usize; 2]>,
}

impl StagHuntGame {
    pub fn new(config: StagHuntConfig) -> Result<Self, EnvError> {
        if config.t_max == 0 {
            return Err(EnvError::InvalidConfig("t_max must be positive".into()));
        }
        Ok(Self {
            config,
            payoff: staghunt_payoff_matrix(),
            t: 0,
            last: None,
        })
    }

    pub fn payoff(&self) -> &PayoffMatrix {
        &self.payoff
    }
}

impl Environment for StagHuntGame {
    fn num_agents(&self) -> usize {
        2
    }

    fn num_actions(&self) -> usize {
        2
    }

    fn observation_len(&self) -> usize {
        5
    }

    fn t_max(&self) -> usize {
        self.config.t_max
    }

    fn reset(&mut self, _seed: u64) -> Vec<Vec<f64>> {
        self.t = 0;
        self.last = None;
        (0..2).map(|i| self.observation(i)).collect()
    }

    fn step(&mut self, actions: &[usize]) -> Result<StepResult, EnvError> {
        check_actions(actions, 2, 2)?;
        if self.t >= self.config.t_max {
            return Err(EnvError::EpisodeOver);
        }
        let (r0, r1) = self.payoff[actions[0]][actions[1]];
        self.last = Some([actions[0], actions[1]]);
        self.t += 1;
        Ok(StepResult {
            observations: (0..2).map(|i| self.observation(i)).collect(),
            rewards: vec![r0, r1],
            done: self.t >= self.config.t_max,
            info: StepInfo::default(),
        })
    }

    fn observation(&self, agent: usize) -> Vec<f64> {
        let mut obs = vec![0.0; 5];
        match self.last {
            Some(joint) => obs[joint[agent] * 2 + joint[1 - agent]] = 1.0,
            None => obs[4] = 1.0,
        }
        obs
    }

    fn shield_view(&self, _agent: usize) -> ShieldView {
        ShieldView::None
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn payoffs() {
        let mut g = StagHuntGame::new(StagHuntConfig::default()).unwrap();
        assert_eq!(g.reset(0)[0], vec![0.0, 0.0, 0.0, 0.0, 1.0]);
        assert_eq!(g.step(&[HARE, HARE]).unwrap().rewards, vec![2.0, 2.0]);
        let r = g.step(&[STAG, STAG]).unwrap();
        assert_eq!(r.rewards, vec![5.0, 5.0]);
        let r = g.step(&[STAG, HARE]).unwrap();
        assert_eq!(r.rewards, vec![-1.0, 3.0]);
        assert_eq!(r.observations[0], vec![0.0, 1.0, 0.0, 0.0, 0.0]);
        assert_eq!(r.observations[1], vec![0.0, 0.0, 1.0, 0.0, 0.0]);
        assert!(g.step(&[STAG, 2]).is_err());
    }

    #[test]
    fn symmetric() {
        let u = staghunt_payoff_matrix();
        for a in 0..2 {
            for b in 0..2 {
                assert_eq!(u[a][b].0, u[b][a].1);
            }
        }
    }

    #[test]
    fn episode_length() {
        let mut g = StagHuntGame::new(StagHuntConfig::default()).unwrap();
        g.reset(0);
        for t in 0..25 {
            assert_eq!(g.step(&[0, 0]).unwrap().done, t == 24);
        }
        assert_eq!(g.step(&[0, 0]), Err(EnvError::EpisodeOver));
    }
}
