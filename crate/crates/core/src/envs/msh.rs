use rand::seq::IndexedRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{check_actions, seeded, EnvError, Environment, ShieldView, StepInfo, StepResult};

/// Cell categories of the observation: empty, stag, plant, self, other
/// agent(s), self together with other agent(s).
pub const CELL_CATEGORIES: usize = 6;

pub const LEFT: usize = 0;
pub const RIGHT: usize = 1;
pub const UP: usize = 2;
pub const DOWN: usize = 3;
pub const STAY: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MshConfig {
    pub grid: usize,
    pub n: usize,
    pub n_plant: usize,
    pub n_hunt_min: usize,
    pub r_stag: f64,
    pub r_pen: f64,
    pub r_plant: f64,
    pub p_move: f64,
    pub t_max: usize,
}

impl Default for MshConfig {
    fn default() -> Self {
        Self {
            grid: 5,
            n: 2,
            n_plant: 2,
            n_hunt_min: 2,
            r_stag: 10.0,
            r_pen: -2.0,
            r_plant: 2.0,
            p_move: 0.0,
            t_max: 200,
        }
    }
}

type Cell = (usize, usize);

/// Grid-world Stag-Hunt with one stag and a few plants.
///
/// Actions are left, right, up, down, stay; moves off the grid are
/// clipped. An attempted hunt or a harvest respawns the entity at a
/// uniformly random empty cell.
#[derive(Debug, Clone)]
pub struct MarkovStagHunt {
    config: MshConfig,
    rng: ChaCha8Rng,
    agents: Vec<Cell>,
    stag: Cell,
    plants: Vec<Cell>,
    t: usize,
}

impl MarkovStagHunt {
    pub fn new(config: MshConfig) -> Result<Self, EnvError> {
        if config.n == 0 || config.grid == 0 || config.t_max == 0 {
            return Err(EnvError::InvalidConfig(
                "MSH needs n, grid and t_max positive".into(),
            ));
        }
        if config.n + 1 + config.n_plant > config.grid * config.grid {
            return Err(EnvError::InvalidConfig(
                "grid too small for all entities".into(),
            ));
        }
        if !(0.0..=1.0).contains(&config.p_move) {
            return Err(EnvError::InvalidConfig(
                "p_move must be a probability".into(),
            ));
        }
        let mut env = Self {
            config,
            rng: seeded(0),
            agents: Vec::new(),
            stag: (0, 0),
            plants: Vec::new(),
            t: 0,
        };
        env.reset(0);
        Ok(env)
    }

    pub fn num_agents(&self) -> usize {
        self.config.n
    }

    pub fn agent_pos(&self, agent: usize) -> Cell {
        self.agents[agent]
    }

    pub fn stag_pos(&self) -> Cell {
        self.stag
    }

    pub fn plant_pos(&self) -> &[Cell] {
        &self.plants
    }

    /// Places entities directly, for tests and replays.
    pub fn set_layout(&mut self, agents: Vec<Cell>, stag: Cell, plants: Vec<Cell>) {
        assert_eq!(agents.len(), self.config.n);
        self.agents = agents;
        self.stag = stag;
        self.plants = plants;
        self.t = 0;
    }

    fn empty_cells(&self) -> Vec<Cell> {
        let g = self.config.grid;
        (0..g * g)
            .map(|i| (i / g, i % g))
            .filter(|c| !self.agents.contains(c) && *c != self.stag && !self.plants.contains(c))
            .collect()
    }

    fn random_empty(&mut self) -> Cell {
        let cells = self.empty_cells();
        *cells.choose(&mut self.rng).expect("grid has an empty cell")
    }

    fn moved(&self, c: Cell, action: usize) -> Cell {
        let last = self.config.grid - 1;
        match action {
            LEFT => (c.0, c.1.saturating_sub(1)),
            RIGHT => (c.0, (c.1 + 1).min(last)),
            UP => (c.0.saturating_sub(1), c.1),
            DOWN => ((c.0 + 1).min(last), c.1),
            _ => c,
        }
    }

    fn move_stag(&mut self) {
        let s = self.stag;
        let target = *self
            .agents
            .iter()
            .min_by_key(|a| a.0.abs_diff(s.0) + a.1.abs_diff(s.1))
            .expect("at least one agent");
        let step = if target.0 != s.0 {
            if target.0 < s.0 {
                UP
            } else {
                DOWN
            }
        } else if target.1 < s.1 {
            LEFT
        } else if target.1 > s.1 {
            RIGHT
        } else {
            STAY
        };
        let next = self.moved(s, step);
        if !self.plants.contains(&next) {
            self.stag = next;
        }
    }

    fn category(&self, agent: usize, cell: Cell) -> usize {
        let own = self.agents[agent] == cell;
        let other = self
            .agents
            .iter()
            .enumerate()
            .any(|(j, &p)| j != agent && p == cell);
        match (own, other) {
            (true, true) => 5,
            (true, false) => 3,
            (false, true) => 4,
            _ if self.stag == cell => 1,
            _ if self.plants.contains(&cell) => 2,
            _ => 0,
        }
    }
}

impl Environment for MarkovStagHunt {
    fn num_agents(&self) -> usize {
        self.config.n
    }

    fn num_actions(&self) -> usize {
        5
    }

    fn observation_len(&self) -> usize {
        self.config.grid * self.config.grid * CELL_CATEGORIES
    }

    fn t_max(&self) -> usize {
        self.config.t_max
    }

    fn reset(&mut self, seed: u64) -> Vec<Vec<f64>> {
        self.rng = seeded(seed);
        let g = self.config.grid;
        let cells: Vec<Cell> = (0..g * g).map(|i| (i / g, i % g)).collect();
        let picked: Vec<Cell> = cells
            .choose_multiple(&mut self.rng, self.config.n + 1 + self.config.n_plant)
            .copied()
            .collect();
        self.agents = picked[..self.config.n].to_vec();
        self.stag = picked[self.config.n];
        self.plants = picked[self.config.n + 1..].to_vec();
        self.t = 0;
        (0..self.config.n).map(|i| self.observation(i)).collect()
    }

    fn step(&mut self, actions: &[usize]) -> Result<StepResult, EnvError> {
        let n = self.config.n;
        check_actions(actions, n, 5)?;
        if self.t >= self.config.t_max {
            return Err(EnvError::EpisodeOver);
        }
        for (i, &a) in actions.iter().enumerate() {
            self.agents[i] = self.moved(self.agents[i], a);
        }
        if self.config.p_move > 0.0 && self.rng.random::<f64>() < self.config.p_move {
            self.move_stag();
        }

        let mut rewards = vec![0.0; n];
        let mut info = StepInfo {
            plants: vec![0; n],
            stags: vec![0; n],
            penalties: vec![0; n],
            ..StepInfo::default()
        };

        let hunters: Vec<usize> = (0..n).filter(|&i| self.agents[i] == self.stag).collect();
        let hunted = !hunters.is_empty();
        if hunted {
            let success = hunters.len() >= self.config.n_hunt_min;
            for &i in &hunters {
                if success {
                    rewards[i] += self.config.r_stag;
                    info.stags[i] += 1;
                } else {
                    rewards[i] += self.config.r_pen;
                    info.penalties[i] += 1;
                }
            }
        }
        let mut harvested = Vec::new();
        for (k, &p) in self.plants.iter().enumerate() {
            let mut any = false;
            for i in 0..n {
                if self.agents[i] == p {
                    rewards[i] += self.config.r_plant;
                    info.plants[i] += 1;
                    any = true;
                }
            }
            if any {
                harvested.push(k);
            }
        }
        if hunted {
            self.stag = self.random_empty();
        }
        for k in harvested {
            // Vacate first so the old cell is not excluded twice.
            self.plants[k] = (usize::MAX, usize::MAX);
            self.plants[k] = self.random_empty();
        }

        self.t += 1;
        Ok(StepResult {
            observations: (0..n).map(|i| self.observation(i)).collect(),
            rewards,
            done: self.t >= self.config.t_max,
            info,
        })
    }

    fn observation(&self, agent: usize) -> Vec<f64> {
        let g = self.config.grid;
        let mut obs = vec![0.0; g * g * CELL_CATEGORIES];
        for r in 0..g {
            for c in 0..g {
                obs[(r * g + c) * CELL_CATEGORIES + self.category(agent, (r, c))] = 1.0;
            }
        }
        obs
    }

    fn shield_view(&self, agent: usize) -> ShieldView {
        ShieldView::Grid {
            own: self.agents[agent],
            others: (0..self.config.n)
                .filter(|&j| j != agent)
                .map(|j| self.agents[j])
                .collect(),
            stag: self.stag,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn env() -> MarkovStagHunt {
        MarkovStagHunt::new(MshConfig::default()).unwrap()
    }

    #[test]
    fn reset_is_deterministic_and_distinct() {
        let mut e = env();
        e.reset(7);
        let a = (e.agents.clone(), e.stag, e.plants.clone());
        e.reset(7);
        assert_eq!(a, (e.agents.clone(), e.stag, e.plants.clone()));
        let mut all = a.0.clone();
        all.push(a.1);
        all.extend(a.2);
        all.sort();
        all.dedup();
        assert_eq!(all.len(), 5);
    }

    #[test]
    fn joint_hunt_rewards_both() {
        let mut e = env();
        e.set_layout(vec![(2, 1), (2, 3)], (2, 2), vec![(0, 0), (4, 4)]);
        let r = e.step(&[RIGHT, LEFT]).unwrap();
        assert_eq!(r.rewards, vec![10.0, 10.0]);
        assert_eq!(r.info.stags, vec![1, 1]);
        assert_ne!(e.stag_pos(), (2, 2));
        assert_eq!(e.plant_pos().len(), 2);
    }

    #[test]
    fn solo_hunt_is_penalized() {
        let mut e = env();
        e.set_layout(vec![(2, 1), (0, 4)], (2, 2), vec![(0, 0), (4, 4)]);
        let r = e.step(&[RIGHT, STAY]).unwrap();
        assert_eq!(r.rewards, vec![-2.0, 0.0]);
        assert_eq!(r.info.penalties, vec![1, 0]);
    }

    #[test]
    fn harvest_and_clipping() {
        let mut e = env();
        e.set_layout(vec![(0, 1), (4, 4)], (2, 2), vec![(0, 0), (3, 3)]);
        let r = e.step(&[LEFT, DOWN]).unwrap();
        assert_eq!(r.rewards, vec![2.0, 0.0]);
        assert_eq!(e.agent_pos(1), (4, 4));
        assert!(!e.plant_pos().contains(&(0, 0)));
    }

    #[test]
    fn observation_encoding() {
        let mut e = env();
        e.set_layout(vec![(0, 0), (0, 0)], (1, 1), vec![(2, 2), (3, 3)]);
        let obs = e.observation(0);
        assert_eq!(obs.len(), 150);
        let cat = |cell: usize| (0..6).find(|&k| obs[cell * 6 + k] == 1.0).unwrap();
        assert_eq!(cat(0), 5);
        assert_eq!(cat(6), 1);
        assert_eq!(cat(12), 2);
        assert_eq!(cat(4), 0);
        assert_eq!(obs.iter().sum::<f64>(), 25.0);
    }

    #[test]
    fn entity_counts_are_conserved() {
        let mut e = env();
        e.reset(3);
        let mut rng = seeded(9);
        for _ in 0..200 {
            let a: Vec<usize> = (0..2).map(|_| rng.random_range(0..5)).collect();
            e.step(&a).unwrap();
            assert_eq!(e.plant_pos().len(), 2);
            assert!(!e.plant_pos().contains(&e.stag_pos()));
            assert_ne!(e.plant_pos()[0], e.plant_pos()[1]);
        }
    }
}
