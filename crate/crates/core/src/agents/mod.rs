//! Value-based and policy-gradient learners with optional shields.

mod dqn;
mod ppo;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use dqn::{pltd_gradients, pltd_loss, DqnConfig, DqnPopulation, PltdLoss, TdTarget};
pub use ppo::{
    discounted_returns, normalize_advantages, plpg_gradients, plpg_loss, PlpgLoss, PpoBatch,
    PpoConfig, PpoPopulation,
};

use crate::engine::{PolicyDistribution, ShieldError};
use crate::envs::ShieldView;
use crate::nn::{softmax_rows, Graph, NnError, Var};
use crate::shields::ShieldCatalogEntry;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum AgentError {
    #[error("empty batch")]
    EmptyBatch,
    #[error("empty rollout")]
    EmptyRollout,
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Shield(#[from] ShieldError),
    #[error("invalid agent setup: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExplorationKind {
    EpsilonGreedy,
    Softmax,
}

/// `epsilon_t = max(decay^t, eps_min)` or a softmax with temperature `tau`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExplorationSchedule {
    pub kind: ExplorationKind,
    pub decay: f64,
    pub eps_min: f64,
    pub tau: f64,
}

impl ExplorationSchedule {
    pub fn epsilon(&self, t: u64) -> f64 {
        let t = i32::try_from(t).unwrap_or(i32::MAX);
        self.decay.powi(t).max(self.eps_min).min(1.0)
    }
}

/// Lowest index among the maxima.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Behaviour policy over Q-values after `t` exploration steps.
pub fn exploration_policy(q: &[f64], schedule: &ExplorationSchedule, t: u64) -> PolicyDistribution {
    match schedule.kind {
        ExplorationKind::EpsilonGreedy => epsilon_greedy(q, schedule.epsilon(t)),
        ExplorationKind::Softmax => softmax_policy(q, schedule.tau),
    }
}

pub fn epsilon_greedy(q: &[f64], eps: f64) -> PolicyDistribution {
    let n = q.len() as f64;
    let mut probs = vec![eps / n; q.len()];
    probs[argmax(q)] += 1.0 - eps;
    renormalized(probs)
}

pub fn softmax_policy(q: &[f64], tau: f64) -> PolicyDistribution {
    let row = Array2::from_shape_fn((1, q.len()), |(_, j)| q[j] / tau);
    renormalized(softmax_rows(&row).into_iter().collect())
}

/// Removes rounding drift so the vector passes the sum check.
pub(crate) fn renormalized(mut probs: Vec<f64>) -> PolicyDistribution {
    let s: f64 = probs.iter().sum();
    if (s - 1.0).abs() > 1e-12 {
        probs.iter_mut().for_each(|p| *p /= s);
    }
    PolicyDistribution::new(probs).expect("non-negative weights")
}

pub fn sample_action(pi: &PolicyDistribution, rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in pi.probs().iter().enumerate() {
        if p > 0.0 {
            last = i;
            acc += p;
            if u < acc {
                return i;
            }
        }
    }
    last
}

/// ⟨s, a, r, s', a'⟩ plus the shield annotations taken when acting.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionRecord {
    pub obs: Vec<f64>,
    pub action: usize,
    pub reward: f64,
    pub next_obs: Vec<f64>,
    /// Next action, filled for on-policy targets.
    pub next_action: Option<usize>,
    pub done: bool,
    /// `P_{pi+}(safe | s)` at acting time.
    pub policy_safety: f64,
    /// `P(safe | s, a)` per action at acting time.
    pub action_safety: Vec<f64>,
    /// `log pi+(a | s)` at acting time.
    pub log_prob: f64,
    /// The shield had no safe mass and the base policy was used.
    pub fallback: bool,
}

impl TransitionRecord {
    /// Safeties used by the losses: all ones when the shield had no safe
    /// mass and the agent fell back to its base policy.
    pub fn loss_safety(&self) -> Vec<f64> {
        if self.fallback {
            vec![1.0; self.action_safety.len()]
        } else {
            self.action_safety.clone()
        }
    }
}

/// One acting decision.
#[derive(Debug, Clone, PartialEq)]
pub struct ActOutcome {
    pub action: usize,
    pub pi: PolicyDistribution,
    pub shielded: PolicyDistribution,
    /// `P_pi(safe)`; 1 for unshielded agents.
    pub base_safety: f64,
    /// `P_{pi+}(safe)`; 1 for unshielded agents.
    pub policy_safety: f64,
    pub action_safety: Vec<f64>,
    pub zero_safety: bool,
}

/// Filters `pi` through `shield` (if any) and samples an action.
pub fn act(
    pi: PolicyDistribution,
    shield: Option<&mut ShieldCatalogEntry>,
    view: &ShieldView,
    rng: &mut impl Rng,
) -> Result<ActOutcome, ShieldError> {
    match shield {
        None => {
            let action = sample_action(&pi, rng);
            let n = pi.len();
            Ok(ActOutcome {
                action,
                shielded: pi.clone(),
                pi,
                base_safety: 1.0,
                policy_safety: 1.0,
                action_safety: vec![1.0; n],
                zero_safety: false,
            })
        }
        Some(shield) => {
            let out = shield.evaluate(&pi, view)?;
            let action = sample_action(&out.shielded, rng);
            shield.pipeline.record(action, view);
            Ok(ActOutcome {
                action,
                pi,
                shielded: out.shielded,
                base_safety: out.base_safety,
                policy_safety: out.shielded_safety,
                action_safety: out.action_safety,
                zero_safety: out.zero_safety,
            })
        }
    }
}

/// Learners driven by the harness.
pub trait Learner: Send {
    fn num_agents(&self) -> usize;
    /// Base policy of `agent` at `obs`. `explore` selects training behaviour.
    fn policy(&self, agent: usize, obs: &[f64], explore: bool) -> PolicyDistribution;
    fn observe(&mut self, agent: usize, record: TransitionRecord);
    /// Called after every environment step in training.
    fn after_step(
        &mut self,
        rng: &mut dyn rand::RngCore,
    ) -> Result<Option<UpdateMetrics>, AgentError>;
    /// Called after every training episode.
    fn after_episode(&mut self) -> Result<Option<UpdateMetrics>, AgentError>;
    /// Whether the learner needs `next_action` on stored transitions.
    fn on_policy(&self) -> bool {
        false
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct UpdateMetrics {
    pub loss: f64,
    pub value_loss: f64,
    pub safety_penalty: f64,
    pub entropy: f64,
}

/// Which parameters agents share.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sharing {
    #[default]
    Independent,
    SharedCritic,
    SharedActorCritic,
    SharedQ,
}

/// Batch mean of `log P_{pi+}(safe | s)` where `pi` is each row of `probs`
/// and `q` the per-action safeties. Rows with constant safety contribute
/// `log q` as a constant.
pub(crate) fn mean_log_shielded_safety(
    g: &mut Graph,
    probs: Var,
    q: &[Vec<f64>],
) -> Result<Var, NnError> {
    let n = q.len();
    let mut varying = Vec::new();
    let mut constant = 0.0;
    for (i, row) in q.iter().enumerate() {
        if row.windows(2).all(|w| w[0] == w[1]) {
            constant += row[0].ln();
        } else {
            varying.push(i);
        }
    }
    if varying.is_empty() {
        return Ok(g.scalar(constant / n as f64));
    }
    let p = g.select_rows(probs, &varying)?;
    let qm = g.constant(Array2::from_shape_fn(
        (varying.len(), q[0].len()),
        |(r, c)| q[varying[r]][c],
    ));
    let pq = g.mul(p, qm)?;
    let pqq = g.mul(pq, qm)?;
    let num = g.sum_rows(pqq);
    let den = g.sum_rows(pq);
    let (ln_num, ln_den) = (g.log(num), g.log(den));
    let lp = g.sub(ln_num, ln_den)?;
    let total = g.sum(lp);
    let c = g.scalar(constant);
    let total = g.add(total, c)?;
    Ok(g.scale(total, 1.0 / n as f64))
}

pub(crate) fn stack(rows: &[&[f64]]) -> Array2<f64> {
    let cols = rows.first().map_or(0, |r| r.len());
    Array2::from_shape_fn((rows.len(), cols), |(i, j)| rows[i][j])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn exploration_examples() {
        let greedy = ExplorationSchedule {
            kind: ExplorationKind::EpsilonGreedy,
            decay: 0.0,
            eps_min: 0.0,
            tau: 1.0,
        };
        assert_eq!(
            exploration_policy(&[1.0, 2.0], &greedy, 5).probs(),
            &[0.0, 1.0]
        );
        let full = ExplorationSchedule {
            decay: 1.0,
            ..greedy
        };
        assert_eq!(
            exploration_policy(&[1.0, 2.0, 0.0], &full, 5).probs(),
            PolicyDistribution::uniform(3).probs()
        );
        let soft = ExplorationSchedule {
            kind: ExplorationKind::Softmax,
            ..greedy
        };
        assert_eq!(
            exploration_policy(&[0.0, 0.0], &soft, 0).probs(),
            &[0.5, 0.5]
        );
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
    }

    #[test]
    fn epsilon_schedule_is_floored_and_monotone() {
        let s = ExplorationSchedule {
            kind: ExplorationKind::EpsilonGreedy,
            decay: 0.9972,
            eps_min: 0.01,
            tau: 1.0,
        };
        assert_eq!(s.epsilon(0), 1.0);
        let mut prev = 1.0;
        for t in (0..5000).step_by(50) {
            let e = s.epsilon(t);
            assert!(e <= prev && e >= 0.01);
            prev = e;
        }
        assert_eq!(s.epsilon(1_000_000), 0.01);
    }

    #[test]
    fn sampling_respects_zero_mass() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let pi = PolicyDistribution::new(vec![0.0, 1.0, 0.0]).unwrap();
        for _ in 0..100 {
            assert_eq!(sample_action(&pi, &mut rng), 1);
        }
    }

    #[test]
    fn unshielded_act_is_identity() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let pi = PolicyDistribution::new(vec![0.3, 0.7]).unwrap();
        let out = act(pi.clone(), None, &ShieldView::None, &mut rng).unwrap();
        assert_eq!(out.shielded, pi);
        assert_eq!(out.policy_safety, 1.0);
    }
}
