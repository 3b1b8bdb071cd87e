use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{
    mean_log_shielded_safety, renormalized, stack, AgentError, Learner, Sharing, TransitionRecord,
    UpdateMetrics,
};
use crate::engine::PolicyDistribution;
use crate::nn::{softmax_rows, Activation, AdamState, Graph, Mlp, MlpSpec, Var};

/// Stand-in for `log 0` on actions the shield forbids.
const LOG_ZERO: f64 = -1e30;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PpoConfig {
    pub gamma: f64,
    pub lr_actor: f64,
    pub lr_critic: f64,
    /// Transitions per agent before an update.
    pub buffer_size: usize,
    pub clip: f64,
    pub epochs: usize,
    pub vf_coef: f64,
    pub ent_coef: f64,
    /// Safety penalty coefficient.
    pub alpha: f64,
    /// Set from the algorithm name.
    #[serde(skip)]
    pub sharing: Sharing,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            lr_actor: 0.001,
            lr_critic: 0.001,
            buffer_size: 50,
            clip: 0.1,
            epochs: 10,
            vf_coef: 0.5,
            ent_coef: 0.01,
            alpha: 1.0,
            sharing: Sharing::Independent,
        }
    }
}

/// Inputs for one PLPG evaluation.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PpoBatch {
    pub obs: Vec<Vec<f64>>,
    pub actions: Vec<usize>,
    /// `log pi+(a | s)` under the behaviour parameters.
    pub old_log_probs: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
    /// Per-action safeties used by the loss.
    pub safety: Vec<Vec<f64>>,
}

impl PpoBatch {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn extend(&mut self, other: &PpoBatch) {
        self.obs.extend_from_slice(&other.obs);
        self.actions.extend_from_slice(&other.actions);
        self.old_log_probs.extend_from_slice(&other.old_log_probs);
        self.advantages.extend_from_slice(&other.advantages);
        self.returns.extend_from_slice(&other.returns);
        self.safety.extend_from_slice(&other.safety);
    }

    fn obs_matrix(&self) -> Array2<f64> {
        let rows: Vec<&[f64]> = self.obs.iter().map(Vec::as_slice).collect();
        stack(&rows)
    }

    fn shielded(&self) -> bool {
        self.safety
            .iter()
            .any(|q| q.windows(2).any(|w| w[0] != w[1]))
    }
}

/// Parts of the PLPG objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlpgLoss {
    pub total: f64,
    /// Clipped surrogate, negated.
    pub policy: f64,
    /// Mean entropy of `pi+`.
    pub entropy: f64,
    /// Batch mean of `log P_{pi+}(safe | s)`; NaN when `alpha = 0`.
    pub safety: f64,
    /// `mean((V - G)^2)`, before `vf_coef`.
    pub value: f64,
}

fn column(values: &[f64]) -> Array2<f64> {
    Array2::from_shape_vec((values.len(), 1), values.to_vec()).expect("column")
}

/// `log pi+` rows: `log pi + log q - log sum(pi q)`.
fn shielded_log_probs(g: &mut Graph, logits: Var, batch: &PpoBatch) -> Result<Var, AgentError> {
    if !batch.shielded() {
        return Ok(g.log_softmax(logits));
    }
    let a = batch.safety[0].len();
    let lq = Array2::from_shape_fn((batch.len(), a), |(r, c)| {
        let q = batch.safety[r][c];
        if q > 0.0 {
            q.ln()
        } else {
            LOG_ZERO
        }
    });
    let lq = g.constant(lq);
    let masked = g.add(logits, lq)?;
    Ok(g.log_softmax(masked))
}

struct ActorGraph {
    g: Graph,
    loss: Var,
    params: Vec<Var>,
    policy: f64,
    entropy: f64,
    safety: f64,
}

fn actor_graph(actor: &Mlp, batch: &PpoBatch, cfg: &PpoConfig) -> Result<ActorGraph, AgentError> {
    if batch.is_empty() {
        return Err(AgentError::EmptyBatch);
    }
    let mut g = Graph::new();
    let x = g.constant(batch.obs_matrix());
    let (logits, params) = actor.forward(&mut g, x)?;
    let logp = shielded_log_probs(&mut g, logits, batch)?;

    let new_lp = g.gather(logp, &batch.actions)?;
    let old_lp = g.constant(column(&batch.old_log_probs));
    let diff = g.sub(new_lp, old_lp)?;
    let ratio = g.exp(diff);
    let adv = g.constant(column(&batch.advantages));
    let unclipped = g.mul(ratio, adv)?;
    let clipped_ratio = g.clamp(ratio, 1.0 - cfg.clip, 1.0 + cfg.clip);
    let clipped = g.mul(clipped_ratio, adv)?;
    let surrogate = g.minimum(unclipped, clipped)?;
    let surrogate = g.mean(surrogate);
    let policy = g.neg(surrogate);

    let p = g.exp(logp);
    let plogp = g.mul(p, logp)?;
    let neg_h = g.sum_rows(plogp);
    let neg_h = g.mean(neg_h);
    let ent_term = g.scale(neg_h, cfg.ent_coef);
    let mut loss = g.add(policy, ent_term)?;

    let mut safety = f64::NAN;
    if cfg.alpha != 0.0 {
        let pi = g.softmax(logits);
        let ls = mean_log_shielded_safety(&mut g, pi, &batch.safety)?;
        safety = g.value(ls)[[0, 0]];
        let pen = g.scale(ls, cfg.alpha);
        loss = g.sub(loss, pen)?;
    }
    let (policy, entropy) = (g.value(policy)[[0, 0]], -g.value(neg_h)[[0, 0]]);
    Ok(ActorGraph {
        g,
        loss,
        params,
        policy,
        entropy,
        safety,
    })
}

fn critic_graph(critic: &Mlp, batch: &PpoBatch) -> Result<(Graph, Var, Vec<Var>, f64), AgentError> {
    if batch.is_empty() {
        return Err(AgentError::EmptyBatch);
    }
    let mut g = Graph::new();
    let x = g.constant(batch.obs_matrix());
    let (v, params) = critic.forward(&mut g, x)?;
    let target = g.constant(column(&batch.returns));
    let d = g.sub(v, target)?;
    let sq = g.square(d);
    let mse = g.mean(sq);
    let value = g.value(mse)[[0, 0]];
    Ok((g, mse, params, value))
}

/// PLPG objective `policy - ent_coef H - alpha log P+ + vf_coef mse`.
pub fn plpg_loss(
    actor: &Mlp,
    critic: &Mlp,
    batch: &PpoBatch,
    cfg: &PpoConfig,
) -> Result<PlpgLoss, AgentError> {
    let a = actor_graph(actor, batch, cfg)?;
    let (_, _, _, value) = critic_graph(critic, batch)?;
    Ok(PlpgLoss {
        total: a.g.value(a.loss)[[0, 0]] + cfg.vf_coef * value,
        policy: a.policy,
        entropy: a.entropy,
        safety: a.safety,
        value,
    })
}

type Grads = Vec<Array2<f64>>;

/// Loss with actor and critic gradients in [`Mlp::params`] order. The
/// critic gradients include `vf_coef`.
pub fn plpg_gradients(
    actor: &Mlp,
    critic: &Mlp,
    batch: &PpoBatch,
    cfg: &PpoConfig,
) -> Result<(PlpgLoss, Grads, Grads), AgentError> {
    let (a, actor_grads) = actor_gradients(actor, batch, cfg)?;
    let (value, critic_grads) = critic_gradients(critic, batch, cfg.vf_coef)?;
    let loss = PlpgLoss {
        total: a.g.value(a.loss)[[0, 0]] + cfg.vf_coef * value,
        policy: a.policy,
        entropy: a.entropy,
        safety: a.safety,
        value,
    };
    Ok((loss, actor_grads, critic_grads))
}

fn actor_gradients(
    actor: &Mlp,
    batch: &PpoBatch,
    cfg: &PpoConfig,
) -> Result<(ActorGraph, Grads), AgentError> {
    let a = actor_graph(actor, batch, cfg)?;
    let grads = a.g.backward(a.loss)?;
    let out = a.params.iter().map(|&p| grads.wrt(p)).collect();
    Ok((a, out))
}

fn critic_gradients(
    critic: &Mlp,
    batch: &PpoBatch,
    vf_coef: f64,
) -> Result<(f64, Grads), AgentError> {
    let (mut g, mse, params, value) = critic_graph(critic, batch)?;
    let loss = g.scale(mse, vf_coef);
    let grads = g.backward(loss)?;
    Ok((value, params.iter().map(|&p| grads.wrt(p)).collect()))
}

/// Discounted reward-to-go over one episode.
pub fn discounted_returns(rewards: &[f64], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for (i, r) in rewards.iter().enumerate().rev() {
        acc = r + gamma * acc;
        out[i] = acc;
    }
    out
}

/// Scales to zero mean and unit population standard deviation.
pub fn normalize_advantages(adv: &mut [f64]) {
    if adv.is_empty() {
        return;
    }
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let var = adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt() + 1e-8;
    adv.iter_mut().for_each(|a| *a = (*a - mean) / sd);
}

/// Actor-critic learners with optional parameter sharing.
#[derive(Debug, Clone)]
pub struct PpoPopulation {
    cfg: PpoConfig,
    actors: Vec<Mlp>,
    critics: Vec<Mlp>,
    actor_opts: Vec<AdamState>,
    critic_opts: Vec<AdamState>,
    actor_of: Vec<usize>,
    critic_of: Vec<usize>,
    rollouts: Vec<Vec<TransitionRecord>>,
    returns: Vec<Vec<f64>>,
}

impl PpoPopulation {
    pub fn new(
        cfg: PpoConfig,
        n_agents: usize,
        obs_len: usize,
        num_actions: usize,
        rng: &mut impl Rng,
    ) -> Result<Self, AgentError> {
        if n_agents == 0 || cfg.buffer_size == 0 || cfg.epochs == 0 {
            return Err(AgentError::Config(
                "need agents, buffer_size > 0 and epochs > 0".into(),
            ));
        }
        if !(0.0..=1.0).contains(&cfg.gamma) || cfg.alpha < 0.0 || !(0.0..1.0).contains(&cfg.clip) {
            return Err(AgentError::Config(
                "need gamma in [0,1], alpha >= 0, clip in [0,1)".into(),
            ));
        }
        let (shared_actor, shared_critic) = match cfg.sharing {
            Sharing::Independent => (false, false),
            Sharing::SharedCritic => (false, true),
            Sharing::SharedActorCritic => (true, true),
            Sharing::SharedQ => {
                return Err(AgentError::Config("shared_q applies to Q-learners".into()))
            }
        };
        let group = |shared: bool| -> Vec<usize> {
            (0..n_agents).map(|i| if shared { 0 } else { i }).collect()
        };
        let (actor_of, critic_of) = (group(shared_actor), group(shared_critic));
        let n_actors = if shared_actor { 1 } else { n_agents };
        let n_critics = if shared_critic { 1 } else { n_agents };
        let actors: Vec<Mlp> = (0..n_actors)
            .map(|_| {
                Mlp::new(
                    MlpSpec::standard(obs_len, num_actions, Activation::Tanh),
                    rng,
                )
            })
            .collect();
        let critics: Vec<Mlp> = (0..n_critics)
            .map(|_| Mlp::new(MlpSpec::standard(obs_len, 1, Activation::Tanh), rng))
            .collect();
        let actor_opts = actors
            .iter()
            .map(|m| AdamState::new(cfg.lr_actor, m.params()))
            .collect();
        let critic_opts = critics
            .iter()
            .map(|m| AdamState::new(cfg.lr_critic, m.params()))
            .collect();
        Ok(Self {
            cfg,
            actors,
            critics,
            actor_opts,
            critic_opts,
            actor_of,
            critic_of,
            rollouts: vec![Vec::new(); n_agents],
            returns: vec![Vec::new(); n_agents],
        })
    }

    pub fn actor(&self, agent: usize) -> &Mlp {
        &self.actors[self.actor_of[agent]]
    }

    pub fn critic(&self, agent: usize) -> &Mlp {
        &self.critics[self.critic_of[agent]]
    }

    pub fn rollout_len(&self, agent: usize) -> usize {
        self.rollouts[agent].len()
    }

    /// Rollout of `agent` with returns and unnormalised advantages.
    pub fn agent_batch(&self, agent: usize) -> Result<PpoBatch, AgentError> {
        let recs = &self.rollouts[agent];
        if recs.is_empty() {
            return Err(AgentError::EmptyRollout);
        }
        let obs: Vec<&[f64]> = recs.iter().map(|r| r.obs.as_slice()).collect();
        let v = self.critic(agent).predict(&stack(&obs))?;
        let returns = self.returns[agent].clone();
        Ok(PpoBatch {
            obs: recs.iter().map(|r| r.obs.clone()).collect(),
            actions: recs.iter().map(|r| r.action).collect(),
            old_log_probs: recs.iter().map(|r| r.log_prob).collect(),
            advantages: returns
                .iter()
                .enumerate()
                .map(|(i, g)| g - v[[i, 0]])
                .collect(),
            returns,
            safety: recs.iter().map(TransitionRecord::loss_safety).collect(),
        })
    }

    /// Full-batch PLPG update over every stored rollout, then clears them.
    pub fn update(&mut self) -> Result<UpdateMetrics, AgentError> {
        let n = self.rollouts.len();
        let per_agent: Vec<PpoBatch> = (0..n)
            .map(|i| self.agent_batch(i))
            .collect::<Result<_, _>>()?;
        let concat = |members: Vec<usize>| {
            let mut b = PpoBatch::default();
            members.iter().for_each(|&i| b.extend(&per_agent[i]));
            b
        };
        let actor_batches: Vec<PpoBatch> = (0..self.actors.len())
            .map(|k| {
                let mut b = concat((0..n).filter(|&i| self.actor_of[i] == k).collect());
                normalize_advantages(&mut b.advantages);
                b
            })
            .collect();
        let critic_batches: Vec<PpoBatch> = (0..self.critics.len())
            .map(|k| concat((0..n).filter(|&i| self.critic_of[i] == k).collect()))
            .collect();

        let mut metrics = UpdateMetrics::default();
        for _ in 0..self.cfg.epochs {
            metrics = UpdateMetrics::default();
            for (k, batch) in actor_batches.iter().enumerate() {
                let (parts, grads) = actor_gradients(&self.actors[k], batch, &self.cfg)?;
                self.actor_opts[k].adam_step(self.actors[k].params_mut(), &grads)?;
                metrics.loss += parts.g.value(parts.loss)[[0, 0]];
                metrics.entropy += parts.entropy;
                if parts.safety.is_finite() {
                    metrics.safety_penalty += parts.safety;
                }
            }
            for (k, batch) in critic_batches.iter().enumerate() {
                let (value, grads) = critic_gradients(&self.critics[k], batch, self.cfg.vf_coef)?;
                self.critic_opts[k].adam_step(self.critics[k].params_mut(), &grads)?;
                metrics.value_loss += value;
                metrics.loss += self.cfg.vf_coef * value;
            }
        }
        self.rollouts.iter_mut().for_each(Vec::clear);
        self.returns.iter_mut().for_each(Vec::clear);
        Ok(metrics)
    }

    fn close_episode(&mut self, agent: usize) {
        let start = self.returns[agent].len();
        let rewards: Vec<f64> = self.rollouts[agent][start..]
            .iter()
            .map(|r| r.reward)
            .collect();
        self.returns[agent].extend(discounted_returns(&rewards, self.cfg.gamma));
    }
}

impl Learner for PpoPopulation {
    fn num_agents(&self) -> usize {
        self.rollouts.len()
    }

    fn policy(&self, agent: usize, obs: &[f64], _explore: bool) -> PolicyDistribution {
        let logits = self
            .actor(agent)
            .predict(&stack(&[obs]))
            .expect("observation width");
        renormalized(softmax_rows(&logits).into_iter().collect())
    }

    fn observe(&mut self, agent: usize, record: TransitionRecord) {
        self.rollouts[agent].push(record);
    }

    fn after_step(
        &mut self,
        _rng: &mut dyn rand::RngCore,
    ) -> Result<Option<UpdateMetrics>, AgentError> {
        Ok(None)
    }

    fn after_episode(&mut self) -> Result<Option<UpdateMetrics>, AgentError> {
        for agent in 0..self.rollouts.len() {
            self.close_episode(agent);
        }
        if self
            .rollouts
            .iter()
            .all(|r| r.len() >= self.cfg.buffer_size)
        {
            return self.update().map(Some);
        }
        Ok(None)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn linear(w: Vec<f64>, rows: usize, cols: usize) -> Mlp {
        let spec = MlpSpec {
            input: rows,
            hidden: vec![],
            output: cols,
            activation: Activation::Tanh,
        };
        let w = Array2::from_shape_vec((rows, cols), w).unwrap();
        Mlp::from_params(spec, vec![w, Array2::zeros((1, cols))]).unwrap()
    }

    fn one_row(q: Vec<f64>, adv: f64, old_lp: f64) -> PpoBatch {
        PpoBatch {
            obs: vec![vec![1.0]],
            actions: vec![0],
            old_log_probs: vec![old_lp],
            advantages: vec![adv],
            returns: vec![1.0],
            safety: vec![q],
        }
    }

    #[test]
    fn returns_and_normalisation() {
        assert_eq!(
            discounted_returns(&[1.0, 1.0, 1.0], 0.5),
            vec![1.75, 1.5, 1.0]
        );
        let mut a = vec![1.0, 3.0];
        normalize_advantages(&mut a);
        assert!((a[0] + 1.0).abs() < 1e-7 && (a[1] - 1.0).abs() < 1e-7);
    }

    #[test]
    fn hand_computed_shielded_loss() {
        // Logits (0, 0): pi = (0.5, 0.5). q = (1, 0.5) gives pi+ = (2/3, 1/3).
        let actor = linear(vec![0.0, 0.0], 1, 2);
        let critic = linear(vec![0.5], 1, 1);
        let cfg = PpoConfig {
            alpha: 2.0,
            ent_coef: 0.1,
            ..PpoConfig::default()
        };
        let b = one_row(vec![1.0, 0.5], 1.0, (2.0f64 / 3.0).ln());
        let l = plpg_loss(&actor, &critic, &b, &cfg).unwrap();
        let h = -(2.0 / 3.0 * (2.0f64 / 3.0).ln() + 1.0 / 3.0 * (1.0f64 / 3.0).ln());
        let ps: f64 = (0.5 + 0.125) / 0.75;
        assert!((l.policy + 1.0).abs() < 1e-12);
        assert!((l.entropy - h).abs() < 1e-12);
        assert!((l.safety - ps.ln()).abs() < 1e-12);
        assert!((l.value - 0.25).abs() < 1e-12);
        let total = -1.0 - 0.1 * h - 2.0 * ps.ln() + 0.5 * 0.25;
        assert!((l.total - total).abs() < 1e-12);
    }

    #[test]
    fn forbidden_actions_have_no_entropy_mass() {
        let actor = linear(vec![0.3, -0.2, 0.1], 1, 3);
        let critic = linear(vec![0.0], 1, 1);
        let b = one_row(vec![1.0, 0.0, 1.0], 0.0, 0.0);
        let cfg = PpoConfig {
            alpha: 0.0,
            ..PpoConfig::default()
        };
        let l = plpg_loss(&actor, &critic, &b, &cfg).unwrap();
        let (e0, e2) = (0.3f64.exp(), 0.1f64.exp());
        let (p0, p2) = (e0 / (e0 + e2), e2 / (e0 + e2));
        assert!((l.entropy + p0 * p0.ln() + p2 * p2.ln()).abs() < 1e-12);
        assert!(l.safety.is_nan());
    }

    #[test]
    fn constant_safety_matches_plain_path() {
        let actor = linear(vec![0.3, -0.2], 1, 2);
        let critic = linear(vec![0.0], 1, 1);
        let cfg = PpoConfig {
            alpha: 0.0,
            ..PpoConfig::default()
        };
        let a = plpg_loss(&actor, &critic, &one_row(vec![1.0, 1.0], 0.7, -0.4), &cfg).unwrap();
        let b = plpg_loss(&actor, &critic, &one_row(vec![0.5, 0.5], 0.7, -0.4), &cfg).unwrap();
        assert_eq!(a.policy, b.policy);
        assert_eq!(a.entropy, b.entropy);
    }

    #[test]
    fn update_requires_full_rollouts() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let cfg = PpoConfig {
            buffer_size: 3,
            ..PpoConfig::default()
        };
        let mut pop = PpoPopulation::new(cfg, 2, 1, 2, &mut rng).unwrap();
        let rec = TransitionRecord {
            obs: vec![0.0],
            action: 0,
            reward: 1.0,
            next_obs: vec![0.0],
            next_action: None,
            done: false,
            policy_safety: 1.0,
            action_safety: vec![1.0, 1.0],
            log_prob: 0.5f64.ln(),
            fallback: false,
        };
        for _ in 0..2 {
            pop.observe(0, rec.clone());
            pop.observe(1, rec.clone());
        }
        assert!(pop.after_episode().unwrap().is_none());
        pop.observe(0, rec.clone());
        pop.observe(1, rec.clone());
        assert!(pop.after_episode().unwrap().is_some());
        assert_eq!(pop.rollout_len(0), 0);
        assert!(PpoPopulation::new(
            PpoConfig {
                sharing: Sharing::SharedQ,
                ..PpoConfig::default()
            },
            1,
            1,
            2,
            &mut rng
        )
        .is_err());
    }
}
