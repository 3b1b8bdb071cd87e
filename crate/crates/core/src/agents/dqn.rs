use std::collections::VecDeque;

use ndarray::Array2;
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{
    epsilon_greedy, exploration_policy, mean_log_shielded_safety, softmax_policy, stack,
    AgentError, ExplorationKind, ExplorationSchedule, Learner, TransitionRecord, UpdateMetrics,
};
use crate::engine::PolicyDistribution;
use crate::nn::{Activation, AdamState, Graph, Mlp, MlpSpec};

/// Bootstrap term of the TD target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TdTarget {
    /// `max_a' Q(s', a')`.
    #[default]
    OffPolicy,
    /// `Q(s', a')` for the action actually taken next.
    OnPolicy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DqnConfig {
    pub gamma: f64,
    pub lr: f64,
    pub buffer_size: usize,
    pub batch_size: usize,
    pub exploration: ExplorationSchedule,
    /// Safety penalty coefficient.
    pub alpha: f64,
    pub target: TdTarget,
}

impl Default for DqnConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            lr: 0.001,
            buffer_size: 512,
            batch_size: 128,
            exploration: ExplorationSchedule {
                kind: ExplorationKind::EpsilonGreedy,
                decay: 0.9972,
                eps_min: 0.01,
                tau: 1.0,
            },
            alpha: 1.0,
            target: TdTarget::OffPolicy,
        }
    }
}

/// Parts of the PLTD objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PltdLoss {
    pub total: f64,
    pub td: f64,
    /// Batch mean of `log P_{pi+}(safe | s)`.
    pub safety: f64,
}

fn td_targets(
    net: &Mlp,
    batch: &[&TransitionRecord],
    gamma: f64,
    target: TdTarget,
) -> Result<Vec<f64>, AgentError> {
    let next: Vec<&[f64]> = batch.iter().map(|r| r.next_obs.as_slice()).collect();
    let q_next = net.predict(&stack(&next))?;
    batch
        .iter()
        .enumerate()
        .map(|(i, r)| {
            if r.done {
                return Ok(r.reward);
            }
            let row = q_next.row(i);
            let boot = match target {
                TdTarget::OffPolicy => row.fold(f64::NEG_INFINITY, |m, &v| m.max(v)),
                TdTarget::OnPolicy => {
                    let a = r.next_action.ok_or_else(|| {
                        AgentError::Config("on-policy record without next action".into())
                    })?;
                    row[a]
                }
            };
            Ok(r.reward + gamma * boot)
        })
        .collect()
}

/// Builds `mean((y - Q(s, a))^2) - alpha * mean(log P_{pi+}(safe | s))` on a
/// graph. Targets are held constant; the penalty differentiates through
/// `softmax(Q(s) / tau)`.
fn build_pltd(
    net: &Mlp,
    batch: &[&TransitionRecord],
    cfg: &DqnConfig,
) -> Result<(Graph, crate::nn::Var, Vec<crate::nn::Var>, PltdLoss), AgentError> {
    if batch.is_empty() {
        return Err(AgentError::EmptyBatch);
    }
    let y = td_targets(net, batch, cfg.gamma, cfg.target)?;
    let obs: Vec<&[f64]> = batch.iter().map(|r| r.obs.as_slice()).collect();
    let actions: Vec<usize> = batch.iter().map(|r| r.action).collect();

    let mut g = Graph::new();
    let x = g.constant(stack(&obs));
    let (q, params) = net.forward(&mut g, x)?;
    let qa = g.gather(q, &actions)?;
    let yv = g.constant(Array2::from_shape_vec((y.len(), 1), y).expect("column"));
    let diff = g.sub(yv, qa)?;
    let sq = g.square(diff);
    let td = g.mean(sq);
    let td_value = g.value(td)[[0, 0]];

    if cfg.alpha == 0.0 {
        let parts = PltdLoss {
            total: td_value,
            td: td_value,
            safety: f64::NAN,
        };
        return Ok((g, td, params, parts));
    }
    let scaled = g.scale(q, 1.0 / cfg.exploration.tau);
    let pi = g.softmax(scaled);
    let qs: Vec<Vec<f64>> = batch.iter().map(|r| r.loss_safety()).collect();
    let safety = mean_log_shielded_safety(&mut g, pi, &qs)?;
    let penalty = g.scale(safety, cfg.alpha);
    let loss = g.sub(td, penalty)?;
    let parts = PltdLoss {
        total: g.value(loss)[[0, 0]],
        td: td_value,
        safety: g.value(safety)[[0, 0]],
    };
    Ok((g, loss, params, parts))
}

/// PLTD objective on `batch`. With `alpha = 0` this is the plain TD loss.
pub fn pltd_loss(
    net: &Mlp,
    batch: &[&TransitionRecord],
    cfg: &DqnConfig,
) -> Result<PltdLoss, AgentError> {
    Ok(build_pltd(net, batch, cfg)?.3)
}

/// Loss and parameter gradients in [`Mlp::params`] order.
pub fn pltd_gradients(
    net: &Mlp,
    batch: &[&TransitionRecord],
    cfg: &DqnConfig,
) -> Result<(PltdLoss, Vec<Array2<f64>>), AgentError> {
    let (g, loss, params, parts) = build_pltd(net, batch, cfg)?;
    let grads = g.backward(loss)?;
    Ok((parts, params.iter().map(|&p| grads.wrt(p)).collect()))
}

/// Q-learners, one network per sharing group.
#[derive(Debug, Clone)]
pub struct DqnPopulation {
    cfg: DqnConfig,
    nets: Vec<Mlp>,
    opts: Vec<AdamState>,
    net_of: Vec<usize>,
    buffers: Vec<VecDeque<TransitionRecord>>,
    pending: Vec<Option<TransitionRecord>>,
    steps: Vec<u64>,
}

impl DqnPopulation {
    /// `shared` puts every agent on one network.
    pub fn new(
        cfg: DqnConfig,
        n_agents: usize,
        obs_len: usize,
        num_actions: usize,
        shared: bool,
        rng: &mut impl Rng,
    ) -> Result<Self, AgentError> {
        if n_agents == 0 || cfg.batch_size == 0 || cfg.buffer_size < cfg.batch_size {
            return Err(AgentError::Config(
                "need agents and buffer_size >= batch_size > 0".into(),
            ));
        }
        if !(0.0..1.0).contains(&cfg.gamma) || cfg.alpha < 0.0 || cfg.exploration.tau <= 0.0 {
            return Err(AgentError::Config(
                "need gamma in [0,1), alpha >= 0, tau > 0".into(),
            ));
        }
        let n_nets = if shared { 1 } else { n_agents };
        let spec = MlpSpec::standard(obs_len, num_actions, Activation::Relu);
        let nets: Vec<Mlp> = (0..n_nets).map(|_| Mlp::new(spec.clone(), rng)).collect();
        let opts = nets
            .iter()
            .map(|n| AdamState::new(cfg.lr, n.params()))
            .collect();
        let net_of = (0..n_agents).map(|i| if shared { 0 } else { i }).collect();
        Ok(Self {
            cfg,
            nets,
            opts,
            net_of,
            buffers: vec![VecDeque::new(); n_agents],
            pending: vec![None; n_agents],
            steps: vec![0; n_agents],
        })
    }

    pub fn network(&self, agent: usize) -> &Mlp {
        &self.nets[self.net_of[agent]]
    }

    pub fn buffer(&self, agent: usize) -> &VecDeque<TransitionRecord> {
        &self.buffers[agent]
    }

    pub fn exploration_steps(&self, agent: usize) -> u64 {
        self.steps[agent]
    }

    pub fn q_values(&self, agent: usize, obs: &[f64]) -> Vec<f64> {
        let x = stack(&[obs]);
        self.network(agent)
            .predict(&x)
            .expect("observation width")
            .row(0)
            .to_vec()
    }

    fn push(&mut self, agent: usize, record: TransitionRecord) {
        let buf = &mut self.buffers[agent];
        if buf.len() == self.cfg.buffer_size {
            buf.pop_front();
        }
        buf.push_back(record);
    }

    /// One gradient step per network on batches drawn from every ready
    /// agent that uses it.
    pub fn train_step(
        &mut self,
        rng: &mut dyn rand::RngCore,
    ) -> Result<Option<UpdateMetrics>, AgentError> {
        let mut metrics: Option<UpdateMetrics> = None;
        for k in 0..self.nets.len() {
            let mut batch: Vec<&TransitionRecord> = Vec::new();
            for agent in (0..self.net_of.len()).filter(|&a| self.net_of[a] == k) {
                let buf = &self.buffers[agent];
                if buf.len() < self.cfg.batch_size {
                    continue;
                }
                for i in index::sample(rng, buf.len(), self.cfg.batch_size) {
                    batch.push(&buf[i]);
                }
            }
            if batch.is_empty() {
                continue;
            }
            let (parts, grads) = pltd_gradients(&self.nets[k], &batch, &self.cfg)?;
            self.opts[k].adam_step(self.nets[k].params_mut(), &grads)?;
            let m = metrics.get_or_insert_with(UpdateMetrics::default);
            m.loss += parts.total;
            m.value_loss += parts.td;
            if parts.safety.is_finite() {
                m.safety_penalty += parts.safety;
            }
        }
        Ok(metrics)
    }
}

impl Learner for DqnPopulation {
    fn num_agents(&self) -> usize {
        self.net_of.len()
    }

    fn policy(&self, agent: usize, obs: &[f64], explore: bool) -> PolicyDistribution {
        let q = self.q_values(agent, obs);
        let ex = &self.cfg.exploration;
        if explore {
            exploration_policy(&q, ex, self.steps[agent])
        } else {
            match ex.kind {
                ExplorationKind::EpsilonGreedy => epsilon_greedy(&q, ex.eps_min),
                ExplorationKind::Softmax => softmax_policy(&q, ex.tau),
            }
        }
    }

    fn observe(&mut self, agent: usize, record: TransitionRecord) {
        self.steps[agent] += 1;
        if self.cfg.target == TdTarget::OffPolicy {
            self.push(agent, record);
            return;
        }
        if let Some(mut prev) = self.pending[agent].take() {
            prev.next_action = Some(record.action);
            self.push(agent, prev);
        }
        if record.done {
            self.push(agent, record);
        } else {
            self.pending[agent] = Some(record);
        }
    }

    fn after_step(
        &mut self,
        rng: &mut dyn rand::RngCore,
    ) -> Result<Option<UpdateMetrics>, AgentError> {
        self.train_step(rng)
    }

    fn after_episode(&mut self) -> Result<Option<UpdateMetrics>, AgentError> {
        // A transition cut off without `done` has no successor action.
        for agent in 0..self.pending.len() {
            if let Some(mut prev) = self.pending[agent].take() {
                prev.done = true;
                self.push(agent, prev);
            }
        }
        Ok(None)
    }

    fn on_policy(&self) -> bool {
        self.cfg.target == TdTarget::OnPolicy
    }
}
