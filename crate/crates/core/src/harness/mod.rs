//! The shielded multi-agent training loop, its metrics and run artifacts.

mod config;
mod report;
pub mod reproduce;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

pub use config::{
    parse_overrides, preset, Algorithm, EnvConfig, EnvKind, ExperimentConfig, Seeds, SensorConfig,
    CONFIG_VERSION, PRESETS,
};
pub use report::{
    config_hash, summarize, write_csv, write_manifest, write_run_artifacts, MetricSummary, Summary,
    SummaryRow, CSV_HEADER,
};

use crate::agents::{act, AgentError, DqnPopulation, Learner, PpoPopulation, TransitionRecord};
use crate::engine::{self, ShieldError, ShieldSource};
use crate::envs::{
    CartSafe, CentipedeGame, EnvError, Environment, Epgg, MarkovStagHunt, ShieldView, StagHuntGame,
};
use crate::shields::{ShieldCatalogEntry, ShieldName};

/// Slack allowed when checking that shielding never lowers safety.
pub const AUDIT_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Shield(#[from] ShieldError),
    #[error("no metrics to summarize")]
    EmptyMetrics,
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Train,
    Eval,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Train => "train",
            Phase::Eval => "eval",
        }
    }
}

/// One agent's view of one episode.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub seed: u64,
    pub episode: usize,
    pub phase: Phase,
    pub agent: usize,
    /// Mean reward per step.
    pub ret: f64,
    /// Episode reward sum.
    pub r_ep: f64,
    pub cooperation: f64,
    pub safety: f64,
    pub plants: u32,
    pub stags: u32,
    pub penalties: u32,
    pub steps: usize,
    /// Pot when the episode ended (Centipede).
    pub pot: f64,
    /// Mean multiplier seen while acting (EPGG).
    pub f_t_mean: f64,
    /// Cooperative actions and decisions taken while `f_t > 2`.
    pub coop_high_f: (u32, u32),
    /// Cooperative actions and decisions taken while `f_t < 1`.
    pub coop_low_f: (u32, u32),
}

/// Per-step record of the shielding invariant.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct AuditReport {
    pub checked: u64,
    pub violations: u64,
    /// Largest `P_pi(safe) - P_{pi+}(safe)` seen.
    pub worst_gap: f64,
    /// Steps where the shield had no safe mass and the base policy acted.
    pub zero_safety_steps: u64,
}

impl AuditReport {
    pub fn passed(&self) -> bool {
        self.violations == 0
    }

    pub fn merge(&mut self, other: &AuditReport) {
        self.checked += other.checked;
        self.violations += other.violations;
        self.worst_gap = self.worst_gap.max(other.worst_gap);
        self.zero_safety_steps += other.zero_safety_steps;
    }

    fn check(&mut self, base: f64, plus: f64, zero: bool) {
        self.checked += 1;
        let gap = base - plus;
        self.worst_gap = self.worst_gap.max(gap);
        if plus < base - AUDIT_TOLERANCE {
            self.violations += 1;
        }
        if zero {
            self.zero_safety_steps += 1;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub seed: u64,
    pub rows: Vec<MetricsRow>,
    pub audit: AuditReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentResult {
    pub config: ExperimentConfig,
    pub runs: Vec<RunResult>,
}

impl ExperimentResult {
    pub fn rows(&self) -> impl Iterator<Item = &MetricsRow> {
        self.runs.iter().flat_map(|r| r.rows.iter())
    }

    pub fn audit(&self) -> AuditReport {
        let mut a = AuditReport::default();
        self.runs.iter().for_each(|r| a.merge(&r.audit));
        a
    }
}

pub fn build_env(cfg: &EnvConfig) -> Result<Box<dyn Environment>, HarnessError> {
    Ok(match cfg {
        EnvConfig::StagHunt(c) => Box::new(StagHuntGame::new(c.clone())?),
        EnvConfig::Centipede(c) => Box::new(CentipedeGame::new(c.clone())?),
        EnvConfig::Epgg(c) => Box::new(Epgg::new(c.clone())?),
        EnvConfig::Msh(c) => Box::new(MarkovStagHunt::new(c.clone())?),
        EnvConfig::Cartsafe(c) => Box::new(CartSafe::new(c.clone())?),
    })
}

/// Reads and grounds a shield file, keeping the catalog sensor pipeline of
/// `like`. The program lives for the rest of the process.
pub fn load_shield_file(path: &str, like: ShieldName) -> Result<ShieldCatalogEntry, HarnessError> {
    let text =
        std::fs::read_to_string(path).map_err(|e| HarnessError::Config(format!("{path}: {e}")))?;
    let source =
        ShieldSource::infer(text).map_err(|e| HarnessError::Config(format!("{path}: {e}")))?;
    let program =
        engine::parse(&source).map_err(|e| HarnessError::Config(format!("{path}: {e}")))?;
    let reference = like.program();
    if program.num_actions() != reference.num_actions()
        || program.num_sensors() != reference.num_sensors()
    {
        return Err(HarnessError::Config(format!(
            "{path}: expected {} actions and {} sensors, found {} and {}",
            reference.num_actions(),
            reference.num_sensors(),
            program.num_actions(),
            program.num_sensors()
        )));
    }
    let program: &'static engine::GroundProgram = Box::leak(Box::new(program));
    let name: &'static str = Box::leak(path.to_string().into_boxed_str());
    Ok(ShieldCatalogEntry::custom(
        name,
        program,
        ShieldCatalogEntry::new(like).pipeline,
    ))
}

/// Shields and measurement shields for every agent of a run.
#[derive(Debug, Clone)]
pub struct ShieldSet {
    /// Acting shields; `None` for unshielded agents.
    pub acting: Vec<Option<ShieldCatalogEntry>>,
    /// Defines the cooperation metric.
    pub cooperation: Vec<ShieldCatalogEntry>,
    /// Defines the safety metric of unshielded agents.
    pub safety: Vec<ShieldCatalogEntry>,
}

impl ShieldSet {
    pub fn for_config(cfg: &ExperimentConfig) -> Result<Self, HarnessError> {
        let kind = cfg.env.kind();
        let options = cfg.sensors.options();
        let template = match &cfg.shield_file {
            Some(path) => load_shield_file(path, kind.default_shield())?,
            None => ShieldCatalogEntry::with_options(cfg.shield_name(), &options),
        };
        let n = cfg.num_agents();
        let acting = cfg
            .shield_mask()
            .into_iter()
            .map(|on| on.then(|| template.clone()))
            .collect();
        let cooperation = (0..n)
            .map(|_| ShieldCatalogEntry::with_options(kind.cooperation_shield(), &options))
            .collect();
        let safety = (0..n)
            .map(|_| ShieldCatalogEntry::with_options(kind.default_shield(), &options))
            .collect();
        Ok(Self {
            acting,
            cooperation,
            safety,
        })
    }

    fn end_episode(&mut self) {
        for e in self
            .acting
            .iter_mut()
            .flatten()
            .chain(&mut self.cooperation)
            .chain(&mut self.safety)
        {
            e.pipeline.end_episode();
        }
    }
}

pub fn build_learner(
    cfg: &ExperimentConfig,
    obs_len: usize,
    num_actions: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Box<dyn Learner>, HarnessError> {
    let n = cfg.num_agents();
    Ok(if cfg.algorithm.is_ppo() {
        let mut ppo = cfg.ppo.clone();
        ppo.sharing = cfg.algorithm.sharing();
        Box::new(PpoPopulation::new(ppo, n, obs_len, num_actions, rng)?)
    } else {
        let shared = cfg.algorithm.sharing() == crate::agents::Sharing::SharedQ;
        Box::new(DqnPopulation::new(
            cfg.dqn.clone(),
            n,
            obs_len,
            num_actions,
            shared,
            rng,
        )?)
    })
}

/// Independent random streams of one seed.
pub struct SeedStreams {
    pub init: ChaCha8Rng,
    pub act: ChaCha8Rng,
    pub replay: ChaCha8Rng,
    pub eval: ChaCha8Rng,
    env: ChaCha8Rng,
}

impl SeedStreams {
    pub fn new(seed: u64) -> Self {
        let stream = |k: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(k);
            r
        };
        Self {
            init: stream(0),
            act: stream(1),
            replay: stream(2),
            eval: stream(3),
            env: stream(4),
        }
    }

    /// Fresh seed for the next environment reset.
    pub fn env_seed(&mut self) -> u64 {
        use rand::RngCore;
        self.env.next_u64()
    }
}

fn flag(v: &[u32], i: usize) -> u32 {
    v.get(i).copied().unwrap_or(0)
}

/// Plays one episode. Training mode stores transitions and lets the
/// learner update; evaluation acts with exploration floored and leaves the
/// learner untouched.
#[allow(clippy::too_many_arguments)]
pub fn run_episode(
    env: &mut dyn Environment,
    learner: &mut dyn Learner,
    shields: &mut ShieldSet,
    phase: Phase,
    env_seed: u64,
    act_rng: &mut ChaCha8Rng,
    replay_rng: &mut ChaCha8Rng,
    audit: &mut AuditReport,
) -> Result<Vec<MetricsRow>, HarnessError> {
    let n = env.num_agents();
    let train = phase == Phase::Train;
    let mut obs = env.reset(env_seed);
    let mut rows: Vec<MetricsRow> = (0..n)
        .map(|agent| MetricsRow {
            seed: 0,
            episode: 0,
            phase,
            agent,
            ret: 0.0,
            r_ep: 0.0,
            cooperation: 0.0,
            safety: 0.0,
            plants: 0,
            stags: 0,
            penalties: 0,
            steps: 0,
            pot: 0.0,
            f_t_mean: 0.0,
            coop_high_f: (0, 0),
            coop_low_f: (0, 0),
        })
        .collect();

    let mut steps = 0;
    loop {
        let mut actions = Vec::with_capacity(n);
        let mut decisions = Vec::with_capacity(n);
        for i in 0..n {
            let view = env.shield_view(i);
            let pi = learner.policy(i, &obs[i], train);
            let out = act(pi, shields.acting[i].as_mut(), &view, act_rng)?;
            let row = &mut rows[i];
            let coop = shields.cooperation[i]
                .evaluate(&out.shielded, &view)?
                .base_safety;
            shields.cooperation[i].pipeline.record(out.action, &view);
            row.cooperation += coop;
            row.safety += if shields.acting[i].is_some() {
                audit.check(out.base_safety, out.policy_safety, out.zero_safety);
                out.policy_safety
            } else {
                let s = shields.safety[i]
                    .evaluate(&out.shielded, &view)?
                    .base_safety;
                shields.safety[i].pipeline.record(out.action, &view);
                s
            };
            if let ShieldView::Multiplier(f) = view {
                row.f_t_mean += f;
                let c = u32::from(out.action == crate::envs::epgg::COOPERATE);
                if f > 2.0 {
                    row.coop_high_f.0 += c;
                    row.coop_high_f.1 += 1;
                } else if f < 1.0 {
                    row.coop_low_f.0 += c;
                    row.coop_low_f.1 += 1;
                }
            }
            actions.push(out.action);
            decisions.push(out);
        }

        let step = env.step(&actions)?;
        steps += 1;
        for i in 0..n {
            let row = &mut rows[i];
            row.r_ep += step.rewards[i];
            row.plants += flag(&step.info.plants, i);
            row.stags += flag(&step.info.stags, i);
            row.penalties += flag(&step.info.penalties, i);
            row.pot = step.info.pot;
        }
        if train {
            for (i, out) in decisions.into_iter().enumerate() {
                let log_prob = out.shielded.probs()[out.action].ln();
                learner.observe(
                    i,
                    TransitionRecord {
                        obs: std::mem::take(&mut obs[i]),
                        action: out.action,
                        reward: step.rewards[i],
                        next_obs: step.observations[i].clone(),
                        next_action: None,
                        done: step.done,
                        policy_safety: out.policy_safety,
                        action_safety: out.action_safety,
                        log_prob,
                        fallback: out.zero_safety,
                    },
                );
            }
            learner.after_step(replay_rng)?;
        }
        obs = step.observations;
        if step.done || steps >= env.t_max() {
            break;
        }
    }
    if train {
        learner.after_episode()?;
    }
    shields.end_episode();

    for row in &mut rows {
        let s = steps as f64;
        row.steps = steps;
        row.ret = row.r_ep / s;
        row.cooperation /= s;
        row.safety /= s;
        row.f_t_mean /= s;
    }
    Ok(rows)
}

/// Trains one seed, evaluating every `eval_every` episodes.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64) -> Result<RunResult, HarnessError> {
    cfg.validate()?;
    let mut env = build_env(&cfg.env)?;
    let mut streams = SeedStreams::new(seed);
    let mut learner = build_learner(
        cfg,
        env.observation_len(),
        env.num_actions(),
        &mut streams.init,
    )?;
    let mut shields = ShieldSet::for_config(cfg)?;
    let mut audit = AuditReport::default();
    let mut rows = Vec::new();
    let mut label = |mut r: Vec<MetricsRow>, episode: usize| {
        r.iter_mut().for_each(|m| {
            m.seed = seed;
            m.episode = episode;
        });
        rows.extend(r);
    };

    for episode in 0..cfg.episodes {
        let env_seed = streams.env_seed();
        let r = run_episode(
            env.as_mut(),
            learner.as_mut(),
            &mut shields,
            Phase::Train,
            env_seed,
            &mut streams.act,
            &mut streams.replay,
            &mut audit,
        )?;
        label(r, episode);
        if cfg.eval_every > 0 && (episode + 1) % cfg.eval_every == 0 {
            // Evaluation runs on copies so sensor state stays with training.
            let mut eval_shields = shields.clone();
            for _ in 0..cfg.eval_episodes {
                let env_seed = streams.env_seed();
                let mut unused = streams.replay.clone();
                let r = run_episode(
                    env.as_mut(),
                    learner.as_mut(),
                    &mut eval_shields,
                    Phase::Eval,
                    env_seed,
                    &mut streams.eval,
                    &mut unused,
                    &mut audit,
                )?;
                label(r, episode);
            }
        }
    }
    Ok(RunResult { seed, rows, audit })
}

/// Runs every seed, `jobs` at a time (0 picks the core count).
pub fn run_experiment(
    cfg: &ExperimentConfig,
    jobs: usize,
) -> Result<ExperimentResult, HarnessError> {
    cfg.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| HarnessError::Config(format!("thread pool: {e}")))?;
    let runs = pool.install(|| {
        cfg.seeds
            .0
            .par_iter()
            .map(|&s| run_seed(cfg, s))
            .collect::<Result<Vec<_>, _>>()
    })?;
    Ok(ExperimentResult {
        config: cfg.clone(),
        runs,
    })
}
