//! Sensor computations and the catalog of shield programs.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{self, GroundProgram, PolicyDistribution, ShieldError, ShieldSource};
use crate::envs::ShieldView;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum SensorError {
    #[error("action history is empty")]
    EmptyBuffer,
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("fewer than two samples")]
    InsufficientData,
    #[error("sample variance is zero")]
    ZeroVariance,
}

/// Ring buffer of an agent's most recent actions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActionHistoryBuffer {
    capacity: usize,
    entries: VecDeque<usize>,
}

impl ActionHistoryBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "history capacity must be positive");
        Self {
            capacity,
            entries: VecDeque::with_capacity(capacity),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn push(&mut self, action: usize) {
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(action);
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries.iter().copied()
    }
}

/// Empirical action frequencies over the stored entries.
pub fn mean_policy(
    buffer: &ActionHistoryBuffer,
    num_actions: usize,
) -> Result<PolicyDistribution, SensorError> {
    if buffer.is_empty() {
        return Err(SensorError::EmptyBuffer);
    }
    let mut counts = vec![0usize; num_actions];
    for a in buffer.iter() {
        if a >= num_actions {
            return Err(SensorError::DimensionMismatch {
                expected: num_actions,
                found: a + 1,
            });
        }
        counts[a] += 1;
    }
    let n = buffer.len() as f64;
    let probs = counts.into_iter().map(|c| c as f64 / n).collect();
    Ok(PolicyDistribution::new(probs).expect("frequencies form a distribution"))
}

/// How the divergence between a target strategy and observed play becomes
/// a sensor value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DivergenceMode {
    /// `|pi*(a) - pi_h(a)|`.
    Absolute,
    /// `max(0, pi_h(a) - pi*(a))`: only over-played actions are flagged.
    #[default]
    Excess,
}

/// Per-action `|pi*(a) - pi_h(a)|`.
pub fn nash_divergence_sensors(
    target: &PolicyDistribution,
    observed: &PolicyDistribution,
) -> Result<Vec<f64>, SensorError> {
    divergence_sensors(target, observed, DivergenceMode::Absolute)
}

/// Per-action `max(0, pi_h(a) - pi*(a))`.
pub fn nash_excess_sensors(
    target: &PolicyDistribution,
    observed: &PolicyDistribution,
) -> Result<Vec<f64>, SensorError> {
    divergence_sensors(target, observed, DivergenceMode::Excess)
}

pub fn divergence_sensors(
    target: &PolicyDistribution,
    observed: &PolicyDistribution,
    mode: DivergenceMode,
) -> Result<Vec<f64>, SensorError> {
    if target.len() != observed.len() {
        return Err(SensorError::DimensionMismatch {
            expected: target.len(),
            found: observed.len(),
        });
    }
    Ok(target
        .probs()
        .iter()
        .zip(observed.probs())
        .map(|(&t, &o)| match mode {
            DivergenceMode::Absolute => (t - o).abs(),
            DivergenceMode::Excess => (o - t).max(0.0),
        })
        .map(|d| d.clamp(0.0, 1.0))
        .collect())
}

/// Running mean and sum of squared deviations.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct OnlineMoments {
    pub count: u64,
    pub mean: f64,
    pub m2: f64,
}

impl OnlineMoments {
    pub fn push(&mut self, x: f64) {
        *self = welford_update(*self, x);
    }

    /// Sample variance `m2 / (count - 1)`.
    pub fn variance(&self) -> Option<f64> {
        (self.count >= 2).then(|| self.m2 / (self.count - 1) as f64)
    }

    pub fn std(&self) -> Option<f64> {
        self.variance().map(f64::sqrt)
    }
}

pub fn welford_update(m: OnlineMoments, x: f64) -> OnlineMoments {
    let count = m.count + 1;
    let delta = x - m.mean;
    let mean = m.mean + delta / count as f64;
    let m2 = (m.m2 + delta * (x - mean)).max(0.0);
    OnlineMoments { count, mean, m2 }
}

/// Standard normal CDF.
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

/// `1 - 2 |Phi(z) - 0.5|` with `z` the standardized distance of `f_t` from
/// the running mean.
pub fn f_certainty(f_t: f64, m: &OnlineMoments) -> Result<f64, SensorError> {
    let sd = m.std().ok_or(SensorError::InsufficientData)?;
    if sd == 0.0 {
        return Err(SensorError::ZeroVariance);
    }
    let z = (f_t - m.mean) / sd;
    Ok((1.0 - 2.0 * (normal_cdf(z) - 0.5).abs()).clamp(0.0, 1.0))
}

/// `(mu_high, f_certainty)`. Certainty is 0 until the moments are defined.
pub fn epgg_sensors(f_t: f64, m: &OnlineMoments) -> [f64; 2] {
    let mu_high = if m.mean >= 1.0 { 1.0 } else { 0.0 };
    let certainty = f_certainty(f_t, m).unwrap_or(0.0);
    [mu_high, certainty]
}

/// Grid sensors `(left, right, up, down, stag_near_self, stag_near_other)`
/// from `(row, col)` positions. Rows grow downward.
pub fn msh_sensors_at(
    own: (usize, usize),
    others: &[(usize, usize)],
    stag: (usize, usize),
) -> [f64; 6] {
    let b = |v: bool| if v { 1.0 } else { 0.0 };
    let near = |p: (usize, usize)| p.0.abs_diff(stag.0) + p.1.abs_diff(stag.1) <= 1;
    [
        b(stag.1 < own.1),
        b(stag.1 > own.1),
        b(stag.0 < own.0),
        b(stag.0 > own.0),
        b(near(own)),
        b(others.iter().any(|&p| near(p))),
    ]
}

pub fn msh_sensors(env: &crate::envs::MarkovStagHunt, agent: usize) -> [f64; 6] {
    let others: Vec<_> = (0..env.num_agents())
        .filter(|&j| j != agent)
        .map(|j| env.agent_pos(j))
        .collect();
    msh_sensors_at(env.agent_pos(agent), &others, env.stag_pos())
}

/// `(cost, xpos, left, right)` for cart position `x`.
pub fn cartsafe_sensors_at(x: f64, x_max: f64) -> [f64; 4] {
    let rel = x.abs() / x_max;
    [
        if rel > 0.5 { 1.0 } else { 0.0 },
        rel.min(1.0),
        if x < 0.0 { 1.0 } else { 0.0 },
        if x >= 0.0 { 1.0 } else { 0.0 },
    ]
}

pub fn cartsafe_sensors(env: &crate::envs::CartSafe) -> [f64; 4] {
    cartsafe_sensors_at(env.state().x, env.x_max())
}

/// Names of the bundled shield programs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShieldName {
    Pure,
    Mixed,
    Continue,
    Epgg,
    CooperateAlways,
    MshWeak,
    MshStrong,
    Cartsafe,
}

impl ShieldName {
    pub const ALL: [ShieldName; 8] = [
        ShieldName::Pure,
        ShieldName::Mixed,
        ShieldName::Continue,
        ShieldName::Epgg,
        ShieldName::CooperateAlways,
        ShieldName::MshWeak,
        ShieldName::MshStrong,
        ShieldName::Cartsafe,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ShieldName::Pure => "pure",
            ShieldName::Mixed => "mixed",
            ShieldName::Continue => "continue",
            ShieldName::Epgg => "epgg",
            ShieldName::CooperateAlways => "cooperate_always",
            ShieldName::MshWeak => "msh_weak",
            ShieldName::MshStrong => "msh_strong",
            ShieldName::Cartsafe => "cartsafe",
        }
    }

    /// Program text as shipped under `shields/`.
    pub fn source_text(self) -> &'static str {
        match self {
            ShieldName::Pure => include_str!("../../shields/pure.pl"),
            ShieldName::Mixed => include_str!("../../shields/mixed.pl"),
            ShieldName::Continue => include_str!("../../shields/continue.pl"),
            ShieldName::Epgg => include_str!("../../shields/epgg.pl"),
            ShieldName::CooperateAlways => include_str!("../../shields/cooperate_always.pl"),
            ShieldName::MshWeak => include_str!("../../shields/msh_weak.pl"),
            ShieldName::MshStrong => include_str!("../../shields/msh_strong.pl"),
            ShieldName::Cartsafe => include_str!("../../shields/cartsafe.pl"),
        }
    }

    pub fn declared_actions(self) -> &'static [&'static str] {
        match self {
            ShieldName::Pure | ShieldName::Mixed => &["stag", "hare"],
            ShieldName::Continue => &["continue", "stop"],
            ShieldName::Epgg | ShieldName::CooperateAlways => &["cooperate", "defect"],
            ShieldName::MshWeak | ShieldName::MshStrong => &["left", "right", "up", "down", "stay"],
            ShieldName::Cartsafe => &["left", "right"],
        }
    }

    pub fn declared_sensors(self) -> &'static [&'static str] {
        match self {
            ShieldName::Pure | ShieldName::Continue | ShieldName::CooperateAlways => &[],
            ShieldName::Mixed => &["stag_diff", "hare_diff"],
            ShieldName::Epgg => &["mu_high", "f_certainty"],
            ShieldName::MshWeak | ShieldName::MshStrong => &[
                "left",
                "right",
                "up",
                "down",
                "stag_near_self",
                "stag_near_other",
            ],
            ShieldName::Cartsafe => &["cost", "xpos", "left", "right"],
        }
    }

    pub fn source(self) -> ShieldSource {
        ShieldSource::new(
            self.source_text(),
            self.declared_actions().iter().copied(),
            self.declared_sensors().iter().copied(),
        )
    }

    /// The grounded program, parsed once per process.
    pub fn program(self) -> &'static GroundProgram {
        static PROGRAMS: [OnceLock<GroundProgram>; 8] = [const { OnceLock::new() }; 8];
        let slot = Self::ALL.iter().position(|&n| n == self).expect("listed");
        PROGRAMS[slot].get_or_init(|| engine::parse(&self.source()).expect("bundled shield parses"))
    }
}

impl fmt::Display for ShieldName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ShieldName {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .iter()
            .copied()
            .find(|n| n.as_str() == s)
            .ok_or_else(|| format!("unknown shield `{s}`"))
    }
}

/// Options for the stateful sensor pipelines.
#[derive(Debug, Clone, PartialEq)]
pub struct SensorOptions {
    /// Mixed-Nash target for the divergence sensors.
    pub target: Vec<f64>,
    pub history: usize,
    /// Keep the action history across episode boundaries.
    pub persist_history: bool,
    pub divergence: DivergenceMode,
}

impl Default for SensorOptions {
    fn default() -> Self {
        Self {
            target: crate::envs::staghunt_mixed_nash().to_vec(),
            history: 50,
            persist_history: true,
            divergence: DivergenceMode::Excess,
        }
    }
}

/// Per-agent sensor state for one shield.
#[derive(Debug, Clone)]
pub enum SensorPipeline {
    Static,
    Divergence {
        target: PolicyDistribution,
        history: ActionHistoryBuffer,
        persist: bool,
        mode: DivergenceMode,
    },
    Epgg {
        moments: OnlineMoments,
    },
    Grid,
    Cart,
    /// Reads [`ShieldView::Sensors`] as is.
    Direct,
}

impl SensorPipeline {
    pub fn sensors(&self, view: &ShieldView) -> Vec<f64> {
        match (self, view) {
            (SensorPipeline::Static, _) => Vec::new(),
            (
                SensorPipeline::Divergence {
                    target,
                    history,
                    mode,
                    ..
                },
                _,
            ) => match mean_policy(history, target.len()) {
                Ok(observed) => {
                    divergence_sensors(target, &observed, *mode).expect("equal lengths")
                }
                Err(_) => vec![0.0; target.len()],
            },
            (SensorPipeline::Epgg { moments }, ShieldView::Multiplier(f)) => {
                epgg_sensors(*f, moments).to_vec()
            }
            (SensorPipeline::Grid, ShieldView::Grid { own, others, stag }) => {
                msh_sensors_at(*own, others, *stag).to_vec()
            }
            (SensorPipeline::Cart, ShieldView::Cart { x, x_max }) => {
                cartsafe_sensors_at(*x, *x_max).to_vec()
            }
            (SensorPipeline::Direct, ShieldView::Sensors(v)) => v.clone(),
            (pipeline, view) => panic!("sensor pipeline {pipeline:?} cannot read {view:?}"),
        }
    }

    /// Feeds back the action taken and the state it was taken in.
    pub fn record(&mut self, action: usize, view: &ShieldView) {
        match (self, view) {
            (SensorPipeline::Divergence { history, .. }, _) => history.push(action),
            (SensorPipeline::Epgg { moments }, ShieldView::Multiplier(f)) => moments.push(*f),
            _ => {}
        }
    }

    pub fn end_episode(&mut self) {
        if let SensorPipeline::Divergence {
            history,
            persist: false,
            ..
        } = self
        {
            history.clear();
        }
    }
}

/// A shield program paired with its sensor pipeline.
#[derive(Debug, Clone)]
pub struct ShieldCatalogEntry {
    pub name: &'static str,
    pub program: &'static GroundProgram,
    pub pipeline: SensorPipeline,
}

/// Everything the engine reports for one shielding decision.
#[derive(Debug, Clone, PartialEq)]
pub struct ShieldOutcome {
    pub sensors: Vec<f64>,
    /// `P(safe | a)` per action.
    pub action_safety: Vec<f64>,
    /// `P_pi(safe)`.
    pub base_safety: f64,
    /// The shielded policy, or `pi` itself under the zero-safety fallback.
    pub shielded: PolicyDistribution,
    /// `P_{pi+}(safe)`.
    pub shielded_safety: f64,
    pub zero_safety: bool,
}

impl ShieldCatalogEntry {
    pub fn new(name: ShieldName) -> Self {
        Self::with_options(name, &SensorOptions::default())
    }

    pub fn with_options(name: ShieldName, options: &SensorOptions) -> Self {
        let pipeline = match name {
            ShieldName::Pure | ShieldName::Continue | ShieldName::CooperateAlways => {
                SensorPipeline::Static
            }
            ShieldName::Mixed => SensorPipeline::Divergence {
                target: PolicyDistribution::new(options.target.clone())
                    .expect("valid target strategy"),
                history: ActionHistoryBuffer::new(options.history),
                persist: options.persist_history,
                mode: options.divergence,
            },
            ShieldName::Epgg => SensorPipeline::Epgg {
                moments: OnlineMoments::default(),
            },
            ShieldName::MshWeak | ShieldName::MshStrong => SensorPipeline::Grid,
            ShieldName::Cartsafe => SensorPipeline::Cart,
        };
        Self {
            name: name.as_str(),
            program: name.program(),
            pipeline,
        }
    }

    /// A program outside the catalog, read through `pipeline`.
    pub fn custom(
        name: &'static str,
        program: &'static GroundProgram,
        pipeline: SensorPipeline,
    ) -> Self {
        Self {
            name,
            program,
            pipeline,
        }
    }

    pub fn sensors(&self, view: &ShieldView) -> Vec<f64> {
        self.pipeline.sensors(view)
    }

    pub fn evaluate(
        &self,
        pi: &PolicyDistribution,
        view: &ShieldView,
    ) -> Result<ShieldOutcome, ShieldError> {
        evaluate(self.program, pi, self.sensors(view))
    }
}

/// Shields `pi` under `sensors`. A zero-safety policy falls back to `pi`.
pub fn evaluate(
    program: &GroundProgram,
    pi: &PolicyDistribution,
    sensors: Vec<f64>,
) -> Result<ShieldOutcome, ShieldError> {
    let bound = engine::bind(program, pi.clone(), &sensors)?;
    let action_safety = bound.action_safeties();
    let base_safety = engine::policy_safety_from(&action_safety, pi.probs());
    let (shielded, zero_safety) = match engine::shielded_from(&action_safety, pi.probs()) {
        Ok(plus) => (plus, false),
        Err(ShieldError::ZeroSafety(_)) => (pi.clone(), true),
        Err(e) => return Err(e),
    };
    let shielded_safety = engine::policy_safety_from(&action_safety, shielded.probs());
    Ok(ShieldOutcome {
        sensors,
        action_safety,
        base_safety,
        shielded,
        shielded_safety,
        zero_safety,
    })
}
