//! Exact inference for probabilistic logic shields.
//!
//! A shield program declares one annotated disjunction over `action/1`
//! atoms, a list of probabilistic `sensor/1` facts and a stratified rule base
//! defining `safe_next`. Binding a base policy and sensor valuations gives a
//! [`BoundShield`] that answers the three shielding queries by possible-world
//! enumeration:
//!
//! * `P(safe | a)` for every action,
//! * `P_pi(safe) = sum_a P(safe | a) pi(a)`,
//! * `pi+(a) = P(safe | a) pi(a) / P_pi(safe)`.
//!
//! The action disjunction is a single categorical variable: exactly one
//! action atom is true in every world. Worlds over sensors are visited in
//! increasing bitmask order with sensor `i` on bit `i`, and every sum is
//! accumulated in that fixed order.

mod ground;
pub mod parser;

use std::fmt;

use thiserror::Error;

pub use ground::{
    AtomId, AtomKind, GroundAtom, GroundProgram, GroundRule, SignedLiteral, MAX_SENSORS,
};

/// Tolerance on probability inputs before clamping.
pub const PROB_TOLERANCE: f64 = 1e-9;

/// Below this policy safety the shielded policy is undefined.
pub const ZERO_SAFETY_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum ShieldError {
    #[error("syntax error at {line}:{col}: found `{found}`, expected {expected}")]
    Syntax {
        line: usize,
        col: usize,
        found: String,
        expected: String,
    },
    #[error("undeclared constant `{name}` in `{predicate}`")]
    UndeclaredConstant { predicate: String, name: String },
    #[error("duplicate {kind} constant `{name}`")]
    DuplicateConstant { kind: &'static str, name: String },
    #[error(
        "{kind} declaration mismatch at index {index}: declared {declared}, program has {found}"
    )]
    DeclarationMismatch {
        kind: &'static str,
        index: usize,
        declared: String,
        found: String,
    },
    #[error("negation through recursion involving `{predicate}`")]
    NonStratifiedNegation { predicate: String },
    #[error("no definition of `safe_next`")]
    MissingSafePredicate,
    #[error("invalid action disjunction: {0}")]
    ActionDisjunction(String),
    #[error("variable `{var}` in clause for `{clause}` is not bound by a positive literal")]
    UnsafeVariable { var: String, clause: String },
    #[error("`{0}` is an input atom and cannot be a rule head")]
    InvalidHead(String),
    #[error("{0} sensors exceed the enumeration limit")]
    TooManySensors(usize),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("invalid probability {0}")]
    InvalidProbability(f64),
    #[error("policy safety {0:e} is too small to renormalize")]
    ZeroSafety(f64),
    #[error("action {action} out of range for {num_actions} actions")]
    ActionOutOfRange { action: usize, num_actions: usize },
}

/// Raw shield program plus the action and sensor constants it must declare,
/// in index order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShieldSource {
    pub text: String,
    pub declared_actions: Vec<String>,
    pub declared_sensors: Vec<String>,
}

impl ShieldSource {
    pub fn new<A, S>(text: impl Into<String>, actions: A, sensors: S) -> Self
    where
        A: IntoIterator,
        A::Item: Into<String>,
        S: IntoIterator,
        S::Item: Into<String>,
    {
        Self {
            text: text.into(),
            declared_actions: actions.into_iter().map(Into::into).collect(),
            declared_sensors: sensors.into_iter().map(Into::into).collect(),
        }
    }

    /// Takes the declarations from the program's own annotations.
    pub fn infer(text: impl Into<String>) -> Result<Self, ShieldError> {
        let text = text.into();
        let mut actions = Vec::new();
        let mut sensors = Vec::new();
        for clause in parser::parse_clauses(&text)? {
            if let parser::Clause::Annotated(branches) = clause {
                for (ann, atom) in branches {
                    let name = atom
                        .args
                        .first()
                        .map(|t| t.name().to_string())
                        .unwrap_or_default();
                    match ann.kind.as_str() {
                        "action" => actions.push(name),
                        _ => sensors.push(name),
                    }
                }
            }
        }
        Ok(Self {
            text,
            declared_actions: actions,
            declared_sensors: sensors,
        })
    }
}

/// Parses, grounds and stratifies a shield program.
pub fn parse(source: &ShieldSource) -> Result<GroundProgram, ShieldError> {
    if source.text.trim().is_empty() {
        return Err(ShieldError::Syntax {
            line: 1,
            col: 1,
            found: "end of input".into(),
            expected: "a clause".into(),
        });
    }
    let clauses = parser::parse_clauses(&source.text)?;
    ground::ground(source, clauses)
}

/// Probability vector over an agent's discrete actions.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyDistribution(Vec<f64>);

impl PolicyDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self, ShieldError> {
        if probs.is_empty() {
            return Err(ShieldError::DimensionMismatch {
                expected: 1,
                found: 0,
            });
        }
        for &p in &probs {
            if !(-PROB_TOLERANCE..=1.0 + PROB_TOLERANCE).contains(&p) {
                return Err(ShieldError::InvalidProbability(p));
            }
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > PROB_TOLERANCE {
            return Err(ShieldError::InvalidProbability(sum));
        }
        Ok(Self(probs.into_iter().map(|p| p.clamp(0.0, 1.0)).collect()))
    }

    pub fn uniform(n: usize) -> Self {
        Self(vec![1.0 / n as f64; n])
    }

    pub fn one_hot(n: usize, at: usize) -> Self {
        let mut v = vec![0.0; n];
        v[at] = 1.0;
        Self(v)
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    /// Lowest-index action with the largest probability.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.0.iter().enumerate() {
            if p > self.0[best] {
                best = i;
            }
        }
        best
    }

    pub fn entropy(&self) -> f64 {
        -self
            .0
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| p * p.ln())
            .sum::<f64>()
    }
}

impl fmt::Display for PolicyDistribution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|p| format!("{p:.6}")).collect();
        write!(f, "{}", parts.join(", "))
    }
}

/// Weight of one sensor world, multiplied in increasing sensor order.
pub fn world_weight(sensors: &[f64], world: usize) -> f64 {
    let mut w = 1.0;
    for (i, &p) in sensors.iter().enumerate() {
        w *= if (world >> i) & 1 == 1 { p } else { 1.0 - p };
    }
    w
}

/// A program with a base policy and sensor valuations attached.
#[derive(Debug, Clone)]
pub struct BoundShield<'p> {
    program: &'p GroundProgram,
    pi: PolicyDistribution,
    sensors: Vec<f64>,
}

/// Attaches a policy and sensor values to `program`.
pub fn bind<'p>(
    program: &'p GroundProgram,
    pi: PolicyDistribution,
    sensors: &[f64],
) -> Result<BoundShield<'p>, ShieldError> {
    if pi.len() != program.num_actions() {
        return Err(ShieldError::DimensionMismatch {
            expected: program.num_actions(),
            found: pi.len(),
        });
    }
    if sensors.len() != program.num_sensors() {
        return Err(ShieldError::DimensionMismatch {
            expected: program.num_sensors(),
            found: sensors.len(),
        });
    }
    let mut clamped = Vec::with_capacity(sensors.len());
    for &s in sensors {
        if !(-PROB_TOLERANCE..=1.0 + PROB_TOLERANCE).contains(&s) {
            return Err(ShieldError::InvalidProbability(s));
        }
        clamped.push(s.clamp(0.0, 1.0));
    }
    Ok(BoundShield {
        program,
        pi,
        sensors: clamped,
    })
}

/// Gradients of the shielded policy with respect to upstream parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ShieldGradient {
    /// `d pi+ / d pi`, one row per output action.
    pub dplus_dpi: Vec<Vec<f64>>,
    /// `d log P_pi(safe) / d pi`.
    pub dlogsafe_dpi: Vec<f64>,
    /// `d pi+ / d theta`, actions by parameters.
    pub dplus: Vec<Vec<f64>>,
    /// `d log P_pi(safe) / d theta`.
    pub dlogsafe: Vec<f64>,
}

impl<'p> BoundShield<'p> {
    pub fn program(&self) -> &'p GroundProgram {
        self.program
    }

    pub fn pi(&self) -> &PolicyDistribution {
        &self.pi
    }

    pub fn sensor_values(&self) -> &[f64] {
        &self.sensors
    }

    /// `P(safe_next | action = a)`.
    pub fn action_safety(&self, a: usize) -> Result<f64, ShieldError> {
        let n = self.program.num_actions();
        if a >= n {
            return Err(ShieldError::ActionOutOfRange {
                action: a,
                num_actions: n,
            });
        }
        let mut total = 0.0;
        for world in 0..self.program.num_worlds() {
            if self.program.safe_in_world(a, world) {
                total += world_weight(&self.sensors, world);
            }
        }
        Ok(total)
    }

    pub fn action_safeties(&self) -> Vec<f64> {
        (0..self.program.num_actions())
            .map(|a| self.action_safety(a).expect("index in range"))
            .collect()
    }

    /// `P_pi(safe)`.
    pub fn policy_safety(&self) -> f64 {
        policy_safety_from(&self.action_safeties(), self.pi.probs())
    }

    /// The shielded policy `pi+`.
    pub fn shielded_policy(&self) -> Result<PolicyDistribution, ShieldError> {
        shielded_from(&self.action_safeties(), self.pi.probs())
    }

    /// Chain rule through `pi+` and `log P_pi(safe)` with action safeties
    /// held constant. `dpi[a][k]` is `d pi(a) / d theta_k`.
    pub fn shielded_policy_grad(&self, dpi: &[Vec<f64>]) -> Result<ShieldGradient, ShieldError> {
        let n = self.program.num_actions();
        if dpi.len() != n {
            return Err(ShieldError::DimensionMismatch {
                expected: n,
                found: dpi.len(),
            });
        }
        let m = dpi.first().map_or(0, Vec::len);
        if let Some(bad) = dpi.iter().find(|row| row.len() != m) {
            return Err(ShieldError::DimensionMismatch {
                expected: m,
                found: bad.len(),
            });
        }
        let q = self.action_safeties();
        let pi = self.pi.probs();
        let s = policy_safety_from(&q, pi);
        if s < ZERO_SAFETY_EPS {
            return Err(ShieldError::ZeroSafety(s));
        }
        let dplus_dpi: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| {
                        let diag = if i == j { q[i] / s } else { 0.0 };
                        diag - q[i] * pi[i] * q[j] / (s * s)
                    })
                    .collect()
            })
            .collect();
        let dlogsafe_dpi: Vec<f64> = q.iter().map(|&qj| qj / s).collect();
        let dplus = (0..n)
            .map(|i| {
                (0..m)
                    .map(|k| (0..n).map(|j| dplus_dpi[i][j] * dpi[j][k]).sum())
                    .collect()
            })
            .collect();
        let dlogsafe = (0..m)
            .map(|k| (0..n).map(|j| dlogsafe_dpi[j] * dpi[j][k]).sum())
            .collect();
        Ok(ShieldGradient {
            dplus_dpi,
            dlogsafe_dpi,
            dplus,
            dlogsafe,
        })
    }
}

/// `sum_a q(a) pi(a)` in increasing action order.
pub fn policy_safety_from(action_safety: &[f64], pi: &[f64]) -> f64 {
    let mut total = 0.0;
    for (q, p) in action_safety.iter().zip(pi) {
        total += q * p;
    }
    total
}

/// Renormalizes `pi` by per-action safeties. Constant safeties return `pi`
/// unchanged.
pub fn shielded_from(action_safety: &[f64], pi: &[f64]) -> Result<PolicyDistribution, ShieldError> {
    let s = policy_safety_from(action_safety, pi);
    if s < ZERO_SAFETY_EPS {
        return Err(ShieldError::ZeroSafety(s));
    }
    if action_safety.windows(2).all(|w| w[0] == w[1]) {
        return Ok(PolicyDistribution(pi.to_vec()));
    }
    Ok(PolicyDistribution(
        action_safety
            .iter()
            .zip(pi)
            .map(|(q, p)| q * p / s)
            .collect(),
    ))
}
