use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize};
use toml::{Table, Value};

use super::HarnessError;
use crate::agents::{DqnConfig, ExplorationKind, ExplorationSchedule, PpoConfig, Sharing};
use crate::envs::{CartSafeConfig, CentipedeConfig, EpggConfig, MshConfig, StagHuntConfig};
use crate::shields::{DivergenceMode, SensorOptions, ShieldName};

/// Schema version written to manifests.
pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Iql,
    Siql,
    Ippo,
    Sippo,
    Csppo,
    Scsppo,
    Acsppo,
    Sacsppo,
    Psql,
    Spsql,
}

impl Algorithm {
    pub const ALL: [Algorithm; 10] = [
        Algorithm::Iql,
        Algorithm::Siql,
        Algorithm::Ippo,
        Algorithm::Sippo,
        Algorithm::Csppo,
        Algorithm::Scsppo,
        Algorithm::Acsppo,
        Algorithm::Sacsppo,
        Algorithm::Psql,
        Algorithm::Spsql,
    ];

    pub fn shielded(self) -> bool {
        matches!(
            self,
            Algorithm::Siql
                | Algorithm::Sippo
                | Algorithm::Scsppo
                | Algorithm::Sacsppo
                | Algorithm::Spsql
        )
    }

    pub fn is_ppo(self) -> bool {
        !matches!(
            self,
            Algorithm::Iql | Algorithm::Siql | Algorithm::Psql | Algorithm::Spsql
        )
    }

    pub fn sharing(self) -> Sharing {
        match self {
            Algorithm::Iql | Algorithm::Siql | Algorithm::Ippo | Algorithm::Sippo => {
                Sharing::Independent
            }
            Algorithm::Csppo | Algorithm::Scsppo => Sharing::SharedCritic,
            Algorithm::Acsppo | Algorithm::Sacsppo => Sharing::SharedActorCritic,
            Algorithm::Psql | Algorithm::Spsql => Sharing::SharedQ,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Algorithm::Iql => "IQL",
            Algorithm::Siql => "SIQL",
            Algorithm::Ippo => "IPPO",
            Algorithm::Sippo => "SIPPO",
            Algorithm::Csppo => "CSPPO",
            Algorithm::Scsppo => "SCSPPO",
            Algorithm::Acsppo => "ACSPPO",
            Algorithm::Sacsppo => "SACSPPO",
            Algorithm::Psql => "PSQL",
            Algorithm::Spsql => "SPSQL",
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Algorithm {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .iter()
            .copied()
            .find(|a| a.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown algorithm `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EnvConfig {
    StagHunt(StagHuntConfig),
    Centipede(CentipedeConfig),
    Epgg(EpggConfig),
    Msh(MshConfig),
    Cartsafe(CartSafeConfig),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnvKind {
    StagHunt,
    Centipede,
    Epgg,
    Msh,
    Cartsafe,
}

impl EnvKind {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "stag_hunt" => EnvKind::StagHunt,
            "centipede" => EnvKind::Centipede,
            "epgg" => EnvKind::Epgg,
            "msh" => EnvKind::Msh,
            "cartsafe" => EnvKind::Cartsafe,
            _ => return None,
        })
    }

    /// Shield given to shielded agents when the config names none.
    pub fn default_shield(self) -> ShieldName {
        match self {
            EnvKind::StagHunt => ShieldName::Pure,
            EnvKind::Centipede => ShieldName::Continue,
            EnvKind::Epgg => ShieldName::Epgg,
            EnvKind::Msh => ShieldName::MshStrong,
            EnvKind::Cartsafe => ShieldName::Cartsafe,
        }
    }

    /// Shield that defines the cooperation metric.
    pub fn cooperation_shield(self) -> ShieldName {
        match self {
            EnvKind::StagHunt => ShieldName::Pure,
            EnvKind::Centipede => ShieldName::Continue,
            EnvKind::Epgg => ShieldName::CooperateAlways,
            EnvKind::Msh => ShieldName::MshStrong,
            EnvKind::Cartsafe => ShieldName::Cartsafe,
        }
    }

    fn env_config(self) -> EnvConfig {
        match self {
            EnvKind::StagHunt => EnvConfig::StagHunt(StagHuntConfig::default()),
            EnvKind::Centipede => EnvConfig::Centipede(CentipedeConfig::default()),
            EnvKind::Epgg => EnvConfig::Epgg(EpggConfig::default()),
            EnvKind::Msh => EnvConfig::Msh(MshConfig::default()),
            EnvKind::Cartsafe => EnvConfig::Cartsafe(CartSafeConfig::default()),
        }
    }

    /// PPO settings per environment.
    pub fn ppo_defaults(self) -> PpoConfig {
        let base = PpoConfig::default();
        match self {
            EnvKind::Cartsafe => PpoConfig {
                gamma: 0.9,
                buffer_size: 400,
                ..base
            },
            EnvKind::StagHunt | EnvKind::Epgg => PpoConfig {
                buffer_size: 50,
                ..base
            },
            EnvKind::Centipede => PpoConfig {
                buffer_size: 100,
                clip: 0.15,
                ..base
            },
            EnvKind::Msh => PpoConfig {
                buffer_size: 100,
                ..base
            },
        }
    }

    /// DQN settings per environment.
    pub fn dqn_defaults(self) -> DqnConfig {
        let base = DqnConfig::default();
        match self {
            EnvKind::Cartsafe => DqnConfig {
                gamma: 0.9,
                buffer_size: 10_000,
                exploration: ExplorationSchedule {
                    decay: 0.99996,
                    ..base.exploration
                },
                ..base
            },
            _ => base,
        }
    }
}

impl EnvConfig {
    pub fn kind(&self) -> EnvKind {
        match self {
            EnvConfig::StagHunt(_) => EnvKind::StagHunt,
            EnvConfig::Centipede(_) => EnvKind::Centipede,
            EnvConfig::Epgg(_) => EnvKind::Epgg,
            EnvConfig::Msh(_) => EnvKind::Msh,
            EnvConfig::Cartsafe(_) => EnvKind::Cartsafe,
        }
    }

    pub fn num_agents(&self) -> usize {
        match self {
            EnvConfig::StagHunt(_) | EnvConfig::Centipede(_) => 2,
            EnvConfig::Epgg(c) => c.n,
            EnvConfig::Msh(c) => c.n,
            EnvConfig::Cartsafe(_) => 1,
        }
    }
}

/// Sensor pipeline settings for the stateful shields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SensorConfig {
    /// Mixed-strategy target; defaults to the Stag-Hunt mixed Nash.
    pub target: Option<Vec<f64>>,
    pub history: usize,
    pub persist_history: bool,
    pub divergence: DivergenceMode,
}

impl Default for SensorConfig {
    fn default() -> Self {
        let o = SensorOptions::default();
        Self {
            target: None,
            history: o.history,
            persist_history: o.persist_history,
            divergence: o.divergence,
        }
    }
}

impl SensorConfig {
    pub fn options(&self) -> SensorOptions {
        let mut o = SensorOptions {
            history: self.history,
            persist_history: self.persist_history,
            divergence: self.divergence,
            ..SensorOptions::default()
        };
        if let Some(t) = &self.target {
            o.target = t.clone();
        }
        o
    }
}

/// Seed list; a bare integer is a single seed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(transparent)]
pub struct Seeds(pub Vec<u64>);

impl<'de> Deserialize<'de> for Seeds {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            One(u64),
            Many(Vec<u64>),
        }
        Ok(match Repr::deserialize(d)? {
            Repr::One(s) => Seeds(vec![s]),
            Repr::Many(v) => Seeds(v),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub algorithm: Algorithm,
    pub env: EnvConfig,
    pub seeds: Seeds,
    pub episodes: usize,
    /// Evaluate after every `eval_every` training episodes; 0 disables.
    pub eval_every: usize,
    pub eval_episodes: usize,
    /// Training episodes per seed that `summarize` reports on.
    pub last_k: usize,
    /// Catalog shield for shielded agents.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shield: Option<ShieldName>,
    /// Shield program read from disk instead of the catalog.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shield_file: Option<String>,
    /// Indices of shielded agents; all agents when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shielded_agents: Option<Vec<usize>>,
    #[serde(default)]
    pub sensors: SensorConfig,
    pub ppo: PpoConfig,
    pub dqn: DqnConfig,
}

/// Bundled experiment definitions.
pub const PRESETS: &[(&str, &str)] = &[
    (
        "stag_hunt_ippo",
        include_str!("../../configs/stag_hunt_ippo.toml"),
    ),
    (
        "stag_hunt_sippo_pure",
        include_str!("../../configs/stag_hunt_sippo_pure.toml"),
    ),
    (
        "stag_hunt_sippo_mixed",
        include_str!("../../configs/stag_hunt_sippo_mixed.toml"),
    ),
    (
        "centipede_sippo",
        include_str!("../../configs/centipede_sippo.toml"),
    ),
    (
        "centipede_iql_egreedy",
        include_str!("../../configs/centipede_iql_egreedy.toml"),
    ),
    (
        "centipede_siql_egreedy",
        include_str!("../../configs/centipede_siql_egreedy.toml"),
    ),
    (
        "centipede_siql_softmax",
        include_str!("../../configs/centipede_siql_softmax.toml"),
    ),
    ("epgg_ippo", include_str!("../../configs/epgg_ippo.toml")),
    ("epgg_sippo", include_str!("../../configs/epgg_sippo.toml")),
    (
        "epgg5_sippo",
        include_str!("../../configs/epgg5_sippo.toml"),
    ),
    ("msh_ippo", include_str!("../../configs/msh_ippo.toml")),
    (
        "msh_sippo_weak",
        include_str!("../../configs/msh_sippo_weak.toml"),
    ),
    (
        "msh_sippo_strong",
        include_str!("../../configs/msh_sippo_strong.toml"),
    ),
    (
        "cartsafe_ippo",
        include_str!("../../configs/cartsafe_ippo.toml"),
    ),
    (
        "cartsafe_sippo",
        include_str!("../../configs/cartsafe_sippo.toml"),
    ),
];

pub fn preset(name: &str) -> Option<&'static str> {
    PRESETS
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, text)| *text)
}

fn config_err(msg: impl Into<String>) -> HarnessError {
    HarnessError::Config(msg.into())
}

/// Parses the right-hand side of `key=value` as a TOML value, falling back
/// to a bare string.
fn parse_value(raw: &str) -> Value {
    toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn set_path(table: &mut Table, path: &str, value: Value) -> Result<(), HarnessError> {
    let parts: Vec<&str> = path.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(config_err(format!("invalid override key `{path}`")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| Value::Table(Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| config_err(format!("`{p}` in `{path}` is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Splits `key=value` override strings.
pub fn parse_overrides(items: &[String]) -> Result<Vec<(String, Value)>, HarnessError> {
    items
        .iter()
        .map(|s| {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| config_err(format!("override `{s}` is not key=value")))?;
            Ok((k.trim().to_string(), parse_value(v.trim())))
        })
        .collect()
}

impl ExperimentConfig {
    /// Table 5 defaults for `kind` and `algorithm`.
    pub fn defaults(kind: EnvKind, algorithm: Algorithm) -> Self {
        let mut ppo = kind.ppo_defaults();
        ppo.sharing = algorithm.sharing();
        let mut dqn = kind.dqn_defaults();
        if !algorithm.shielded() {
            ppo.alpha = 0.0;
            dqn.alpha = 0.0;
        }
        Self {
            name: format!("{}_{}", algorithm.as_str().to_lowercase(), kind_name(kind)),
            algorithm,
            env: kind.env_config(),
            seeds: Seeds(vec![0, 1, 2, 3, 4]),
            episodes: 500,
            eval_every: 10,
            eval_episodes: 1,
            last_k: 50,
            shield: None,
            shield_file: None,
            shielded_agents: None,
            sensors: SensorConfig::default(),
            ppo,
            dqn,
        }
    }

    /// Parses TOML text over the defaults picked by its `env.kind` and
    /// `algorithm`, then applies `overrides`.
    pub fn from_toml_str(text: &str, overrides: &[(String, Value)]) -> Result<Self, HarnessError> {
        let mut user: Table = toml::from_str(text).map_err(|e| config_err(e.to_string()))?;
        for (k, v) in overrides {
            set_path(&mut user, k, v.clone())?;
        }
        let algorithm: Algorithm = user
            .get("algorithm")
            .and_then(Value::as_str)
            .ok_or_else(|| config_err("missing `algorithm`"))?
            .parse()
            .map_err(config_err)?;
        user.insert(
            "algorithm".into(),
            Value::String(algorithm.as_str().to_lowercase()),
        );
        let kind_str = user
            .get("env")
            .and_then(|e| e.get("kind"))
            .and_then(Value::as_str)
            .ok_or_else(|| config_err("missing `env.kind`"))?;
        let kind = EnvKind::parse(kind_str)
            .ok_or_else(|| config_err(format!("unknown env.kind `{kind_str}`")))?;

        let mut table = Table::try_from(Self::defaults(kind, algorithm))
            .map_err(|e| config_err(e.to_string()))?;
        merge(&mut table, user);
        let mut cfg: Self = table
            .try_into()
            .map_err(|e: toml::de::Error| config_err(e.to_string()))?;
        cfg.ppo.sharing = algorithm.sharing();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_preset(name: &str, overrides: &[(String, Value)]) -> Result<Self, HarnessError> {
        let text = preset(name).ok_or_else(|| config_err(format!("unknown preset `{name}`")))?;
        Self::from_toml_str(text, overrides)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn num_agents(&self) -> usize {
        self.env.num_agents()
    }

    /// Per-agent shield flags.
    pub fn shield_mask(&self) -> Vec<bool> {
        let n = self.num_agents();
        if !self.algorithm.shielded() {
            return vec![false; n];
        }
        match &self.shielded_agents {
            None => vec![true; n],
            Some(idx) => (0..n).map(|i| idx.contains(&i)).collect(),
        }
    }

    pub fn shield_name(&self) -> ShieldName {
        self.shield
            .unwrap_or_else(|| self.env.kind().default_shield())
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let n = self.num_agents();
        if n == 0 {
            return Err(config_err("environment has no agents"));
        }
        if self.seeds.0.is_empty() {
            return Err(config_err("`seeds` is empty"));
        }
        if self.algorithm.is_ppo() && self.ppo.alpha < 0.0
            || !self.algorithm.is_ppo() && self.dqn.alpha < 0.0
        {
            return Err(config_err("alpha must be non-negative"));
        }
        let chose_shield =
            self.shield.is_some() || self.shield_file.is_some() || self.shielded_agents.is_some();
        if !self.algorithm.shielded() && chose_shield {
            return Err(config_err(format!(
                "{} is unshielded; drop the shield settings",
                self.algorithm
            )));
        }
        if self.shield.is_some() && self.shield_file.is_some() {
            return Err(config_err("set either `shield` or `shield_file`"));
        }
        if let Some(idx) = &self.shielded_agents {
            if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
                return Err(config_err(format!(
                    "shielded agent {bad} out of range for {n} agents"
                )));
            }
        }
        if self.dqn.exploration.kind == ExplorationKind::Softmax && self.dqn.exploration.tau <= 0.0
        {
            return Err(config_err("softmax exploration needs tau > 0"));
        }
        Ok(())
    }
}

fn kind_name(kind: EnvKind) -> &'static str {
    match kind {
        EnvKind::StagHunt => "stag_hunt",
        EnvKind::Centipede => "centipede",
        EnvKind::Epgg => "epgg",
        EnvKind::Msh => "msh",
        EnvKind::Cartsafe => "cartsafe",
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "algorithm = \"sippo\"\n[env]\nkind = \"stag_hunt\"\n";

    #[test]
    fn minimal_config_gets_table_defaults() {
        let cfg = ExperimentConfig::from_toml_str(MINIMAL, &[]).unwrap();
        assert_eq!(cfg.ppo.buffer_size, 50);
        assert_eq!(cfg.ppo.clip, 0.1);
        assert_eq!(cfg.shield_name(), ShieldName::Pure);
        assert_eq!(cfg.shield_mask(), vec![true, true]);
        assert_eq!(cfg.seeds.0.len(), 5);
    }

    #[test]
    fn overrides_apply_and_typos_fail() {
        let ov = parse_overrides(&[
            "seeds=1".into(),
            "episodes=2".into(),
            "ppo.alpha=0.5".into(),
        ])
        .unwrap();
        let cfg = ExperimentConfig::from_toml_str(MINIMAL, &ov).unwrap();
        assert_eq!(cfg.seeds, Seeds(vec![1]));
        assert_eq!(cfg.episodes, 2);
        assert_eq!(cfg.ppo.alpha, 0.5);
        for bad in ["epsiodes=2", "ppo.alhpa=1", "env.tmax=3"] {
            let ov = parse_overrides(&[bad.into()]).unwrap();
            assert!(
                ExperimentConfig::from_toml_str(MINIMAL, &ov).is_err(),
                "{bad}"
            );
        }
    }

    #[test]
    fn unshielded_algorithms_reject_shields() {
        let text = "algorithm = \"ippo\"\nshield = \"pure\"\n[env]\nkind = \"stag_hunt\"\n";
        assert!(ExperimentConfig::from_toml_str(text, &[]).is_err());
        let cfg = ExperimentConfig::from_toml_str(
            "algorithm = \"IPPO\"\n[env]\nkind = \"stag_hunt\"\n",
            &[],
        )
        .unwrap();
        assert_eq!(cfg.ppo.alpha, 0.0);
    }

    #[test]
    fn every_preset_parses() {
        for (name, _) in PRESETS {
            let cfg = ExperimentConfig::from_preset(name, &[]).unwrap();
            assert_eq!(&cfg.name, name);
        }
    }

    #[test]
    fn round_trip() {
        let cfg = ExperimentConfig::from_preset("msh_sippo_weak", &[]).unwrap();
        let again = ExperimentConfig::from_toml_str(&cfg.to_toml_string(), &[]).unwrap();
        assert_eq!(cfg, again);
    }
}
