use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use super::{ExperimentConfig, ExperimentResult, HarnessError, MetricsRow, Phase, CONFIG_VERSION};

/// Column order of the metrics CSV.
pub const CSV_HEADER: [&str; 11] = [
    "seed",
    "episode",
    "phase",
    "agent",
    "return",
    "R_ep",
    "cooperation",
    "safety",
    "plants",
    "stags",
    "penalties",
];

/// Sample mean and standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MetricSummary {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl MetricSummary {
    pub fn of(values: impl IntoIterator<Item = f64>) -> Self {
        let v: Vec<f64> = values.into_iter().collect();
        let n = v.len();
        if n == 0 {
            return Self {
                mean: f64::NAN,
                std: f64::NAN,
                n,
            };
        }
        let mean = v.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Self { mean, std, n }
    }
}

impl fmt::Display for MetricSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.2}±{:.2}", self.mean, self.std)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub label: String,
    pub ret: MetricSummary,
    pub r_ep: MetricSummary,
    pub cooperation: MetricSummary,
    pub safety: MetricSummary,
    pub plants: MetricSummary,
    pub stags: MetricSummary,
    pub penalties: MetricSummary,
}

impl SummaryRow {
    fn of(label: &str, rows: &[&MetricsRow]) -> Self {
        let m = |f: fn(&MetricsRow) -> f64| MetricSummary::of(rows.iter().map(|r| f(r)));
        Self {
            label: label.to_string(),
            ret: m(|r| r.ret),
            r_ep: m(|r| r.r_ep),
            cooperation: m(|r| r.cooperation),
            safety: m(|r| r.safety),
            plants: m(|r| f64::from(r.plants)),
            stags: m(|r| f64::from(r.stags)),
            penalties: m(|r| f64::from(r.penalties)),
        }
    }
}

/// Pooled statistics over seeds, agents and episodes.
#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    /// Training episodes per seed actually used.
    pub k_used: usize,
    /// Fewer than the requested `k` episodes were available.
    pub truncated: bool,
    /// Training rows in the window.
    pub train: SummaryRow,
    /// Evaluation rows inside the window.
    pub eval_window: Option<SummaryRow>,
    /// Every evaluation row.
    pub eval_all: Option<SummaryRow>,
}

/// Mean ± sample std of every metric over each seed's final `last_k`
/// training episodes, plus evaluation rows.
pub fn summarize<'a>(
    rows: impl IntoIterator<Item = &'a MetricsRow>,
    last_k: usize,
) -> Result<Summary, HarnessError> {
    let rows: Vec<&MetricsRow> = rows.into_iter().collect();
    let mut episodes: HashMap<u64, usize> = HashMap::new();
    for r in rows.iter().filter(|r| r.phase == Phase::Train) {
        let e = episodes.entry(r.seed).or_insert(0);
        *e = (*e).max(r.episode + 1);
    }
    if episodes.is_empty() {
        return Err(HarnessError::EmptyMetrics);
    }
    let fewest = episodes.values().copied().min().unwrap_or(0);
    let k_used = last_k.min(fewest);
    let in_window =
        |r: &MetricsRow| r.episode + k_used >= episodes.get(&r.seed).copied().unwrap_or(0);

    let train: Vec<&MetricsRow> = rows
        .iter()
        .copied()
        .filter(|r| r.phase == Phase::Train && in_window(r))
        .collect();
    let eval_all: Vec<&MetricsRow> = rows
        .iter()
        .copied()
        .filter(|r| r.phase == Phase::Eval)
        .collect();
    let eval_window: Vec<&MetricsRow> = eval_all.iter().copied().filter(|r| in_window(r)).collect();
    let opt = |label: &str, v: &[&MetricsRow]| (!v.is_empty()).then(|| SummaryRow::of(label, v));
    Ok(Summary {
        k_used,
        truncated: k_used < last_k,
        train: SummaryRow::of("train", &train),
        eval_window: opt("eval (window)", &eval_window),
        eval_all: opt("eval (all)", &eval_all),
    })
}

impl fmt::Display for Summary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "last {} training episodes", self.k_used)?;
        if self.truncated {
            write!(f, " (fewer than requested)")?;
        }
        writeln!(f)?;
        writeln!(
            f,
            "{:<14} {:>13} {:>15} {:>13} {:>13} {:>13} {:>13} {:>13}",
            "rows", "return", "R_ep", "cooperation", "safety", "plants", "stags", "penalties"
        )?;
        for row in [
            Some(&self.train),
            self.eval_window.as_ref(),
            self.eval_all.as_ref(),
        ]
        .into_iter()
        .flatten()
        {
            writeln!(
                f,
                "{:<14} {:>13} {:>15} {:>13} {:>13} {:>13} {:>13} {:>13}",
                row.label,
                row.ret.to_string(),
                row.r_ep.to_string(),
                row.cooperation.to_string(),
                row.safety.to_string(),
                row.plants.to_string(),
                row.stags.to_string(),
                row.penalties.to_string()
            )?;
        }
        Ok(())
    }
}

/// SHA-256 of the resolved config as TOML, in hex.
pub fn config_hash(cfg: &ExperimentConfig) -> String {
    let digest = Sha256::digest(cfg.to_toml_string().as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Serialize)]
struct CsvRecord<'a> {
    seed: u64,
    episode: usize,
    phase: &'a str,
    agent: usize,
    #[serde(rename = "return")]
    ret: f64,
    #[serde(rename = "R_ep")]
    r_ep: f64,
    cooperation: f64,
    safety: f64,
    plants: u32,
    stags: u32,
    penalties: u32,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn write_csv<'a>(
    path: &Path,
    rows: impl IntoIterator<Item = &'a MetricsRow>,
) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| io_err(path)(e.into()))?;
    for r in rows {
        w.serialize(CsvRecord {
            seed: r.seed,
            episode: r.episode,
            phase: r.phase.as_str(),
            agent: r.agent,
            ret: r.ret,
            r_ep: r.r_ep,
            cooperation: r.cooperation,
            safety: r.safety,
            plants: r.plants,
            stags: r.stags,
            penalties: r.penalties,
        })
        .map_err(|e| io_err(path)(e.into()))?;
    }
    w.flush().map_err(io_err(path))
}

#[derive(Serialize)]
struct Manifest<'a> {
    name: &'a str,
    algorithm: &'a str,
    config_hash: String,
    config_version: u32,
    code_version: &'a str,
    seeds: &'a [u64],
    audit_checked: u64,
    audit_violations: u64,
    zero_safety_steps: u64,
}

pub fn write_manifest(path: &Path, result: &ExperimentResult) -> Result<(), HarnessError> {
    let audit = result.audit();
    let m = Manifest {
        name: &result.config.name,
        algorithm: result.config.algorithm.as_str(),
        config_hash: config_hash(&result.config),
        config_version: CONFIG_VERSION,
        code_version: env!("CARGO_PKG_VERSION"),
        seeds: &result.config.seeds.0,
        audit_checked: audit.checked,
        audit_violations: audit.violations,
        zero_safety_steps: audit.zero_safety_steps,
    };
    fs::write(path, toml::to_string(&m).expect("manifest serializes")).map_err(io_err(path))
}

/// Writes `metrics.csv`, `summary.txt`, `config.toml` and `manifest.toml`
/// under `dir`.
pub fn write_run_artifacts(dir: &Path, result: &ExperimentResult) -> Result<Summary, HarnessError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    write_csv(&dir.join("metrics.csv"), result.rows())?;
    let summary = summarize(result.rows(), result.config.last_k)?;
    let text = format!(
        "{} ({})\n{summary}",
        result.config.name, result.config.algorithm
    );
    let p = dir.join("summary.txt");
    fs::write(&p, text).map_err(io_err(&p))?;
    let p = dir.join("config.toml");
    fs::write(&p, result.config.to_toml_string()).map_err(io_err(&p))?;
    write_manifest(&dir.join("manifest.toml"), result)?;
    Ok(summary)
}
