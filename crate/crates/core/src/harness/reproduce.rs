//! Paper-table reproductions with pass/fail verdicts.

use std::fmt;

use super::{
    parse_overrides, run_experiment, summarize, AuditReport, ExperimentConfig, ExperimentResult,
    HarnessError, Phase,
};

/// One compared quantity.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub label: String,
    pub paper: String,
    pub obtained: f64,
    pub target: String,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub id: String,
    pub checks: Vec<Check>,
    /// Shielding audit over every shielded run in the report.
    pub audit: AuditReport,
    pub results: Vec<ExperimentResult>,
}

impl Report {
    fn new(id: &str) -> Self {
        Self {
            id: id.to_string(),
            checks: Vec::new(),
            audit: AuditReport::default(),
            results: Vec::new(),
        }
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    fn check(
        &mut self,
        label: impl Into<String>,
        paper: &str,
        obtained: f64,
        target: impl Into<String>,
        pass: bool,
    ) {
        self.checks.push(Check {
            label: label.into(),
            paper: paper.into(),
            obtained,
            target: target.into(),
            pass,
        });
    }

    fn absorb(&mut self, result: ExperimentResult) -> &ExperimentResult {
        if result.config.algorithm.shielded() {
            self.audit.merge(&result.audit());
        }
        self.results.push(result);
        self.results.last().expect("just pushed")
    }
}

impl fmt::Display for Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{}", self.id)?;
        writeln!(
            f,
            "{:<44} {:>14} {:>12} {:>20}  verdict",
            "quantity", "paper", "obtained", "target"
        )?;
        for c in &self.checks {
            let verdict = if c.pass { "ok" } else { "FAIL" };
            writeln!(
                f,
                "{:<44} {:>14} {:>12.4} {:>20}  {verdict}",
                c.label, c.paper, c.obtained, c.target
            )?;
        }
        writeln!(
            f,
            "audit: {} steps checked, {} violations",
            self.audit.checked, self.audit.violations
        )
    }
}

pub const TABLES: [&str; 6] = ["table1", "table2", "epgg2", "epgg5", "msh", "cartsafe"];

pub fn run(id: &str, jobs: usize) -> Result<Report, HarnessError> {
    match id {
        "table1" => table1(jobs),
        "table2" => table2(jobs),
        "epgg2" => epgg2(jobs),
        "epgg5" => epgg5(jobs),
        "msh" => msh(jobs),
        "cartsafe" => cartsafe(jobs),
        _ => Err(HarnessError::Config(format!(
            "unknown table `{id}`; expected one of {}",
            TABLES.join(", ")
        ))),
    }
}

fn experiment(
    preset: &str,
    overrides: &[String],
    jobs: usize,
) -> Result<ExperimentResult, HarnessError> {
    let cfg = ExperimentConfig::from_preset(preset, &parse_overrides(overrides)?)?;
    run_experiment(&cfg, jobs)
}

fn within(x: f64, target: f64, tol: f64) -> bool {
    (x - target).abs() <= tol
}

/// Stag-Hunt with pure and mixed shields against IPPO.
pub fn table1(jobs: usize) -> Result<Report, HarnessError> {
    let mut rep = Report::new("table1: Stag-Hunt, last 50 training episodes, 5 seeds");
    let r = rep_train(&mut rep, "stag_hunt_sippo_pure", &[], jobs)?;
    rep.check(
        "SIPPO(pure) return",
        "5.00±0.00",
        r.ret.mean,
        "5.00 ± 0.02",
        within(r.ret.mean, 5.0, 0.02),
    );
    rep.check(
        "SIPPO(pure) cooperation",
        "1.00±0.00",
        r.cooperation.mean,
        "1.00 ± 0.01",
        within(r.cooperation.mean, 1.0, 0.01),
    );
    let r = rep_train(&mut rep, "stag_hunt_ippo", &[], jobs)?;
    rep.check(
        "IPPO return",
        "1.99±0.03",
        r.ret.mean,
        "2.0 ± 0.15",
        within(r.ret.mean, 2.0, 0.15),
    );
    rep.check(
        "IPPO cooperation",
        "0.00",
        r.cooperation.mean,
        "< 0.05",
        r.cooperation.mean < 0.05,
    );
    let r = rep_train(&mut rep, "stag_hunt_sippo_mixed", &[], jobs)?;
    rep.check(
        "SIPPO(mixed) cooperation",
        "0.58",
        r.cooperation.mean,
        "0.58 ± 0.15",
        within(r.cooperation.mean, 0.58, 0.15),
    );
    rep.check(
        "SIPPO(mixed) return",
        "2.57±0.48",
        r.ret.mean,
        "[2.1, 3.1]",
        (2.1..=3.1).contains(&r.ret.mean),
    );
    Ok(rep)
}

fn rep_train(
    rep: &mut Report,
    preset: &str,
    overrides: &[String],
    jobs: usize,
) -> Result<super::SummaryRow, HarnessError> {
    let res = experiment(preset, overrides, jobs)?;
    let k = res.config.last_k;
    let res = rep.absorb(res);
    Ok(summarize(res.rows(), k)?.train)
}

/// Centipede with the continue shield, PPO and both DQN explorations.
pub fn table2(jobs: usize) -> Result<Report, HarnessError> {
    let mut rep = Report::new("table2: Centipede, last 50 training episodes, 5 seeds");
    let full = crate::envs::CentipedeGame::new(Default::default())?.full_cooperation_return();
    for (preset, label) in [
        ("centipede_sippo", "SIPPO"),
        ("centipede_siql_egreedy", "SIQL(e-greedy)"),
        ("centipede_siql_softmax", "SIQL(softmax)"),
    ] {
        let r = rep_train(&mut rep, preset, &[], jobs)?;
        rep.check(
            format!("{label} safety"),
            "1.00±0.00",
            r.safety.mean,
            "1.00 ± 0.005",
            within(r.safety.mean, 1.0, 0.005),
        );
        rep.check(
            format!("{label} R_ep"),
            "100.50±0.00",
            r.r_ep.mean,
            format!("{full:.2}"),
            within(r.r_ep.mean, full, 1e-9),
        );
    }
    let r = rep_train(&mut rep, "centipede_iql_egreedy", &[], jobs)?;
    rep.check(
        "IQL(e-greedy) R_ep",
        "fails early",
        r.r_ep.mean,
        format!("< {:.2}", full / 2.0),
        r.r_ep.mean < full / 2.0,
    );
    Ok(rep)
}

/// Two-player EPGG across multiplier means, plus IPPO's response to `f_t`.
pub fn epgg2(jobs: usize) -> Result<Report, HarnessError> {
    let mut rep = Report::new("epgg2: two-player EPGG, last 50 training episodes, 5 seeds");
    for mu in [0.5, 1.5, 2.5, 5.0] {
        let r = rep_train(&mut rep, "epgg_sippo", &[format!("env.mu={mu}")], jobs)?;
        let c = r.cooperation.mean;
        if mu < 1.0 {
            rep.check(
                format!("SIPPO(epgg) cooperation mu={mu}"),
                "~0",
                c,
                "< 0.1",
                c < 0.1,
            );
        } else {
            rep.check(
                format!("SIPPO(epgg) cooperation mu={mu}"),
                "~1",
                c,
                "> 0.9",
                c > 0.9,
            );
        }
    }
    let res = experiment("epgg_ippo", &["env.mu=2.5".into()], jobs)?;
    let res = rep.absorb(res);
    let (hi, lo) = conditional_cooperation(res);
    rep.check("IPPO cooperate | f_t > 2", "high", hi, "> 0.8", hi > 0.8);
    rep.check("IPPO cooperate | f_t < 1", "low", lo, "< 0.2", lo < 0.2);
    Ok(rep)
}

/// Cooperation frequency over the final `last_k` training episodes when the
/// multiplier is above 2 and below 1.
pub fn conditional_cooperation(res: &ExperimentResult) -> (f64, f64) {
    let k = res.config.last_k;
    let e = res.config.episodes;
    let (mut hi, mut lo) = ((0u64, 0u64), (0u64, 0u64));
    for r in res
        .rows()
        .filter(|r| r.phase == Phase::Train && r.episode + k >= e)
    {
        hi.0 += u64::from(r.coop_high_f.0);
        hi.1 += u64::from(r.coop_high_f.1);
        lo.0 += u64::from(r.coop_low_f.0);
        lo.1 += u64::from(r.coop_low_f.1);
    }
    (
        hi.0 as f64 / hi.1.max(1) as f64,
        lo.0 as f64 / lo.1.max(1) as f64,
    )
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            idx[i..=j].iter().for_each(|&k| r[k] = avg);
            i = j + 1;
        }
        r
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

/// Five-player EPGG with `k` always-cooperate shielded agents.
pub fn epgg5(jobs: usize) -> Result<Report, HarnessError> {
    let mut rep = Report::new("epgg5: five-player EPGG, mu = 2.5, shielded ratio k/5, 5 seeds");
    let ks: Vec<f64> = (0..=5).map(f64::from).collect();
    for algo in ["sippo", "scsppo", "sacsppo"] {
        let mut coop = Vec::new();
        for k in 0..=5usize {
            let agents: Vec<String> = (0..k).map(|i| i.to_string()).collect();
            let ov = vec![
                format!("algorithm=\"{algo}\""),
                format!("shielded_agents=[{}]", agents.join(",")),
            ];
            coop.push(
                rep_train(&mut rep, "epgg5_sippo", &ov, jobs)?
                    .cooperation
                    .mean,
            );
        }
        let monotone = coop.windows(2).all(|w| w[1] >= w[0]);
        let rho = spearman(&ks, &coop);
        let name = algo.to_uppercase();
        let shown = coop
            .iter()
            .map(|c| format!("{c:.2}"))
            .collect::<Vec<_>>()
            .join(" ");
        rep.check(
            format!("{name} non-decreasing in k [{shown}]"),
            "increasing",
            f64::from(u8::from(monotone)),
            "1",
            monotone,
        );
        rep.check(
            format!("{name} Spearman(k, cooperation)"),
            "increasing",
            rho,
            ">= 0.9",
            rho >= 0.9,
        );
    }
    Ok(rep)
}

/// Markov Stag-Hunt at reduced scale.
pub fn msh(jobs: usize) -> Result<Report, HarnessError> {
    let mut rep =
        Report::new("msh: Markov Stag-Hunt, 1500 episodes, 3 seeds, last 50 training episodes");
    let strong = rep_train(&mut rep, "msh_sippo_strong", &[], jobs)?;
    let weak = rep_train(&mut rep, "msh_sippo_weak", &[], jobs)?;
    let ippo = rep_train(&mut rep, "msh_ippo", &[], jobs)?;
    let (s, w, i) = (strong.stags.mean, weak.stags.mean, ippo.stags.mean);
    rep.check(
        "SIPPO(strong) stags / episode",
        "77.3",
        s,
        "> 5 x weak",
        s > w && s >= 5.0 * w,
    );
    rep.check(
        "SIPPO(weak) stags / episode",
        "12.8",
        w,
        "> 5 x IPPO",
        w > i && w >= 5.0 * i,
    );
    rep.check("IPPO stags / episode", "0.09", i, "lowest", i < w);
    rep.check(
        "SIPPO(strong) safety",
        "0.95±0.01",
        strong.safety.mean,
        ">= 0.90",
        strong.safety.mean >= 0.90,
    );
    Ok(rep)
}

/// CartSafe with and without the position shield.
pub fn cartsafe(jobs: usize) -> Result<Report, HarnessError> {
    let mut rep =
        Report::new("cartsafe: PPO on CartSafe, 500 episodes, 5 seeds, evaluation safety");
    let res = experiment("cartsafe_sippo", &[], jobs)?;
    let res = rep.absorb(res);
    let best = eval_curve(res)
        .into_iter()
        .filter(|&(e, _)| e <= 50)
        .map(|p| p.1)
        .fold(f64::NAN, f64::max);
    rep.check(
        "shielded PPO best eval safety by episode 50",
        "~1.0 in 10 episodes",
        best,
        ">= 0.98",
        best >= 0.98,
    );
    let res = experiment("cartsafe_ippo", &[], jobs)?;
    let k = res.config.last_k;
    let res = rep.absorb(res);
    let plateau = summarize(res.rows(), k)?
        .eval_window
        .map_or(f64::NAN, |r| r.safety.mean);
    rep.check(
        "unshielded PPO eval safety plateau",
        "~0.88",
        plateau,
        "< 0.92",
        plateau < 0.92,
    );
    Ok(rep)
}

/// Mean evaluation safety across seeds at each evaluation point, keyed by
/// training episodes completed.
pub fn eval_curve(res: &ExperimentResult) -> Vec<(usize, f64)> {
    let mut points: std::collections::BTreeMap<usize, (f64, usize)> = Default::default();
    for r in res.rows().filter(|r| r.phase == Phase::Eval) {
        let p = points.entry(r.episode + 1).or_insert((0.0, 0));
        p.0 += r.safety;
        p.1 += 1;
    }
    points
        .into_iter()
        .map(|(e, (s, n))| (e, s / n as f64))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spearman_examples() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]) - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
        // Ranks (1, 2.5, 2.5) against (1, 2, 3).
        let rho = spearman(&[1.0, 2.0, 3.0], &[0.0, 1.0, 1.0]);
        assert!((rho - 0.75f64.sqrt()).abs() < 1e-12, "{rho}");
    }
}
