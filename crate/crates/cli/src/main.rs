use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use shieldlab::engine::{self, PolicyDistribution, ShieldSource};
use shieldlab::harness::{self, reproduce, ExperimentConfig, HarnessError};
use shieldlab::shields::{self, OnlineMoments, ShieldName};

const EXIT_CONFIG: u8 = 2;
const EXIT_AUDIT: u8 = 3;
const EXIT_REPRODUCE: u8 = 4;

#[derive(Parser)]
#[command(
    name = "shieldlab",
    version,
    about = "Probabilistic logic shields for multi-agent RL"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate one experiment.
    Run {
        /// Bundled preset name.
        preset: Option<String>,
        /// Experiment TOML file.
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
        /// `key=value` settings applied over the config.
        #[arg(long = "override", num_args = 1.., value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Rerun a paper table and compare against it.
    Reproduce {
        /// One of table1, table2, epgg2, epgg5, msh, cartsafe.
        table: String,
        #[command(flatten)]
        common: Common,
    },
    /// Print the three shield queries for one binding.
    ShieldCheck {
        /// Shield file, or a catalog name.
        shield: String,
        /// Comma-separated action probabilities.
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
        pi: Vec<f64>,
        /// Comma-separated sensor probabilities.
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
        sensors: Vec<f64>,
    },
    /// Quick property checks of the engine and sensors.
    Selftest,
    /// List the bundled presets.
    Presets,
}

#[derive(clap::Args)]
struct Common {
    /// Output directory.
    #[arg(long, env = "SHIELDLAB_OUT", default_value = "runs")]
    out: PathBuf,
    /// Parallel seed workers; 0 uses every core.
    #[arg(long, default_value_t = 0)]
    jobs: usize,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run {
            preset,
            config,
            common,
            overrides,
        } => run(preset, config, common, &overrides),
        Command::Reproduce { table, common } => reproduce_table(&table, common),
        Command::ShieldCheck {
            shield,
            pi,
            sensors,
        } => shield_check(&shield, pi, &sensors),
        Command::Selftest => selftest(),
        Command::Presets => {
            harness::PRESETS
                .iter()
                .for_each(|(name, _)| println!("{name}"));
            ExitCode::SUCCESS
        }
    }
}

fn fail(code: u8, msg: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {msg}");
    ExitCode::from(code)
}

fn exit_for(e: &HarnessError) -> u8 {
    match e {
        HarnessError::Config(_) | HarnessError::Shield(_) => EXIT_CONFIG,
        _ => 1,
    }
}

fn load_config(
    preset: Option<String>,
    path: Option<PathBuf>,
    overrides: &[String],
) -> Result<ExperimentConfig, HarnessError> {
    let ov = harness::parse_overrides(overrides)?;
    match (preset, path) {
        (Some(_), Some(_)) => Err(HarnessError::Config(
            "give a preset or --config, not both".into(),
        )),
        (None, Some(p)) => {
            let text = std::fs::read_to_string(&p)
                .map_err(|e| HarnessError::Config(format!("{}: {e}", p.display())))?;
            ExperimentConfig::from_toml_str(&text, &ov)
        }
        (Some(name), None) => ExperimentConfig::from_preset(&name, &ov),
        (None, None) => ExperimentConfig::from_preset("stag_hunt_sippo_pure", &ov),
    }
}

fn run(
    preset: Option<String>,
    path: Option<PathBuf>,
    common: Common,
    overrides: &[String],
) -> ExitCode {
    let cfg = match load_config(preset, path, overrides) {
        Ok(c) => c,
        Err(e) => return fail(exit_for(&e), e),
    };
    let result = match harness::run_experiment(&cfg, common.jobs) {
        Ok(r) => r,
        Err(e) => return fail(exit_for(&e), e),
    };
    let dir = common.out.join(&cfg.name);
    let summary = match harness::write_run_artifacts(&dir, &result) {
        Ok(s) => s,
        Err(e) => return fail(1, e),
    };
    println!("{} ({})\n{summary}", cfg.name, cfg.algorithm);
    println!("artifacts in {}", dir.display());
    let audit = result.audit();
    if !audit.passed() {
        return fail(
            EXIT_AUDIT,
            format!(
                "{} of {} steps lowered safety under the shield",
                audit.violations, audit.checked
            ),
        );
    }
    ExitCode::SUCCESS
}

fn reproduce_table(table: &str, common: Common) -> ExitCode {
    let report = match reproduce::run(table, common.jobs) {
        Ok(r) => r,
        Err(e) => return fail(exit_for(&e), e),
    };
    print!("{report}");
    let dir = common.out.join(format!("reproduce_{table}"));
    for res in &report.results {
        let sub = dir.join(format!(
            "{}_{}",
            res.config.name,
            harness::config_hash(&res.config).get(..8).unwrap_or("")
        ));
        if let Err(e) = harness::write_run_artifacts(&sub, res) {
            return fail(1, e);
        }
    }
    if let Err(e) = std::fs::write(dir.join("report.txt"), report.to_string()) {
        return fail(1, e);
    }
    if !report.audit.passed() {
        return fail(EXIT_AUDIT, "shielding audit failed");
    }
    if !report.passed() {
        return fail(
            EXIT_REPRODUCE,
            format!("{table}: at least one check failed"),
        );
    }
    ExitCode::SUCCESS
}

fn shield_check(shield: &str, pi: Vec<f64>, sensors: &[f64]) -> ExitCode {
    let program = match shield.parse::<ShieldName>() {
        Ok(name) => name.program().clone(),
        Err(_) => {
            let text = match std::fs::read_to_string(shield) {
                Ok(t) => t,
                Err(e) => return fail(EXIT_CONFIG, format!("{shield}: {e}")),
            };
            match ShieldSource::infer(text).and_then(|s| engine::parse(&s)) {
                Ok(p) => p,
                Err(e) => return fail(EXIT_CONFIG, format!("{shield}: {e}")),
            }
        }
    };
    let pi = match PolicyDistribution::new(pi) {
        Ok(p) => p,
        Err(e) => return fail(EXIT_CONFIG, e),
    };
    let bound = match engine::bind(&program, pi, sensors) {
        Ok(b) => b,
        Err(e) => return fail(EXIT_CONFIG, e),
    };
    for (name, q) in program
        .action_disjunction()
        .iter()
        .zip(bound.action_safeties())
    {
        println!("P(safe | {name}) = {q:.6}");
    }
    println!("P_pi(safe) = {:.6}", bound.policy_safety());
    match bound.shielded_policy() {
        Ok(plus) => {
            let shown: Vec<String> = plus.probs().iter().map(|p| format!("{p:.6}")).collect();
            println!("pi+ = {}", shown.join(", "));
            ExitCode::SUCCESS
        }
        Err(e) => fail(1, e),
    }
}

fn selftest() -> ExitCode {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut ok = true;
    let mut report = |name: &str, pass: bool| {
        println!("{} {name}", if pass { "ok  " } else { "FAIL" });
        ok &= pass;
    };

    for name in ShieldName::ALL {
        let program = name.program();
        let mut pass = true;
        for _ in 0..200 {
            let w: Vec<f64> = (0..program.num_actions())
                .map(|_| rng.random::<f64>() + 1e-3)
                .collect();
            let s: f64 = w.iter().sum();
            let pi =
                PolicyDistribution::new(w.iter().map(|x| x / s).collect()).expect("normalised");
            let sensors: Vec<f64> = (0..program.num_sensors()).map(|_| rng.random()).collect();
            let b = engine::bind(program, pi, &sensors).expect("valid binding");
            let q = b.action_safeties();
            let base = b.policy_safety();
            pass &= q.iter().all(|v| (0.0..=1.0).contains(v));
            if let Ok(plus) = b.shielded_policy() {
                pass &= engine::policy_safety_from(&q, plus.probs()) >= base - 1e-9;
            }
        }
        report(
            &format!("{name}: queries in range, shielding never lowers safety"),
            pass,
        );
    }

    let mut m = OnlineMoments::default();
    let xs: Vec<f64> = (0..1000).map(|_| rng.random::<f64>() * 10.0).collect();
    xs.iter().for_each(|&x| m.push(x));
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (xs.len() - 1) as f64;
    report(
        "streaming moments match two-pass",
        (m.mean - mean).abs() <= 1e-9 * mean.abs()
            && (m.variance().unwrap_or(f64::NAN) - var).abs() <= 1e-9 * var,
    );
    report(
        "normal cdf at 0 is one half",
        (shields::normal_cdf(0.0) - 0.5).abs() < 1e-15,
    );

    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
