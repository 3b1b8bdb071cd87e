//! Acceptance run. Prints one PASS/FAIL line per criterion.
//!
//! `ACCEPTANCE_ONLY=1,8,11` restricts the run to the listed criteria.
//! Criteria listed in `KNOWN_FAILING` are reported as FAIL but do not fail
//! the process; any other failure does.

use std::collections::BTreeMap;
use std::process::ExitCode;
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use shieldlab::agents::{
    discounted_returns, plpg_gradients, plpg_loss, pltd_gradients, pltd_loss, DqnConfig, PpoBatch,
    PpoConfig, TdTarget, TransitionRecord,
};
use shieldlab::engine::{self, GroundProgram, PolicyDistribution, ShieldError, ShieldSource};
use shieldlab::harness::reproduce::{self, Report};
use shieldlab::harness::AuditReport;
use shieldlab::nn::{Activation, Graph, Mlp, MlpSpec, Var};
use shieldlab::shields::{OnlineMoments, ShieldName};

/// Criteria that fail on this implementation for reasons recorded in the
/// project notes. They still print FAIL.
const KNOWN_FAILING: &[u32] = &[3, 5, 12];

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

fn selected() -> Option<Vec<u32>> {
    let raw = std::env::var("ACCEPTANCE_ONLY").ok()?;
    Some(
        raw.split(',')
            .filter_map(|s| s.trim().parse().ok())
            .collect(),
    )
}

fn main() -> ExitCode {
    let only = selected();
    let wanted = |id: u32| only.as_ref().is_none_or(|v| v.contains(&id));
    let mut results: BTreeMap<u32, Outcome> = BTreeMap::new();
    let mut run = |id: u32, name: &str, f: &mut dyn FnMut() -> Outcome| {
        if !wanted(id) {
            return;
        }
        let start = Instant::now();
        let out = f();
        println!(
            "[{id:>2}] {} {name}: {} ({:.1}s)",
            if out.pass { "PASS" } else { "FAIL" },
            out.detail,
            start.elapsed().as_secs_f64()
        );
        results.insert(id, out);
    };

    run(
        1,
        "shield engine matches world enumeration",
        &mut oracle_equivalence,
    );
    run(8, "PLTD reduction and gradients", &mut gradient_checks);
    run(
        9,
        "Boolean sensors give Boolean action safety",
        &mut boolean_sensors,
    );
    run(
        10,
        "deterministic shields give one-hot policies",
        &mut deterministic_shields,
    );
    run(11, "streaming moments match two-pass", &mut welford);

    let mut audit = AuditReport::default();
    let mut audited = 0;
    for (id, table, name) in [
        (3, "table1", "Stag-Hunt"),
        (4, "table2", "Centipede"),
        (5, "epgg2", "two-player EPGG"),
        (6, "epgg5", "five-player EPGG shielded ratio"),
        (7, "msh", "Markov Stag-Hunt"),
        (12, "cartsafe", "CartSafe"),
    ] {
        run(id, name, &mut || match reproduce::run(table, 0) {
            Ok(report) => {
                print!("{report}");
                audit.merge(&report.audit);
                audited += 1;
                table_outcome(&report)
            }
            Err(e) => Outcome::new(false, format!("run failed: {e}")),
        });
    }
    if audited > 0 {
        run(2, "shielding never lowers safety", &mut || {
            Outcome::new(
                audit.passed() && audit.checked > 0,
                format!(
                    "{} steps over {audited} tables, {} violations, worst gap {:.3e}",
                    audit.checked, audit.violations, audit.worst_gap
                ),
            )
        });
    }

    println!("\nsummary");
    let mut unexpected = 0;
    for (id, out) in &results {
        let known = KNOWN_FAILING.contains(id);
        let tag = match (out.pass, known) {
            (true, _) => "PASS",
            (false, true) => "FAIL (known)",
            (false, false) => {
                unexpected += 1;
                "FAIL"
            }
        };
        println!("criterion {id:>2}: {tag}");
    }
    if unexpected > 0 {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}

fn table_outcome(report: &Report) -> Outcome {
    let failed: Vec<&str> = report
        .checks
        .iter()
        .filter(|c| !c.pass)
        .map(|c| c.label.as_str())
        .collect();
    if failed.is_empty() {
        Outcome::new(true, format!("{} checks", report.checks.len()))
    } else {
        Outcome::new(false, format!("failed: {}", failed.join("; ")))
    }
}

fn random_policy(rng: &mut impl Rng, n: usize) -> PolicyDistribution {
    let w: Vec<f64> = (0..n).map(|_| rng.random::<f64>() + 1e-6).collect();
    let s: f64 = w.iter().sum();
    let mut p: Vec<f64> = w.iter().map(|x| x / s).collect();
    let drift: f64 = 1.0 - p.iter().sum::<f64>();
    p[0] += drift;
    PolicyDistribution::new(p).expect("valid policy")
}

/// Each catalog program restated as a Boolean function of the action index
/// and the sensor world bitmask.
fn oracle_safe(name: ShieldName, a: usize, world: usize) -> bool {
    let bit = |i: usize| (world >> i) & 1 == 1;
    match name {
        ShieldName::Pure | ShieldName::Continue | ShieldName::CooperateAlways => a == 0,
        ShieldName::Mixed => !((a == 0 && bit(0)) || (a == 1 && bit(1))),
        ShieldName::Epgg => !((a != 0 && bit(0) && bit(1)) || (a != 1 && !bit(0) && bit(1))),
        ShieldName::MshStrong => {
            let towards = a < 4 && bit(a);
            let (near_self, near_other) = (bit(4), bit(5));
            let unsafe_next = (!towards && !near_self)
                || (a != 4 && near_self && !near_other)
                || (!towards && near_self && near_other);
            !unsafe_next
        }
        ShieldName::MshWeak => {
            let towards = a < 4 && bit(a);
            !(!towards && bit(4) && bit(5)) || !bit(4)
        }
        ShieldName::Cartsafe => !(bit(2 + a) && bit(0) && bit(1)),
    }
}

struct OracleAnswer {
    q: Vec<f64>,
    safety: f64,
    plus: Result<Vec<f64>, ()>,
}

fn oracle(name: ShieldName, pi: &[f64], sensors: &[f64]) -> OracleAnswer {
    let q: Vec<f64> = (0..pi.len())
        .map(|a| {
            let mut total = 0.0;
            for world in 0..(1usize << sensors.len()) {
                if oracle_safe(name, a, world) {
                    let mut w = 1.0;
                    for (i, &p) in sensors.iter().enumerate() {
                        w *= if (world >> i) & 1 == 1 { p } else { 1.0 - p };
                    }
                    total += w;
                }
            }
            total
        })
        .collect();
    let mut safety = 0.0;
    for (qa, pa) in q.iter().zip(pi) {
        safety += qa * pa;
    }
    let plus = if safety < engine::ZERO_SAFETY_EPS {
        Err(())
    } else if q.windows(2).all(|w| w[0] == w[1]) {
        Ok(pi.to_vec())
    } else {
        Ok(q.iter().zip(pi).map(|(qa, pa)| qa * pa / safety).collect())
    };
    OracleAnswer { q, safety, plus }
}

fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

fn oracle_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let start = Instant::now();
    let mut mismatches = Vec::new();
    let mut bindings = 0;
    for name in ShieldName::ALL {
        let program = name.program();
        for i in 0..1000 {
            let pi = random_policy(&mut rng, program.num_actions());
            let sensors: Vec<f64> = (0..program.num_sensors())
                .map(|_| match rng.random_range(0..10) {
                    0 => 0.0,
                    1 => 1.0,
                    _ => rng.random(),
                })
                .collect();
            let want = oracle(name, pi.probs(), &sensors);
            let b = engine::bind(program, pi, &sensors).expect("valid binding");
            let plus = b.shielded_policy().map(|p| p.into_inner()).map_err(|_| ());
            let same = bits(&b.action_safeties()) == bits(&want.q)
                && b.policy_safety().to_bits() == want.safety.to_bits()
                && plus.as_deref().map(bits) == want.plus.as_deref().map(bits);
            if !same {
                mismatches.push(format!("{name}#{i}"));
            }
            bindings += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Outcome::new(
        mismatches.is_empty() && secs < 10.0,
        format!(
            "{bindings} bindings over {} shields, {} mismatches{}, {secs:.2}s",
            ShieldName::ALL.len(),
            mismatches.len(),
            mismatches
                .first()
                .map(|m| format!(" (first {m})"))
                .unwrap_or_default()
        ),
    )
}

fn boolean_sensors() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut bad = 0;
    let total = 10_000;
    for i in 0..total {
        let name = ShieldName::ALL[i % ShieldName::ALL.len()];
        let program = name.program();
        let pi = random_policy(&mut rng, program.num_actions());
        let sensors: Vec<f64> = (0..program.num_sensors())
            .map(|_| if rng.random::<bool>() { 1.0 } else { 0.0 })
            .collect();
        let b = engine::bind(program, pi, &sensors).expect("valid binding");
        if !b.action_safeties().iter().all(|&q| q == 0.0 || q == 1.0) {
            bad += 1;
        }
    }
    Outcome::new(
        bad == 0,
        format!("{total} bindings, {bad} with fractional safety"),
    )
}

fn deterministic_program(n: usize) -> Result<GroundProgram, ShieldError> {
    let mut text = String::new();
    for i in 0..n {
        let sep = if i + 1 == n { "." } else { ";" };
        text.push_str(&format!("action({i})::action(a{i}){sep}\n"));
    }
    text.push_str("unsafe_next :- action(X), X\\=a0.\nsafe_next :- \\+unsafe_next.\n");
    engine::parse(&ShieldSource::infer(text)?)
}

fn deterministic_shields() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut bad = 0;
    let mut total = 0;
    for n in 2..=6 {
        let program = match deterministic_program(n) {
            Ok(p) => p,
            Err(e) => return Outcome::new(false, format!("schema with {n} actions: {e}")),
        };
        for _ in 0..1000 {
            let pi = random_policy(&mut rng, n);
            let plus = engine::bind(&program, pi, &[]).and_then(|b| b.shielded_policy());
            let one_hot = PolicyDistribution::one_hot(n, 0);
            if plus
                .map(|p| bits(p.probs()) != bits(one_hot.probs()))
                .unwrap_or(true)
            {
                bad += 1;
            }
            total += 1;
        }
    }
    Outcome::new(
        bad == 0,
        format!("{total} policies over 2..6 actions, {bad} not one-hot"),
    )
}

fn two_pass(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
}

fn welford() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let normal = |rng: &mut ChaCha8Rng| {
        let (u, v): (f64, f64) = (rng.random::<f64>().max(1e-300), rng.random());
        (-2.0 * u.ln()).sqrt() * (std::f64::consts::TAU * v).cos()
    };
    let streams: Vec<(&str, Vec<f64>)> = vec![
        (
            "uniform",
            (0..10_000).map(|_| rng.random::<f64>()).collect(),
        ),
        (
            "normal(2.5, 1)",
            (0..10_000).map(|_| 2.5 + normal(&mut rng)).collect(),
        ),
        (
            "offset 1e6",
            (0..10_000).map(|_| 1e6 + normal(&mut rng)).collect(),
        ),
        (
            "exponential",
            (0..10_000)
                .map(|_| -(1.0 - rng.random::<f64>()).ln())
                .collect(),
        ),
    ];
    let mut worst: f64 = 0.0;
    for (_, xs) in &streams {
        let (mean, var) = two_pass(xs);
        let mut m = OnlineMoments::default();
        xs.iter().for_each(|&x| m.push(x));
        let mut shuffled = xs.clone();
        shuffled.shuffle(&mut rng);
        let mut p = OnlineMoments::default();
        shuffled.iter().for_each(|&x| p.push(x));
        worst = worst
            .max(rel(m.mean, mean))
            .max(rel(m.variance().unwrap_or(f64::NAN), var))
            .max(rel(p.mean, m.mean));
    }
    Outcome::new(
        worst <= 1e-9,
        format!(
            "{} streams of 10000, worst relative error {worst:.2e}",
            streams.len()
        ),
    )
}

fn random_matrix(rng: &mut impl Rng, r: usize, c: usize, lo: f64, hi: f64) -> Array2<f64> {
    Array2::from_shape_fn((r, c), |_| rng.random_range(lo..hi))
}

/// Largest relative error between backward and central differences of
/// `sum(w * f(inputs))`.
fn fd_check(inputs: &[Array2<f64>], f: &dyn Fn(&mut Graph, &[Var]) -> Var) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let forward =
        |xs: &[Array2<f64>], w: Option<&Array2<f64>>| -> (Graph, Var, Vec<Var>, Array2<f64>) {
            let mut g = Graph::new();
            let vars: Vec<Var> = xs.iter().map(|x| g.param(x.clone())).collect();
            let out = f(&mut g, &vars);
            let shape = g.shape(out);
            let w = w.cloned().unwrap_or_else(|| Array2::ones(shape));
            let wv = g.constant(w.clone());
            let prod = g.mul(out, wv).expect("same shape");
            let loss = g.sum(prod);
            (g, loss, vars, w)
        };
    let shape = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|x| g.param(x.clone())).collect();
        let out = f(&mut g, &vars);
        g.shape(out)
    };
    let w = random_matrix(&mut rng, shape.0, shape.1, -1.0, 1.0);
    let (g, loss, vars, _) = forward(inputs, Some(&w));
    let grads = g.backward(loss).expect("scalar loss");
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.wrt(*v);
        for idx in 0..inputs[k].len() {
            let (r, c) = (idx / inputs[k].ncols(), idx % inputs[k].ncols());
            let mut plus = inputs.to_vec();
            plus[k][[r, c]] += h;
            let mut minus = inputs.to_vec();
            minus[k][[r, c]] -= h;
            let (gp, lp, _, _) = forward(&plus, Some(&w));
            let (gm, lm, _, _) = forward(&minus, Some(&w));
            let numeric = (gp.value(lp)[[0, 0]] - gm.value(lm)[[0, 0]]) / (2.0 * h);
            let a = analytic[[r, c]];
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3));
        }
    }
    worst
}

fn tape_checks() -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let a = random_matrix(&mut rng, 3, 4, -1.0, 1.0);
    let b = random_matrix(&mut rng, 4, 2, -1.0, 1.0);
    let c = random_matrix(&mut rng, 3, 4, -1.0, 1.0);
    let pos = random_matrix(&mut rng, 3, 4, 0.5, 2.0);
    let row = random_matrix(&mut rng, 1, 4, -1.0, 1.0);
    let col = random_matrix(&mut rng, 3, 1, -1.0, 1.0);
    // Keep kinked ops away from their kinks.
    let away = a.mapv(|x| if x.abs() < 0.1 { x + 0.3 } else { x });
    let shifted = &away + 0.25;

    type Build = Box<dyn Fn(&mut Graph, &[Var]) -> Var>;
    let cases: Vec<(&'static str, Vec<Array2<f64>>, Build)> = vec![
        (
            "matmul",
            vec![a.clone(), b.clone()],
            Box::new(|g, v| g.matmul(v[0], v[1]).unwrap()),
        ),
        (
            "add (row broadcast)",
            vec![a.clone(), row.clone()],
            Box::new(|g, v| g.add(v[0], v[1]).unwrap()),
        ),
        (
            "sub (column broadcast)",
            vec![a.clone(), col.clone()],
            Box::new(|g, v| g.sub(v[0], v[1]).unwrap()),
        ),
        (
            "mul",
            vec![a.clone(), c.clone()],
            Box::new(|g, v| g.mul(v[0], v[1]).unwrap()),
        ),
        (
            "div",
            vec![a.clone(), pos.clone()],
            Box::new(|g, v| g.div(v[0], v[1]).unwrap()),
        ),
        (
            "minimum",
            vec![away.clone(), shifted.mapv(|x| -x)],
            Box::new(|g, v| g.minimum(v[0], v[1]).unwrap()),
        ),
        ("relu", vec![away.clone()], Box::new(|g, v| g.relu(v[0]))),
        ("tanh", vec![a.clone()], Box::new(|g, v| g.tanh(v[0]))),
        ("exp", vec![a.clone()], Box::new(|g, v| g.exp(v[0]))),
        ("log", vec![pos.clone()], Box::new(|g, v| g.log(v[0]))),
        ("square", vec![a.clone()], Box::new(|g, v| g.square(v[0]))),
        ("neg", vec![a.clone()], Box::new(|g, v| g.neg(v[0]))),
        (
            "scale",
            vec![a.clone()],
            Box::new(|g, v| g.scale(v[0], -1.7)),
        ),
        (
            "clamp",
            vec![away.clone()],
            Box::new(|g, v| g.clamp(v[0], -0.05, 0.5)),
        ),
        ("softmax", vec![a.clone()], Box::new(|g, v| g.softmax(v[0]))),
        (
            "log_softmax",
            vec![a.clone()],
            Box::new(|g, v| g.log_softmax(v[0])),
        ),
        (
            "sum_rows",
            vec![a.clone()],
            Box::new(|g, v| g.sum_rows(v[0])),
        ),
        ("sum", vec![a.clone()], Box::new(|g, v| g.sum(v[0]))),
        ("mean", vec![a.clone()], Box::new(|g, v| g.mean(v[0]))),
        (
            "gather",
            vec![a.clone()],
            Box::new(|g, v| g.gather(v[0], &[3, 0, 3]).unwrap()),
        ),
        (
            "select_rows",
            vec![a.clone()],
            Box::new(|g, v| g.select_rows(v[0], &[2, 0, 2, 1]).unwrap()),
        ),
    ];
    cases
        .into_iter()
        .map(|(name, xs, f)| (name, fd_check(&xs, &*f)))
        .collect()
}

fn random_records(
    rng: &mut impl Rng,
    n: usize,
    obs: usize,
    actions: usize,
    shielded: bool,
) -> Vec<TransitionRecord> {
    (0..n)
        .map(|i| {
            let q: Vec<f64> = (0..actions)
                .map(|_| {
                    if shielded {
                        rng.random_range(0.05..1.0)
                    } else {
                        1.0
                    }
                })
                .collect();
            TransitionRecord {
                obs: (0..obs).map(|_| rng.random_range(-1.0..1.0)).collect(),
                action: rng.random_range(0..actions),
                reward: rng.random_range(-2.0..2.0),
                next_obs: (0..obs).map(|_| rng.random_range(-1.0..1.0)).collect(),
                next_action: Some(rng.random_range(0..actions)),
                done: i % 5 == 4,
                policy_safety: 1.0,
                action_safety: q,
                log_prob: 0.0,
                fallback: false,
            }
        })
        .collect()
}

fn stack(rows: &[&[f64]]) -> Array2<f64> {
    Array2::from_shape_fn((rows.len(), rows[0].len()), |(r, c)| rows[r][c])
}

/// Plain TD loss and gradients with no shield anywhere.
fn vanilla_td(
    net: &Mlp,
    batch: &[&TransitionRecord],
    gamma: f64,
    target: TdTarget,
) -> (f64, Vec<Array2<f64>>) {
    let next: Vec<&[f64]> = batch.iter().map(|r| r.next_obs.as_slice()).collect();
    let q_next = net.predict(&stack(&next)).unwrap();
    let y: Vec<f64> = batch
        .iter()
        .enumerate()
        .map(|(i, r)| {
            if r.done {
                return r.reward;
            }
            let boot = match target {
                TdTarget::OffPolicy => q_next
                    .row(i)
                    .iter()
                    .copied()
                    .fold(f64::NEG_INFINITY, f64::max),
                TdTarget::OnPolicy => q_next[[i, r.next_action.unwrap()]],
            };
            r.reward + gamma * boot
        })
        .collect();
    let obs: Vec<&[f64]> = batch.iter().map(|r| r.obs.as_slice()).collect();
    let q = net.predict(&stack(&obs)).unwrap();
    let sq = Array2::from_shape_fn((batch.len(), 1), |(i, _)| {
        (y[i] - q[[i, batch[i].action]]).powi(2)
    });
    let loss = sq.sum() / sq.len() as f64;

    let mut g = Graph::new();
    let x = g.constant(stack(&obs));
    let (qv, params) = net.forward(&mut g, x).unwrap();
    let actions: Vec<usize> = batch.iter().map(|r| r.action).collect();
    let qa = g.gather(qv, &actions).unwrap();
    let yv = g.constant(Array2::from_shape_vec((y.len(), 1), y).unwrap());
    let d = g.sub(yv, qa).unwrap();
    let s = g.square(d);
    let m = g.mean(s);
    let grads = g.backward(m).unwrap();
    (loss, params.iter().map(|&p| grads.wrt(p)).collect())
}

fn pltd_reduction() -> Result<usize, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(80);
    let mut compared = 0;
    for trial in 0..20 {
        let obs = 3 + trial % 4;
        let actions = 2 + trial % 4;
        let net = Mlp::new(MlpSpec::standard(obs, actions, Activation::Relu), &mut rng);
        let records = random_records(&mut rng, 32, obs, actions, trial % 2 == 0);
        let batch: Vec<&TransitionRecord> = records.iter().collect();
        for target in [TdTarget::OffPolicy, TdTarget::OnPolicy] {
            let cfg = DqnConfig {
                alpha: 0.0,
                target,
                ..DqnConfig::default()
            };
            let (want, want_grads) = vanilla_td(&net, &batch, cfg.gamma, target);
            let got = pltd_loss(&net, &batch, &cfg).map_err(|e| e.to_string())?;
            let (_, got_grads) = pltd_gradients(&net, &batch, &cfg).map_err(|e| e.to_string())?;
            if got.total.to_bits() != want.to_bits() || got.td.to_bits() != want.to_bits() {
                return Err(format!("trial {trial}: loss {} vs {want}", got.total));
            }
            if got_grads != want_grads {
                return Err(format!("trial {trial}: gradients differ"));
            }
            compared += 1;
        }
    }
    Ok(compared)
}

fn plpg_toy_check() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(81);
    let spec = |out| MlpSpec {
        input: 3,
        hidden: vec![6],
        output: out,
        activation: Activation::Tanh,
    };
    let actor = Mlp::new(spec(3), &mut rng);
    let critic = Mlp::new(spec(1), &mut rng);
    let n = 8;
    let obs: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let safety: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..3).map(|_| rng.random_range(0.1..1.0)).collect())
        .collect();
    let actions: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
    let rewards: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..2.0)).collect();
    let returns = discounted_returns(&rewards, 0.9);

    let rows: Vec<&[f64]> = obs.iter().map(Vec::as_slice).collect();
    let logits = actor.predict(&stack(&rows)).unwrap();
    let v = critic.predict(&stack(&rows)).unwrap();
    let old_log_probs: Vec<f64> = (0..n)
        .map(|i| {
            let w: Vec<f64> = (0..3)
                .map(|j| logits[[i, j]].exp() * safety[i][j])
                .collect();
            let s: f64 = w.iter().sum();
            (w[actions[i]] / s).ln() + rng.random_range(-0.03..0.03)
        })
        .collect();
    let batch = PpoBatch {
        obs,
        actions,
        old_log_probs,
        advantages: returns
            .iter()
            .enumerate()
            .map(|(i, g)| g - v[[i, 0]])
            .collect(),
        returns,
        safety,
    };
    let cfg = PpoConfig {
        clip: 0.2,
        alpha: 0.7,
        ..PpoConfig::default()
    };
    let (_, actor_grads, critic_grads) = plpg_gradients(&actor, &critic, &batch, &cfg).unwrap();

    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for (which, net, grads) in [(0, &actor, &actor_grads), (1, &critic, &critic_grads)] {
        for (k, p) in net.params().iter().enumerate() {
            for idx in 0..p.len() {
                let (r, c) = (idx / p.ncols(), idx % p.ncols());
                let eval = |delta: f64| {
                    let mut ps = net.params().to_vec();
                    ps[k][[r, c]] += delta;
                    let moved = Mlp::from_params(net.spec().clone(), ps).unwrap();
                    let (a, cr) = if which == 0 {
                        (&moved, &critic)
                    } else {
                        (&actor, &moved)
                    };
                    plpg_loss(a, cr, &batch, &cfg).unwrap().total
                };
                let numeric = (eval(h) - eval(-h)) / (2.0 * h);
                let a = grads[k][[r, c]];
                worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3));
            }
        }
    }
    worst
}

fn gradient_checks() -> Outcome {
    let reduction = pltd_reduction();
    let tape = tape_checks();
    let (worst_name, worst_tape) = tape.iter().fold(("", 0.0f64), |(n, w), &(name, e)| {
        if e > w || e.is_nan() {
            (name, e)
        } else {
            (n, w)
        }
    });
    let plpg = plpg_toy_check();
    let pass = reduction.is_ok() && worst_tape < 1e-4 && plpg < 1e-3;
    let reduction_text = match &reduction {
        Ok(k) => format!("alpha=0 bit-identical on {k} batches"),
        Err(e) => format!("alpha=0 mismatch: {e}"),
    };
    Outcome::new(
        pass,
        format!(
            "{reduction_text}; {} tape checks, worst {worst_tape:.1e} ({worst_name}); plpg worst {plpg:.1e}",
            tape.len()
        ),
    )
}
