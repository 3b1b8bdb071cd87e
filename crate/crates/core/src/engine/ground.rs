//! Grounding and stratified evaluation.

use std::collections::{BTreeSet, HashMap};

use super::parser::{Atom, Clause, Literal, Term};
use super::{ShieldError, ShieldSource};

/// Possible-world tables are materialized, so the sensor count is bounded.
pub const MAX_SENSORS: usize = 20;

/// Index into [`GroundProgram::atoms`].
pub type AtomId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AtomKind {
    /// `action(c)` for the action with this index.
    Action(usize),
    /// `sensor(c)` for the sensor with this index.
    Sensor(usize),
    Derived,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroundAtom {
    pub key: String,
    pub predicate: String,
    pub kind: AtomKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SignedLiteral {
    pub positive: bool,
    pub atom: AtomId,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroundRule {
    pub head: AtomId,
    pub body: Vec<SignedLiteral>,
}

/// A grounded, stratified shield program.
///
/// The truth of `safe_next` in every (action, sensor world) pair does not
/// depend on probabilities, so it is computed once here; queries only
/// weight these tables.
#[derive(Debug, Clone)]
pub struct GroundProgram {
    actions: Vec<String>,
    sensors: Vec<String>,
    atoms: Vec<GroundAtom>,
    rules: Vec<GroundRule>,
    strata: Vec<Vec<String>>,
    rule_strata: Vec<Vec<usize>>,
    safe_atom: AtomId,
    safe_table: Vec<bool>,
}

impl GroundProgram {
    pub fn action_disjunction(&self) -> &[String] {
        &self.actions
    }

    pub fn sensor_facts(&self) -> &[String] {
        &self.sensors
    }

    pub fn num_actions(&self) -> usize {
        self.actions.len()
    }

    pub fn num_sensors(&self) -> usize {
        self.sensors.len()
    }

    pub fn num_worlds(&self) -> usize {
        1 << self.sensors.len()
    }

    pub fn atoms(&self) -> &[GroundAtom] {
        &self.atoms
    }

    pub fn rules(&self) -> &[GroundRule] {
        &self.rules
    }

    /// Derived predicates grouped by stratum, lowest first.
    pub fn stratification(&self) -> &[Vec<String>] {
        &self.strata
    }

    pub fn safe_atom(&self) -> AtomId {
        self.safe_atom
    }

    pub fn action_index(&self, name: &str) -> Option<usize> {
        self.actions.iter().position(|a| a == name)
    }

    /// Whether `safe_next` holds when `action` is chosen and sensor `i` is
    /// true exactly when bit `i` of `world` is set.
    pub fn safe_in_world(&self, action: usize, world: usize) -> bool {
        self.safe_table[action * self.num_worlds() + world]
    }

    /// Evaluates every derived atom in one world.
    pub fn evaluate_world(&self, action: usize, world: usize) -> Vec<bool> {
        let mut truth: Vec<bool> = self
            .atoms
            .iter()
            .map(|a| match a.kind {
                AtomKind::Action(i) => i == action,
                AtomKind::Sensor(i) => (world >> i) & 1 == 1,
                AtomKind::Derived => false,
            })
            .collect();
        for stratum in &self.rule_strata {
            loop {
                let mut changed = false;
                for &r in stratum {
                    let rule = &self.rules[r];
                    if truth[rule.head] {
                        continue;
                    }
                    if rule.body.iter().all(|l| truth[l.atom] == l.positive) {
                        truth[rule.head] = true;
                        changed = true;
                    }
                }
                if !changed {
                    break;
                }
            }
        }
        truth
    }
}

fn atom_key(pred: &str, args: &[String]) -> String {
    if args.is_empty() {
        pred.to_string()
    } else {
        format!("{pred}({})", args.join(","))
    }
}

struct Interner {
    atoms: Vec<GroundAtom>,
    index: HashMap<String, AtomId>,
}

impl Interner {
    fn intern(&mut self, pred: &str, args: &[String], kind: AtomKind) -> AtomId {
        let key = atom_key(pred, args);
        if let Some(&id) = self.index.get(&key) {
            return id;
        }
        let id = self.atoms.len();
        self.atoms.push(GroundAtom {
            key: key.clone(),
            predicate: format!("{pred}/{}", args.len()),
            kind,
        });
        self.index.insert(key, id);
        id
    }
}

fn predicate_id(atom: &Atom) -> String {
    format!("{}/{}", atom.pred, atom.args.len())
}

fn is_input(pred: &str) -> bool {
    pred == "action" || pred == "sensor"
}

pub(super) fn ground(
    source: &ShieldSource,
    clauses: Vec<Clause>,
) -> Result<GroundProgram, ShieldError> {
    let mut actions: Option<Vec<String>> = None;
    let mut sensors: Vec<String> = Vec::new();
    let mut rules_ast: Vec<(Atom, Vec<Literal>)> = Vec::new();

    for clause in clauses {
        match clause {
            Clause::Annotated(branches) => {
                let kinds: BTreeSet<&str> = branches.iter().map(|(a, _)| a.kind.as_str()).collect();
                if kinds.len() != 1 {
                    return Err(ShieldError::ActionDisjunction(
                        "a disjunction mixes action and sensor placeholders".into(),
                    ));
                }
                if kinds.contains("action") {
                    if actions.is_some() {
                        return Err(ShieldError::ActionDisjunction(
                            "more than one annotated disjunction over actions".into(),
                        ));
                    }
                    let mut names = Vec::new();
                    for (i, (ann, atom)) in branches.iter().enumerate() {
                        if ann.index != i {
                            return Err(ShieldError::ActionDisjunction(format!(
                                "branch {i} is annotated with action({})",
                                ann.index
                            )));
                        }
                        names.push(input_constant(atom, "action")?);
                    }
                    actions = Some(names);
                } else {
                    if branches.len() != 1 {
                        return Err(ShieldError::ActionDisjunction(
                            "sensor facts cannot form a disjunction".into(),
                        ));
                    }
                    let (ann, atom) = &branches[0];
                    if ann.index != sensors.len() {
                        return Err(ShieldError::DeclarationMismatch {
                            kind: "sensor",
                            index: sensors.len(),
                            declared: format!("sensor_value({})", sensors.len()),
                            found: format!("sensor_value({})", ann.index),
                        });
                    }
                    sensors.push(input_constant(atom, "sensor")?);
                }
            }
            Clause::Rule { head, body } => rules_ast.push((head, body)),
            Clause::Fact(head) => rules_ast.push((head, Vec::new())),
        }
    }

    let actions = actions.ok_or_else(|| {
        ShieldError::ActionDisjunction("no annotated disjunction over actions".into())
    })?;
    check_unique("action", &actions)?;
    check_unique("sensor", &sensors)?;
    verify_declared("action", &source.declared_actions, &actions)?;
    verify_declared("sensor", &source.declared_sensors, &sensors)?;
    if sensors.len() > MAX_SENSORS {
        return Err(ShieldError::TooManySensors(sensors.len()));
    }

    for (head, _) in &rules_ast {
        if is_input(&head.pred) && head.args.len() == 1 {
            return Err(ShieldError::InvalidHead(atom_key(
                &head.pred,
                &head
                    .args
                    .iter()
                    .map(|t| t.name().to_string())
                    .collect::<Vec<_>>(),
            )));
        }
    }
    if !rules_ast
        .iter()
        .any(|(h, _)| h.pred == "safe_next" && h.args.is_empty())
    {
        return Err(ShieldError::MissingSafePredicate);
    }

    let strata_of = stratify(&rules_ast)?;

    // Constants that derived-predicate arguments may range over.
    let mut universe: BTreeSet<String> = actions.iter().chain(sensors.iter()).cloned().collect();
    for (head, body) in &rules_ast {
        let atoms = std::iter::once(head).chain(body.iter().filter_map(|l| match l {
            Literal::Pos(a) | Literal::Neg(a) => Some(a),
            Literal::NotEq(..) => None,
        }));
        for atom in atoms {
            for t in &atom.args {
                if let Term::Const(c) = t {
                    universe.insert(c.clone());
                }
            }
        }
    }
    let universe: Vec<String> = universe.into_iter().collect();

    let mut interner = Interner {
        atoms: Vec::new(),
        index: HashMap::new(),
    };
    for (i, a) in actions.iter().enumerate() {
        interner.intern("action", std::slice::from_ref(a), AtomKind::Action(i));
    }
    for (i, s) in sensors.iter().enumerate() {
        interner.intern("sensor", std::slice::from_ref(s), AtomKind::Sensor(i));
    }

    let mut rules = Vec::new();
    let mut rule_stratum = Vec::new();
    for (head, body) in &rules_ast {
        let stratum = strata_of[&predicate_id(head)];
        for binding in bindings(head, body, &actions, &sensors, &universe)? {
            if let Some(rule) =
                instantiate(head, body, &binding, &actions, &sensors, &mut interner)?
            {
                rules.push(rule);
                rule_stratum.push(stratum);
            }
        }
    }

    let n_strata = strata_of.values().copied().max().map_or(0, |m| m + 1);
    let mut strata = vec![Vec::new(); n_strata];
    for (pred, &s) in &strata_of {
        strata[s].push(pred.clone());
    }
    for s in &mut strata {
        s.sort();
    }
    let mut rule_strata = vec![Vec::new(); n_strata];
    for (r, &s) in rule_stratum.iter().enumerate() {
        rule_strata[s].push(r);
    }

    let safe_atom = interner.intern("safe_next", &[], AtomKind::Derived);
    let mut program = GroundProgram {
        actions,
        sensors,
        atoms: interner.atoms,
        rules,
        strata,
        rule_strata,
        safe_atom,
        safe_table: Vec::new(),
    };
    let worlds = program.num_worlds();
    let mut table = Vec::with_capacity(program.num_actions() * worlds);
    for a in 0..program.num_actions() {
        for w in 0..worlds {
            table.push(program.evaluate_world(a, w)[safe_atom]);
        }
    }
    program.safe_table = table;
    Ok(program)
}

fn input_constant(atom: &Atom, pred: &str) -> Result<String, ShieldError> {
    match (atom.pred.as_str(), atom.args.as_slice()) {
        (p, [Term::Const(c)]) if p == pred => Ok(c.clone()),
        _ => Err(ShieldError::Syntax {
            line: atom.pos.line,
            col: atom.pos.col,
            found: atom.pred.clone(),
            expected: format!("`{pred}(constant)`"),
        }),
    }
}

fn check_unique(kind: &'static str, names: &[String]) -> Result<(), ShieldError> {
    let mut seen = BTreeSet::new();
    for n in names {
        if !seen.insert(n) {
            return Err(ShieldError::DuplicateConstant {
                kind,
                name: n.clone(),
            });
        }
    }
    Ok(())
}

fn verify_declared(
    kind: &'static str,
    declared: &[String],
    found: &[String],
) -> Result<(), ShieldError> {
    if declared.len() != found.len() {
        return Err(ShieldError::DeclarationMismatch {
            kind,
            index: declared.len().min(found.len()),
            declared: format!("{} {kind}s", declared.len()),
            found: format!("{} {kind}s", found.len()),
        });
    }
    for (i, (d, f)) in declared.iter().zip(found).enumerate() {
        if d != f {
            return Err(ShieldError::DeclarationMismatch {
                kind,
                index: i,
                declared: d.clone(),
                found: f.clone(),
            });
        }
    }
    Ok(())
}

/// Assigns each derived predicate the lowest stratum consistent with its
/// positive and negative dependencies.
fn stratify(rules: &[(Atom, Vec<Literal>)]) -> Result<HashMap<String, usize>, ShieldError> {
    let mut stratum: HashMap<String, usize> = HashMap::new();
    for (head, _) in rules {
        stratum.insert(predicate_id(head), 0);
    }
    let limit = stratum.len();
    loop {
        let mut changed = false;
        for (head, body) in rules {
            let h = predicate_id(head);
            for lit in body {
                let (atom, strict) = match lit {
                    Literal::Pos(a) => (a, false),
                    Literal::Neg(a) => (a, true),
                    Literal::NotEq(..) => continue,
                };
                let Some(&dep) = stratum.get(&predicate_id(atom)) else {
                    continue;
                };
                let need = dep + usize::from(strict);
                if stratum[&h] < need {
                    if need >= limit.max(1) {
                        return Err(ShieldError::NonStratifiedNegation {
                            predicate: negative_cycle(rules).unwrap_or(h),
                        });
                    }
                    stratum.insert(h.clone(), need);
                    changed = true;
                }
            }
        }
        if !changed {
            return Ok(stratum);
        }
    }
}

/// Head of the first rule whose negated body predicate depends back on it.
fn negative_cycle(rules: &[(Atom, Vec<Literal>)]) -> Option<String> {
    let mut edges: HashMap<String, Vec<String>> = HashMap::new();
    for (head, body) in rules {
        for lit in body {
            if let Literal::Pos(a) | Literal::Neg(a) = lit {
                edges
                    .entry(predicate_id(head))
                    .or_default()
                    .push(predicate_id(a));
            }
        }
    }
    let reaches = |from: &str, to: &str| {
        let mut stack = vec![from.to_string()];
        let mut seen = std::collections::HashSet::new();
        while let Some(p) = stack.pop() {
            if p == to {
                return true;
            }
            if seen.insert(p.clone()) {
                stack.extend(edges.get(&p).into_iter().flatten().cloned());
            }
        }
        false
    };
    for (head, body) in rules {
        let h = predicate_id(head);
        for lit in body {
            if let Literal::Neg(a) = lit {
                if reaches(&predicate_id(a), &h) {
                    return Some(h);
                }
            }
        }
    }
    None
}

fn domain<'a>(
    pred: &str,
    actions: &'a [String],
    sensors: &'a [String],
    universe: &'a [String],
) -> &'a [String] {
    match pred {
        "action" => actions,
        "sensor" => sensors,
        _ => universe,
    }
}

/// Enumerates variable bindings. A variable ranges over the intersection of
/// the constant sets of every argument position it occupies.
fn bindings(
    head: &Atom,
    body: &[Literal],
    actions: &[String],
    sensors: &[String],
    universe: &[String],
) -> Result<Vec<HashMap<String, String>>, ShieldError> {
    let mut vars: Vec<String> = Vec::new();
    let mut domains: HashMap<String, BTreeSet<String>> = HashMap::new();
    let mut positive: BTreeSet<String> = BTreeSet::new();
    let mut note = |atom: &Atom, is_positive: bool, vars: &mut Vec<String>| {
        for t in &atom.args {
            if let Term::Var(v) = t {
                if !vars.contains(v) {
                    vars.push(v.clone());
                }
                let d: BTreeSet<String> = domain(&atom.pred, actions, sensors, universe)
                    .iter()
                    .cloned()
                    .collect();
                domains
                    .entry(v.clone())
                    .and_modify(|cur| *cur = cur.intersection(&d).cloned().collect())
                    .or_insert(d);
                if is_positive {
                    positive.insert(v.clone());
                }
            }
        }
    };
    for lit in body {
        match lit {
            Literal::Pos(a) => note(a, true, &mut vars),
            Literal::Neg(a) => note(a, false, &mut vars),
            Literal::NotEq(..) => {}
        }
    }
    let clause = head.pred.clone();
    for t in &head.args {
        if let Term::Var(v) = t {
            if !positive.contains(v) {
                return Err(ShieldError::UnsafeVariable {
                    var: v.clone(),
                    clause,
                });
            }
        }
    }
    for lit in body {
        if let Literal::NotEq(a, b) = lit {
            for t in [a, b] {
                if let Term::Var(v) = t {
                    if !positive.contains(v) {
                        return Err(ShieldError::UnsafeVariable {
                            var: v.clone(),
                            clause,
                        });
                    }
                }
            }
        }
    }
    for v in &vars {
        if !positive.contains(v) {
            return Err(ShieldError::UnsafeVariable {
                var: v.clone(),
                clause,
            });
        }
    }

    let mut out = vec![HashMap::new()];
    for v in &vars {
        let dom = &domains[v];
        let mut next = Vec::with_capacity(out.len() * dom.len());
        for b in &out {
            for c in dom {
                let mut nb = b.clone();
                nb.insert(v.clone(), c.clone());
                next.push(nb);
            }
        }
        out = next;
    }
    Ok(out)
}

fn resolve(t: &Term, binding: &HashMap<String, String>) -> String {
    match t {
        Term::Const(c) => c.clone(),
        Term::Var(v) => binding[v].clone(),
    }
}

fn ground_atom(
    atom: &Atom,
    binding: &HashMap<String, String>,
    actions: &[String],
    sensors: &[String],
    interner: &mut Interner,
) -> Result<AtomId, ShieldError> {
    let args: Vec<String> = atom.args.iter().map(|t| resolve(t, binding)).collect();
    if is_input(&atom.pred) && args.len() == 1 {
        let names = if atom.pred == "action" {
            actions
        } else {
            sensors
        };
        let Some(i) = names.iter().position(|n| n == &args[0]) else {
            return Err(ShieldError::UndeclaredConstant {
                predicate: atom.pred.clone(),
                name: args[0].clone(),
            });
        };
        let kind = if atom.pred == "action" {
            AtomKind::Action(i)
        } else {
            AtomKind::Sensor(i)
        };
        return Ok(interner.intern(&atom.pred, &args, kind));
    }
    Ok(interner.intern(&atom.pred, &args, AtomKind::Derived))
}

fn instantiate(
    head: &Atom,
    body: &[Literal],
    binding: &HashMap<String, String>,
    actions: &[String],
    sensors: &[String],
    interner: &mut Interner,
) -> Result<Option<GroundRule>, ShieldError> {
    let mut lits = Vec::with_capacity(body.len());
    for lit in body {
        match lit {
            Literal::NotEq(a, b) => {
                if resolve(a, binding) == resolve(b, binding) {
                    return Ok(None);
                }
            }
            Literal::Pos(a) => lits.push(SignedLiteral {
                positive: true,
                atom: ground_atom(a, binding, actions, sensors, interner)?,
            }),
            Literal::Neg(a) => lits.push(SignedLiteral {
                positive: false,
                atom: ground_atom(a, binding, actions, sensors, interner)?,
            }),
        }
    }
    let head = ground_atom(head, binding, actions, sensors, interner)?;
    Ok(Some(GroundRule { head, body: lits }))
}
