//! The relational target formalism: a database schema with key
//! constraints, parameterized actions whose effects may mention service
//! calls, and condition-action rules that gate execution.
//!
//! Successor states contain only the facts the effects produce; anything
//! that should survive needs an explicit copy effect.

use crate::value::Value;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DcdsError {
    #[error("unknown action `{0}`")]
    UnknownAction(String),
    #[error("action `{action}` parameter `{param}` is not bound")]
    UnboundParam { action: String, param: String },
    #[error("relation `{0}` is not in the schema")]
    UnknownRelation(String),
    #[error("relation `{rel}` has arity {arity}, got {got} terms")]
    ArityMismatch { rel: String, arity: usize, got: usize },
}

// ==== schema and instances ================================================

/// Relation declaration: the first `key` columns functionally determine the
/// rest. `key == arity` means no constraint.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelDecl {
    pub arity: usize,
    pub key: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schema {
    pub relations: BTreeMap<String, RelDecl>,
}

impl Schema {
    pub fn declare(&mut self, name: &str, arity: usize, key: usize) {
        self.relations.insert(name.to_string(), RelDecl { arity, key });
    }
}

/// A database state: finite relation extensions.
#[derive(Clone, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct DbInstance {
    pub facts: BTreeMap<String, BTreeSet<Vec<Value>>>,
}

/// A key violation found in a candidate successor: two facts of `rel`
/// agreeing on the key prefix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KeyViolation {
    pub rel: String,
    pub rows: (Vec<Value>, Vec<Value>),
}

impl fmt::Display for KeyViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let row = |r: &[Value]| r.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(", ");
        write!(
            f,
            "key of `{}` violated: ({}) vs ({})",
            self.rel,
            row(&self.rows.0),
            row(&self.rows.1)
        )
    }
}

impl DbInstance {
    pub fn insert(&mut self, rel: &str, row: Vec<Value>) {
        self.facts.entry(rel.to_string()).or_default().insert(row);
    }

    pub fn rows(&self, rel: &str) -> impl Iterator<Item = &Vec<Value>> {
        self.facts.get(rel).into_iter().flatten()
    }

    pub fn contains(&self, rel: &str, row: &[Value]) -> bool {
        self.facts.get(rel).is_some_and(|rows| rows.contains(row))
    }

    pub fn active_domain(&self) -> BTreeSet<Value> {
        self.facts
            .values()
            .flatten()
            .flatten()
            .cloned()
            .collect()
    }

    pub fn size(&self) -> usize {
        self.facts.values().map(|r| r.len()).sum()
    }

    /// First key violation, if any.
    pub fn check_keys(&self, schema: &Schema) -> Option<KeyViolation> {
        for (rel, rows) in &self.facts {
            let Some(decl) = schema.relations.get(rel) else { continue };
            if decl.key >= decl.arity {
                continue;
            }
            let mut seen: BTreeMap<&[Value], &Vec<Value>> = BTreeMap::new();
            for row in rows {
                match seen.insert(&row[..decl.key], row) {
                    Some(prev) if prev != row => {
                        return Some(KeyViolation {
                            rel: rel.clone(),
                            rows: (prev.clone(), row.clone()),
                        })
                    }
                    _ => {}
                }
            }
        }
        None
    }
}

// ==== queries =============================================================

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum QTerm {
    Const(Value),
    Var(String),
}

impl QTerm {
    pub fn var(name: &str) -> QTerm {
        QTerm::Var(name.to_string())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum QCmp {
    Eq,
    Ne,
    Lt,
}

/// Conjunctive queries with negation, disjunction, and comparisons.
/// Evaluation is safe-range: comparison operands and everything under a
/// negation must be bound by the positive atoms evaluated before them.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Query {
    True,
    Atom { rel: String, args: Vec<QTerm> },
    Cmp { lhs: QTerm, op: QCmp, rhs: QTerm },
    And(Vec<Query>),
    Or(Vec<Query>),
    Not(Box<Query>),
}

impl Query {
    pub fn atom(rel: &str, args: Vec<QTerm>) -> Query {
        Query::Atom { rel: rel.to_string(), args }
    }

    pub fn eq(lhs: QTerm, rhs: QTerm) -> Query {
        Query::Cmp { lhs, op: QCmp::Eq, rhs }
    }

    pub fn and(mut parts: Vec<Query>) -> Query {
        parts.retain(|q| *q != Query::True);
        match parts.len() {
            0 => Query::True,
            1 => parts.pop().unwrap(),
            _ => Query::And(parts),
        }
    }

    pub fn not(q: Query) -> Query {
        Query::Not(Box::new(q))
    }

    pub fn vars(&self) -> BTreeSet<&str> {
        let mut out = BTreeSet::new();
        self.collect_vars(&mut out);
        out
    }

    fn collect_vars<'a>(&'a self, out: &mut BTreeSet<&'a str>) {
        match self {
            Query::True => {}
            Query::Atom { args, .. } => {
                for a in args {
                    if let QTerm::Var(v) = a {
                        out.insert(v);
                    }
                }
            }
            Query::Cmp { lhs, rhs, .. } => {
                for t in [lhs, rhs] {
                    if let QTerm::Var(v) = t {
                        out.insert(v);
                    }
                }
            }
            Query::And(qs) | Query::Or(qs) => {
                for q in qs {
                    q.collect_vars(out);
                }
            }
            Query::Not(q) => q.collect_vars(out),
        }
    }
}

pub type Binding = BTreeMap<String, Value>;

fn resolve(t: &QTerm, b: &Binding) -> Option<Value> {
    match t {
        QTerm::Const(v) => Some(v.clone()),
        QTerm::Var(x) => b.get(x).cloned(),
    }
}

fn cmp_holds(op: QCmp, l: &Value, r: &Value) -> bool {
    match op {
        QCmp::Eq => l == r,
        QCmp::Ne => l != r,
        QCmp::Lt => l < r,
    }
}

/// All extensions of `seed` satisfying the query. Negation keeps a binding
/// when the inner query has no satisfying extension of it.
pub fn eval(db: &DbInstance, q: &Query, seed: &Binding) -> Vec<Binding> {
    match q {
        Query::True => vec![seed.clone()],
        Query::Atom { rel, args } => {
            let mut out = Vec::new();
            'rows: for row in db.rows(rel) {
                if row.len() != args.len() {
                    continue;
                }
                let mut b = seed.clone();
                for (t, v) in args.iter().zip(row) {
                    match t {
                        QTerm::Const(c) => {
                            if c != v {
                                continue 'rows;
                            }
                        }
                        QTerm::Var(x) => match b.get(x) {
                            Some(bound) if bound != v => continue 'rows,
                            Some(_) => {}
                            None => {
                                b.insert(x.clone(), v.clone());
                            }
                        },
                    }
                }
                out.push(b);
            }
            out
        }
        Query::Cmp { lhs, op, rhs } => {
            let (Some(l), Some(r)) = (resolve(lhs, seed), resolve(rhs, seed)) else {
                debug_assert!(false, "comparison over unbound variable");
                return Vec::new();
            };
            if cmp_holds(*op, &l, &r) {
                vec![seed.clone()]
            } else {
                Vec::new()
            }
        }
        Query::And(qs) => {
            let mut acc = vec![seed.clone()];
            for part in qs {
                let mut next = Vec::new();
                for b in &acc {
                    next.extend(eval(db, part, b));
                }
                acc = next;
                if acc.is_empty() {
                    break;
                }
            }
            acc
        }
        Query::Or(qs) => {
            let mut out = BTreeSet::new();
            for part in qs {
                out.extend(eval(db, part, seed));
            }
            out.into_iter().collect()
        }
        Query::Not(inner) => {
            if eval(db, inner, seed).is_empty() {
                vec![seed.clone()]
            } else {
                Vec::new()
            }
        }
    }
}

/// Reference evaluator: enumerate total assignments of the query's
/// variables over the active domain plus the query's own constants, then
/// check satisfaction. Quadratic and only for cross-checking `eval`.
pub fn naive_eval(db: &DbInstance, q: &Query) -> Vec<Binding> {
    fn consts(q: &Query, out: &mut BTreeSet<Value>) {
        match q {
            Query::True => {}
            Query::Atom { args, .. } => {
                for a in args {
                    if let QTerm::Const(v) = a {
                        out.insert(v.clone());
                    }
                }
            }
            Query::Cmp { lhs, rhs, .. } => {
                for t in [lhs, rhs] {
                    if let QTerm::Const(v) = t {
                        out.insert(v.clone());
                    }
                }
            }
            Query::And(qs) | Query::Or(qs) => {
                for part in qs {
                    consts(part, out);
                }
            }
            Query::Not(inner) => consts(inner, out),
        }
    }

    fn sat(db: &DbInstance, q: &Query, b: &Binding) -> bool {
        match q {
            Query::True => true,
            Query::Atom { rel, args } => {
                let row: Option<Vec<Value>> = args.iter().map(|t| resolve(t, b)).collect();
                row.is_some_and(|row| db.contains(rel, &row))
            }
            Query::Cmp { lhs, op, rhs } => match (resolve(lhs, b), resolve(rhs, b)) {
                (Some(l), Some(r)) => cmp_holds(*op, &l, &r),
                _ => false,
            },
            Query::And(qs) => qs.iter().all(|part| sat(db, part, b)),
            Query::Or(qs) => qs.iter().any(|part| sat(db, part, b)),
            Query::Not(inner) => !sat(db, inner, b),
        }
    }

    let mut domain = db.active_domain();
    consts(q, &mut domain);
    let domain: Vec<Value> = domain.into_iter().collect();
    let vars: Vec<&str> = q.vars().into_iter().collect();
    if !vars.is_empty() && domain.is_empty() {
        return Vec::new();
    }

    let mut out = Vec::new();
    let mut idx = vec![0usize; vars.len()];
    loop {
        let b: Binding = vars
            .iter()
            .zip(&idx)
            .map(|(v, &i)| (v.to_string(), domain[i].clone()))
            .collect();
        if sat(db, q, &b) {
            out.push(b);
        }
        let mut k = 0;
        loop {
            if k == vars.len() {
                return out;
            }
            idx[k] += 1;
            if idx[k] < domain.len() {
                break;
            }
            idx[k] = 0;
            k += 1;
        }
    }
}

// ==== actions =============================================================

/// A term in an effect head: grounded from the binding, or a service call
/// whose result the oracle chooses.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ETerm {
    Const(Value),
    Var(String),
    Call { service: String, args: Vec<QTerm> },
}

/// One effect: for every answer of `query`, contribute the grounded `head`
/// facts to the successor.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EffectSpec {
    pub query: Query,
    pub head: Vec<(String, Vec<ETerm>)>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Action {
    pub name: String,
    pub params: Vec<String>,
    pub effects: Vec<EffectSpec>,
}

/// Condition-action rule: every answer of `query`, projected to the
/// action's parameters, enables one application.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaRule {
    pub query: Query,
    pub action: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DcdsSpec {
    pub schema: Schema,
    /// Service signatures: name to argument count.
    pub services: BTreeMap<String, usize>,
    pub actions: BTreeMap<String, Action>,
    pub ca_rules: Vec<CaRule>,
    pub initial: DbInstance,
}

impl DcdsSpec {
    pub fn add_action(&mut self, action: Action) {
        self.actions.insert(action.name.clone(), action);
    }

    /// Structural sanity: effect heads in schema with matching arity,
    /// head variables bound by the effect query or the parameters,
    /// CA-rule queries binding every parameter of their action.
    pub fn validate(&self) -> Result<(), DcdsError> {
        for action in self.actions.values() {
            for eff in &action.effects {
                let bound: BTreeSet<&str> = eff
                    .query
                    .vars()
                    .into_iter()
                    .chain(action.params.iter().map(|p| p.as_str()))
                    .collect();
                for (rel, args) in &eff.head {
                    let decl = self
                        .schema
                        .relations
                        .get(rel)
                        .ok_or_else(|| DcdsError::UnknownRelation(rel.clone()))?;
                    if decl.arity != args.len() {
                        return Err(DcdsError::ArityMismatch {
                            rel: rel.clone(),
                            arity: decl.arity,
                            got: args.len(),
                        });
                    }
                    for t in args {
                        let unbound = match t {
                            ETerm::Var(v) => (!bound.contains(v.as_str())).then(|| v.clone()),
                            ETerm::Call { args, .. } => args.iter().find_map(|a| match a {
                                QTerm::Var(v) => {
                                    (!bound.contains(v.as_str())).then(|| v.clone())
                                }
                                QTerm::Const(_) => None,
                            }),
                            ETerm::Const(_) => None,
                        };
                        if let Some(param) = unbound {
                            return Err(DcdsError::UnboundParam {
                                action: action.name.clone(),
                                param,
                            });
                        }
                    }
                }
            }
        }
        for rule in &self.ca_rules {
            let action = self
                .actions
                .get(&rule.action)
                .ok_or_else(|| DcdsError::UnknownAction(rule.action.clone()))?;
            let vars = rule.query.vars();
            for p in &action.params {
                if !vars.contains(p.as_str()) {
                    return Err(DcdsError::UnboundParam {
                        action: action.name.clone(),
                        param: p.clone(),
                    });
                }
            }
        }
        Ok(())
    }
}

/// All enabled (action, parameter binding) pairs in a state.
pub fn enabled_actions(spec: &DcdsSpec, db: &DbInstance) -> Vec<(String, Binding)> {
    let mut out = BTreeSet::new();
    for rule in &spec.ca_rules {
        let params = &spec.actions[&rule.action].params;
        for b in eval(db, &rule.query, &Binding::new()) {
            let projected: Binding = params
                .iter()
                .filter_map(|p| b.get(p).map(|v| (p.clone(), v.clone())))
                .collect();
            if projected.len() == params.len() {
                out.insert((rule.action.clone(), projected));
            }
        }
    }
    out.into_iter().collect()
}

// ==== service calls =======================================================

/// A service-call term with grounded arguments. Two occurrences with the
/// same service and arguments share one result within an action
/// application.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct GroundCall {
    pub service: String,
    pub args: Vec<Value>,
}

impl fmt::Display for GroundCall {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let args = self.args.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(", ");
        write!(f, "{}({args})", self.service)
    }
}

/// Supplies result assignments for the distinct calls of one application;
/// each assignment is parallel to the call slice and yields one successor.
pub trait ServiceOracle {
    fn assignments(&mut self, calls: &[GroundCall]) -> Vec<Vec<Value>>;
}

/// Nondeterminism collapsed to one random choice per call; for simulation.
pub struct RandomOracle {
    rng: rand_chacha::ChaCha8Rng,
    counter: u64,
}

impl RandomOracle {
    pub fn new(seed: u64) -> RandomOracle {
        use rand::SeedableRng;
        RandomOracle {
            rng: rand_chacha::ChaCha8Rng::seed_from_u64(seed),
            counter: 0,
        }
    }
}

impl ServiceOracle for RandomOracle {
    fn assignments(&mut self, calls: &[GroundCall]) -> Vec<Vec<Value>> {
        use rand::Rng;
        let one = calls
            .iter()
            .map(|_| {
                self.counter += 1;
                if self.rng.gen_ratio(1, 8) {
                    Value::Null
                } else {
                    Value::Str(format!("v{}", self.counter))
                }
            })
            .collect();
        vec![one]
    }
}

/// Every value combination from a fixed domain; for exhaustive tests.
pub struct DomainOracle {
    pub domain: Vec<Value>,
}

impl ServiceOracle for DomainOracle {
    fn assignments(&mut self, calls: &[GroundCall]) -> Vec<Vec<Value>> {
        let mut out = vec![Vec::new()];
        for _ in calls {
            let mut next = Vec::with_capacity(out.len() * self.domain.len());
            for prefix in &out {
                for v in &self.domain {
                    let mut row = prefix.clone();
                    row.push(v.clone());
                    next.push(row);
                }
            }
            out = next;
        }
        out
    }
}

#[derive(Clone, Debug, Default)]
pub struct ApplyOutcome {
    pub successors: Vec<DbInstance>,
    /// Candidate successors dropped for violating a key.
    pub discarded: Vec<KeyViolation>,
}

/// Apply one enabled action: ground every effect, resolve service calls
/// through the oracle, one successor per assignment. Successors contain
/// only effect-produced facts.
pub fn apply_action(
    spec: &DcdsSpec,
    db: &DbInstance,
    action: &str,
    binding: &Binding,
    oracle: &mut dyn ServiceOracle,
) -> Result<ApplyOutcome, DcdsError> {
    let act = spec
        .actions
        .get(action)
        .ok_or_else(|| DcdsError::UnknownAction(action.to_string()))?;
    for p in &act.params {
        if !binding.contains_key(p) {
            return Err(DcdsError::UnboundParam {
                action: action.to_string(),
                param: p.clone(),
            });
        }
    }

    // Grounded heads, service results still symbolic.
    enum Slot {
        Done(Value),
        Call(GroundCall),
    }
    let mut proto: Vec<(String, Vec<Slot>)> = Vec::new();
    let mut calls: BTreeSet<GroundCall> = BTreeSet::new();

    for eff in &act.effects {
        for b in eval(db, &eff.query, binding) {
            for (rel, args) in &eff.head {
                let row = args
                    .iter()
                    .map(|t| match t {
                        ETerm::Const(v) => Slot::Done(v.clone()),
                        ETerm::Var(x) => Slot::Done(
                            b.get(x)
                                .cloned()
                                .expect("validated head variable"),
                        ),
                        ETerm::Call { service, args } => {
                            let call = GroundCall {
                                service: service.clone(),
                                args: args
                                    .iter()
                                    .map(|a| resolve(a, &b).expect("validated call argument"))
                                    .collect(),
                            };
                            calls.insert(call.clone());
                            Slot::Call(call)
                        }
                    })
                    .collect();
                proto.push((rel.clone(), row));
            }
        }
    }

    let calls: Vec<GroundCall> = calls.into_iter().collect();
    let assignments = if calls.is_empty() {
        vec![Vec::new()]
    } else {
        oracle.assignments(&calls)
    };

    let mut outcome = ApplyOutcome::default();
    for assignment in assignments {
        debug_assert_eq!(assignment.len(), calls.len());
        let lookup: BTreeMap<&GroundCall, &Value> = calls.iter().zip(&assignment).collect();
        let mut next = DbInstance::default();
        for (rel, row) in &proto {
            let row: Vec<Value> = row
                .iter()
                .map(|s| match s {
                    Slot::Done(v) => v.clone(),
                    Slot::Call(c) => (*lookup[c]).clone(),
                })
                .collect();
            next.insert(rel, row);
        }
        match next.check_keys(&spec.schema) {
            Some(v) => outcome.discarded.push(v),
            None => outcome.successors.push(next),
        }
    }
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn s(x: &str) -> Value {
        Value::str(x)
    }

    fn two_rel_schema() -> Schema {
        let mut schema = Schema::default();
        schema.declare("R", 2, 2);
        schema.declare("S", 1, 1);
        schema
    }

    #[test]
    fn true_rule_enables_with_empty_binding() {
        let mut spec = DcdsSpec::default();
        spec.add_action(Action { name: "a".into(), params: vec![], effects: vec![] });
        spec.ca_rules.push(CaRule { query: Query::True, action: "a".into() });
        spec.validate().unwrap();
        assert_eq!(
            enabled_actions(&spec, &DbInstance::default()),
            vec![("a".to_string(), Binding::new())]
        );
    }

    #[test]
    fn positive_atom_on_empty_db_gives_no_bindings() {
        let db = DbInstance::default();
        let q = Query::atom("R", vec![QTerm::var("x"), QTerm::var("y")]);
        assert!(eval(&db, &q, &Binding::new()).is_empty());
    }

    #[test]
    fn constant_effect_gives_one_successor() {
        let mut spec = DcdsSpec { schema: two_rel_schema(), ..Default::default() };
        spec.add_action(Action {
            name: "mk".into(),
            params: vec![],
            effects: vec![EffectSpec {
                query: Query::True,
                head: vec![("S".into(), vec![ETerm::Const(s("c"))])],
            }],
        });
        let out = apply_action(
            &spec,
            &DbInstance::default(),
            "mk",
            &Binding::new(),
            &mut RandomOracle::new(0),
        )
        .unwrap();
        assert_eq!(out.successors.len(), 1);
        assert!(out.successors[0].contains("S", &[s("c")]));
        assert!(out.discarded.is_empty());
    }

    #[test]
    fn each_oracle_assignment_gives_one_successor() {
        let mut spec = DcdsSpec { schema: two_rel_schema(), ..Default::default() };
        spec.services.insert("f".into(), 0);
        spec.add_action(Action {
            name: "mk".into(),
            params: vec![],
            effects: vec![EffectSpec {
                query: Query::True,
                head: vec![(
                    "S".into(),
                    vec![ETerm::Call { service: "f".into(), args: vec![] }],
                )],
            }],
        });
        let mut oracle = DomainOracle { domain: vec![s("a"), s("b")] };
        let out =
            apply_action(&spec, &DbInstance::default(), "mk", &Binding::new(), &mut oracle)
                .unwrap();
        assert_eq!(out.successors.len(), 2);
        assert!(out.successors.iter().any(|db| db.contains("S", &[s("a")])));
        assert!(out.successors.iter().any(|db| db.contains("S", &[s("b")])));
    }

    #[test]
    fn successors_hold_only_effect_facts() {
        // No copy effect: the R rows of the current state vanish.
        let mut spec = DcdsSpec { schema: two_rel_schema(), ..Default::default() };
        spec.add_action(Action {
            name: "mk".into(),
            params: vec![],
            effects: vec![EffectSpec {
                query: Query::True,
                head: vec![("S".into(), vec![ETerm::Const(s("c"))])],
            }],
        });
        let mut db = DbInstance::default();
        db.insert("R", vec![s("a"), s("b")]);
        let out =
            apply_action(&spec, &db, "mk", &Binding::new(), &mut RandomOracle::new(0)).unwrap();
        assert_eq!(out.successors[0].rows("R").count(), 0);
    }

    #[test]
    fn identical_call_terms_share_one_result() {
        let mut spec = DcdsSpec { schema: two_rel_schema(), ..Default::default() };
        spec.services.insert("f".into(), 1);
        // R(x, f(x)) and S(f(x)): per row one distinct call f(x).
        spec.add_action(Action {
            name: "mk".into(),
            params: vec![],
            effects: vec![EffectSpec {
                query: Query::atom("S", vec![QTerm::var("x")]),
                head: vec![
                    (
                        "R".into(),
                        vec![
                            ETerm::Var("x".into()),
                            ETerm::Call { service: "f".into(), args: vec![QTerm::var("x")] },
                        ],
                    ),
                    (
                        "S".into(),
                        vec![ETerm::Call { service: "f".into(), args: vec![QTerm::var("x")] }],
                    ),
                ],
            }],
        });
        let mut db = DbInstance::default();
        db.insert("S", vec![s("a")]);
        db.insert("S", vec![s("b")]);
        let mut oracle = DomainOracle { domain: vec![s("u"), s("v")] };
        let out = apply_action(&spec, &db, "mk", &Binding::new(), &mut oracle).unwrap();
        // Two distinct calls f(a), f(b): four assignments.
        assert_eq!(out.successors.len(), 4);
        for succ in &out.successors {
            for row in succ.rows("R") {
                // The S fact carries the same result the R fact got.
                assert!(succ.contains("S", &row[1..]));
            }
        }
    }

    #[test]
    fn key_violations_are_discarded_and_reported() {
        let mut schema = Schema::default();
        schema.declare("K", 2, 1);
        let mut spec = DcdsSpec { schema, ..Default::default() };
        spec.services.insert("f".into(), 1);
        spec.add_action(Action {
            name: "mk".into(),
            params: vec![],
            effects: vec![EffectSpec {
                query: Query::True,
                head: vec![
                    ("K".into(), vec![ETerm::Const(s("k")), ETerm::Const(s("a"))]),
                    (
                        "K".into(),
                        vec![
                            ETerm::Const(s("k")),
                            ETerm::Call { service: "f".into(), args: vec![] },
                        ],
                    ),
                ],
            }],
        });
        let mut oracle = DomainOracle { domain: vec![s("a"), s("b")] };
        let out =
            apply_action(&spec, &DbInstance::default(), "mk", &Binding::new(), &mut oracle)
                .unwrap();
        // f() = a collapses to one fact; f() = b violates the key.
        assert_eq!(out.successors.len(), 1);
        assert_eq!(out.discarded.len(), 1);
        assert_eq!(out.discarded[0].rel, "K");
    }

    #[test]
    fn negated_lt_selects_the_least() {
        let mut db = DbInstance::default();
        for id in [4u64, 2, 7] {
            db.insert("free", vec![Value::Id(crate::value::InstanceId(id))]);
        }
        let q = Query::and(vec![
            Query::atom("free", vec![QTerm::var("c")]),
            Query::not(Query::and(vec![
                Query::atom("free", vec![QTerm::var("d")]),
                Query::Cmp { lhs: QTerm::var("d"), op: QCmp::Lt, rhs: QTerm::var("c") },
            ])),
        ]);
        let out = eval(&db, &q, &Binding::new());
        assert_eq!(out.len(), 1);
        assert_eq!(out[0]["c"], Value::Id(crate::value::InstanceId(2)));
    }

    #[test]
    fn validation_catches_structural_mistakes() {
        let mut spec = DcdsSpec { schema: two_rel_schema(), ..Default::default() };
        spec.add_action(Action {
            name: "bad".into(),
            params: vec![],
            effects: vec![EffectSpec {
                query: Query::True,
                head: vec![("S".into(), vec![ETerm::Var("ghost".into())])],
            }],
        });
        spec.ca_rules.push(CaRule { query: Query::True, action: "bad".into() });
        assert!(matches!(spec.validate(), Err(DcdsError::UnboundParam { .. })));

        let mut spec = DcdsSpec { schema: two_rel_schema(), ..Default::default() };
        spec.add_action(Action {
            name: "a".into(),
            params: vec!["p".into()],
            effects: vec![],
        });
        spec.ca_rules.push(CaRule { query: Query::True, action: "a".into() });
        assert!(matches!(spec.validate(), Err(DcdsError::UnboundParam { .. })));
    }

    #[test]
    fn spec_json_roundtrips() {
        let mut spec = DcdsSpec { schema: two_rel_schema(), ..Default::default() };
        spec.services.insert("f".into(), 1);
        spec.add_action(Action {
            name: "mk".into(),
            params: vec!["p".into()],
            effects: vec![EffectSpec {
                query: Query::and(vec![
                    Query::atom("R", vec![QTerm::var("p"), QTerm::var("y")]),
                    Query::not(Query::atom("S", vec![QTerm::var("y")])),
                ]),
                head: vec![("S".into(), vec![ETerm::Var("y".into())])],
            }],
        });
        spec.ca_rules.push(CaRule {
            query: Query::atom("R", vec![QTerm::var("p"), QTerm::var("p")]),
            action: "mk".into(),
        });
        spec.initial.insert("R", vec![s("a"), s("a")]);
        let text = serde_json::to_string_pretty(&spec).unwrap();
        let back: DcdsSpec = serde_json::from_str(&text).unwrap();
        assert_eq!(spec, back);
    }

    // ---- evaluator equivalence ------------------------------------------

    fn val_strategy() -> impl Strategy<Value = Value> {
        prop_oneof![
            Just(Value::Null),
            Just(Value::Bool(true)),
            Just(s("a")),
            Just(s("b")),
            Just(s("c")),
        ]
    }

    fn db_strategy() -> impl Strategy<Value = DbInstance> {
        let rows_r = prop::collection::btree_set(prop::collection::vec(val_strategy(), 2), 0..5);
        let rows_s = prop::collection::btree_set(prop::collection::vec(val_strategy(), 1), 0..4);
        (rows_r, rows_s).prop_map(|(r, sv)| DbInstance {
            facts: [("R".to_string(), r), ("S".to_string(), sv)].into(),
        })
    }

    fn kernel_strategy() -> impl Strategy<Value = Query> {
        let arg = prop_oneof![
            val_strategy().prop_map(QTerm::Const),
            prop::sample::select(vec!["x", "y", "z"]).prop_map(QTerm::var),
        ];
        prop_oneof![
            (arg.clone(), arg.clone()).prop_map(|(a, b)| Query::atom("R", vec![a, b])),
            arg.prop_map(|a| Query::atom("S", vec![a])),
        ]
    }

    /// Queries whose comparisons and negations only use variables the
    /// positive atoms before them bind, the shape the evaluator requires.
    fn query_strategy() -> impl Strategy<Value = Query> {
        prop::collection::vec(kernel_strategy(), 1..3).prop_flat_map(|kernels| {
            let bound: Vec<String> = kernels
                .iter()
                .flat_map(|k| k.vars().into_iter().map(String::from).collect::<Vec<_>>())
                .collect();
            let bterm = if bound.is_empty() {
                val_strategy().prop_map(QTerm::Const).boxed()
            } else {
                prop_oneof![
                    val_strategy().prop_map(QTerm::Const),
                    prop::sample::select(bound).prop_map(QTerm::Var),
                ]
                .boxed()
            };
            let cmp = (
                bterm.clone(),
                prop::sample::select(vec![QCmp::Eq, QCmp::Ne, QCmp::Lt]),
                bterm.clone(),
            )
                .prop_map(|(lhs, op, rhs)| Query::Cmp { lhs, op, rhs });
            let natom = prop_oneof![
                (bterm.clone(), bterm.clone())
                    .prop_map(|(a, b)| Query::not(Query::atom("R", vec![a, b]))),
                bterm.clone().prop_map(|a| Query::not(Query::atom("S", vec![a]))),
            ];
            let or_filter = prop::collection::vec(cmp.clone(), 1..3).prop_map(Query::Or);
            let filter = prop_oneof![cmp, natom, or_filter];
            prop::collection::vec(filter, 0..3).prop_map(move |filters| {
                let mut parts = kernels.clone();
                parts.extend(filters);
                Query::And(parts)
            })
        })
    }

    proptest! {
        #[test]
        fn evaluator_matches_naive_reference(db in db_strategy(), q in query_strategy()) {
            let got: BTreeSet<Binding> = eval(&db, &q, &Binding::new()).into_iter().collect();
            let want: BTreeSet<Binding> = naive_eval(&db, &q).into_iter().collect();
            prop_assert_eq!(got, want);
        }
    }
}
