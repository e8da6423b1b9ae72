//! The sentry condition language: boolean combinations of equality atoms
//! over attribute terms, status tests, and child-existence tests.
//!
//! There is no arithmetic and no built-in ordering; terms denote values that
//! are only compared for equality. Attribute paths may dereference id-ref
//! attributes (`curCell.value`). A broken dereference (null or dangling
//! reference before the last segment) leaves the term undefined, and any
//! atom over an undefined term is false; `isnull t` tests the value at the
//! end of an intact path. Assignments instead see a plain null for broken
//! paths (`eval_term`).

use crate::model::snapshot::Snapshot;
use crate::value::{InstanceId, Value};
use serde::{Deserialize, Serialize};
use std::fmt;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Condition {
    True,
    And(Vec<Condition>),
    Or(Vec<Condition>),
    Not(Box<Condition>),
    Atom(Atom),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Atom {
    Cmp { lhs: Term, op: CmpOp, rhs: Term },
    IsNull(Term),
    NotNull(Term),
    /// Stage of the instance under evaluation is open.
    StageOpen(String),
    /// Milestone of the instance under evaluation is achieved.
    MilestoneAchieved(String),
    /// Some live child instance of the named type, linked to this instance,
    /// satisfies the (optional) inner condition. Paths inside the inner
    /// condition resolve against the child.
    ExistsChild {
        child: String,
        cond: Option<Box<Condition>>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CmpOp {
    Eq,
    Ne,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Term {
    Const(Value),
    /// Dotted attribute path on the instance under evaluation; every segment
    /// but the last must be an id-ref attribute.
    Path(Vec<String>),
    /// The id of the instance under evaluation.
    SelfId,
}

impl Condition {
    pub fn and(parts: Vec<Condition>) -> Condition {
        match parts.len() {
            0 => Condition::True,
            1 => parts.into_iter().next().unwrap(),
            _ => Condition::And(parts),
        }
    }

    pub fn not(c: Condition) -> Condition {
        Condition::Not(Box::new(c))
    }

    /// Evaluate against `snapshot` with `self_id` as the instance under
    /// evaluation. Classical two-valued semantics; null propagates through
    /// terms, and `null == null` holds.
    pub fn eval(&self, snapshot: &Snapshot, self_id: InstanceId) -> bool {
        match self {
            Condition::True => true,
            Condition::And(cs) => cs.iter().all(|c| c.eval(snapshot, self_id)),
            Condition::Or(cs) => cs.iter().any(|c| c.eval(snapshot, self_id)),
            Condition::Not(c) => !c.eval(snapshot, self_id),
            Condition::Atom(a) => a.eval(snapshot, self_id),
        }
    }

    /// All atoms, in syntactic order.
    pub fn atoms(&self) -> Vec<&Atom> {
        let mut out = Vec::new();
        self.collect_atoms(&mut out);
        out
    }

    fn collect_atoms<'a>(&'a self, out: &mut Vec<&'a Atom>) {
        match self {
            Condition::True => {}
            Condition::And(cs) | Condition::Or(cs) => {
                for c in cs {
                    c.collect_atoms(out);
                }
            }
            Condition::Not(c) => c.collect_atoms(out),
            Condition::Atom(a) => out.push(a),
        }
    }

    /// Status atoms with the polarity they are tested at: `(attr, value)`
    /// meaning the condition can only become true-er when the status attribute
    /// takes `value`. Used by the rule dependency analysis.
    pub fn status_reads(&self) -> Vec<(StatusRead, bool)> {
        let mut out = Vec::new();
        self.status_reads_into(true, &mut out);
        out
    }

    fn status_reads_into(&self, polarity: bool, out: &mut Vec<(StatusRead, bool)>) {
        match self {
            Condition::True => {}
            Condition::And(cs) | Condition::Or(cs) => {
                for c in cs {
                    c.status_reads_into(polarity, out);
                }
            }
            Condition::Not(c) => c.status_reads_into(!polarity, out),
            Condition::Atom(Atom::StageOpen(s)) => out.push((StatusRead::Stage(s.clone()), polarity)),
            Condition::Atom(Atom::MilestoneAchieved(m)) => {
                out.push((StatusRead::Milestone(m.clone()), polarity))
            }
            Condition::Atom(_) => {}
        }
    }

    /// Attribute names and child types the condition reads (any polarity).
    pub fn data_reads(&self) -> (Vec<String>, Vec<String>) {
        let mut attrs = Vec::new();
        let mut children = Vec::new();
        for atom in self.atoms() {
            match atom {
                Atom::Cmp { lhs, rhs, .. } => {
                    term_attrs(lhs, &mut attrs);
                    term_attrs(rhs, &mut attrs);
                }
                Atom::IsNull(t) | Atom::NotNull(t) => term_attrs(t, &mut attrs),
                Atom::ExistsChild { child, cond } => {
                    children.push(child.clone());
                    if let Some(c) = cond {
                        let (mut a, mut ch) = c.data_reads();
                        attrs.append(&mut a);
                        children.append(&mut ch);
                    }
                }
                _ => {}
            }
        }
        attrs.sort();
        attrs.dedup();
        children.sort();
        children.dedup();
        (attrs, children)
    }
}

/// A status attribute read, named relative to the owning artifact type.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum StatusRead {
    Stage(String),
    Milestone(String),
}

fn term_attrs(t: &Term, out: &mut Vec<String>) {
    if let Term::Path(p) = t {
        out.extend(p.iter().cloned());
    }
}

impl Atom {
    fn eval(&self, snapshot: &Snapshot, self_id: InstanceId) -> bool {
        match self {
            Atom::Cmp { lhs, op, rhs } => {
                let (Some(l), Some(r)) = (
                    try_eval_term(lhs, snapshot, self_id),
                    try_eval_term(rhs, snapshot, self_id),
                ) else {
                    return false;
                };
                match op {
                    CmpOp::Eq => l == r,
                    CmpOp::Ne => l != r,
                }
            }
            Atom::IsNull(t) => {
                try_eval_term(t, snapshot, self_id).is_some_and(|v| v.is_null())
            }
            Atom::NotNull(t) => {
                try_eval_term(t, snapshot, self_id).is_some_and(|v| !v.is_null())
            }
            Atom::StageOpen(s) => snapshot
                .instances
                .get(&self_id)
                .and_then(|i| i.stages.get(s))
                .copied()
                .unwrap_or(false),
            Atom::MilestoneAchieved(m) => snapshot
                .instances
                .get(&self_id)
                .and_then(|i| i.milestones.get(m))
                .copied()
                .unwrap_or(false),
            Atom::ExistsChild { child, cond } => {
                snapshot.live_children(self_id, child).any(|(cid, _)| match cond {
                    None => true,
                    Some(c) => c.eval(snapshot, cid),
                })
            }
        }
    }
}

/// Term evaluation for assignments: a broken path collapses to null.
pub fn eval_term(t: &Term, snapshot: &Snapshot, self_id: InstanceId) -> Value {
    try_eval_term(t, snapshot, self_id).unwrap_or(Value::Null)
}

/// Term evaluation for atoms: `None` when a dereference before the last
/// segment hits null, a non-id, or a dead instance.
pub fn try_eval_term(t: &Term, snapshot: &Snapshot, self_id: InstanceId) -> Option<Value> {
    match t {
        Term::Const(v) => Some(v.clone()),
        Term::SelfId => Some(Value::Id(self_id)),
        Term::Path(path) => {
            let mut cur = self_id;
            for (i, seg) in path.iter().enumerate() {
                let inst = snapshot.instances.get(&cur)?;
                if inst.blank {
                    return None;
                }
                let v = inst.attrs.get(seg).cloned().unwrap_or(Value::Null);
                if i + 1 == path.len() {
                    return Some(v);
                }
                match v {
                    Value::Id(next) => cur = next,
                    _ => return None,
                }
            }
            Some(Value::Null)
        }
    }
}

// ==== display =============================================================

fn fmt_name(f: &mut fmt::Formatter<'_>, name: &str) -> fmt::Result {
    if name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') && !name.is_empty() {
        write!(f, "{name}")
    } else {
        write!(f, "{name:?}")
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Term::Const(Value::Str(s)) => write!(f, "{s:?}"),
            Term::Const(v) => write!(f, "{v}"),
            Term::SelfId => write!(f, "self"),
            Term::Path(p) => write!(f, "{}", p.join(".")),
        }
    }
}

impl fmt::Display for Atom {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Atom::Cmp { lhs, op, rhs } => {
                let op = match op {
                    CmpOp::Eq => "==",
                    CmpOp::Ne => "!=",
                };
                write!(f, "{lhs} {op} {rhs}")
            }
            Atom::IsNull(t) => write!(f, "isnull {t}"),
            Atom::NotNull(t) => write!(f, "notnull {t}"),
            Atom::StageOpen(s) => {
                write!(f, "open ")?;
                fmt_name(f, s)
            }
            Atom::MilestoneAchieved(m) => {
                write!(f, "achieved ")?;
                fmt_name(f, m)
            }
            Atom::ExistsChild { child, cond } => {
                write!(f, "exists ")?;
                fmt_name(f, child)?;
                if let Some(c) = cond {
                    write!(f, " where ({c})")?;
                }
                Ok(())
            }
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Condition::True => write!(f, "true"),
            Condition::And(cs) => {
                let parts: Vec<String> = cs.iter().map(maybe_paren).collect();
                write!(f, "{}", parts.join(" and "))
            }
            Condition::Or(cs) => {
                let parts: Vec<String> = cs.iter().map(maybe_paren).collect();
                write!(f, "{}", parts.join(" or "))
            }
            Condition::Not(c) => write!(f, "not {}", maybe_paren(c)),
            Condition::Atom(a) => write!(f, "{a}"),
        }
    }
}

fn maybe_paren(c: &Condition) -> String {
    match c {
        Condition::And(_) | Condition::Or(_) => format!("({c})"),
        _ => format!("{c}"),
    }
}
