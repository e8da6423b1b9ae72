//! Compilation of a model's lifecycle into Prerequisite-Antecedent-Consequent
//! rules plus the stratification order that both the engine and the
//! relational translation consume.
//!
//! Rule templates, derived per construct in declaration order:
//!
//! * T1: a guard sentry opens its stage (stage closed, parent open).
//! * T2: an achieving sentry achieves its milestone (stage open, milestone
//!   not yet achieved).
//! * T3: achieving a milestone closes its stage.
//! * T4: opening a stage invalidates each of its milestones.
//! * T5: an invalidating sentry invalidates its milestone.
//! * T6: opening an atomic stage dispatches its task's service call.
//!
//! Payload incorporation is not a rule: every incoming event (one-way or
//! task return) writes its payload before micro-steps run, so rules never
//! write data attributes and the dependency graph only tracks status writes
//! and internal events.
//!
//! The firing order is a topological sort of the dependency graph with a
//! deterministic tie-break, so every run of every tool sees the same order.

use crate::model::{
    Condition, EventRef, GsmModel, Sentry, StageBody, StatusAttr, StatusRead,
};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use thiserror::Error;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum RuleKind {
    StageOpen { stage: String, guard: usize },
    MilestoneAchieve { milestone: String },
    StageClose { stage: String, milestone: String },
    MilestoneInvalidateOnOpen { milestone: String, stage: String },
    MilestoneInvalidateOnSentry { milestone: String, sentry: usize },
    TaskDispatch { task: String, stage: String },
}

/// What makes a rule relevant to a B-step.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Trigger {
    /// Condition-only sentry: relevant in every B-step.
    Always,
    External(String),
    TaskReturn(String),
    /// An internal status-change event emitted earlier in the same B-step.
    Internal { target: StatusAttr, to: bool },
}

#[derive(Clone, Debug)]
pub struct PacRule {
    pub id: usize,
    pub artifact: String,
    /// Depth of the stage the rule is anchored at; tie-break component.
    pub depth: usize,
    pub kind: RuleKind,
    pub trigger: Trigger,
    /// Stages that must be open at firing time (owner stage, parent stage).
    pub requires_open: Vec<String>,
    /// Stages that must be closed (the stage a T1 is about to open).
    pub requires_closed: Vec<String>,
    /// Milestone values required at firing time.
    pub requires_milestone: Vec<(String, bool)>,
    /// Sentry condition, evaluated on the current pre-snapshot.
    pub condition: Option<Condition>,
    /// The single status change this rule performs, if any.
    pub change: Option<(StatusAttr, bool)>,
    /// Task whose service call is dispatched when this rule fires (T6).
    pub dispatch: Option<String>,
}

impl PacRule {
    pub fn label(&self) -> String {
        let a = &self.artifact;
        match &self.kind {
            RuleKind::StageOpen { stage, guard } => {
                format!("T1 {a}: open `{stage}` (guard {})", guard + 1)
            }
            RuleKind::MilestoneAchieve { milestone } => {
                format!("T2 {a}: achieve `{milestone}`")
            }
            RuleKind::StageClose { stage, milestone } => {
                format!("T3 {a}: close `{stage}` on +`{milestone}`")
            }
            RuleKind::MilestoneInvalidateOnOpen { milestone, stage } => {
                format!("T4 {a}: invalidate `{milestone}` on +`{stage}`")
            }
            RuleKind::MilestoneInvalidateOnSentry { milestone, sentry } => {
                format!("T5 {a}: invalidate `{milestone}` (sentry {})", sentry + 1)
            }
            RuleKind::TaskDispatch { task, stage } => {
                format!("T6 {a}: dispatch `{task}` on +`{stage}`")
            }
        }
    }

    /// Status attributes this rule's antecedent needs at a given value,
    /// excluding its own change target; these are the enabling reads the
    /// stratification tracks.
    fn enabling_reads(&self) -> Vec<(StatusAttr, bool)> {
        let own = self.change.as_ref().map(|(t, _)| t);
        let mut out = Vec::new();
        for s in &self.requires_open {
            out.push((StatusAttr::Stage(s.clone()), true));
        }
        for s in &self.requires_closed {
            out.push((StatusAttr::Stage(s.clone()), false));
        }
        for (m, v) in &self.requires_milestone {
            out.push((StatusAttr::Milestone(m.clone()), *v));
        }
        if let Some(c) = &self.condition {
            for (read, polarity) in c.status_reads() {
                let attr = match read {
                    StatusRead::Stage(s) => StatusAttr::Stage(s),
                    StatusRead::Milestone(m) => StatusAttr::Milestone(m),
                };
                out.push((attr, polarity));
            }
        }
        out.retain(|(attr, _)| Some(attr) != own);
        out
    }
}

fn sentry_trigger(s: &Sentry) -> Trigger {
    match &s.on_event {
        None => Trigger::Always,
        Some(EventRef::External(e)) => Trigger::External(e.clone()),
        Some(EventRef::TaskReturn(t)) => Trigger::TaskReturn(t.clone()),
        Some(EventRef::Internal { target, to }) => Trigger::Internal {
            target: target.clone(),
            to: *to,
        },
    }
}

/// Derive the rule list in the canonical order: artifacts as declared,
/// stages depth-first, and per stage T1 (guards in order), then per
/// milestone T2, T3, T4, T5 (invalidating sentries in order), then T6.
pub fn derive(model: &GsmModel) -> Vec<PacRule> {
    let mut rules = Vec::new();
    for a in &model.artifacts {
        for si in a.stages_rec() {
            let stage = si.stage;
            for (gi, g) in stage.guards.iter().enumerate() {
                let mut requires_open = Vec::new();
                if let Some(p) = si.parent {
                    requires_open.push(p.to_string());
                }
                rules.push(PacRule {
                    id: rules.len(),
                    artifact: a.name.clone(),
                    depth: si.depth,
                    kind: RuleKind::StageOpen { stage: stage.name.clone(), guard: gi },
                    trigger: sentry_trigger(g),
                    requires_open,
                    requires_closed: vec![stage.name.clone()],
                    requires_milestone: vec![],
                    condition: g.condition.clone(),
                    change: Some((StatusAttr::Stage(stage.name.clone()), true)),
                    dispatch: None,
                });
            }
            for m in &stage.milestones {
                rules.push(PacRule {
                    id: rules.len(),
                    artifact: a.name.clone(),
                    depth: si.depth,
                    kind: RuleKind::MilestoneAchieve { milestone: m.name.clone() },
                    trigger: sentry_trigger(&m.achieving),
                    requires_open: vec![stage.name.clone()],
                    requires_closed: vec![],
                    requires_milestone: vec![(m.name.clone(), false)],
                    condition: m.achieving.condition.clone(),
                    change: Some((StatusAttr::Milestone(m.name.clone()), true)),
                    dispatch: None,
                });
                rules.push(PacRule {
                    id: rules.len(),
                    artifact: a.name.clone(),
                    depth: si.depth,
                    kind: RuleKind::StageClose {
                        stage: stage.name.clone(),
                        milestone: m.name.clone(),
                    },
                    trigger: Trigger::Internal {
                        target: StatusAttr::Milestone(m.name.clone()),
                        to: true,
                    },
                    requires_open: vec![stage.name.clone()],
                    requires_closed: vec![],
                    requires_milestone: vec![],
                    condition: None,
                    change: Some((StatusAttr::Stage(stage.name.clone()), false)),
                    dispatch: None,
                });
                rules.push(PacRule {
                    id: rules.len(),
                    artifact: a.name.clone(),
                    depth: si.depth,
                    kind: RuleKind::MilestoneInvalidateOnOpen {
                        milestone: m.name.clone(),
                        stage: stage.name.clone(),
                    },
                    trigger: Trigger::Internal {
                        target: StatusAttr::Stage(stage.name.clone()),
                        to: true,
                    },
                    requires_open: vec![],
                    requires_closed: vec![],
                    requires_milestone: vec![(m.name.clone(), true)],
                    condition: None,
                    change: Some((StatusAttr::Milestone(m.name.clone()), false)),
                    dispatch: None,
                });
                for (vi, s) in m.invalidating.iter().enumerate() {
                    rules.push(PacRule {
                        id: rules.len(),
                        artifact: a.name.clone(),
                        depth: si.depth,
                        kind: RuleKind::MilestoneInvalidateOnSentry {
                            milestone: m.name.clone(),
                            sentry: vi,
                        },
                        trigger: sentry_trigger(s),
                        requires_open: vec![],
                        requires_closed: vec![],
                        requires_milestone: vec![(m.name.clone(), true)],
                        condition: s.condition.clone(),
                        change: Some((StatusAttr::Milestone(m.name.clone()), false)),
                        dispatch: None,
                    });
                }
            }
            if let StageBody::Atomic { task: Some(t) } = &stage.body {
                rules.push(PacRule {
                    id: rules.len(),
                    artifact: a.name.clone(),
                    depth: si.depth,
                    kind: RuleKind::TaskDispatch {
                        task: t.name.clone(),
                        stage: stage.name.clone(),
                    },
                    trigger: Trigger::Internal {
                        target: StatusAttr::Stage(stage.name.clone()),
                        to: true,
                    },
                    requires_open: vec![stage.name.clone()],
                    requires_closed: vec![],
                    requires_milestone: vec![],
                    condition: None,
                    change: None,
                    dispatch: Some(t.name.clone()),
                });
            }
        }
    }
    rules
}

// ==== relevance ===========================================================

/// External triggers that can transitively lead to a rule firing. `All`
/// marks condition-only rules, relevant in every B-step.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Relevance {
    All,
    /// Event names; task returns appear as `task.return`.
    Events(BTreeSet<String>),
}

impl Relevance {
    pub fn admits(&self, event: &str) -> bool {
        match self {
            Relevance::All => true,
            Relevance::Events(es) => es.contains(event),
        }
    }

    fn intersects(&self, other: &Relevance) -> bool {
        match (self, other) {
            (Relevance::All, _) | (_, Relevance::All) => true,
            (Relevance::Events(a), Relevance::Events(b)) => !a.is_disjoint(b),
        }
    }
}

/// Fixpoint of trigger propagation: a rule triggered by an internal event is
/// reachable from every external trigger of every rule emitting that event.
pub fn relevance(rules: &[PacRule]) -> Vec<Relevance> {
    let mut rel: Vec<Relevance> = rules
        .iter()
        .map(|r| match &r.trigger {
            Trigger::Always => Relevance::All,
            Trigger::External(e) => Relevance::Events(BTreeSet::from([e.clone()])),
            Trigger::TaskReturn(t) => {
                Relevance::Events(BTreeSet::from([crate::model::return_event(t)]))
            }
            Trigger::Internal { .. } => Relevance::Events(BTreeSet::new()),
        })
        .collect();

    loop {
        let mut changed = false;
        for (i, r) in rules.iter().enumerate() {
            let Trigger::Internal { target, to } = &r.trigger else {
                continue;
            };
            let mut add: Option<Relevance> = None;
            for (j, e) in rules.iter().enumerate() {
                if e.artifact != r.artifact {
                    continue;
                }
                if e.change.as_ref() != Some(&(target.clone(), *to)) {
                    continue;
                }
                match (&rel[j], add.take()) {
                    (Relevance::All, _) => add = Some(Relevance::All),
                    (_, Some(Relevance::All)) => add = Some(Relevance::All),
                    (Relevance::Events(es), Some(Relevance::Events(mut acc))) => {
                        acc.extend(es.iter().cloned());
                        add = Some(Relevance::Events(acc));
                    }
                    (Relevance::Events(es), None) => add = Some(Relevance::Events(es.clone())),
                }
            }
            let Some(add) = add else { continue };
            let merged = match (&rel[i], &add) {
                (Relevance::All, _) => Relevance::All,
                (_, Relevance::All) => Relevance::All,
                (Relevance::Events(a), Relevance::Events(b)) => {
                    Relevance::Events(a.union(b).cloned().collect())
                }
            };
            if merged != rel[i] {
                rel[i] = merged;
                changed = true;
            }
        }
        if !changed {
            return rel;
        }
    }
}

// ==== stratification ======================================================

#[derive(Debug, Error)]
#[error("lifecycle rules are not stratifiable; dependency cycle:\n{}",
    .cycle.iter().map(|l| format!("  {l}")).collect::<Vec<_>>().join("\n"))]
pub struct CycleError {
    pub cycle: Vec<String>,
}

/// Whether rule `i` can fire in some B-step before the status attribute
/// `avoid` has toggled. True when `i`'s trigger is reachable, in the
/// internal-event graph, from a step-initial trigger without passing any
/// rule that toggles `avoid`. When false, toggle-once makes any write of
/// `i` useless to rules changing `avoid`: they are already spent.
fn fires_before_toggle(
    rules: &[PacRule],
    e_preds: &[Vec<usize>],
    i: usize,
    avoid: &(String, StatusAttr),
) -> bool {
    let toggles_avoid = |r: &PacRule| {
        r.artifact == avoid.0 && matches!(&r.change, Some((t, _)) if *t == avoid.1)
    };
    let mut seen = vec![false; rules.len()];
    let mut stack = vec![i];
    while let Some(k) = stack.pop() {
        if seen[k] {
            continue;
        }
        seen[k] = true;
        if toggles_avoid(&rules[k]) {
            continue;
        }
        if !matches!(rules[k].trigger, Trigger::Internal { .. }) {
            return true;
        }
        stack.extend(e_preds[k].iter().copied());
    }
    false
}

/// Dependency edges: `i -> j` when j consumes the internal event i emits, or
/// j's antecedent needs a status value i establishes and i can still run
/// before j's own toggle. Only pairs that can fire in the same B-step are
/// connected.
pub fn edges(rules: &[PacRule], rel: &[Relevance]) -> Vec<BTreeSet<usize>> {
    // Internal-event predecessors: emitters of each rule's trigger.
    let mut e_preds: Vec<Vec<usize>> = vec![Vec::new(); rules.len()];
    for (j, r) in rules.iter().enumerate() {
        let Trigger::Internal { target, to } = &r.trigger else {
            continue;
        };
        for (i, e) in rules.iter().enumerate() {
            if e.artifact == r.artifact && e.change.as_ref() == Some(&(target.clone(), *to)) {
                e_preds[j].push(i);
            }
        }
    }

    let mut out: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); rules.len()];
    for (j, r) in rules.iter().enumerate() {
        let reads = r.enabling_reads();
        for (i, e) in rules.iter().enumerate() {
            if i == j || e.artifact != r.artifact {
                continue;
            }
            let Some(change) = &e.change else { continue };
            if !rel[i].intersects(&rel[j]) {
                continue;
            }
            let consumes = matches!(
                &r.trigger,
                Trigger::Internal { target, to } if (target, to) == (&change.0, &change.1)
            );
            let enables = reads.iter().any(|(attr, v)| (attr, v) == (&change.0, &change.1))
                && match &r.change {
                    Some((target, _)) => fires_before_toggle(
                        rules,
                        &e_preds,
                        i,
                        &(r.artifact.clone(), target.clone()),
                    ),
                    None => true,
                };
            if consumes || enables {
                out[i].insert(j);
            }
        }
    }
    out
}

/// The total firing order: rule ids, most-preceding first.
#[derive(Clone, Debug)]
pub struct RuleOrder {
    pub order: Vec<usize>,
    rank: Vec<usize>,
}

impl RuleOrder {
    pub fn rank(&self, rule: usize) -> usize {
        self.rank[rule]
    }
}

/// Kahn's algorithm over the dependency graph; ready rules are taken in
/// (artifact name, stage depth, rule id) order so the result is canonical.
pub fn stratify(rules: &[PacRule], rel: &[Relevance]) -> Result<RuleOrder, CycleError> {
    let succ = edges(rules, rel);
    let mut indeg = vec![0usize; rules.len()];
    for s in &succ {
        for &j in s {
            indeg[j] += 1;
        }
    }

    let key = |i: usize| (rules[i].artifact.clone(), rules[i].depth, i);
    let mut ready: BTreeSet<(String, usize, usize)> = (0..rules.len())
        .filter(|&i| indeg[i] == 0)
        .map(key)
        .collect();

    let mut order = Vec::with_capacity(rules.len());
    while let Some(k) = ready.iter().next().cloned() {
        ready.remove(&k);
        let i = k.2;
        order.push(i);
        for &j in &succ[i] {
            indeg[j] -= 1;
            if indeg[j] == 0 {
                ready.insert(key(j));
            }
        }
    }

    if order.len() != rules.len() {
        // Every stuck rule keeps a stuck predecessor, so walking
        // predecessors from any stuck rule must revisit one: that loop is
        // the reported cycle (re-reversed into edge direction).
        let stuck: BTreeSet<usize> = (0..rules.len())
            .filter(|i| indeg[*i] > 0)
            .collect();
        let mut preds: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for &i in &stuck {
            for &j in &succ[i] {
                if stuck.contains(&j) {
                    preds.entry(j).or_default().push(i);
                }
            }
        }
        let start = *stuck.iter().next().unwrap();
        let mut walk = vec![start];
        let mut cur = start;
        let cycle = loop {
            let prev = preds[&cur][0];
            if let Some(pos) = walk.iter().position(|&r| r == prev) {
                let mut c = walk[pos..].to_vec();
                c.reverse();
                break c;
            }
            walk.push(prev);
            cur = prev;
        };
        return Err(CycleError {
            cycle: cycle.iter().map(|&i| rules[i].label()).collect(),
        });
    }

    let mut rank = vec![0usize; rules.len()];
    for (pos, &i) in order.iter().enumerate() {
        rank[i] = pos;
    }
    Ok(RuleOrder { order, rank })
}

// ==== compiled bundle =====================================================

/// Rules, firing order and per-rule relevance for one model; the unit the
/// engine and the translation both consume.
#[derive(Debug)]
pub struct RuleSet {
    pub rules: Vec<PacRule>,
    pub order: RuleOrder,
    pub relevance: Vec<Relevance>,
}

impl RuleSet {
    pub fn compile(model: &GsmModel) -> Result<RuleSet, CycleError> {
        let rules = derive(model);
        let rel = relevance(&rules);
        let order = stratify(&rules, &rel)?;
        Ok(RuleSet { rules, order, relevance: rel })
    }

    /// Rules in firing order.
    pub fn ordered(&self) -> impl Iterator<Item = &PacRule> {
        self.order.order.iter().map(|&i| &self.rules[i])
    }

    pub fn relevant_to(&self, rule: usize, event: &str) -> bool {
        self.relevance[rule].admits(event)
    }
}

impl fmt::Display for RuleSet {
    /// One block per rule, in firing order, with P/A/C parts spelled out.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (pos, r) in self.ordered().enumerate() {
            writeln!(f, "[{pos}] {}", r.label())?;
            let p = match &self.relevance[r.id] {
                Relevance::All => "any incoming event".to_string(),
                Relevance::Events(es) => {
                    let mut v: Vec<&str> = es.iter().map(|s| s.as_str()).collect();
                    v.sort_unstable();
                    v.join(", ")
                }
            };
            writeln!(f, "    P: relevant to: {p}; fires at most once per step")?;
            let mut parts = Vec::new();
            match &r.trigger {
                Trigger::Always => {}
                Trigger::External(e) => parts.push(format!("event `{e}`")),
                Trigger::TaskReturn(t) => parts.push(format!("return of `{t}`")),
                Trigger::Internal { target, to } => {
                    parts.push(format!("{}{target}", if *to { '+' } else { '-' }))
                }
            }
            for s in &r.requires_open {
                parts.push(format!("open `{s}`"));
            }
            for s in &r.requires_closed {
                parts.push(format!("closed `{s}`"));
            }
            for (m, v) in &r.requires_milestone {
                parts.push(format!("`{m}` {}", if *v { "achieved" } else { "not achieved" }));
            }
            if let Some(c) = &r.condition {
                parts.push(format!("condition: {c}"));
            }
            writeln!(f, "    A: {}", if parts.is_empty() { "true".into() } else { parts.join("; ") })?;
            let mut effs = Vec::new();
            if let Some((attr, v)) = &r.change {
                effs.push(format!("{attr} := {v}, emit {}{attr}", if *v { '+' } else { '-' }));
            }
            if let Some(t) = &r.dispatch {
                effs.push(format!("dispatch service call `{t}`"));
            }
            writeln!(f, "    C: {}", effs.join("; "))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::parser;

    fn compile(src: &str) -> RuleSet {
        let m = parser::parse(src, "t").unwrap();
        m.validate().unwrap();
        RuleSet::compile(&m).unwrap()
    }

    #[test]
    fn tasked_stage_yields_five_rules() {
        let rs = compile(
            r#"
model demo
event go { }
artifact A {
  attributes { x }
  stage s {
    guard on go
    milestone m { achieved on t.return }
    task t { returns x set self.x := ret.x }
  }
}
"#,
        );
        assert_eq!(rs.rules.len(), 5);
        let kinds: Vec<&str> = rs
            .rules
            .iter()
            .map(|r| match r.kind {
                RuleKind::StageOpen { .. } => "T1",
                RuleKind::MilestoneAchieve { .. } => "T2",
                RuleKind::StageClose { .. } => "T3",
                RuleKind::MilestoneInvalidateOnOpen { .. } => "T4",
                RuleKind::MilestoneInvalidateOnSentry { .. } => "T5",
                RuleKind::TaskDispatch { .. } => "T6",
            })
            .collect();
        assert_eq!(kinds, vec!["T1", "T2", "T3", "T4", "T6"]);
    }

    #[test]
    fn lifecycle_free_artifact_yields_no_rules() {
        let m = parser::parse(
            "model demo\nevent go { }\nartifact A { attributes { x } }\n",
            "t",
        )
        .unwrap();
        assert!(derive(&m).is_empty());
    }

    #[test]
    fn achieve_precedes_dependent_open() {
        // A guard on +m must fire after the rule achieving m.
        let rs = compile(
            r#"
model demo
event go { }
artifact A {
  attributes { x }
  stage s1 {
    guard on go
    milestone m1 { achieved on go if x == "1" }
  }
  stage s2 {
    guard on +m1
  }
}
"#,
        );
        let achieve = rs.rules.iter().find(|r| matches!(&r.kind, RuleKind::MilestoneAchieve { milestone } if milestone == "m1")).unwrap();
        let open2 = rs.rules.iter().find(|r| matches!(&r.kind, RuleKind::StageOpen { stage, .. } if stage == "s2")).unwrap();
        assert!(rs.order.rank(achieve.id) < rs.order.rank(open2.id));
    }

    #[test]
    fn mutual_guard_cycle_is_rejected() {
        let m = parser::parse(
            r#"
model demo
event go { }
artifact A {
  attributes { x }
  stage s1 { guard on +s2 guard on go }
  stage s2 { guard on +s1 guard on go }
}
"#,
            "t",
        )
        .unwrap();
        let rules = derive(&m);
        let rel = relevance(&rules);
        let err = stratify(&rules, &rel).unwrap_err();
        assert_eq!(err.cycle.len(), 2, "{err}");
    }

    #[test]
    fn order_is_a_linear_extension() {
        let rs = compile(
            r#"
model demo
event go { }
event stop { }
artifact A {
  attributes { x }
  stage outer {
    guard on go
    milestone done { achieved on +innerDone invalidated on stop }
    stage inner {
      guard on +outer if x == "1"
      milestone innerDone { achieved on t.return }
      task t { returns x set self.x := ret.x }
    }
  }
}
"#,
        );
        let rel = relevance(&rs.rules);
        let succ = edges(&rs.rules, &rel);
        for (i, js) in succ.iter().enumerate() {
            for &j in js {
                assert!(
                    rs.order.rank(i) < rs.order.rank(j),
                    "edge {} -> {} violated",
                    rs.rules[i].label(),
                    rs.rules[j].label()
                );
            }
        }
    }

    #[test]
    fn relevance_propagates_through_internal_events() {
        let rs = compile(
            r#"
model demo
event go { }
event other { }
artifact A {
  attributes { x }
  stage s1 {
    guard on go
    milestone m1 { achieved on go }
  }
  stage s2 {
    guard on +m1
  }
}
"#,
        );
        let open2 = rs.rules.iter().find(|r| matches!(&r.kind, RuleKind::StageOpen { stage, .. } if stage == "s2")).unwrap();
        assert!(rs.relevant_to(open2.id, "go"));
        assert!(!rs.relevant_to(open2.id, "other"));
    }

    #[test]
    fn condition_only_sentry_is_always_relevant() {
        let rs = compile(
            r#"
model demo
event go { }
artifact A {
  attributes { x }
  stage s {
    guard on go
    milestone m { achieved if x == "1" }
  }
}
"#,
        );
        let achieve = rs.rules.iter().find(|r| matches!(r.kind, RuleKind::MilestoneAchieve { .. })).unwrap();
        assert_eq!(rs.relevance[achieve.id], Relevance::All);
    }

    #[test]
    fn turing_encoding_stratifies() {
        let m = crate::model::turing::encode(&crate::model::turing::halting_example()).unwrap();
        let rs = RuleSet::compile(&m).unwrap();
        // Closing Transition on +Halt must precede the shift stage's open
        // rule, so a halt abandons the in-flight shift.
        let close_on_halt = rs.rules.iter().find(|r| matches!(&r.kind, RuleKind::StageClose { milestone, .. } if milestone == "Halt")).unwrap();
        let open_shift = rs.rules.iter().find(|r| matches!(&r.kind, RuleKind::StageOpen { stage, .. } if stage == "RightShift")).unwrap();
        assert!(rs.order.rank(close_on_halt.id) < rs.order.rank(open_shift.id));
    }
}
