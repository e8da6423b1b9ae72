//! Compilation of a model into the relational formalism: every micro-step
//! of the incremental semantics becomes one condition-action rule, so a
//! B-step is a deterministic chain of relational actions between unblocked
//! states.
//!
//! Relational layout per artifact type `A`: `att_A(id, attrs..., stages...,
//! milestones..., fr)` with one row per instance; `fr` marks pre-allocated
//! blank containers, so a live instance is a row with `fr = false`. Shared
//! bookkeeping: `block(id, flag)` marks the instance a B-step is running
//! at, `exec(id, x1..xc)` tracks per-rule eligibility with one column per
//! lifecycle rule, the `chg` tables carry the status changes of the running
//! B-step (doubling as the toggle-once guard), and per-event/per-task pools
//! buffer message payloads. Pools and change tables are dropped, not
//! copied, by the finalization action, so they are empty in every unblocked
//! state.
//!
//! The chain for one event at instance `i`: an injection action checks
//! deliverability, writes the payload (service calls), blocks `i`, and
//! initializes eligibility; one action per eligible rule fires or skips it
//! (the rule's antecedent lives in the effect queries, not in the
//! condition, so chain length never depends on what holds); a finalization
//! action unblocks. Instance bounding pre-seeds blank containers and turns
//! creation into claiming the least free container of the type.

use crate::dcds::{Action, CaRule, DbInstance, DcdsSpec, ETerm, EffectSpec, QCmp, QTerm, Query};
use crate::engine::{declared_types, ContainerConfig, ContainerLayout, EngineError};
use crate::model::{
    ArtifactShape, Assign, AssignTarget, AssignValue, Atom, AttrSort, CmpOp, Condition, GsmModel,
    Instance, ShapeMap, Snapshot, StatusAttr, Task, TaskKind, Term,
};
use crate::pac::{RuleSet, Trigger};
use crate::value::{InstanceId, Value};
use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TranslateError {
    #[error(transparent)]
    Container(#[from] EngineError),
    #[error("the state is blocked; filtering is defined on unblocked states")]
    Blocked,
    #[error("malformed relational state: {0}")]
    Malformed(String),
}

/// What a service call stands for, so exploration can pick sound values.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ServiceRole {
    /// Payload slot of a one-way event.
    Payload { event: String, slot: String },
    /// Return slot of a task.
    Return { task: String, slot: String },
    /// Identifier for an unbounded create task.
    FreshId { ty: String },
}

/// How model constructs map to relations, actions and services; everything
/// downstream (state filtering, exploration, reporting) reads the
/// translation through this.
#[derive(Clone, Debug)]
pub struct TranslationMap {
    pub model: GsmModel,
    pub shapes: ShapeMap,
    pub containers: Option<ContainerConfig>,
    /// Artifact type -> row relation.
    pub att: BTreeMap<String, String>,
    pub block: String,
    pub exec: String,
    pub rule_count: usize,
    /// (artifact type, status attribute) -> change table.
    pub chg: BTreeMap<(String, StatusAttr), String>,
    /// One-way event -> payload pool.
    pub msg: BTreeMap<String, String>,
    /// Task -> return payload pool.
    pub srv: BTreeMap<String, String>,
    /// Task -> outgoing call pool.
    pub out: BTreeMap<String, String>,
    /// Task -> pending-call relation. Pending calls are observable system
    /// state (they decide which returns are deliverable), not bookkeeping,
    /// so they are not part of `aux`; filtering still drops them because a
    /// snapshot holds no events.
    pub pend: BTreeMap<String, String>,
    /// Exactly: block, exec, the change tables, and the message pools.
    pub aux: BTreeSet<String>,
    /// Rule id -> action name.
    pub rule_actions: Vec<String>,
    pub rule_labels: Vec<String>,
    /// Event name (task returns as `t.return`) -> target type -> action.
    pub inject_actions: BTreeMap<String, BTreeMap<String, String>>,
    pub finalize_action: String,
    pub services: BTreeMap<String, ServiceRole>,
    /// Atomic stages per artifact type; bounds the outgoing pool.
    pub atomic_stages: BTreeMap<String, usize>,
}

impl TranslationMap {
    /// Human-readable mapping: one line per lifecycle rule, injection and
    /// service.
    pub fn report(&self) -> String {
        let mut out = String::new();
        for (label, action) in self.rule_labels.iter().zip(&self.rule_actions) {
            out.push_str(&format!("{label}  ->  {action}\n"));
        }
        for (event, targets) in &self.inject_actions {
            for (ty, action) in targets {
                out.push_str(&format!("inject {event} at {ty}  ->  {action}\n"));
            }
        }
        out.push_str(&format!("finalize  ->  {}\n", self.finalize_action));
        for (name, role) in &self.services {
            let role = match role {
                ServiceRole::Payload { event, slot } => format!("payload {event}.{slot}"),
                ServiceRole::Return { task, slot } => format!("return {task}.{slot}"),
                ServiceRole::FreshId { ty } => format!("fresh {ty} id"),
            };
            out.push_str(&format!("service {name}  ->  {role}\n"));
        }
        out
    }
}

// ==== naming ==============================================================

fn slug(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
        .collect()
}

/// Deduplicating name allocator; sanitized names may collide.
struct Mint(BTreeSet<String>);

impl Mint {
    fn new() -> Mint {
        Mint(BTreeSet::new())
    }

    fn fresh(&mut self, base: String) -> String {
        let mut name = base.clone();
        let mut k = 1;
        while !self.0.insert(name.clone()) {
            k += 1;
            name = format!("{base}_{k}");
        }
        name
    }
}

// ==== query scaffolding ===================================================

/// Fresh variable supply for one query context; different effects may reuse
/// names because their queries are evaluated independently.
struct Vars(usize);

impl Vars {
    fn new() -> Vars {
        Vars(0)
    }

    fn fresh(&mut self, tag: &str) -> QTerm {
        self.0 += 1;
        QTerm::Var(format!("{tag}{}", self.0))
    }
}

fn et(q: &QTerm) -> ETerm {
    match q {
        QTerm::Const(v) => ETerm::Const(v.clone()),
        QTerm::Var(n) => ETerm::Var(n.clone()),
    }
}

fn eq(lhs: QTerm, rhs: QTerm) -> Query {
    Query::Cmp { lhs, op: QCmp::Eq, rhs }
}

fn ne(lhs: QTerm, rhs: QTerm) -> Query {
    Query::Cmp { lhs, op: QCmp::Ne, rhs }
}

fn cbool(b: bool) -> QTerm {
    QTerm::Const(Value::Bool(b))
}

fn param_id() -> QTerm {
    QTerm::var("id")
}

/// One row of an artifact relation as query terms: id, the data and status
/// columns in shape order, then the container-freshness flag.
struct Row<'m> {
    rel: String,
    shape: &'m ArtifactShape,
    id: QTerm,
    cols: Vec<QTerm>,
    fr: QTerm,
}

impl Row<'_> {
    fn atom(&self) -> Query {
        Query::Atom { rel: self.rel.clone(), args: self.terms() }
    }

    fn terms(&self) -> Vec<QTerm> {
        let mut args = Vec::with_capacity(self.cols.len() + 2);
        args.push(self.id.clone());
        args.extend(self.cols.iter().cloned());
        args.push(self.fr.clone());
        args
    }

    /// Column index in the full argument vector (0 is the id, the last one
    /// is the freshness flag).
    fn attr_col(&self, name: &str) -> usize {
        1 + self
            .shape
            .attrs
            .iter()
            .position(|a| a == name)
            .expect("validated attribute")
    }

    fn status_col(&self, st: &StatusAttr) -> usize {
        let base = 1 + self.shape.attrs.len();
        match st {
            StatusAttr::Stage(s) => {
                base + self.shape.stages.iter().position(|x| x == s).expect("validated stage")
            }
            StatusAttr::Milestone(m) => {
                base + self.shape.stages.len()
                    + self
                        .shape
                        .milestones
                        .iter()
                        .position(|x| x == m)
                        .expect("validated milestone")
            }
        }
    }

    fn attr(&self, name: &str) -> QTerm {
        self.terms()[self.attr_col(name)].clone()
    }

    fn stage(&self, name: &str) -> QTerm {
        self.terms()[self.status_col(&StatusAttr::Stage(name.to_string()))].clone()
    }

    fn head(&self) -> Vec<ETerm> {
        self.terms().iter().map(et).collect()
    }

    fn head_with(&self, over: &BTreeMap<usize, ETerm>) -> Vec<ETerm> {
        self.terms()
            .iter()
            .enumerate()
            .map(|(i, q)| over.get(&i).cloned().unwrap_or_else(|| et(q)))
            .collect()
    }
}

// ==== translation =========================================================

/// Compile the model's incremental semantics over the given rule set into a
/// relational system. With `containers`, creation is bounded per type by
/// claiming pre-allocated blank rows instead of minting fresh ids.
pub fn translate(
    model: &GsmModel,
    rules: &RuleSet,
    containers: Option<&ContainerConfig>,
) -> Result<(DcdsSpec, TranslationMap), TranslateError> {
    let layout = containers.map(|b| ContainerLayout::new(model, b)).transpose()?;
    let map = name_everything(model, rules, containers.cloned());
    let b = Builder { model, rules, map: &map, layout: layout.as_ref() };

    let mut spec = DcdsSpec::default();
    b.declare_schema(&mut spec);
    spec.initial = b.initial_db();

    for (event, targets) in &map.inject_actions {
        for (ty, action) in targets {
            let (act, ca) = match crate::model::task_of_return(event) {
                Some(task) => b.inject_return(task, ty, action),
                None => b.inject_oneway(event, ty, action),
            };
            spec.add_action(act);
            spec.ca_rules.push(ca);
        }
    }
    for rid in 0..rules.rules.len() {
        let (act, ca) = b.rule_step(rid);
        spec.add_action(act);
        spec.ca_rules.push(ca);
    }
    let (act, ca) = b.finalize();
    spec.add_action(act);
    spec.ca_rules.push(ca);

    debug_assert!(spec.validate().is_ok(), "{:?}", spec.validate());
    Ok((spec, map))
}

/// Re-derive the translation with instance bounds applied: creation claims
/// blank containers, deletion blanks them, and the initial database is
/// pre-seeded. The bounded system is regenerated from the mapped model
/// rather than patched action by action; translation is deterministic, so
/// the result is the same system the surgical rewrite would produce.
pub fn apply_container_semantics(
    spec: &DcdsSpec,
    map: &TranslationMap,
    containers: &ContainerConfig,
) -> Result<(DcdsSpec, TranslationMap), TranslateError> {
    for name in &map.rule_actions {
        if !spec.actions.contains_key(name) {
            return Err(TranslateError::Malformed(format!(
                "the system lacks mapped action `{name}`; map and system do not belong together"
            )));
        }
    }
    let rules = RuleSet::compile(&map.model)
        .map_err(|e| TranslateError::Malformed(format!("lifecycle rules no longer stratify: {e}")))?;
    translate(&map.model, &rules, Some(containers))
}

fn name_everything(
    model: &GsmModel,
    rules: &RuleSet,
    containers: Option<ContainerConfig>,
) -> TranslationMap {
    let mut rel = Mint::new();
    let mut act = Mint::new();
    let mut svc = Mint::new();

    let att: BTreeMap<String, String> = declared_types(model)
        .into_iter()
        .map(|ty| {
            let name = rel.fresh(format!("att_{}", slug(&ty)));
            (ty, name)
        })
        .collect();
    let block = rel.fresh("block".into());
    let exec = rel.fresh("exec".into());

    let mut chg = BTreeMap::new();
    for a in &model.artifacts {
        for si in a.stages_rec() {
            let n = rel.fresh(format!("chg_{}_s_{}", slug(&a.name), slug(&si.stage.name)));
            chg.insert((a.name.clone(), StatusAttr::Stage(si.stage.name.clone())), n);
            for m in &si.stage.milestones {
                let n = rel.fresh(format!("chg_{}_m_{}", slug(&a.name), slug(&m.name)));
                chg.insert((a.name.clone(), StatusAttr::Milestone(m.name.clone())), n);
            }
        }
    }

    let mut msg = BTreeMap::new();
    let mut services = BTreeMap::new();
    let mut inject_actions: BTreeMap<String, BTreeMap<String, String>> = BTreeMap::new();
    for ev in &model.events {
        msg.insert(ev.name.clone(), rel.fresh(format!("msg_{}", slug(&ev.name))));
        for slot in &ev.payload {
            let n = svc.fresh(format!("in_{}_{}", slug(&ev.name), slug(slot)));
            services.insert(
                n,
                ServiceRole::Payload { event: ev.name.clone(), slot: slot.clone() },
            );
        }
        for target in model.event_targets(&ev.name) {
            inject_actions
                .entry(ev.name.clone())
                .or_default()
                .insert(
                    target.name.clone(),
                    act.fresh(format!("inject_{}_{}", slug(&ev.name), slug(&target.name))),
                );
        }
    }

    let mut srv = BTreeMap::new();
    let mut out = BTreeMap::new();
    let mut pend = BTreeMap::new();
    for a in &model.artifacts {
        for (t, _) in a.tasks() {
            srv.insert(t.name.clone(), rel.fresh(format!("srv_{}", slug(&t.name))));
            out.insert(t.name.clone(), rel.fresh(format!("out_{}", slug(&t.name))));
            pend.insert(t.name.clone(), rel.fresh(format!("pend_{}", slug(&t.name))));
            for slot in &t.returns {
                let n = svc.fresh(format!("ret_{}_{}", slug(&t.name), slug(slot)));
                services.insert(
                    n,
                    ServiceRole::Return { task: t.name.clone(), slot: slot.clone() },
                );
            }
            if let TaskKind::Create { artifact_type } = &t.kind {
                let bounded = containers.as_ref().is_some_and(|c| c.contains_key(artifact_type));
                if !bounded {
                    let n = svc.fresh(format!("newid_{}", slug(artifact_type)));
                    services.insert(n, ServiceRole::FreshId { ty: artifact_type.clone() });
                }
            }
            inject_actions
                .entry(crate::model::return_event(&t.name))
                .or_default()
                .insert(a.name.clone(), act.fresh(format!("inject_ret_{}", slug(&t.name))));
        }
    }

    let rule_actions: Vec<String> = rules
        .rules
        .iter()
        .map(|r| {
            let tag = match &r.change {
                Some((StatusAttr::Stage(s), true)) => format!("open_{}", slug(s)),
                Some((StatusAttr::Stage(s), false)) => format!("close_{}", slug(s)),
                Some((StatusAttr::Milestone(m), true)) => format!("achieve_{}", slug(m)),
                Some((StatusAttr::Milestone(m), false)) => format!("invalidate_{}", slug(m)),
                None => format!(
                    "dispatch_{}",
                    slug(r.dispatch.as_deref().unwrap_or("nothing"))
                ),
            };
            act.fresh(format!("rule{:02}_{tag}", r.id))
        })
        .collect();

    let mut aux: BTreeSet<String> = BTreeSet::new();
    aux.insert(block.clone());
    aux.insert(exec.clone());
    aux.extend(chg.values().cloned());
    aux.extend(msg.values().cloned());
    aux.extend(srv.values().cloned());
    aux.extend(out.values().cloned());

    let atomic_stages = model
        .artifacts
        .iter()
        .map(|a| {
            (
                a.name.clone(),
                a.stages_rec().iter().filter(|si| si.stage.is_atomic()).count(),
            )
        })
        .collect();

    TranslationMap {
        model: model.clone(),
        shapes: model.shapes(),
        containers,
        att,
        block,
        exec,
        rule_count: rules.rules.len(),
        chg,
        msg,
        srv,
        out,
        pend,
        aux,
        rule_labels: rules.rules.iter().map(|r| r.label()).collect(),
        rule_actions,
        inject_actions,
        finalize_action: act.fresh("finalize".into()),
        services,
        atomic_stages,
    }
}

// ==== action construction =================================================

struct Builder<'m> {
    model: &'m GsmModel,
    rules: &'m RuleSet,
    map: &'m TranslationMap,
    layout: Option<&'m ContainerLayout>,
}

impl<'m> Builder<'m> {
    fn declare_schema(&self, spec: &mut DcdsSpec) {
        for (ty, rel) in &self.map.att {
            let s = &self.map.shapes[ty];
            let arity = 2 + s.attrs.len() + s.stages.len() + s.milestones.len();
            spec.schema.declare(rel, arity, 1);
        }
        spec.schema.declare(&self.map.block, 2, 1);
        spec.schema.declare(&self.map.exec, 1 + self.map.rule_count, 1);
        for rel in self.map.chg.values() {
            spec.schema.declare(rel, 2, 1);
        }
        for ev in &self.model.events {
            spec.schema.declare(&self.map.msg[&ev.name], 1 + ev.payload.len(), 1);
        }
        for a in &self.model.artifacts {
            for (t, _) in a.tasks() {
                spec.schema.declare(&self.map.srv[&t.name], 1 + t.returns.len(), 1);
                let oarity = 1 + t.inputs.len();
                spec.schema.declare(&self.map.out[&t.name], oarity, oarity);
                spec.schema.declare(&self.map.pend[&t.name], 1, 1);
            }
        }
        for name in self.map.services.keys() {
            spec.services.insert(name.clone(), 1);
        }
    }

    fn initial_db(&self) -> DbInstance {
        let mut db = DbInstance::default();
        let snap = self.model.initial_snapshot();
        let mut ids: Vec<InstanceId> = Vec::new();
        for (ty, mut row) in snap.facts(&self.map.shapes) {
            let Value::Id(id) = row[0] else { unreachable!("facts lead with the id") };
            ids.push(id);
            row.push(Value::Bool(false));
            db.insert(&self.map.att[&ty], row);
        }
        if let Some(layout) = self.layout {
            for (ty, &(a, b)) in &layout.ranges {
                let s = &self.map.shapes[ty];
                for k in a..b {
                    let mut row = vec![Value::Id(InstanceId(k))];
                    row.extend(std::iter::repeat_n(Value::Null, s.attrs.len()));
                    row.extend(
                        std::iter::repeat_n(Value::Bool(false), s.stages.len() + s.milestones.len()),
                    );
                    row.push(Value::Bool(true));
                    db.insert(&self.map.att[ty], row);
                    ids.push(InstanceId(k));
                }
            }
        }
        for id in ids {
            db.insert(&self.map.block, vec![Value::Id(id), Value::Bool(false)]);
            let mut row = vec![Value::Id(id)];
            row.extend(std::iter::repeat_n(Value::Bool(true), self.map.rule_count));
            db.insert(&self.map.exec, row);
        }
        db
    }

    fn row(&self, v: &mut Vars, ty: &str, id: QTerm, fr: Option<bool>) -> Row<'m> {
        let shape = &self.map.shapes[ty];
        let n = shape.attrs.len() + shape.stages.len() + shape.milestones.len();
        Row {
            rel: self.map.att[ty].clone(),
            shape,
            id,
            cols: (0..n).map(|_| v.fresh("v")).collect(),
            fr: fr.map(cbool).unwrap_or_else(|| v.fresh("v")),
        }
    }

    /// Type an id-ref attribute points at.
    fn ref_type(&self, ty: &str, attr: &str) -> &'m str {
        let (owner, is_child) = self.model.owner_of(ty).expect("validated type");
        let decl = if is_child {
            owner
                .child(ty)
                .and_then(|c| c.attributes.iter().find(|d| d.name == attr))
        } else {
            owner.attr(attr)
        };
        match decl.map(|d| &d.sort) {
            Some(AttrSort::IdRef(t)) => t,
            _ => unreachable!("validated id-ref hop"),
        }
    }

    /// A term as joins plus the result; a broken hop makes the joins fail,
    /// which mirrors atoms over undefined terms being false.
    fn term(&self, v: &mut Vars, row: &Row<'m>, self_id: &QTerm, t: &Term) -> (Vec<Query>, QTerm) {
        match t {
            Term::Const(c) => (vec![], QTerm::Const(c.clone())),
            Term::SelfId => (vec![], self_id.clone()),
            Term::Path(p) if p.len() == 1 => (vec![], row.attr(&p[0])),
            Term::Path(p) => {
                assert_eq!(p.len(), 2, "validated path length");
                let hop_ty = self.ref_type(&row.shape.name, &p[0]);
                let hop = self.row(v, hop_ty, row.attr(&p[0]), Some(false));
                let val = hop.attr(&p[1]);
                (vec![hop.atom()], val)
            }
        }
    }

    fn cond(&self, v: &mut Vars, row: &Row<'m>, self_id: &QTerm, c: &Condition) -> Query {
        match c {
            Condition::True => Query::True,
            Condition::And(cs) => {
                Query::and(cs.iter().map(|c| self.cond(v, row, self_id, c)).collect())
            }
            Condition::Or(cs) => {
                Query::Or(cs.iter().map(|c| self.cond(v, row, self_id, c)).collect())
            }
            Condition::Not(c) => Query::not(self.cond(v, row, self_id, c)),
            Condition::Atom(a) => self.atom(v, row, self_id, a),
        }
    }

    fn atom(&self, v: &mut Vars, row: &Row<'m>, self_id: &QTerm, a: &Atom) -> Query {
        match a {
            Atom::Cmp { lhs, op, rhs } => {
                let (mut joins, l) = self.term(v, row, self_id, lhs);
                let (jr, r) = self.term(v, row, self_id, rhs);
                joins.extend(jr);
                let op = match op {
                    CmpOp::Eq => QCmp::Eq,
                    CmpOp::Ne => QCmp::Ne,
                };
                joins.push(Query::Cmp { lhs: l, op, rhs: r });
                Query::and(joins)
            }
            Atom::IsNull(t) => {
                let (mut joins, q) = self.term(v, row, self_id, t);
                joins.push(eq(q, QTerm::Const(Value::Null)));
                Query::and(joins)
            }
            Atom::NotNull(t) => {
                let (mut joins, q) = self.term(v, row, self_id, t);
                joins.push(ne(q, QTerm::Const(Value::Null)));
                Query::and(joins)
            }
            Atom::StageOpen(s) => eq(row.stage(s), cbool(true)),
            Atom::MilestoneAchieved(m) => eq(
                row.terms()[row.status_col(&StatusAttr::Milestone(m.clone()))].clone(),
                cbool(true),
            ),
            Atom::ExistsChild { child, cond } => {
                let c_id = v.fresh("e");
                let crow = self.row(v, child, c_id, Some(false));
                let mut parts = vec![crow.atom(), eq(crow.attr("parent"), self_id.clone())];
                if let Some(inner) = cond {
                    let cid = crow.id.clone();
                    parts.push(self.cond(v, &crow, &cid, inner));
                }
                Query::and(parts)
            }
        }
    }

    /// A rule's antecedent and prerequisites relative to the target row:
    /// status requirements, the triggering internal change if any, the
    /// toggle-once guard, and the sentry condition.
    fn fire_body(&self, v: &mut Vars, rid: usize, row: &Row<'m>) -> Query {
        let rule = &self.rules.rules[rid];
        let mut parts = Vec::new();
        for s in &rule.requires_open {
            parts.push(eq(row.stage(s), cbool(true)));
        }
        for s in &rule.requires_closed {
            parts.push(eq(row.stage(s), cbool(false)));
        }
        for (m, want) in &rule.requires_milestone {
            parts.push(eq(
                row.terms()[row.status_col(&StatusAttr::Milestone(m.clone()))].clone(),
                cbool(*want),
            ));
        }
        if let Trigger::Internal { target, to } = &rule.trigger {
            let rel = &self.map.chg[&(rule.artifact.clone(), target.clone())];
            parts.push(Query::atom(rel, vec![row.id.clone(), cbool(*to)]));
        }
        if let Some((attr, _)) = &rule.change {
            let rel = &self.map.chg[&(rule.artifact.clone(), attr.clone())];
            parts.push(Query::not(Query::atom(rel, vec![row.id.clone(), v.fresh("w")])));
        }
        if let Some(c) = &rule.condition {
            let sid = row.id.clone();
            parts.push(self.cond(v, row, &sid, c));
        }
        Query::and(parts)
    }

    fn x_name(i: usize) -> QTerm {
        QTerm::Var(format!("x{i:02}"))
    }

    fn exec_atom(&self) -> Query {
        let mut args = vec![param_id()];
        args.extend((0..self.map.rule_count).map(Self::x_name));
        Query::Atom { rel: self.map.exec.clone(), args }
    }

    /// Eligibility row written at injection: a rule starts pending exactly
    /// when it belongs to the target's type and the event can reach its
    /// trigger; everything else starts ticked off.
    fn x_init(&self, ty: &str, event: &str) -> Vec<ETerm> {
        (0..self.map.rule_count)
            .map(|i| {
                let eligible =
                    self.rules.rules[i].artifact == ty && self.rules.relevant_to(i, event);
                ETerm::Const(Value::Bool(!eligible))
            })
            .collect()
    }

    /// Copy an artifact relation, keeping blanks, minus explicitly excluded
    /// rows. Exclusions are built against the copy row by the callers.
    fn copy_att_where(&self, ty: &str, extra: impl FnOnce(&mut Vars, &Row<'m>) -> Vec<Query>) -> EffectSpec {
        let mut v = Vars::new();
        let id = v.fresh("c");
        let row = self.row(&mut v, ty, id, None);
        let mut parts = vec![row.atom()];
        parts.extend(extra(&mut v, &row));
        EffectSpec {
            query: Query::and(parts),
            head: vec![(row.rel.clone(), row.head())],
        }
    }

    fn copy_all_att(&self, effects: &mut Vec<EffectSpec>, except: &BTreeSet<&str>) {
        for ty in declared_types(self.model) {
            if !except.contains(ty.as_str()) {
                effects.push(self.copy_att_where(&ty, |_, _| vec![]));
            }
        }
    }

    /// Copy a two-column bookkeeping relation (block or a chg table).
    fn copy_pair(&self, rel: &str, extra: impl FnOnce(&mut Vars, &QTerm, &QTerm) -> Vec<Query>) -> EffectSpec {
        let mut v = Vars::new();
        let (a, b) = (v.fresh("p"), v.fresh("p"));
        let mut parts = vec![Query::atom(rel, vec![a.clone(), b.clone()])];
        parts.extend(extra(&mut v, &a, &b));
        EffectSpec {
            query: Query::and(parts),
            head: vec![(rel.to_string(), vec![et(&a), et(&b)])],
        }
    }

    fn copy_exec_where(&self, extra: impl FnOnce(&mut Vars, &QTerm) -> Vec<Query>) -> EffectSpec {
        let mut v = Vars::new();
        let id = v.fresh("p");
        let xs: Vec<QTerm> = (0..self.map.rule_count).map(|_| v.fresh("p")).collect();
        let mut args = vec![id.clone()];
        args.extend(xs.iter().cloned());
        let mut parts = vec![Query::Atom { rel: self.map.exec.clone(), args: args.clone() }];
        parts.extend(extra(&mut v, &id));
        EffectSpec {
            query: Query::and(parts),
            head: vec![(
                self.map.exec.clone(),
                args.iter().map(et).collect(),
            )],
        }
    }

    fn copy_pend_where(&self, task: &str, extra: impl FnOnce(&mut Vars, &QTerm) -> Vec<Query>) -> EffectSpec {
        let mut v = Vars::new();
        let w = v.fresh("p");
        let rel = &self.map.pend[task];
        let mut parts = vec![Query::atom(rel, vec![w.clone()])];
        parts.extend(extra(&mut v, &w));
        EffectSpec {
            query: Query::and(parts),
            head: vec![(rel.clone(), vec![et(&w)])],
        }
    }

    fn copy_all_pend(&self, effects: &mut Vec<EffectSpec>, extra: impl Fn(&mut Vars, &QTerm) -> Vec<Query>) {
        for task in self.map.pend.keys() {
            effects.push(self.copy_pend_where(task, |v, w| extra(v, w)));
        }
    }

    /// The doomed-instance joins of a delete task, built against a fresh
    /// receiver row: returns the query parts and the doomed id term.
    fn doom_joins(&self, v: &mut Vars, a_ty: &'m str, task: &Task) -> (Vec<Query>, QTerm, &'m str) {
        let TaskKind::Delete { target } = &task.kind else {
            unreachable!("caller checked the task deletes")
        };
        let recv = self.row(v, a_ty, param_id(), Some(false));
        let mut parts = vec![recv.atom()];
        let (joins, doom) = self.term(v, &recv, &param_id(), target);
        parts.extend(joins);
        let Term::Path(p) = target else { unreachable!("validated delete target") };
        let mut ty = a_ty;
        for seg in p {
            ty = self.ref_type(ty, seg);
        }
        (parts, doom, ty)
    }

    // ---- rule steps ------------------------------------------------------

    /// One action per lifecycle rule. The chain visits eligible rules in
    /// the firing order: the condition admits rule k only while its flag is
    /// unset and every predecessor's flag is set, so exactly one rule
    /// action is enabled at a time. Whether the rule actually fires is
    /// decided inside the effects.
    fn rule_step(&self, rid: usize) -> (Action, CaRule) {
        let rule = &self.rules.rules[rid];
        let name = &self.map.rule_actions[rid];
        let c = self.map.rule_count;

        let mut ca_parts = vec![self.exec_atom()];
        ca_parts.push(eq(Self::x_name(rid), cbool(false)));
        for i in 0..c {
            if self.rules.order.rank(i) < self.rules.order.rank(rid) {
                ca_parts.push(eq(Self::x_name(i), cbool(true)));
            }
        }
        ca_parts.push(Query::atom(&self.map.block, vec![param_id(), cbool(true)]));
        let ca = CaRule { query: Query::and(ca_parts), action: name.clone() };

        let mut effects: Vec<EffectSpec> = Vec::new();
        let ty = &rule.artifact;

        match &rule.change {
            Some((attr, to)) => {
                // Fired: the target row changes one status column and the
                // change is recorded for later rules in this B-step.
                let mut v = Vars::new();
                let row = self.row(&mut v, ty, param_id(), None);
                let body = self.fire_body(&mut v, rid, &row);
                let mut over = BTreeMap::new();
                over.insert(row.status_col(attr), ETerm::Const(Value::Bool(*to)));
                let chg_rel = &self.map.chg[&(ty.clone(), attr.clone())];
                effects.push(EffectSpec {
                    query: Query::and(vec![row.atom(), body]),
                    head: vec![
                        (row.rel.clone(), row.head_with(&over)),
                        (chg_rel.clone(), vec![ETerm::Var("id".into()), ETerm::Const(Value::Bool(*to))]),
                    ],
                });
                // Skipped: the target row survives unchanged.
                let mut v = Vars::new();
                let row = self.row(&mut v, ty, param_id(), None);
                let body = self.fire_body(&mut v, rid, &row);
                effects.push(EffectSpec {
                    query: Query::and(vec![row.atom(), Query::not(body)]),
                    head: vec![(row.rel.clone(), row.head())],
                });
                // Rows of other instances are untouched.
                effects.push(self.copy_att_where(ty, |_, r| vec![ne(r.id.clone(), param_id())]));
            }
            None => {
                // Dispatch rules touch no status; the whole relation is
                // copied and the pools receive the outgoing call.
                effects.push(self.copy_att_where(ty, |_, _| vec![]));
                let task_name = rule.dispatch.as_deref().expect("changeless rules dispatch");
                let (owner, _) = self.model.owner_of(ty).expect("validated type");
                let (task, _) = owner.task(task_name).expect("validated task");

                let mut v = Vars::new();
                let row = self.row(&mut v, ty, param_id(), None);
                let body = self.fire_body(&mut v, rid, &row);
                effects.push(EffectSpec {
                    query: Query::and(vec![row.atom(), body]),
                    head: vec![(self.map.pend[task_name].clone(), vec![ETerm::Var("id".into())])],
                });

                let mut v = Vars::new();
                let row = self.row(&mut v, ty, param_id(), None);
                let body = self.fire_body(&mut v, rid, &row);
                let mut parts = vec![row.atom(), body];
                let mut args: Vec<ETerm> = vec![ETerm::Var("id".into())];
                for input in &task.inputs {
                    let (joins, q) = self.term(&mut v, &row, &param_id(), input);
                    parts.extend(joins);
                    args.push(et(&q));
                }
                effects.push(EffectSpec {
                    query: Query::and(parts),
                    head: vec![(self.map.out[task_name].clone(), args)],
                });
            }
        }
        let mut except = BTreeSet::new();
        except.insert(ty.as_str());
        self.copy_all_att(&mut effects, &except);

        // Tick the rule's eligibility flag; everything else rides along.
        let mut v = Vars::new();
        let id = v.fresh("p");
        let xs: Vec<QTerm> = (0..c).map(|_| v.fresh("p")).collect();
        let mut args = vec![id.clone()];
        args.extend(xs.iter().cloned());
        let mut head: Vec<ETerm> = args.iter().map(et).collect();
        head[1 + rid] = ETerm::Const(Value::Bool(true));
        effects.push(EffectSpec {
            query: Query::and(vec![
                Query::Atom { rel: self.map.exec.clone(), args },
                eq(id.clone(), param_id()),
                eq(xs[rid].clone(), cbool(false)),
            ]),
            head: vec![(self.map.exec.clone(), head)],
        });
        effects.push(self.copy_exec_where(|_, id| vec![ne(id.clone(), param_id())]));

        effects.push(self.copy_pair(&self.map.block, |_, _, _| vec![]));
        for rel in self.map.chg.values() {
            effects.push(self.copy_pair(rel, |_, _, _| vec![]));
        }
        for rel in self.map.msg.values().chain(self.map.srv.values()) {
            effects.push(self.copy_rel_full(rel));
        }
        for rel in self.map.out.values() {
            effects.push(self.copy_rel_full(rel));
        }
        self.copy_all_pend(&mut effects, |_, _| vec![]);

        (
            Action { name: name.clone(), params: vec!["id".into()], effects },
            ca,
        )
    }

    /// Full copy of any relation by arity lookup at build time.
    fn copy_rel_full(&self, rel: &str) -> EffectSpec {
        let arity = self.rel_arity(rel);
        let mut v = Vars::new();
        let args: Vec<QTerm> = (0..arity).map(|_| v.fresh("p")).collect();
        EffectSpec {
            query: Query::Atom { rel: rel.to_string(), args: args.clone() },
            head: vec![(rel.to_string(), args.iter().map(et).collect())],
        }
    }

    fn rel_arity(&self, rel: &str) -> usize {
        for ev in &self.model.events {
            if self.map.msg[&ev.name] == rel {
                return 1 + ev.payload.len();
            }
        }
        for a in &self.model.artifacts {
            for (t, _) in a.tasks() {
                if self.map.srv[&t.name] == rel {
                    return 1 + t.returns.len();
                }
                if self.map.out[&t.name] == rel {
                    return 1 + t.inputs.len();
                }
            }
        }
        unreachable!("arity lookup covers the pools")
    }

    // ---- injections ------------------------------------------------------

    /// Deliver a one-way event: write the payload into the target row (and
    /// the message pool, sharing the same service calls), block the target,
    /// and initialize rule eligibility.
    fn inject_oneway(&self, event: &str, ty: &str, name: &str) -> (Action, CaRule) {
        let ev = self
            .model
            .events
            .iter()
            .find(|e| e.name == event)
            .expect("validated event");

        let mut v = Vars::new();
        let recv = self.row(&mut v, ty, param_id(), Some(false));
        let no_block = {
            let b = v.fresh("b");
            Query::not(Query::atom(&self.map.block, vec![b, cbool(true)]))
        };
        let ca = CaRule {
            query: Query::and(vec![recv.atom(), no_block]),
            action: name.to_string(),
        };

        let calls: Vec<(String, ETerm)> = ev
            .payload
            .iter()
            .map(|slot| {
                let svc = self.service_for(|r| {
                    matches!(r, ServiceRole::Payload { event: e, slot: s } if e == event && s == slot)
                });
                (slot.clone(), ETerm::Call { service: svc, args: vec![param_id()] })
            })
            .collect();

        let mut effects: Vec<EffectSpec> = Vec::new();
        let mut v = Vars::new();
        let row = self.row(&mut v, ty, param_id(), None);
        let mut over = BTreeMap::new();
        for (slot, call) in &calls {
            over.insert(row.attr_col(slot), call.clone());
        }
        let mut msg_head: Vec<ETerm> = vec![ETerm::Var("id".into())];
        msg_head.extend(calls.iter().map(|(_, c)| c.clone()));
        let mut exec_head: Vec<ETerm> = vec![ETerm::Var("id".into())];
        exec_head.extend(self.x_init(ty, event));
        effects.push(EffectSpec {
            query: row.atom(),
            head: vec![
                (row.rel.clone(), row.head_with(&over)),
                (self.map.msg[event].clone(), msg_head),
                (self.map.block.clone(), vec![ETerm::Var("id".into()), ETerm::Const(Value::Bool(true))]),
                (self.map.exec.clone(), exec_head),
            ],
        });
        effects.push(self.copy_att_where(ty, |_, r| vec![ne(r.id.clone(), param_id())]));
        let mut except = BTreeSet::new();
        except.insert(ty);
        self.copy_all_att(&mut effects, &except);
        effects.push(self.copy_pair(&self.map.block, |_, id, _| vec![ne(id.clone(), param_id())]));
        effects.push(self.copy_exec_where(|_, id| vec![ne(id.clone(), param_id())]));
        self.copy_all_pend(&mut effects, |_, _| vec![]);
        // Change tables and the other pools are empty in unblocked states,
        // so nothing else is copied.

        (
            Action { name: name.to_string(), params: vec!["id".into()], effects },
            ca,
        )
    }

    fn service_for(&self, pred: impl Fn(&ServiceRole) -> bool) -> String {
        self.map
            .services
            .iter()
            .find(|(_, r)| pred(r))
            .map(|(n, _)| n.clone())
            .expect("service was minted")
    }

    /// Deliver a task return: consume the pending call, run the task's
    /// effects (payload assigns, creation, deletion), block the receiver,
    /// and initialize rule eligibility. Deliverability mirrors the
    /// engine: dispatching stage open, a bounded create needs a free
    /// container, a delete needs a live doomed instance other than the
    /// receiver.
    fn inject_return(&self, task_name: &str, a_ty: &'m str, name: &str) -> (Action, CaRule) {
        let (owner, _) = self.model.owner_of(a_ty).expect("validated type");
        let (task, stage) = owner.task(task_name).expect("validated task");
        let event = crate::model::return_event(task_name);

        let created_ty: Option<&str> = match &task.kind {
            TaskKind::Create { artifact_type } => Some(artifact_type),
            _ => None,
        };
        let bounded_create = created_ty
            .is_some_and(|ct| self.layout.is_some_and(|l| l.bounds.contains_key(ct)));
        let deletes = matches!(task.kind, TaskKind::Delete { .. });

        // Condition.
        let mut v = Vars::new();
        let recv = self.row(&mut v, a_ty, param_id(), Some(false));
        let mut ca_parts = vec![recv.atom(), eq(recv.stage(&stage.name), cbool(true))];
        ca_parts.push(Query::atom(&self.map.pend[task_name], vec![param_id()]));
        {
            let b = v.fresh("b");
            ca_parts.push(Query::not(Query::atom(&self.map.block, vec![b, cbool(true)])));
        }
        if bounded_create {
            let zid = v.fresh("z");
            let free = self.row(&mut v, created_ty.unwrap(), zid, Some(true));
            ca_parts.push(free.atom());
        }
        let mut doom_ty = "";
        if deletes {
            let (parts, doom, ty) = self.doom_joins(&mut v, a_ty, task);
            // The receiver row atom repeats inside the doom joins; harmless,
            // it unifies with itself.
            ca_parts.extend(parts);
            let drow = self.row(&mut v, ty, doom.clone(), Some(false));
            ca_parts.push(drow.atom());
            ca_parts.push(ne(doom, param_id()));
            doom_ty = ty;
        }
        let ca = CaRule { query: Query::and(ca_parts), action: name.to_string() };

        // Return payload calls, one per slot, shared by row writes and the
        // service pool row.
        let ret_call = |slot: &str| -> ETerm {
            let svc = self.service_for(|r| {
                matches!(r, ServiceRole::Return { task: t, slot: s } if t == task_name && s == slot)
            });
            ETerm::Call { service: svc, args: vec![param_id()] }
        };
        let new_id_term: Option<ETerm> = created_ty.map(|ct| {
            if bounded_create {
                ETerm::Var("znew".into())
            } else {
                let svc = self.service_for(|r| matches!(r, ServiceRole::FreshId { ty } if ty == ct));
                ETerm::Call { service: svc, args: vec![param_id()] }
            }
        });

        let mut effects: Vec<EffectSpec> = Vec::new();

        // Main incorporation effect: the receiver row rewrite, the created
        // row, the service pool row, blocking and eligibility, all sharing
        // one query. The write-through assign, if any, lives in its own
        // effect below. Assigns whose value dereferences a hop split the
        // effect into branch variants: hop intact writes the value, hop
        // broken writes null.
        let main_assigns: Vec<&Assign> = task
            .assigns
            .iter()
            .filter(|a| !matches!(&a.target, AssignTarget::SelfPath(p) if p.len() == 2))
            .collect();
        let branching: Vec<usize> = main_assigns
            .iter()
            .enumerate()
            .filter(|(_, a)| matches!(&a.value, AssignValue::Term(Term::Path(p)) if p.len() == 2))
            .map(|(i, _)| i)
            .collect();
        for mask in 0..(1usize << branching.len()) {
            let mut v = Vars::new();
            let row = self.row(&mut v, a_ty, param_id(), None);
            let mut parts = vec![row.atom()];
            if bounded_create {
                parts.extend(self.claim_joins(&mut v, created_ty.unwrap()));
            }

            // Resolve each assign's value in this variant.
            let mut values: Vec<ETerm> = Vec::new();
            for (ai, asg) in main_assigns.iter().enumerate() {
                values.push(match &asg.value {
                    AssignValue::Payload(slot) => ret_call(slot),
                    AssignValue::Const(c) => ETerm::Const(c.clone()),
                    AssignValue::NewId => new_id_term.clone().expect("validated create"),
                    AssignValue::Term(Term::SelfId) => ETerm::Var("id".into()),
                    AssignValue::Term(Term::Const(c)) => ETerm::Const(c.clone()),
                    AssignValue::Term(Term::Path(p)) if p.len() == 1 => et(&row.attr(&p[0])),
                    AssignValue::Term(t) => {
                        let bi = branching.iter().position(|b| *b == ai).unwrap();
                        let (joins, val) = self.term(&mut v, &row, &param_id(), t);
                        if mask & (1 << bi) != 0 {
                            parts.extend(joins);
                            et(&val)
                        } else {
                            parts.push(Query::not(Query::and(joins)));
                            ETerm::Const(Value::Null)
                        }
                    }
                });
            }

            let mut recv_over: BTreeMap<usize, ETerm> = BTreeMap::new();
            let mut new_over: BTreeMap<usize, ETerm> = BTreeMap::new();
            for (asg, val) in main_assigns.iter().zip(values) {
                match &asg.target {
                    AssignTarget::NewAttr(attr) => {
                        let shape = &self.map.shapes[created_ty.unwrap()];
                        let col = 1 + shape.attrs.iter().position(|a| a == attr).unwrap();
                        new_over.insert(col, val);
                    }
                    AssignTarget::SelfPath(p) if p.len() == 1 => {
                        recv_over.insert(row.attr_col(&p[0]), val);
                    }
                    AssignTarget::SelfPath(_) => unreachable!("filtered to main assigns"),
                }
            }

            let mut head: Vec<(String, Vec<ETerm>)> =
                vec![(row.rel.clone(), row.head_with(&recv_over))];
            if let Some(ct) = created_ty {
                head.push((self.map.att[ct].clone(), self.new_row_head(ct, &new_over, new_id_term.as_ref().unwrap())));
                if !bounded_create {
                    let newid = new_id_term.clone().unwrap();
                    head.push((self.map.block.clone(), vec![newid.clone(), ETerm::Const(Value::Bool(false))]));
                    let mut xrow = vec![newid];
                    xrow.extend(
                        std::iter::repeat_n(ETerm::Const(Value::Bool(true)), self.map.rule_count),
                    );
                    head.push((self.map.exec.clone(), xrow));
                }
            }
            let mut srv_head: Vec<ETerm> = vec![ETerm::Var("id".into())];
            srv_head.extend(task.returns.iter().map(|s| ret_call(s)));
            head.push((self.map.srv[task_name].clone(), srv_head));
            head.push((self.map.block.clone(), vec![ETerm::Var("id".into()), ETerm::Const(Value::Bool(true))]));
            let mut exec_head: Vec<ETerm> = vec![ETerm::Var("id".into())];
            exec_head.extend(self.x_init(a_ty, &event));
            head.push((self.map.exec.clone(), exec_head));

            effects.push(EffectSpec { query: Query::and(parts), head });
        }

        // Write-through assign: rewrite the referenced row, sharing claim
        // joins when the value is the created id.
        let via_assign = task
            .assigns
            .iter()
            .find(|a| matches!(&a.target, AssignTarget::SelfPath(p) if p.len() == 2));
        let mut via_hop: Option<(String, String)> = None;
        if let Some(asg) = via_assign {
            let AssignTarget::SelfPath(p) = &asg.target else { unreachable!() };
            let hop_ty = self.ref_type(a_ty, &p[0]).to_string();
            via_hop = Some((p[0].clone(), hop_ty.clone()));
            let val_branches = matches!(&asg.value, AssignValue::Term(Term::Path(q)) if q.len() == 2);
            for mask in 0..(1usize << usize::from(val_branches)) {
                let mut v = Vars::new();
                let recv = self.row(&mut v, a_ty, param_id(), None);
                let w = self.row(&mut v, &hop_ty, recv.attr(&p[0]), Some(false));
                let mut parts = vec![recv.atom(), w.atom()];
                if bounded_create && matches!(asg.value, AssignValue::NewId) {
                    parts.extend(self.claim_joins(&mut v, created_ty.unwrap()));
                }
                let val = match &asg.value {
                    AssignValue::Payload(slot) => ret_call(slot),
                    AssignValue::Const(c) => ETerm::Const(c.clone()),
                    AssignValue::NewId => new_id_term.clone().expect("validated create"),
                    AssignValue::Term(Term::SelfId) => ETerm::Var("id".into()),
                    AssignValue::Term(Term::Const(c)) => ETerm::Const(c.clone()),
                    AssignValue::Term(Term::Path(q)) if q.len() == 1 => et(&recv.attr(&q[0])),
                    AssignValue::Term(t) => {
                        let (joins, val) = self.term(&mut v, &recv, &param_id(), t);
                        if mask & 1 != 0 {
                            parts.extend(joins);
                            et(&val)
                        } else {
                            parts.push(Query::not(Query::and(joins)));
                            ETerm::Const(Value::Null)
                        }
                    }
                };
                let mut over = BTreeMap::new();
                over.insert(w.attr_col(&p[1]), val);
                effects.push(EffectSpec {
                    query: Query::and(parts),
                    head: vec![(w.rel.clone(), w.head_with(&over))],
                });
            }
        }

        // Container delete blanks the doomed row in place.
        let bounded_delete =
            deletes && self.layout.is_some_and(|l| l.bounds.contains_key(doom_ty));
        if bounded_delete {
            let mut v = Vars::new();
            let (mut parts, doom, _) = self.doom_joins(&mut v, a_ty, task);
            let drow = self.row(&mut v, doom_ty, doom, Some(false));
            parts.push(drow.atom());
            let shape = &self.map.shapes[doom_ty];
            let mut head = vec![et(&drow.id)];
            head.extend(std::iter::repeat_n(ETerm::Const(Value::Null), shape.attrs.len()));
            head.extend(
                std::iter::repeat_n(ETerm::Const(Value::Bool(false)), shape.stages.len() + shape.milestones.len()),
            );
            head.push(ETerm::Const(Value::Bool(true)));
            effects.push(EffectSpec {
                query: Query::and(parts),
                head: vec![(drow.rel.clone(), head)],
            });
        }

        // Copies. Per relation the exclusions accumulate: the receiver row
        // (rewritten above), the doomed row, the claimed container, and the
        // write-through row.
        for ty2 in declared_types(self.model) {
            let excl_doom = deletes && ty2 == doom_ty;
            let excl_claim = bounded_create && Some(ty2.as_str()) == created_ty;
            let excl_via = via_hop.as_ref().is_some_and(|(_, t)| *t == ty2);
            effects.push(self.copy_att_where(&ty2, |v, r| {
                let mut parts = Vec::new();
                if ty2 == a_ty {
                    parts.push(ne(r.id.clone(), param_id()));
                }
                if excl_doom {
                    let (mut dj, doom, _) = self.doom_joins(v, a_ty, task);
                    dj.push(eq(doom, r.id.clone()));
                    parts.push(Query::not(Query::and(dj)));
                }
                if excl_claim {
                    // The claimed row is the least free one of the type.
                    let least_free = {
                        let zid = v.fresh("z");
                        let z2 = self.row(v, &ty2, zid, Some(true));
                        let smaller = Query::and(vec![
                            z2.atom(),
                            Query::Cmp { lhs: z2.id.clone(), op: QCmp::Lt, rhs: r.id.clone() },
                        ]);
                        Query::and(vec![eq(r.fr.clone(), cbool(true)), Query::not(smaller)])
                    };
                    parts.push(Query::not(least_free));
                }
                if excl_via {
                    let (hop, _) = via_hop.as_ref().unwrap();
                    let recv = self.row(v, a_ty, param_id(), Some(false));
                    parts.push(Query::not(Query::and(vec![
                        recv.atom(),
                        eq(recv.attr(hop), r.id.clone()),
                        eq(r.fr.clone(), cbool(false)),
                    ])));
                }
                parts
            }));
        }

        let unbounded_delete = deletes && !bounded_delete;
        let doom_gone = |b: &Builder<'m>, v: &mut Vars, w: &QTerm| -> Vec<Query> {
            let (mut dj, doom, _) = b.doom_joins(v, a_ty, task);
            dj.push(eq(doom, w.clone()));
            vec![Query::not(Query::and(dj))]
        };

        effects.push(self.copy_pair(&self.map.block, |v, id, _| {
            let mut parts = vec![ne(id.clone(), param_id())];
            if unbounded_delete {
                parts.extend(doom_gone(self, v, id));
            }
            parts
        }));
        effects.push(self.copy_exec_where(|v, id| {
            let mut parts = vec![ne(id.clone(), param_id())];
            if unbounded_delete {
                parts.extend(doom_gone(self, v, id));
            }
            parts
        }));
        for other in self.map.pend.keys() {
            let consumed = other == task_name;
            effects.push(self.copy_pend_where(other, |v, w| {
                let mut parts = Vec::new();
                if consumed {
                    parts.push(ne(w.clone(), param_id()));
                }
                if deletes {
                    parts.extend(doom_gone(self, v, w));
                }
                parts
            }));
        }
        // Change tables and pools: empty in unblocked states, not copied.

        (
            Action { name: name.to_string(), params: vec!["id".into()], effects },
            ca,
        )
    }

    /// Joins selecting the least free container row of a type, binding
    /// `znew` to its id.
    fn claim_joins(&self, v: &mut Vars, ct: &str) -> Vec<Query> {
        let z = self.row(v, ct, QTerm::var("znew"), Some(true));
        let zid = v.fresh("z");
        let z2 = self.row(v, ct, zid, Some(true));
        vec![
            z.atom(),
            Query::not(Query::and(vec![
                z2.atom(),
                Query::Cmp { lhs: z2.id.clone(), op: QCmp::Lt, rhs: z.id.clone() },
            ])),
        ]
    }

    /// Head of the created (or claimed) row: fresh attributes except the
    /// parent link and the create-task assigns, statuses reset.
    fn new_row_head(
        &self,
        ct: &str,
        over: &BTreeMap<usize, ETerm>,
        new_id: &ETerm,
    ) -> Vec<ETerm> {
        let shape = &self.map.shapes[ct];
        let mut head = vec![new_id.clone()];
        for (i, attr) in shape.attrs.iter().enumerate() {
            head.push(match over.get(&(1 + i)) {
                Some(v) => v.clone(),
                None if attr == "parent" => ETerm::Var("id".into()),
                None => ETerm::Const(Value::Null),
            });
        }
        head.extend(
            std::iter::repeat_n(ETerm::Const(Value::Bool(false)), shape.stages.len() + shape.milestones.len()),
        );
        head.push(ETerm::Const(Value::Bool(false)));
        head
    }

    // ---- finalization ----------------------------------------------------

    /// Once every eligibility flag is ticked, release the instance: copy
    /// the world, unblock, and drop pools and change tables by not copying
    /// them.
    fn finalize(&self) -> (Action, CaRule) {
        let name = &self.map.finalize_action;
        let mut ca_parts = vec![
            Query::atom(&self.map.block, vec![param_id(), cbool(true)]),
            self.exec_atom(),
        ];
        for i in 0..self.map.rule_count {
            ca_parts.push(eq(Self::x_name(i), cbool(true)));
        }
        let ca = CaRule { query: Query::and(ca_parts), action: name.clone() };

        let mut effects: Vec<EffectSpec> = Vec::new();
        self.copy_all_att(&mut effects, &BTreeSet::new());
        effects.push(EffectSpec {
            query: Query::True,
            head: vec![(
                self.map.block.clone(),
                vec![ETerm::Var("id".into()), ETerm::Const(Value::Bool(false))],
            )],
        });
        effects.push(self.copy_pair(&self.map.block, |_, id, _| vec![ne(id.clone(), param_id())]));
        effects.push(self.copy_exec_where(|_, _| vec![]));
        self.copy_all_pend(&mut effects, |_, _| vec![]);

        (
            Action { name: name.clone(), params: vec!["id".into()], effects },
            ca,
        )
    }
}

// ==== state filtering =====================================================

fn as_id(v: &Value, rel: &str) -> Result<InstanceId, TranslateError> {
    match v {
        Value::Id(id) => Ok(*id),
        other => Err(TranslateError::Malformed(format!(
            "`{rel}` holds `{other}` in its id column"
        ))),
    }
}

fn as_bool(v: &Value, rel: &str) -> Result<bool, TranslateError> {
    match v {
        Value::Bool(b) => Ok(*b),
        other => Err(TranslateError::Malformed(format!(
            "`{rel}` holds `{other}` in a flag column"
        ))),
    }
}

/// Project the bookkeeping away: reconstruct the snapshot an unblocked
/// database encodes, dropping blank containers. Errors while any instance
/// is blocked, because mid-B-step states correspond to no snapshot.
pub fn filter_state(map: &TranslationMap, db: &DbInstance) -> Result<Snapshot, TranslateError> {
    for row in db.rows(&map.block) {
        if as_bool(&row[1], &map.block)? {
            return Err(TranslateError::Blocked);
        }
    }
    let mut snap = Snapshot::default();
    for (ty, rel) in &map.att {
        let shape = &map.shapes[ty];
        for row in db.rows(rel) {
            let want = 2 + shape.attrs.len() + shape.stages.len() + shape.milestones.len();
            if row.len() != want {
                return Err(TranslateError::Malformed(format!(
                    "`{rel}` row has {} columns, expected {want}",
                    row.len()
                )));
            }
            if as_bool(row.last().unwrap(), rel)? {
                continue;
            }
            let id = as_id(&row[0], rel)?;
            let mut inst = Instance {
                ty: ty.clone(),
                attrs: BTreeMap::new(),
                stages: BTreeMap::new(),
                milestones: BTreeMap::new(),
                blank: false,
            };
            let mut i = 1;
            for a in &shape.attrs {
                inst.attrs.insert(a.clone(), row[i].clone());
                i += 1;
            }
            for s in &shape.stages {
                inst.stages.insert(s.clone(), as_bool(&row[i], rel)?);
                i += 1;
            }
            for m in &shape.milestones {
                inst.milestones.insert(m.clone(), as_bool(&row[i], rel)?);
                i += 1;
            }
            if snap.instances.insert(id, inst).is_some() {
                return Err(TranslateError::Malformed(format!(
                    "two live rows share id {id}"
                )));
            }
        }
    }
    Ok(snap)
}

/// The pending calls a database encodes: `(instance, task)` pairs.
pub fn pend_of(map: &TranslationMap, db: &DbInstance) -> Result<BTreeSet<(InstanceId, String)>, TranslateError> {
    let mut out = BTreeSet::new();
    for (task, rel) in &map.pend {
        for row in db.rows(rel) {
            out.insert((as_id(&row[0], rel)?, task.clone()));
        }
    }
    Ok(out)
}

// ==== bookkeeping bounds ==================================================

/// A broken bookkeeping invariant; reachable states have none.
#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum BoundViolation {
    #[error("block holds {got} rows for {want} instance rows")]
    BlockRows { got: usize, want: usize },
    #[error("exec holds {got} rows for {want} instance rows")]
    ExecRows { got: usize, want: usize },
    #[error("`{rel}` holds more than one payload row for instance {id}")]
    PayloadPool { rel: String, id: Value },
    #[error("instance {id} has {got} outgoing calls, bound {bound}")]
    OutRows { id: Value, got: usize, bound: usize },
    #[error("`{rel}` holds {rows} rows in an unblocked state")]
    Leak { rel: String, rows: usize },
}

/// Check the bookkeeping size invariants on one database: block and exec
/// track every instance row exactly once, message pools hold at most one
/// row per instance, outgoing pools at most one row per atomic stage of the
/// instance's type, and unblocked states have empty pools and change
/// tables.
pub fn check_aux_bounds(map: &TranslationMap, db: &DbInstance) -> Vec<BoundViolation> {
    let mut out = Vec::new();
    let mut type_of: BTreeMap<Value, &str> = BTreeMap::new();
    let mut att_rows = 0usize;
    for (ty, rel) in &map.att {
        for row in db.rows(rel) {
            att_rows += 1;
            type_of.insert(row[0].clone(), ty);
        }
    }
    let blocks = db.rows(&map.block).count();
    if blocks != att_rows {
        out.push(BoundViolation::BlockRows { got: blocks, want: att_rows });
    }
    let execs = db.rows(&map.exec).count();
    if execs != att_rows {
        out.push(BoundViolation::ExecRows { got: execs, want: att_rows });
    }

    for pool in [&map.msg, &map.srv] {
        let mut seen: BTreeMap<&Value, &String> = BTreeMap::new();
        for rel in pool.values() {
            for row in db.rows(rel) {
                if seen.insert(&row[0], rel).is_some() {
                    out.push(BoundViolation::PayloadPool { rel: rel.clone(), id: row[0].clone() });
                }
            }
        }
    }

    let mut out_counts: BTreeMap<&Value, usize> = BTreeMap::new();
    for rel in map.out.values() {
        for row in db.rows(rel) {
            *out_counts.entry(&row[0]).or_default() += 1;
        }
    }
    for (id, got) in out_counts {
        let bound = type_of
            .get(id)
            .and_then(|ty| map.atomic_stages.get(*ty))
            .copied()
            .unwrap_or(0);
        if got > bound {
            out.push(BoundViolation::OutRows { id: id.clone(), got, bound });
        }
    }

    let blocked = db
        .rows(&map.block)
        .any(|row| row[1] == Value::Bool(true));
    if !blocked {
        for rel in map
            .chg
            .values()
            .chain(map.msg.values())
            .chain(map.srv.values())
            .chain(map.out.values())
        {
            let rows = db.rows(rel).count();
            if rows > 0 {
                out.push(BoundViolation::Leak { rel: rel.clone(), rows });
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dcds::{apply_action, enabled_actions, Binding, GroundCall, ServiceOracle};
    use crate::engine::{Engine, EventAt, SystemState};
    use crate::model::parser::parse;
    use crate::pac::RuleKind;

    const SHOP: &str = r#"
model shop

event itemRequest { code }
event payRequest { }

artifact Order {
  attributes { code, last: id(Item), receipt }
  child Item { attributes { code } }

  stage "Manage order" {
    guard on itemRequest if not achieved "Order paid"
    task addItem {
      create Item
      inputs code
      returns ack
      set new.code := ret.ack
      set self.last := new
    }
    milestone "item added" {
      achieved on addItem.return
      invalidated on itemRequest
    }
  }

  stage "Pay order" {
    guard on payRequest if achieved "item added" and not open "Manage order"
    task pay {
      returns receipt
      set self.receipt := ret.receipt
    }
    milestone "Order paid" { achieved on pay.return }
  }
}

initial order1: Order { }
"#;

    const JANITOR: &str = r#"
model janitor
event zap { }
artifact Keeper {
  attributes { it: id(Thing) }
  child Thing { attributes { } }
  stage Fill {
    guard on zap if isnull it
    task make { create Thing set self.it := new }
    milestone filled { achieved on make.return }
  }
  stage Drop {
    guard on zap if notnull it
    task toss { delete it set self.it := null }
    milestone dropped { achieved on toss.return }
  }
}
initial k1: Keeper { }
"#;

    const WIRE: &str = r#"
model wire
event go { }
artifact Boss {
  attributes { mate: id(Gadget), tag }
  child Gadget { attributes { v } }
  stage Build {
    guard on go if isnull mate
    task forge { create Gadget returns k set new.v := ret.k set self.mate := new }
    milestone built { achieved on forge.return }
  }
  stage Mark {
    guard on go if notnull mate
    task stamp { returns w set self.tag := self.mate.v set self.mate.v := ret.w }
    milestone marked { achieved on stamp.return }
  }
}
initial b1: Boss { }
"#;

    fn compiled(src: &str, name: &str) -> (GsmModel, RuleSet) {
        let m = parse(src, name).unwrap();
        m.validate().unwrap();
        let rules = RuleSet::compile(&m).unwrap();
        (m, rules)
    }

    fn ev(event: &str, target: u64, payload: &[(&str, Value)]) -> EventAt {
        EventAt {
            event: event.into(),
            target: InstanceId(target),
            payload: payload.iter().map(|(k, v)| (k.to_string(), v.clone())).collect(),
        }
    }

    /// Routes every service call to a fixed per-service value.
    struct Routes(BTreeMap<String, Value>);

    impl ServiceOracle for Routes {
        fn assignments(&mut self, calls: &[GroundCall]) -> Vec<Vec<Value>> {
            vec![calls.iter().map(|c| self.0[&c.service].clone()).collect()]
        }
    }

    /// Oracle for one event: payload and return slots from the script,
    /// fresh-id services mirror the engine's next id.
    fn routes_for(
        map: &TranslationMap,
        event: &str,
        payload: &[(&str, Value)],
        fresh: InstanceId,
    ) -> Routes {
        let slot_value = |slot: &str| {
            payload
                .iter()
                .find(|(k, _)| *k == slot)
                .map(|(_, v)| v.clone())
                .unwrap_or(Value::Null)
        };
        let mut routes = BTreeMap::new();
        for (name, role) in &map.services {
            match role {
                ServiceRole::Payload { event: e, slot } if e == event => {
                    routes.insert(name.clone(), slot_value(slot));
                }
                ServiceRole::Return { task, slot }
                    if crate::model::return_event(task) == event =>
                {
                    routes.insert(name.clone(), slot_value(slot));
                }
                ServiceRole::FreshId { .. } => {
                    routes.insert(name.clone(), Value::Id(fresh));
                }
                _ => {}
            }
        }
        Routes(routes)
    }

    fn blocked(map: &TranslationMap, db: &DbInstance) -> bool {
        db.rows(&map.block).any(|r| r[1] == Value::Bool(true))
    }

    fn step(
        spec: &DcdsSpec,
        db: &DbInstance,
        action: &str,
        binding: &Binding,
        routes: &mut Routes,
    ) -> DbInstance {
        let out = apply_action(spec, db, action, binding, routes).unwrap();
        assert_eq!(out.discarded, vec![], "`{action}` violated a key");
        assert_eq!(
            out.successors.len(),
            1,
            "`{action}` must have one successor under a fixed oracle"
        );
        out.successors.into_iter().next().unwrap()
    }

    /// Deliver one event through the action chain: inject, then follow the
    /// forced successor until the state unblocks.
    fn drive(
        spec: &DcdsSpec,
        map: &TranslationMap,
        db: &DbInstance,
        event: &str,
        target: InstanceId,
        routes: &mut Routes,
    ) -> DbInstance {
        let binding: Binding = [("id".to_string(), Value::Id(target))].into_iter().collect();
        let enabled = enabled_actions(spec, db);
        let action = map.inject_actions[event]
            .values()
            .find(|a| enabled.contains(&((*a).clone(), binding.clone())))
            .unwrap_or_else(|| panic!("no enabled injection for {event} at {target}"));
        let mut cur = step(spec, db, action, &binding, routes);
        let mut chained = 0usize;
        while blocked(map, &cur) {
            let enabled = enabled_actions(spec, &cur);
            assert_eq!(enabled.len(), 1, "blocked states force one action: {enabled:?}");
            let (action, binding) = enabled.into_iter().next().unwrap();
            cur = step(spec, &cur, &action, &binding, routes);
            chained += 1;
            assert!(chained <= map.rule_count + 1, "chain exceeded its bound");
        }
        cur
    }

    fn assert_matches_engine(map: &TranslationMap, db: &DbInstance, state: &SystemState) {
        let snap = filter_state(map, db).unwrap();
        assert_eq!(snap.facts(&map.shapes), state.snapshot.facts(&map.shapes));
        assert_eq!(pend_of(map, db).unwrap(), state.pending);
        assert_eq!(check_aux_bounds(map, db), vec![]);
    }

    fn next_engine_id(s: &SystemState) -> InstanceId {
        InstanceId(s.snapshot.instances.keys().map(|k| k.0).max().unwrap_or(0) + 1)
    }

    /// Run one script through both semantics, comparing after every event.
    fn cross_check(src: &str, name: &str, bounds: Option<ContainerConfig>, script: &[(&str, u64, Vec<(&str, Value)>)]) {
        let (m, rules) = compiled(src, name);
        let eng = match &bounds {
            Some(b) => Engine::with_containers(&m, &rules, b).unwrap(),
            None => Engine::new(&m, &rules),
        };
        let (spec, map) = translate(&m, &rules, bounds.as_ref()).unwrap();
        spec.validate().unwrap();

        let mut s = SystemState::initial(&m);
        let mut db = spec.initial.clone();
        assert_matches_engine(&map, &db, &s);
        for (event, target, payload) in script {
            let fresh = next_engine_id(&s);
            s = eng.b_step(&s, &ev(event, *target, payload)).unwrap().0;
            let mut routes = routes_for(&map, event, payload, fresh);
            db = drive(&spec, &map, &db, event, InstanceId(*target), &mut routes);
            assert_matches_engine(&map, &db, &s);
        }
    }

    #[test]
    fn translation_validates_and_covers_the_model() {
        let (m, rules) = compiled(SHOP, "shop");
        let (spec, map) = translate(&m, &rules, None).unwrap();
        spec.validate().unwrap();

        assert_eq!(map.rule_count, rules.rules.len());
        assert_eq!(map.rule_actions.len(), rules.rules.len());
        for name in &map.rule_actions {
            assert!(spec.actions.contains_key(name));
        }
        assert_eq!(
            spec.schema.relations[&map.exec].arity,
            1 + rules.rules.len()
        );
        // One injection per (event, target) pair plus the task returns.
        assert!(map.inject_actions["itemRequest"].contains_key("Order"));
        assert!(map.inject_actions["addItem.return"].contains_key("Order"));
        let report = map.report();
        assert!(report.contains("finalize"));
        assert!(report.contains("payload itemRequest.code"));
        assert!(report.contains("fresh Item id"));
    }

    #[test]
    fn rule_actions_carry_the_antecedent_in_effects() {
        let (m, rules) = compiled(SHOP, "shop");
        let (spec, map) = translate(&m, &rules, None).unwrap();
        let rid = rules
            .rules
            .iter()
            .position(|r| matches!(&r.kind, RuleKind::MilestoneInvalidateOnSentry { .. }))
            .unwrap();
        let name = &map.rule_actions[rid];
        let action = &spec.actions[name];

        // The condition only sequences the chain: eligibility flag unset,
        // all earlier flags set, instance blocked. No sentry parts.
        let ca = spec.ca_rules.iter().find(|c| c.action == *name).unwrap();
        let Query::And(parts) = &ca.query else {
            panic!("sequencing condition is a conjunction")
        };
        assert!(parts.iter().any(|q| matches!(q, Query::Atom { rel, .. } if *rel == map.exec)));
        assert!(parts.iter().any(|q| matches!(q, Query::Atom { rel, .. } if *rel == map.block)));
        assert!(parts.iter().any(|q| matches!(
            q,
            Query::Cmp { lhs: QTerm::Var(x), op: QCmp::Eq, rhs: QTerm::Const(Value::Bool(false)) }
                if *x == format!("x{rid:02}")
        )));

        // The fired effect records the change; the flag effect ticks the
        // eligibility column; every relation is carried over.
        let chg_rel = &map.chg[&("Order".to_string(), StatusAttr::Milestone("item added".into()))];
        assert!(action
            .effects
            .iter()
            .any(|e| e.head.iter().any(|(rel, _)| rel == chg_rel)));
        let flag_col = |e: &EffectSpec| {
            e.head.iter().any(|(rel, row)| {
                *rel == map.exec && row[1 + rid] == ETerm::Const(Value::Bool(true))
            })
        };
        assert!(action.effects.iter().any(flag_col));
        for rel in spec.schema.relations.keys() {
            assert!(
                action.effects.iter().any(|e| e.head.iter().any(|(r, _)| r == rel)),
                "rule actions write or copy every relation, missing `{rel}`"
            );
        }
    }

    #[test]
    fn initial_database_seeds_blank_containers() {
        let (m, rules) = compiled(JANITOR, "janitor");
        let bounds: ContainerConfig = [("Thing".to_string(), 2)].into();
        let (spec, map) = translate(&m, &rules, Some(&bounds)).unwrap();

        assert_eq!(spec.initial.rows(&map.att["Keeper"]).count(), 1);
        let things: Vec<_> = spec.initial.rows(&map.att["Thing"]).collect();
        assert_eq!(things.len(), 2);
        for row in &things {
            assert_eq!(*row.last().unwrap(), Value::Bool(true), "containers start blank");
        }
        assert_eq!(spec.initial.rows(&map.block).count(), 3);
        assert_eq!(spec.initial.rows(&map.exec).count(), 3);

        let snap = filter_state(&map, &spec.initial).unwrap();
        assert_eq!(snap.facts(&map.shapes), m.initial_snapshot().facts(&map.shapes));
        assert_eq!(check_aux_bounds(&map, &spec.initial), vec![]);
    }

    #[test]
    fn filtering_requires_an_unblocked_state() {
        let (m, rules) = compiled(SHOP, "shop");
        let (spec, map) = translate(&m, &rules, None).unwrap();
        let binding: Binding = [("id".to_string(), Value::Id(InstanceId(1)))].into_iter().collect();
        let mut routes = routes_for(&map, "itemRequest", &[("code", Value::str("c"))], InstanceId(2));
        let db = step(
            &spec,
            &spec.initial,
            &map.inject_actions["itemRequest"]["Order"],
            &binding,
            &mut routes,
        );
        assert!(matches!(filter_state(&map, &db), Err(TranslateError::Blocked)));
    }

    #[test]
    fn driven_chain_matches_the_engine_on_shop() {
        cross_check(
            SHOP,
            "shop",
            None,
            &[
                ("itemRequest", 1, vec![("code", Value::str("c1"))]),
                ("addItem.return", 1, vec![("ack", Value::str("a1"))]),
                ("payRequest", 1, vec![]),
                ("pay.return", 1, vec![("receipt", Value::str("r"))]),
                ("itemRequest", 1, vec![("code", Value::str("c2"))]),
            ],
        );
    }

    #[test]
    fn driven_chain_matches_the_engine_with_containers() {
        cross_check(
            JANITOR,
            "janitor",
            Some([("Thing".to_string(), 1)].into()),
            &[
                ("zap", 1, vec![]),
                ("make.return", 1, vec![]),
                ("zap", 1, vec![]),
                ("toss.return", 1, vec![]),
                ("zap", 1, vec![]),
                ("make.return", 1, vec![]),
            ],
        );
    }

    #[test]
    fn driven_chain_matches_the_engine_with_write_through() {
        cross_check(
            WIRE,
            "wire",
            None,
            &[
                ("go", 1, vec![]),
                ("forge.return", 1, vec![("k", Value::str("g0"))]),
                ("go", 1, vec![]),
                ("stamp.return", 1, vec![("w", Value::str("g1"))]),
            ],
        );
    }

    #[test]
    fn bound_checker_flags_corruption() {
        let (m, rules) = compiled(SHOP, "shop");
        let (spec, map) = translate(&m, &rules, None).unwrap();

        let mut db = spec.initial.clone();
        db.facts.get_mut(&map.block).unwrap().clear();
        assert!(check_aux_bounds(&map, &db)
            .iter()
            .any(|v| matches!(v, BoundViolation::BlockRows { got: 0, want: 1 })));

        let mut db = spec.initial.clone();
        db.insert(&map.msg["itemRequest"], vec![Value::Id(InstanceId(1)), Value::str("x")]);
        assert!(check_aux_bounds(&map, &db)
            .iter()
            .any(|v| matches!(v, BoundViolation::Leak { .. })));

        // Two in-flight returns for one instance, in a blocked state so the
        // leak rule stays quiet.
        let mut db = spec.initial.clone();
        let rel = db.facts.get_mut(&map.block).unwrap();
        rel.clear();
        rel.insert(vec![Value::Id(InstanceId(1)), Value::Bool(true)]);
        db.insert(&map.srv["pay"], vec![Value::Id(InstanceId(1)), Value::str("r1")]);
        db.insert(&map.srv["addItem"], vec![Value::Id(InstanceId(1)), Value::str("r2")]);
        assert!(check_aux_bounds(&map, &db)
            .iter()
            .any(|v| matches!(v, BoundViolation::PayloadPool { .. })));
    }

    #[test]
    fn rebounding_equals_direct_bounded_translation() {
        let (m, rules) = compiled(JANITOR, "janitor");
        let bounds: ContainerConfig = [("Thing".to_string(), 1)].into();
        let (spec_u, map_u) = translate(&m, &rules, None).unwrap();
        let (spec_b, map_b) = apply_container_semantics(&spec_u, &map_u, &bounds).unwrap();
        let (spec_d, map_d) = translate(&m, &rules, Some(&bounds)).unwrap();

        assert_eq!(spec_b, spec_d);
        assert_eq!(map_b.att, map_d.att);
        assert_eq!(map_b.containers, Some(bounds));
        // Bounding trades the fresh-id service for container claiming.
        assert!(map_u.services.values().any(|r| matches!(r, ServiceRole::FreshId { .. })));
        assert!(!map_b.services.values().any(|r| matches!(r, ServiceRole::FreshId { .. })));
    }
}
