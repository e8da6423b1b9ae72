//! GSM model structure: artifact types with information models and
//! lifecycles, one-way event declarations, and the initial snapshot.
//!
//! Models are read either from the block-structured text format (see
//! `docs/model-format.md`) or from its JSON mirror; both produce the same
//! [`GsmModel`] and run the same validation.

mod condition;
pub mod parser;
pub mod printer;
pub mod script;
mod snapshot;
pub mod turing;

pub use condition::{eval_term, Atom, CmpOp, Condition, StatusRead, Term};
pub use snapshot::{Instance, Snapshot};

use crate::value::{InstanceId, Value};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("{path}:{line}:{col}: {msg}")]
    Syntax {
        path: String,
        line: usize,
        col: usize,
        msg: String,
    },
    #[error("unknown {what} `{name}`{ctx}")]
    Unknown {
        what: &'static str,
        name: String,
        ctx: String,
    },
    #[error("duplicate {what} `{name}`")]
    Duplicate { what: &'static str, name: String },
    #[error("{0}")]
    Invalid(String),
    #[error("reading model: {0}")]
    Io(#[from] std::io::Error),
    #[error("model JSON: {0}")]
    Json(#[from] serde_json::Error),
}

// ==== structure ===========================================================

/// One-way incoming event type. Service-call-return event types are not
/// declared; every task `t` implicitly has a return event named `t.return`
/// whose payload signature is the task's `returns` list.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventType {
    pub name: String,
    /// Payload attribute names; they must name attributes of every artifact
    /// type the event can target, and are written into those attributes when
    /// the event is incorporated.
    pub payload: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttrDecl {
    pub name: String,
    pub sort: AttrSort,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AttrSort {
    Scalar,
    /// Holds the id of an instance of the named type (or null).
    IdRef(String),
}

/// Child artifact type: own information model, empty lifecycle, and an
/// implicit `parent` id-ref attribute connecting it to its parent instance.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChildType {
    pub name: String,
    pub attributes: Vec<AttrDecl>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactType {
    pub name: String,
    pub attributes: Vec<AttrDecl>,
    pub children: Vec<ChildType>,
    pub stages: Vec<Stage>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stage {
    pub name: String,
    /// Nonempty; the stage opens when any guard's sentry fires.
    pub guards: Vec<Sentry>,
    pub milestones: Vec<Milestone>,
    pub body: StageBody,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum StageBody {
    Atomic { task: Option<Task> },
    Composite { substages: Vec<Stage> },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Milestone {
    pub name: String,
    pub achieving: Sentry,
    pub invalidating: Vec<Sentry>,
}

/// `on e if cond`: both parts optional, but not both absent.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct Sentry {
    pub on_event: Option<EventRef>,
    pub condition: Option<Condition>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EventRef {
    /// A declared one-way event arriving from the environment.
    External(String),
    /// The service-call return of the named task (task completion).
    TaskReturn(String),
    /// An internal status-change event of this instance: `+S`, `-S`, `+m`, `-m`.
    Internal { target: StatusAttr, to: bool },
}

/// A status attribute of an artifact type (stage or milestone), identified
/// by name; names are unique per kind within an artifact type.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum StatusAttr {
    Stage(String),
    Milestone(String),
}

impl fmt::Display for StatusAttr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StatusAttr::Stage(s) => write!(f, "stage {s}"),
            StatusAttr::Milestone(m) => write!(f, "milestone {m}"),
        }
    }
}

/// A two-phase unit of work bound to an atomic stage: opening the stage
/// dispatches the service call (inputs evaluated then), and the return event
/// `name.return` later carries the `returns` payload, incorporated by
/// running `assigns`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Task {
    pub name: String,
    pub kind: TaskKind,
    pub inputs: Vec<Term>,
    pub returns: Vec<String>,
    pub assigns: Vec<Assign>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TaskKind {
    /// Update attributes of the dispatching instance (or, through one id-ref
    /// dereference, of an instance it points to).
    Update,
    /// Create an instance of a child type of the same artifact; a fresh id is
    /// assigned (or a free container claimed) and `parent` is set to the
    /// creator.
    Create { artifact_type: String },
    /// Delete the instance whose id the target term evaluates to.
    Delete { target: Term },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assign {
    pub target: AssignTarget,
    pub value: AssignValue,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AssignTarget {
    /// Attribute of the dispatching instance (length 1) or of the instance an
    /// id-ref attribute points to (length 2, write-through).
    SelfPath(Vec<String>),
    /// Attribute of the instance being created (create tasks only).
    NewAttr(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AssignValue {
    /// Named slot of the return payload.
    Payload(String),
    Const(Value),
    /// Term evaluated on the dispatching instance at return time.
    Term(Term),
    /// Id of the instance being created (create tasks only).
    NewId,
}

/// Declared instance of the initial snapshot. Ids are positional: the i-th
/// declaration (0-based) gets id i+1.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InitialInstance {
    pub name: String,
    pub ty: String,
    pub attrs: Vec<(String, Value)>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GsmModel {
    pub name: String,
    pub events: Vec<EventType>,
    pub artifacts: Vec<ArtifactType>,
    pub initial: Vec<InitialInstance>,
}

// ==== derived views =======================================================

/// Flattened column layout of one (top-level or child) type: attribute,
/// stage and milestone names in declaration order. Shared by snapshot fact
/// listings and the relational translation, so both sides agree on columns.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ArtifactShape {
    pub name: String,
    pub attrs: Vec<String>,
    pub stages: Vec<String>,
    pub milestones: Vec<String>,
    pub is_child: bool,
}

pub type ShapeMap = BTreeMap<String, ArtifactShape>;

/// A stage together with its position in the hierarchy.
#[derive(Clone, Copy, Debug)]
pub struct StageInfo<'a> {
    pub stage: &'a Stage,
    pub parent: Option<&'a str>,
    pub depth: usize,
}

impl ArtifactType {
    /// All stages, depth-first in declaration order.
    pub fn stages_rec(&self) -> Vec<StageInfo<'_>> {
        let mut out = Vec::new();
        for s in &self.stages {
            collect_stages(s, None, 0, &mut out);
        }
        out
    }

    pub fn find_stage(&self, name: &str) -> Option<StageInfo<'_>> {
        self.stages_rec().into_iter().find(|si| si.stage.name == name)
    }

    /// The stage owning the named milestone.
    pub fn milestone_owner(&self, milestone: &str) -> Option<StageInfo<'_>> {
        self.stages_rec()
            .into_iter()
            .find(|si| si.stage.milestones.iter().any(|m| m.name == milestone))
    }

    /// All tasks with their owning stage.
    pub fn tasks(&self) -> Vec<(&Task, &Stage)> {
        self.stages_rec()
            .into_iter()
            .filter_map(|si| match &si.stage.body {
                StageBody::Atomic { task: Some(t) } => Some((t, si.stage)),
                _ => None,
            })
            .collect()
    }

    pub fn task(&self, name: &str) -> Option<(&Task, &Stage)> {
        self.tasks().into_iter().find(|(t, _)| t.name == name)
    }

    pub fn child(&self, name: &str) -> Option<&ChildType> {
        self.children.iter().find(|c| c.name == name)
    }

    pub fn attr(&self, name: &str) -> Option<&AttrDecl> {
        self.attributes.iter().find(|a| a.name == name)
    }
}

fn collect_stages<'a>(
    stage: &'a Stage,
    parent: Option<&'a str>,
    depth: usize,
    out: &mut Vec<StageInfo<'a>>,
) {
    out.push(StageInfo { stage, parent, depth });
    if let StageBody::Composite { substages } = &stage.body {
        for s in substages {
            collect_stages(s, Some(&stage.name), depth + 1, out);
        }
    }
}

impl Stage {
    pub fn is_atomic(&self) -> bool {
        matches!(self.body, StageBody::Atomic { .. })
    }

    pub fn task(&self) -> Option<&Task> {
        match &self.body {
            StageBody::Atomic { task } => task.as_ref(),
            _ => None,
        }
    }
}

impl GsmModel {
    pub fn artifact(&self, name: &str) -> Option<&ArtifactType> {
        self.artifacts.iter().find(|a| a.name == name)
    }

    pub fn oneway_event(&self, name: &str) -> Option<&EventType> {
        self.events.iter().find(|e| e.name == name)
    }

    /// The artifact type owning the named (top-level or child) type, plus
    /// whether it is a child type.
    pub fn owner_of(&self, ty: &str) -> Option<(&ArtifactType, bool)> {
        for a in &self.artifacts {
            if a.name == ty {
                return Some((a, false));
            }
            if a.children.iter().any(|c| c.name == ty) {
                return Some((a, true));
            }
        }
        None
    }

    /// Column layouts for every declared type.
    pub fn shapes(&self) -> ShapeMap {
        let mut out = BTreeMap::new();
        for a in &self.artifacts {
            let stages: Vec<String> = a.stages_rec().iter().map(|si| si.stage.name.clone()).collect();
            let milestones: Vec<String> = a
                .stages_rec()
                .iter()
                .flat_map(|si| si.stage.milestones.iter().map(|m| m.name.clone()))
                .collect();
            out.insert(
                a.name.clone(),
                ArtifactShape {
                    name: a.name.clone(),
                    attrs: a.attributes.iter().map(|d| d.name.clone()).collect(),
                    stages,
                    milestones,
                    is_child: false,
                },
            );
            for c in &a.children {
                out.insert(
                    c.name.clone(),
                    ArtifactShape {
                        name: c.name.clone(),
                        attrs: c.attributes.iter().map(|d| d.name.clone()).collect(),
                        stages: vec![],
                        milestones: vec![],
                        is_child: true,
                    },
                );
            }
        }
        out
    }

    /// Artifact types a one-way event can target: those with a sentry on it.
    pub fn event_targets(&self, event: &str) -> Vec<&ArtifactType> {
        self.artifacts
            .iter()
            .filter(|a| {
                all_sentries(a).into_iter().any(|s| {
                    matches!(&s.on_event, Some(EventRef::External(e)) if e == event)
                })
            })
            .collect()
    }

    /// Whether any task creates artifact instances. Models where this is
    /// false have constant information-model size along every run.
    pub fn has_creation_tasks(&self) -> bool {
        self.artifacts
            .iter()
            .flat_map(|a| a.tasks())
            .any(|(t, _)| matches!(t.kind, TaskKind::Create { .. }))
    }

    /// The initial snapshot: declared instances with positional ids,
    /// undeclared attributes null, all stages closed, all milestones invalid.
    pub fn initial_snapshot(&self) -> Snapshot {
        let shapes = self.shapes();
        let mut snap = Snapshot::default();
        for (i, decl) in self.initial.iter().enumerate() {
            let id = InstanceId(i as u64 + 1);
            let shape = &shapes[&decl.ty];
            let mut inst = Instance::fresh(shape);
            for (k, v) in &decl.attrs {
                inst.attrs.insert(k.clone(), v.clone());
            }
            snap.instances.insert(id, inst);
        }
        snap
    }

    /// Id of a named initial instance.
    pub fn initial_id(&self, name: &str) -> Option<InstanceId> {
        self.initial
            .iter()
            .position(|d| d.name == name)
            .map(|i| InstanceId(i as u64 + 1))
    }

    /// Every string constant the model mentions (conditions, assignments,
    /// initial attribute values). These keep their identity under the
    /// abstraction's canonical renaming.
    pub fn constants(&self) -> BTreeSet<Value> {
        let mut out = BTreeSet::new();
        let add_term = |t: &Term, out: &mut BTreeSet<Value>| {
            if let Term::Const(v) = t {
                out.insert(v.clone());
            }
        };
        let add_cond = |c: &Condition, out: &mut BTreeSet<Value>| {
            for atom in c.atoms() {
                match atom {
                    Atom::Cmp { lhs, rhs, .. } => {
                        add_term(lhs, out);
                        add_term(rhs, out);
                    }
                    Atom::IsNull(t) | Atom::NotNull(t) => add_term(t, out),
                    Atom::ExistsChild { cond: Some(c), .. } => {
                        for a in c.atoms() {
                            if let Atom::Cmp { lhs, rhs, .. } = a {
                                add_term(lhs, out);
                                add_term(rhs, out);
                            }
                        }
                    }
                    _ => {}
                }
            }
        };
        for a in &self.artifacts {
            for si in a.stages_rec() {
                for g in &si.stage.guards {
                    if let Some(c) = &g.condition {
                        add_cond(c, &mut out);
                    }
                }
                for m in &si.stage.milestones {
                    for s in std::iter::once(&m.achieving).chain(m.invalidating.iter()) {
                        if let Some(c) = &s.condition {
                            add_cond(c, &mut out);
                        }
                    }
                }
                if let Some(t) = si.stage.task() {
                    for term in &t.inputs {
                        add_term(term, &mut out);
                    }
                    if let TaskKind::Delete { target } = &t.kind {
                        add_term(target, &mut out);
                    }
                    for asg in &t.assigns {
                        match &asg.value {
                            AssignValue::Const(v) => {
                                out.insert(v.clone());
                            }
                            AssignValue::Term(t) => add_term(t, &mut out),
                            _ => {}
                        }
                    }
                }
            }
        }
        for decl in &self.initial {
            for (_, v) in &decl.attrs {
                out.insert(v.clone());
            }
        }
        out.remove(&Value::Null);
        out
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        validate(self)
    }
}

fn all_sentries(a: &ArtifactType) -> Vec<&Sentry> {
    let mut out = Vec::new();
    for si in a.stages_rec() {
        out.extend(si.stage.guards.iter());
        for m in &si.stage.milestones {
            out.push(&m.achieving);
            out.extend(m.invalidating.iter());
        }
    }
    out
}

/// Name of the implicit service-call-return event of a task.
pub fn return_event(task: &str) -> String {
    format!("{task}.return")
}

/// Inverse of [`return_event`].
pub fn task_of_return(event: &str) -> Option<&str> {
    event.strip_suffix(".return")
}

// ==== validation ==========================================================

fn dup_check<'a>(
    what: &'static str,
    names: impl Iterator<Item = &'a str>,
) -> Result<(), ModelError> {
    let mut seen = BTreeSet::new();
    for n in names {
        if !seen.insert(n) {
            return Err(ModelError::Duplicate {
                what,
                name: n.to_string(),
            });
        }
    }
    Ok(())
}

fn unknown(what: &'static str, name: &str, ctx: impl Into<String>) -> ModelError {
    ModelError::Unknown {
        what,
        name: name.to_string(),
        ctx: {
            let c = ctx.into();
            if c.is_empty() {
                c
            } else {
                format!(" in {c}")
            }
        },
    }
}

fn validate(model: &GsmModel) -> Result<(), ModelError> {
    dup_check("event", model.events.iter().map(|e| e.name.as_str()))?;
    dup_check(
        "artifact type",
        model
            .artifacts
            .iter()
            .flat_map(|a| std::iter::once(a.name.as_str()).chain(a.children.iter().map(|c| c.name.as_str()))),
    )?;

    // Task names are global: `t.return` events are routed by task name alone.
    dup_check(
        "task",
        model
            .artifacts
            .iter()
            .flat_map(|a| a.tasks().into_iter().map(|(t, _)| t.name.as_str())),
    )?;

    for a in &model.artifacts {
        validate_artifact(model, a)?;
    }

    // One-way payload signatures must land in scalar attributes of every
    // target type: id-ref attributes only ever receive typed writes (`new`,
    // a matching path, or null), never raw environment data.
    for ev in &model.events {
        dup_check("payload attribute", ev.payload.iter().map(|s| s.as_str()))?;
        for target in model.event_targets(&ev.name) {
            for p in &ev.payload {
                match target.attr(p).map(|d| &d.sort) {
                    None => {
                        return Err(ModelError::Invalid(format!(
                            "event `{}` payload `{p}` is not an attribute of target type `{}`",
                            ev.name, target.name
                        )))
                    }
                    Some(AttrSort::IdRef(_)) => {
                        return Err(ModelError::Invalid(format!(
                            "event `{}` payload `{p}` would write an id-ref attribute of `{}`",
                            ev.name, target.name
                        )))
                    }
                    Some(AttrSort::Scalar) => {}
                }
            }
        }
    }

    // Initial instances: known types, known attributes, id values in range.
    dup_check("initial instance", model.initial.iter().map(|d| d.name.as_str()))?;
    let n = model.initial.len() as u64;
    for decl in &model.initial {
        let Some((owner, is_child)) = model.owner_of(&decl.ty) else {
            return Err(unknown("artifact type", &decl.ty, format!("initial instance `{}`", decl.name)));
        };
        for (attr, v) in &decl.attrs {
            let sort = if is_child {
                owner
                    .child(&decl.ty)
                    .unwrap()
                    .attributes
                    .iter()
                    .find(|d| d.name == *attr)
                    .map(|d| &d.sort)
            } else {
                owner.attr(attr).map(|d| &d.sort)
            };
            let Some(sort) = sort else {
                return Err(unknown("attribute", attr, format!("initial instance `{}`", decl.name)));
            };
            if let Value::Id(InstanceId(k)) = v {
                if *k == 0 || *k > n {
                    return Err(ModelError::Invalid(format!(
                        "initial instance `{}` references id #{k}, but only #1..#{n} are declared",
                        decl.name
                    )));
                }
                let referenced = &model.initial[*k as usize - 1].ty;
                if !matches!(sort, AttrSort::IdRef(t) if t == referenced) {
                    return Err(ModelError::Invalid(format!(
                        "initial instance `{}` stores a `{referenced}` id in `{attr}`, which is not declared id({referenced})",
                        decl.name
                    )));
                }
            }
        }
    }
    Ok(())
}

fn validate_artifact(model: &GsmModel, a: &ArtifactType) -> Result<(), ModelError> {
    dup_check(
        "attribute",
        a.attributes.iter().map(|d| d.name.as_str()),
    )?;
    for c in &a.children {
        dup_check("attribute", c.attributes.iter().map(|d| d.name.as_str()))?;
        if !c.attributes.iter().any(|d| d.name == "parent") {
            return Err(ModelError::Invalid(format!(
                "child type `{}` lacks the `parent` attribute",
                c.name
            )));
        }
    }

    let stages = a.stages_rec();
    dup_check("stage", stages.iter().map(|si| si.stage.name.as_str()))?;
    dup_check(
        "milestone",
        stages
            .iter()
            .flat_map(|si| si.stage.milestones.iter().map(|m| m.name.as_str())),
    )?;
    // Attribute sorts must reference declared types.
    let attr_sorts = a
        .attributes
        .iter()
        .map(|d| (d, a.name.as_str()))
        .chain(a.children.iter().flat_map(|c| c.attributes.iter().map(move |d| (d, c.name.as_str()))));
    for (decl, owner) in attr_sorts {
        if let AttrSort::IdRef(ty) = &decl.sort {
            if model.owner_of(ty).is_none() {
                return Err(unknown("artifact type", ty, format!("attribute `{}` of `{owner}`", decl.name)));
            }
        }
    }

    for si in &stages {
        let stage = si.stage;
        if stage.guards.is_empty() {
            return Err(ModelError::Invalid(format!(
                "stage `{}` has no guards",
                stage.name
            )));
        }
        for g in &stage.guards {
            validate_sentry(model, a, g, &format!("guard of stage `{}`", stage.name))?;
        }
        for m in &stage.milestones {
            validate_sentry(model, a, &m.achieving, &format!("milestone `{}`", m.name))?;
            if m.achieving.on_event.is_none() && m.achieving.condition.is_none() {
                return Err(ModelError::Invalid(format!(
                    "milestone `{}` has an empty achieving sentry",
                    m.name
                )));
            }
            for s in &m.invalidating {
                validate_sentry(model, a, s, &format!("invalidating sentry of `{}`", m.name))?;
            }
        }
        if let Some(task) = stage.task() {
            validate_task(model, a, task, &stage.name)?;
        }
        if !stage.is_atomic() && stage.task().is_some() {
            unreachable!("composite stages cannot carry tasks by construction");
        }
    }
    Ok(())
}

fn validate_sentry(
    model: &GsmModel,
    a: &ArtifactType,
    s: &Sentry,
    ctx: &str,
) -> Result<(), ModelError> {
    match &s.on_event {
        None => {}
        Some(EventRef::External(e)) => {
            if model.oneway_event(e).is_none() {
                return Err(unknown("event", e, ctx));
            }
        }
        Some(EventRef::TaskReturn(t)) => {
            if a.task(t).is_none() {
                return Err(unknown("task", t, ctx));
            }
        }
        Some(EventRef::Internal { target, .. }) => match target {
            StatusAttr::Stage(name) => {
                if a.find_stage(name).is_none() {
                    return Err(unknown("stage", name, ctx));
                }
            }
            StatusAttr::Milestone(name) => {
                if a.milestone_owner(name).is_none() {
                    return Err(unknown("milestone", name, ctx));
                }
            }
        },
    }
    if let Some(c) = &s.condition {
        validate_condition(model, a, c, ctx)?;
    }
    Ok(())
}

fn validate_condition(
    model: &GsmModel,
    a: &ArtifactType,
    c: &Condition,
    ctx: &str,
) -> Result<(), ModelError> {
    for atom in c.atoms() {
        match atom {
            Atom::StageOpen(name) => {
                if a.find_stage(name).is_none() {
                    return Err(unknown("stage", name, ctx));
                }
            }
            Atom::MilestoneAchieved(name) => {
                if a.milestone_owner(name).is_none() {
                    return Err(unknown("milestone", name, ctx));
                }
            }
            Atom::Cmp { lhs, rhs, .. } => {
                validate_path_term(model, a, &a.name, lhs, ctx)?;
                validate_path_term(model, a, &a.name, rhs, ctx)?;
            }
            Atom::IsNull(t) | Atom::NotNull(t) => validate_path_term(model, a, &a.name, t, ctx)?,
            Atom::ExistsChild { child, cond } => {
                let Some(ct) = a.child(child) else {
                    return Err(unknown("child type", child, ctx));
                };
                if let Some(inner) = cond {
                    for ia in inner.atoms() {
                        match ia {
                            Atom::Cmp { lhs, rhs, .. } => {
                                validate_child_term(model, ct, lhs, ctx)?;
                                validate_child_term(model, ct, rhs, ctx)?;
                            }
                            Atom::IsNull(t) | Atom::NotNull(t) => {
                                validate_child_term(model, ct, t, ctx)?
                            }
                            _ => {
                                return Err(ModelError::Invalid(format!(
                                    "{ctx}: child conditions may only compare attributes"
                                )))
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(())
}

/// Check a dotted path starting from the named type: every non-final
/// segment must be an id-ref attribute of the type reached so far.
fn validate_path(
    model: &GsmModel,
    start_ty: &str,
    path: &[String],
    ctx: &str,
) -> Result<(), ModelError> {
    let mut ty = start_ty.to_string();
    for (i, seg) in path.iter().enumerate() {
        let Some((owner, is_child)) = model.owner_of(&ty) else {
            return Err(unknown("artifact type", &ty, ctx));
        };
        let decl = if is_child {
            owner
                .child(&ty)
                .and_then(|c| c.attributes.iter().find(|d| d.name == *seg))
        } else {
            owner.attr(seg)
        };
        let Some(decl) = decl else {
            return Err(unknown("attribute", seg, format!("{ctx} (type `{ty}`)")));
        };
        if i + 1 < path.len() {
            match &decl.sort {
                AttrSort::IdRef(next) => ty = next.clone(),
                AttrSort::Scalar => {
                    return Err(ModelError::Invalid(format!(
                        "{ctx}: `{seg}` is scalar and cannot be dereferenced"
                    )))
                }
            }
        }
    }
    Ok(())
}

/// Sort of the attribute a validated path ends in.
fn path_sort<'m>(model: &'m GsmModel, start_ty: &str, path: &[String]) -> Option<&'m AttrSort> {
    let mut ty = start_ty.to_string();
    let mut sort = None;
    for seg in path {
        let (owner, is_child) = model.owner_of(&ty)?;
        let decl = if is_child {
            owner.child(&ty)?.attributes.iter().find(|d| d.name == *seg)?
        } else {
            owner.attr(seg)?
        };
        if let AttrSort::IdRef(next) = &decl.sort {
            ty = next.clone();
        }
        sort = Some(&decl.sort);
    }
    sort
}

fn validate_path_term(
    model: &GsmModel,
    _a: &ArtifactType,
    start_ty: &str,
    t: &Term,
    ctx: &str,
) -> Result<(), ModelError> {
    if let Term::Path(p) = t {
        validate_path(model, start_ty, p, ctx)?;
    }
    Ok(())
}

fn validate_child_term(
    model: &GsmModel,
    ct: &ChildType,
    t: &Term,
    ctx: &str,
) -> Result<(), ModelError> {
    if let Term::Path(p) = t {
        validate_path(model, &ct.name, p, ctx)?;
    }
    Ok(())
}

fn validate_task(
    model: &GsmModel,
    a: &ArtifactType,
    task: &Task,
    stage: &str,
) -> Result<(), ModelError> {
    let ctx = format!("task `{}` of stage `{stage}`", task.name);
    dup_check("return attribute", task.returns.iter().map(|s| s.as_str()))?;

    let created: Option<&ChildType> = match &task.kind {
        TaskKind::Create { artifact_type } => {
            let Some(ct) = a.child(artifact_type) else {
                return Err(unknown("child type", artifact_type, ctx));
            };
            Some(ct)
        }
        TaskKind::Delete { target } => {
            // The deleted instance's type must be known statically, so the
            // target is a short path ending in an id-ref attribute.
            let Term::Path(p) = target else {
                return Err(ModelError::Invalid(format!(
                    "{ctx}: delete targets are attribute paths, not `{target:?}`"
                )));
            };
            if p.is_empty() || p.len() > 2 {
                return Err(ModelError::Invalid(format!(
                    "{ctx}: delete target paths have one or two segments"
                )));
            }
            validate_path(model, &a.name, p, &ctx)?;
            if !matches!(path_sort(model, &a.name, p), Some(AttrSort::IdRef(_))) {
                return Err(ModelError::Invalid(format!(
                    "{ctx}: delete target `{}` is not an id-ref attribute",
                    p.join(".")
                )));
            }
            None
        }
        _ => None,
    };

    // Assignments are all evaluated against the state at return time, so a
    // later assign must not read an attribute an earlier one wrote.
    let mut written: std::collections::BTreeSet<&str> = std::collections::BTreeSet::new();
    let reads_written = |p: &[String], written: &std::collections::BTreeSet<&str>| {
        p.iter().find(|seg| written.contains(seg.as_str())).cloned()
    };
    let mut wrote_through = false;

    for asg in &task.assigns {
        let mut reads: Vec<String> = Vec::new();
        let target_sort: AttrSort = match &asg.target {
            AssignTarget::NewAttr(attr) => {
                let Some(ct) = created else {
                    return Err(ModelError::Invalid(format!(
                        "{ctx}: `new.{attr}` target outside a create task"
                    )));
                };
                let Some(d) = ct.attributes.iter().find(|d| d.name == *attr) else {
                    return Err(unknown("attribute", attr, ctx));
                };
                d.sort.clone()
            }
            AssignTarget::SelfPath(p) => {
                if p.is_empty() || p.len() > 2 {
                    return Err(ModelError::Invalid(format!(
                        "{ctx}: assignment paths have one or two segments"
                    )));
                }
                validate_path(model, &a.name, p, &ctx)?;
                if p.len() == 2 {
                    if std::mem::replace(&mut wrote_through, true) {
                        return Err(ModelError::Invalid(format!(
                            "{ctx}: at most one assignment may write through a reference"
                        )));
                    }
                    if matches!(task.kind, TaskKind::Delete { .. }) {
                        return Err(ModelError::Invalid(format!(
                            "{ctx}: delete tasks cannot write through a reference"
                        )));
                    }
                    if matches!(path_sort(model, &a.name, &p[..1]), Some(AttrSort::IdRef(t)) if *t == a.name)
                    {
                        return Err(ModelError::Invalid(format!(
                            "{ctx}: `{}` points back at `{}` itself; write the attribute directly",
                            p[0], a.name
                        )));
                    }
                    reads.push(p[0].clone());
                }
                path_sort(model, &a.name, p).expect("path validated").clone()
            }
        };

        // Id-ref attributes only receive typed writes, so every stored id is
        // of its attribute's declared type.
        let ill_typed = |what: &str| {
            ModelError::Invalid(format!("{ctx}: {what} cannot fill an id-ref attribute"))
        };
        match &asg.value {
            AssignValue::Payload(p) => {
                if !task.returns.contains(p) {
                    return Err(unknown("payload attribute", p, ctx));
                }
                if matches!(target_sort, AttrSort::IdRef(_)) {
                    return Err(ill_typed("raw return data"));
                }
            }
            AssignValue::Const(Value::Null) => {}
            AssignValue::Const(Value::Id(_)) => {
                return Err(ModelError::Invalid(format!(
                    "{ctx}: instance ids cannot be written as literals"
                )));
            }
            AssignValue::Const(_) => {
                if matches!(target_sort, AttrSort::IdRef(_)) {
                    return Err(ill_typed("a scalar literal"));
                }
            }
            AssignValue::NewId => {
                let Some(ct) = created else {
                    return Err(ModelError::Invalid(format!(
                        "{ctx}: `new` value outside a create task"
                    )));
                };
                if !matches!(&target_sort, AttrSort::IdRef(t) if *t == ct.name) {
                    return Err(ModelError::Invalid(format!(
                        "{ctx}: `new` is a `{}` id; the target is not declared id({})",
                        ct.name, ct.name
                    )));
                }
            }
            AssignValue::Term(Term::SelfId) => {
                if !matches!(&target_sort, AttrSort::IdRef(t) if *t == a.name) {
                    return Err(ModelError::Invalid(format!(
                        "{ctx}: `self` is a `{}` id; the target is not declared id({})",
                        a.name, a.name
                    )));
                }
            }
            AssignValue::Term(Term::Path(p)) => {
                if p.is_empty() || p.len() > 2 {
                    return Err(ModelError::Invalid(format!(
                        "{ctx}: value paths have one or two segments"
                    )));
                }
                validate_path(model, &a.name, p, &ctx)?;
                let source = path_sort(model, &a.name, p).expect("path validated");
                if *source != target_sort {
                    return Err(ModelError::Invalid(format!(
                        "{ctx}: `{}` and the target differ in sort",
                        p.join(".")
                    )));
                }
                reads.extend(p.iter().cloned());
            }
            AssignValue::Term(Term::Const(_)) => {
                unreachable!("the parser emits Const values directly")
            }
        }
        if let Some(seg) = reads_written(&reads, &written) {
            return Err(ModelError::Invalid(format!(
                "{ctx}: `{seg}` is read after an earlier assignment wrote it; reorder the assignments"
            )));
        }
        match &asg.target {
            AssignTarget::NewAttr(_) => {}
            AssignTarget::SelfPath(p) => {
                written.insert(p.last().unwrap());
            }
        }
    }
    Ok(())
}

// ==== reading =============================================================

/// Parse and validate a model file; `.json` (or `.gsm.json`) files are read
/// as the JSON mirror, anything else as the text format.
pub fn parse_model(path: &Path) -> Result<GsmModel, ModelError> {
    let src = std::fs::read_to_string(path)?;
    let display = path.display().to_string();
    let model = if display.ends_with(".json") {
        serde_json::from_str(&src)?
    } else {
        parser::parse(&src, &display)?
    };
    validate(&model)?;
    Ok(model)
}

/// Parse and validate the text format from a string.
pub fn parse_model_text(src: &str) -> Result<GsmModel, ModelError> {
    let model = parser::parse(src, "<input>")?;
    validate(&model)?;
    Ok(model)
}
