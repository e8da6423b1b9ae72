//! Execution of the incremental semantics: one incoming event per B-step,
//! payload incorporation first, then micro-steps firing rules in the
//! stratification order under toggle-once.
//!
//! A B-step processes the instance the event is addressed to; sentries of
//! other instances are untouched (artifacts handle one message at a time).
//! Task assigns may still write through id-ref attributes into other
//! instances' data, which is how linked structures like the TM tape work.

use crate::model::script::{EventInstance, PayloadSpec};
use crate::model::{
    eval_term, Assign, AssignTarget, AssignValue, GsmModel, Instance, ShapeMap, Snapshot,
    StatusAttr, Task, TaskKind, Term,
};
use crate::pac::{RuleSet, Trigger};
use crate::value::{InstanceId, Value};
use rand::{Rng, SeedableRng};
use serde::Serialize;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("unknown event `{0}`")]
    UnknownEvent(String),
    #[error("instance {0} does not exist or is not live")]
    UnknownInstance(InstanceId),
    #[error("event `{event}` cannot target instance {target} of type `{ty}`")]
    WrongTarget {
        event: String,
        target: InstanceId,
        ty: String,
    },
    #[error("no `{task}` call is pending for instance {target}")]
    NotPending { task: String, target: InstanceId },
    #[error("stage `{stage}` of instance {target} is closed; the `{task}` return cannot be delivered")]
    StageClosed {
        stage: String,
        task: String,
        target: InstanceId,
    },
    #[error("no free container of type `{ty}`; the `{task}` return must wait")]
    NoFreeContainer { ty: String, task: String },
    #[error("payload of `{event}` must supply exactly {{{expected}}}, got {{{got}}}")]
    PayloadMismatch {
        event: String,
        expected: String,
        got: String,
    },
    #[error("delete target of `{task}` is {got}, not a live instance")]
    BadDeleteTarget { task: String, got: Value },
    #[error("step {index}: {source}")]
    AtStep {
        index: usize,
        #[source]
        source: Box<EngineError>,
    },
}

// ==== instance bounds =====================================================

/// Creation bounds per artifact type, additive to the initial snapshot:
/// bound N for type T reserves N container slots beyond T's initial
/// instances.
pub type ContainerConfig = BTreeMap<String, u64>;

/// Identity layout of container slots, shared between the engine and the
/// relational translation so both sides claim the same ids: each bounded
/// type owns the ids of its initial instances plus a reserved blank range,
/// allocated in declaration order after all initial ids.
#[derive(Clone, Debug)]
pub struct ContainerLayout {
    pub bounds: ContainerConfig,
    /// Reserved blank-id range `[start, end)` per type.
    pub ranges: BTreeMap<String, (u64, u64)>,
}

impl ContainerLayout {
    pub fn new(model: &GsmModel, bounds: &ContainerConfig) -> Result<ContainerLayout, EngineError> {
        let mut next = model.initial.len() as u64 + 1;
        let mut ranges = BTreeMap::new();
        for ty in declared_types(model) {
            if let Some(&n) = bounds.get(&ty) {
                ranges.insert(ty, (next, next + n));
                next += n;
            }
        }
        for ty in bounds.keys() {
            if !ranges.contains_key(ty) {
                return Err(EngineError::UnknownEvent(format!(
                    "container bound names unknown type `{ty}`"
                )));
            }
        }
        Ok(ContainerLayout {
            bounds: bounds.clone(),
            ranges,
        })
    }

    /// All ids instances of the type may occupy.
    pub fn universe(&self, model: &GsmModel, ty: &str) -> Vec<InstanceId> {
        let mut out: Vec<InstanceId> = model
            .initial
            .iter()
            .enumerate()
            .filter(|(_, d)| d.ty == ty)
            .map(|(i, _)| InstanceId(i as u64 + 1))
            .collect();
        if let Some(&(a, b)) = self.ranges.get(ty) {
            out.extend((a..b).map(InstanceId));
        }
        out
    }

    /// Least id of the type not currently occupied by a live instance.
    pub fn free_slot(&self, model: &GsmModel, snap: &Snapshot, ty: &str) -> Option<InstanceId> {
        self.universe(model, ty)
            .into_iter()
            .find(|id| !snap.instances.contains_key(id) || snap.instances[id].blank)
    }

    pub fn total(&self) -> u64 {
        self.bounds.values().sum()
    }
}

/// Top-level and child types in declaration order.
pub fn declared_types(model: &GsmModel) -> Vec<String> {
    let mut out = Vec::new();
    for a in &model.artifacts {
        out.push(a.name.clone());
        for c in &a.children {
            out.push(c.name.clone());
        }
    }
    out
}

// ==== system state ========================================================

/// Snapshot plus the dispatched-but-unreturned service calls; the unit the
/// transition systems use as a state.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub struct SystemState {
    pub snapshot: Snapshot,
    pub pending: BTreeSet<(InstanceId, String)>,
}

impl SystemState {
    pub fn initial(model: &GsmModel) -> SystemState {
        SystemState {
            snapshot: model.initial_snapshot(),
            pending: BTreeSet::new(),
        }
    }
}

/// Stable 64-bit FNV-1a over the canonical JSON form; used for trace
/// diagnostics, where a collision is harmless.
pub fn snapshot_hash(state: &SystemState) -> u64 {
    let bytes = serde_json::to_vec(state).expect("states serialize");
    let mut h: u64 = 0xcbf29ce484222325;
    for b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

// ==== traces ==============================================================

#[derive(Clone, Debug, Serialize)]
pub struct MicroStep {
    /// Fired rule id; the payload-incorporation step has none.
    pub rule: Option<usize>,
    pub label: String,
    /// Toggled status attribute, if the step changed one.
    pub change: Option<(StatusAttr, bool)>,
    pub pre_hash: u64,
    pub post_hash: u64,
}

#[derive(Clone, Debug, Serialize)]
pub struct BStepTrace {
    pub event: String,
    pub target: InstanceId,
    pub payload: Vec<(String, Value)>,
    pub micro_steps: Vec<MicroStep>,
    /// Service calls dispatched during the step: task name and inputs.
    pub outgoing: Vec<(String, Vec<Value>)>,
}

impl fmt::Display for BStepTrace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let payload = self
            .payload
            .iter()
            .map(|(k, v)| format!("{k} = {v}"))
            .collect::<Vec<_>>()
            .join(", ");
        writeln!(f, "== {} @{} {{ {payload} }}", self.event, self.target.0)?;
        for ms in &self.micro_steps {
            let change = match &ms.change {
                Some((attr, v)) => format!("  {}{attr}", if *v { '+' } else { '-' }),
                None => String::new(),
            };
            writeln!(
                f,
                "   {}{change}  [{:016x} -> {:016x}]",
                ms.label, ms.pre_hash, ms.post_hash
            )?;
        }
        for (task, inputs) in &self.outgoing {
            let inputs = inputs.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(", ");
            writeln!(f, "   out: {task}({inputs})")?;
        }
        Ok(())
    }
}

// ==== payload resolution ==================================================

/// Chooses payload values for `auto` script lines; seeded so simulations
/// replay.
pub struct AutoOracle {
    rng: rand_chacha::ChaCha8Rng,
}

impl AutoOracle {
    pub fn new(seed: u64) -> AutoOracle {
        AutoOracle {
            rng: rand_chacha::ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn pick(&mut self) -> Value {
        // Null sometimes; otherwise a fresh-looking constant.
        if self.rng.gen_ratio(1, 8) {
            Value::Null
        } else {
            Value::Str(format!("v{}", self.rng.gen_range(0..1000)))
        }
    }
}

/// The payload slots an event must fill: declared payload for one-way
/// events, the task's returns for service-call returns.
pub fn payload_slots<'m>(model: &'m GsmModel, event: &str) -> Result<Vec<&'m str>, EngineError> {
    if let Some(task) = crate::model::task_of_return(event) {
        for a in &model.artifacts {
            if let Some((t, _)) = a.task(task) {
                return Ok(t.returns.iter().map(|s| s.as_str()).collect());
            }
        }
        return Err(EngineError::UnknownEvent(event.to_string()));
    }
    model
        .oneway_event(event)
        .map(|e| e.payload.iter().map(|s| s.as_str()).collect())
        .ok_or_else(|| EngineError::UnknownEvent(event.to_string()))
}

// ==== engine ==============================================================

pub struct Engine<'m> {
    pub model: &'m GsmModel,
    pub rules: &'m RuleSet,
    pub shapes: ShapeMap,
    pub containers: Option<ContainerLayout>,
}

/// A fully resolved incoming event.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct EventAt {
    pub event: String,
    pub target: InstanceId,
    pub payload: Vec<(String, Value)>,
}

impl fmt::Display for EventAt {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let payload = self
            .payload
            .iter()
            .map(|(k, v)| format!("{k} = {v}"))
            .collect::<Vec<_>>()
            .join(", ");
        write!(f, "{} @{} {{ {payload} }}", self.event, self.target.0)
    }
}

impl<'m> Engine<'m> {
    pub fn new(model: &'m GsmModel, rules: &'m RuleSet) -> Engine<'m> {
        Engine {
            model,
            rules,
            shapes: model.shapes(),
            containers: None,
        }
    }

    pub fn with_containers(
        model: &'m GsmModel,
        rules: &'m RuleSet,
        bounds: &ContainerConfig,
    ) -> Result<Engine<'m>, EngineError> {
        let layout = ContainerLayout::new(model, bounds)?;
        Ok(Engine {
            model,
            rules,
            shapes: model.shapes(),
            containers: Some(layout),
        })
    }

    fn task_and_stage(&self, ty: &str, task: &str) -> Option<(&'m Task, &'m crate::model::Stage)> {
        self.model.artifact(ty).and_then(|a| a.task(task))
    }

    /// Why an event is deliverable in a state, or the error saying why not.
    /// One-way events go to live instances of a type with a sentry on them;
    /// returns need a pending call, the dispatching stage open, and (for
    /// bounded create tasks) a free container.
    pub fn check_possible(&self, state: &SystemState, ev: &EventAt) -> Result<(), EngineError> {
        let inst = state
            .snapshot
            .live()
            .find(|(id, _)| *id == ev.target)
            .map(|(_, i)| i)
            .ok_or(EngineError::UnknownInstance(ev.target))?;

        let slots = payload_slots(self.model, &ev.event)?;
        let got: BTreeSet<&str> = ev.payload.iter().map(|(k, _)| k.as_str()).collect();
        let want: BTreeSet<&str> = slots.iter().copied().collect();
        if got != want {
            return Err(EngineError::PayloadMismatch {
                event: ev.event.clone(),
                expected: slots.join(", "),
                got: got.into_iter().collect::<Vec<_>>().join(", "),
            });
        }

        if let Some(task) = crate::model::task_of_return(&ev.event) {
            if self.task_and_stage(&inst.ty, task).is_none() {
                return Err(EngineError::WrongTarget {
                    event: ev.event.clone(),
                    target: ev.target,
                    ty: inst.ty.clone(),
                });
            }
            self.return_deliverable(state, ev.target, task)?;
        } else {
            let targets = self.model.event_targets(&ev.event);
            if !targets.iter().any(|a| a.name == inst.ty) {
                return Err(EngineError::WrongTarget {
                    event: ev.event.clone(),
                    target: ev.target,
                    ty: inst.ty.clone(),
                });
            }
        }
        Ok(())
    }

    /// Whether a pending call's return can be delivered: the dispatching
    /// stage must be open, a create needs a free container when bounds are
    /// active, and a delete's target must resolve to a live instance other
    /// than the receiver.
    fn return_deliverable(
        &self,
        state: &SystemState,
        target: InstanceId,
        task_name: &str,
    ) -> Result<(), EngineError> {
        let ty = &state.snapshot.instances[&target].ty;
        let (task, stage) = self.task_and_stage(ty, task_name).expect("caller checked");
        if !state.pending.contains(&(target, task_name.to_string())) {
            return Err(EngineError::NotPending {
                task: task_name.to_string(),
                target,
            });
        }
        let inst = &state.snapshot.instances[&target];
        if !inst.stages.get(&stage.name).copied().unwrap_or(false) {
            return Err(EngineError::StageClosed {
                stage: stage.name.clone(),
                task: task_name.to_string(),
                target,
            });
        }
        match &task.kind {
            TaskKind::Create { artifact_type } => {
                if let Some(layout) = self
                    .containers
                    .as_ref()
                    .filter(|l| l.bounds.contains_key(artifact_type))
                {
                    if layout
                        .free_slot(self.model, &state.snapshot, artifact_type)
                        .is_none()
                    {
                        return Err(EngineError::NoFreeContainer {
                            ty: artifact_type.clone(),
                            task: task_name.to_string(),
                        });
                    }
                }
            }
            TaskKind::Delete { target: term } => {
                let got = eval_term(term, &state.snapshot, target);
                let ok = matches!(got, Value::Id(id)
                    if id != target && state.snapshot.live().any(|(l, _)| l == id));
                if !ok {
                    return Err(EngineError::BadDeleteTarget {
                        task: task_name.to_string(),
                        got,
                    });
                }
            }
            TaskKind::Update => {}
        }
        Ok(())
    }

    /// All events deliverable in a state, with unfilled payload slots: the
    /// alphabet the state-space exploration instantiates. Returns
    /// (event name, target, payload slot names).
    pub fn possible_events(&self, state: &SystemState) -> Vec<(String, InstanceId, Vec<String>)> {
        let mut out = Vec::new();
        for ev in &self.model.events {
            for target in self.model.event_targets(&ev.name) {
                for (id, _) in state
                    .snapshot
                    .live()
                    .filter(|(_, i)| i.ty == target.name)
                {
                    out.push((ev.name.clone(), id, ev.payload.clone()));
                }
            }
        }
        for (id, task) in &state.pending {
            let Some(inst) = state.snapshot.instances.get(id).filter(|i| !i.blank) else {
                continue;
            };
            let Some((t, _)) = self.task_and_stage(&inst.ty, task) else {
                continue;
            };
            if self.return_deliverable(state, *id, task).is_ok() {
                out.push((crate::model::return_event(task), *id, t.returns.clone()));
            }
        }
        out.sort();
        out
    }

    fn fresh_id(&self, snap: &Snapshot, ty: &str) -> Result<InstanceId, EngineError> {
        match &self.containers {
            Some(layout) if layout.bounds.contains_key(ty) => layout
                .free_slot(self.model, snap, ty)
                .ok_or_else(|| EngineError::NoFreeContainer {
                    ty: ty.to_string(),
                    task: String::new(),
                }),
            _ => Ok(snap.fresh_id()),
        }
    }

    /// Payload incorporation: write the event's data into the information
    /// model, one assignment at a time. For task returns this runs the
    /// task's assigns (including instance creation and deletion) and
    /// consumes the pending call.
    fn incorporate(
        &self,
        state: &mut SystemState,
        ev: &EventAt,
    ) -> Result<(), EngineError> {
        let payload: BTreeMap<&str, &Value> =
            ev.payload.iter().map(|(k, v)| (k.as_str(), v)).collect();

        let Some(task_name) = crate::model::task_of_return(&ev.event) else {
            let inst = state.snapshot.instances.get_mut(&ev.target).unwrap();
            for (k, v) in &ev.payload {
                inst.attrs.insert(k.clone(), v.clone());
            }
            return Ok(());
        };

        state.pending.remove(&(ev.target, task_name.to_string()));
        let ty = state.snapshot.instances[&ev.target].ty.clone();
        let (task, _) = self.task_and_stage(&ty, task_name).unwrap();

        let created: Option<InstanceId> = match &task.kind {
            TaskKind::Create { artifact_type } => {
                Some(self.fresh_id(&state.snapshot, artifact_type)?)
            }
            _ => None,
        };

        // The delete target is resolved before the assigns so they can
        // clear the reference they would otherwise leave dangling.
        let doomed: Option<InstanceId> = match &task.kind {
            TaskKind::Delete { target } => {
                let got = eval_term(target, &state.snapshot, ev.target);
                match got {
                    Value::Id(id) if state.snapshot.live().any(|(l, _)| l == id) => Some(id),
                    other => {
                        return Err(EngineError::BadDeleteTarget {
                            task: task_name.to_string(),
                            got: other,
                        })
                    }
                }
            }
            _ => None,
        };

        // Every value and write target is resolved against the return-time
        // snapshot before anything changes; in particular the created
        // instance is not visible to the assigns, even when it reclaims a
        // container slot a stale reference still points at.
        enum Write {
            New(String, Value),
            At(InstanceId, String, Value),
        }
        let mut writes: Vec<Write> = Vec::new();
        for Assign { target, value } in &task.assigns {
            let v = match value {
                AssignValue::Payload(slot) => (*payload[slot.as_str()]).clone(),
                AssignValue::Const(c) => c.clone(),
                AssignValue::Term(t) => eval_term(t, &state.snapshot, ev.target),
                AssignValue::NewId => Value::Id(created.expect("validated create task")),
            };
            match target {
                AssignTarget::NewAttr(attr) => writes.push(Write::New(attr.clone(), v)),
                AssignTarget::SelfPath(path) => {
                    let id = if path.len() == 1 {
                        ev.target
                    } else {
                        // Write-through one id-ref hop; a null or dead hop
                        // drops the write, like a condition on it would
                        // evaluate to null.
                        match eval_term(
                            &Term::Path(vec![path[0].clone()]),
                            &state.snapshot,
                            ev.target,
                        ) {
                            Value::Id(id)
                                if state
                                    .snapshot
                                    .instances
                                    .get(&id)
                                    .is_some_and(|i| !i.blank) =>
                            {
                                id
                            }
                            _ => continue,
                        }
                    };
                    writes.push(Write::At(id, path.last().unwrap().clone(), v));
                }
            }
        }

        if let Some(id) = created {
            let TaskKind::Create { artifact_type } = &task.kind else {
                unreachable!()
            };
            let mut inst = Instance::fresh(&self.shapes[artifact_type]);
            inst.attrs.insert("parent".into(), Value::Id(ev.target));
            state.snapshot.instances.insert(id, inst);
        }
        for w in writes {
            match w {
                Write::New(attr, v) => {
                    let id = created.expect("validated create task");
                    state.snapshot.instances.get_mut(&id).unwrap().attrs.insert(attr, v);
                }
                Write::At(id, attr, v) => {
                    state.snapshot.instances.get_mut(&id).unwrap().attrs.insert(attr, v);
                }
            }
        }

        if let Some(id) = doomed {
            if self
                .containers
                .as_ref()
                .is_some_and(|l| l.bounds.contains_key(&state.snapshot.instances[&id].ty))
            {
                // Bounded types keep their slot as a blank container.
                state.snapshot.instances.get_mut(&id).unwrap().blank_out();
            } else {
                state.snapshot.instances.remove(&id);
            }
            state.pending.retain(|(pid, _)| *pid != id);
        }
        Ok(())
    }

    /// One B-step in the canonical firing order.
    pub fn b_step(
        &self,
        state: &SystemState,
        ev: &EventAt,
    ) -> Result<(SystemState, BStepTrace), EngineError> {
        self.b_step_in_order(state, ev, &self.rules.order.order)
    }

    /// One B-step firing rules in the given linear order; the confluence
    /// property says every linear extension of the dependency graph gives
    /// the same result.
    pub fn b_step_in_order(
        &self,
        state: &SystemState,
        ev: &EventAt,
        order: &[usize],
    ) -> Result<(SystemState, BStepTrace), EngineError> {
        self.check_possible(state, ev)?;

        let mut cur = state.clone();
        let mut trace = BStepTrace {
            event: ev.event.clone(),
            target: ev.target,
            payload: ev.payload.clone(),
            micro_steps: Vec::new(),
            outgoing: Vec::new(),
        };

        let pre = snapshot_hash(&cur);
        self.incorporate(&mut cur, ev)?;
        let post = snapshot_hash(&cur);
        trace.micro_steps.push(MicroStep {
            rule: None,
            label: "incorporate payload".into(),
            change: None,
            pre_hash: pre,
            post_hash: post,
        });

        // The target may have deleted itself; then no sentry of it can fire.
        let target_live = cur
            .snapshot
            .instances
            .get(&ev.target)
            .is_some_and(|i| !i.blank);

        let mut emitted: BTreeSet<(StatusAttr, bool)> = BTreeSet::new();
        let mut changed: BTreeSet<StatusAttr> = BTreeSet::new();

        if target_live {
            let ty = cur.snapshot.instances[&ev.target].ty.clone();
            for &rid in order {
                let rule = &self.rules.rules[rid];
                if rule.artifact != ty {
                    continue;
                }
                if !self.rules.relevant_to(rid, &ev.event) {
                    continue;
                }
                let triggered = match &rule.trigger {
                    Trigger::Always => true,
                    Trigger::External(e) => *e == ev.event,
                    Trigger::TaskReturn(t) => crate::model::return_event(t) == ev.event,
                    Trigger::Internal { target, to } => emitted.contains(&(target.clone(), *to)),
                };
                if !triggered {
                    continue;
                }
                if let Some((attr, _)) = &rule.change {
                    if changed.contains(attr) {
                        continue;
                    }
                }
                let inst = &cur.snapshot.instances[&ev.target];
                let holds = rule
                    .requires_open
                    .iter()
                    .all(|s| inst.stages.get(s).copied().unwrap_or(false))
                    && rule
                        .requires_closed
                        .iter()
                        .all(|s| !inst.stages.get(s).copied().unwrap_or(false))
                    && rule
                        .requires_milestone
                        .iter()
                        .all(|(m, v)| inst.milestones.get(m).copied().unwrap_or(false) == *v)
                    && rule
                        .condition
                        .as_ref()
                        .is_none_or(|c| c.eval(&cur.snapshot, ev.target));
                if !holds {
                    continue;
                }

                let pre = snapshot_hash(&cur);
                if let Some((attr, v)) = &rule.change {
                    let inst = cur.snapshot.instances.get_mut(&ev.target).unwrap();
                    match attr {
                        StatusAttr::Stage(s) => {
                            inst.stages.insert(s.clone(), *v);
                        }
                        StatusAttr::Milestone(m) => {
                            inst.milestones.insert(m.clone(), *v);
                        }
                    }
                    emitted.insert((attr.clone(), *v));
                    changed.insert(attr.clone());
                }
                if let Some(task_name) = &rule.dispatch {
                    let (task, _) = self.task_and_stage(&ty, task_name).unwrap();
                    let inputs: Vec<Value> = task
                        .inputs
                        .iter()
                        .map(|t| eval_term(t, &cur.snapshot, ev.target))
                        .collect();
                    cur.pending.insert((ev.target, task_name.clone()));
                    trace.outgoing.push((task_name.clone(), inputs));
                }
                trace.micro_steps.push(MicroStep {
                    rule: Some(rid),
                    label: rule.label(),
                    change: rule.change.clone(),
                    pre_hash: pre,
                    post_hash: snapshot_hash(&cur),
                });
            }
        }

        debug_assert!(
            trace.micro_steps.len() <= self.rules.rules.len() + 1,
            "micro-step count exceeds rule count"
        );
        Ok((cur, trace))
    }

    /// Resolve a script entry into a concrete event, filling `auto`
    /// payloads from the oracle.
    pub fn resolve(
        &self,
        ev: &EventInstance,
        oracle: &mut AutoOracle,
    ) -> Result<EventAt, EngineError> {
        let payload = match &ev.payload {
            PayloadSpec::Given(kvs) => kvs.clone(),
            PayloadSpec::Auto => payload_slots(self.model, &ev.event)?
                .into_iter()
                .map(|slot| (slot.to_string(), oracle.pick()))
                .collect(),
        };
        Ok(EventAt {
            event: ev.event.clone(),
            target: ev.target,
            payload,
        })
    }

    /// Fold a script from the initial state; errors carry the failing index.
    pub fn run_script(
        &self,
        events: &[EventInstance],
        seed: u64,
    ) -> Result<Vec<(SystemState, BStepTrace)>, EngineError> {
        let mut oracle = AutoOracle::new(seed);
        let mut cur = SystemState::initial(self.model);
        let mut out = Vec::with_capacity(events.len());
        for (index, ev) in events.iter().enumerate() {
            let mut step = || -> Result<(SystemState, BStepTrace), EngineError> {
                let resolved = self.resolve(ev, &mut oracle)?;
                self.b_step(&cur, &resolved)
            };
            let (next, trace) = step().map_err(|e| EngineError::AtStep {
                index,
                source: Box::new(e),
            })?;
            cur = next.clone();
            out.push((next, trace));
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::parser::parse;
    use rand::seq::SliceRandom;

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

    fn shop() -> (GsmModel, RuleSet) {
        let m = parse(SHOP, "shop").unwrap();
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

    use crate::pac::RuleSet;

    #[test]
    fn request_opens_stage_and_dispatches() {
        let (m, rules) = shop();
        let eng = Engine::new(&m, &rules);
        let s0 = SystemState::initial(&m);

        let (s1, t1) = eng
            .b_step(&s0, &ev("itemRequest", 1, &[("code", Value::str("c1"))]))
            .unwrap();
        let order = &s1.snapshot.instances[&InstanceId(1)];
        assert!(order.stages["Manage order"]);
        assert_eq!(order.attrs["code"], Value::str("c1"));
        assert!(s1.pending.contains(&(InstanceId(1), "addItem".into())));
        assert_eq!(t1.outgoing, vec![("addItem".to_string(), vec![Value::str("c1")])]);
        // Incorporation plus the guard rule plus the dispatch rule.
        assert_eq!(t1.micro_steps.len(), 3);
        assert_eq!(t1.micro_steps[0].rule, None);

        let (s2, t2) = eng
            .b_step(&s1, &ev("addItem.return", 1, &[("ack", Value::str("a1"))]))
            .unwrap();
        let order = &s2.snapshot.instances[&InstanceId(1)];
        assert!(!order.stages["Manage order"]);
        assert!(order.milestones["item added"]);
        assert_eq!(order.attrs["last"], Value::Id(InstanceId(2)));
        let item = &s2.snapshot.instances[&InstanceId(2)];
        assert_eq!(item.ty, "Item");
        assert_eq!(item.attrs["code"], Value::str("a1"));
        assert_eq!(item.attrs["parent"], Value::Id(InstanceId(1)));
        assert!(s2.pending.is_empty());
        assert_eq!(t2.micro_steps.len(), 3);

        let (s3, _) = eng.b_step(&s2, &ev("payRequest", 1, &[])).unwrap();
        assert!(s3.snapshot.instances[&InstanceId(1)].stages["Pay order"]);
        let (s4, _) = eng
            .b_step(&s3, &ev("pay.return", 1, &[("receipt", Value::str("r"))]))
            .unwrap();
        let order = &s4.snapshot.instances[&InstanceId(1)];
        assert!(order.milestones["Order paid"]);
        assert!(!order.stages["Pay order"]);
        assert_eq!(order.attrs["receipt"], Value::str("r"));

        // A further request is incorporated but opens nothing: the guard
        // needs the order unpaid. The invalidating sentry still clears
        // `item added`.
        let (s5, t5) = eng
            .b_step(&s4, &ev("itemRequest", 1, &[("code", Value::str("c2"))]))
            .unwrap();
        let order = &s5.snapshot.instances[&InstanceId(1)];
        assert!(!order.stages["Manage order"]);
        assert!(!order.milestones["item added"]);
        assert_eq!(order.attrs["code"], Value::str("c2"));
        assert_eq!(t5.outgoing, vec![]);
    }

    #[test]
    fn failed_sentries_leave_the_state_unchanged() {
        let (m, rules) = shop();
        let eng = Engine::new(&m, &rules);
        let s0 = SystemState::initial(&m);
        // `Pay order` needs `item added`; nothing fires and the payload is
        // empty, so the state is exactly the input.
        let (s1, t) = eng.b_step(&s0, &ev("payRequest", 1, &[])).unwrap();
        assert_eq!(s0, s1);
        assert_eq!(t.micro_steps.len(), 1);
        assert!(t.micro_steps.iter().all(|ms| ms.rule.is_none()));
        assert_eq!(t.micro_steps[0].pre_hash, t.micro_steps[0].post_hash);
    }

    #[test]
    fn reopening_invalidates_through_the_stage_toggle_first() {
        let (m, rules) = shop();
        let eng = Engine::new(&m, &rules);
        let mut s = SystemState::initial(&m);
        for step in [
            ev("itemRequest", 1, &[("code", Value::str("c1"))]),
            ev("addItem.return", 1, &[("ack", Value::str("a1"))]),
            ev("itemRequest", 1, &[("code", Value::str("c2"))]),
        ] {
            s = eng.b_step(&s, &step).unwrap().0;
        }
        // The third event reopened the stage; `item added` was invalidated
        // once (on +stage), the event sentry found it already toggled.
        let order = &s.snapshot.instances[&InstanceId(1)];
        assert!(order.stages["Manage order"]);
        assert!(!order.milestones["item added"]);
        assert!(s.pending.contains(&(InstanceId(1), "addItem".into())));
    }

    #[test]
    fn toggle_once_keeps_the_first_change() {
        // Achieving and invalidating sentries on the same event: the
        // achieve rule is ordered first, the invalidation is then blocked.
        let src = r#"
model flip
event e { }
artifact A {
  attributes { x }
  stage s {
    guard on e
    milestone m {
      achieved on e
      invalidated on e
    }
  }
}
initial a1: A { }
"#;
        let m = parse(src, "flip").unwrap();
        m.validate().unwrap();
        let rules = RuleSet::compile(&m).unwrap();
        let eng = Engine::new(&m, &rules);
        let s0 = SystemState::initial(&m);
        let (s1, _) = eng.b_step(&s0, &ev("e", 1, &[])).unwrap();
        assert!(s1.snapshot.instances[&InstanceId(1)].milestones["m"]);
        let rids: Vec<_> = eng
            .b_step(&s0, &ev("e", 1, &[]))
            .unwrap()
            .1
            .micro_steps
            .iter()
            .filter_map(|ms| ms.rule)
            .collect();
        // Open fired, achieve fired; the invalidations lost to toggle-once.
        assert_eq!(rids.len(), 2);
    }

    #[test]
    fn undeliverable_events_are_errors() {
        let (m, rules) = shop();
        let eng = Engine::new(&m, &rules);
        let s0 = SystemState::initial(&m);
        assert!(matches!(
            eng.b_step(&s0, &ev("itemRequest", 9, &[("code", Value::Null)])),
            Err(EngineError::UnknownInstance(_))
        ));
        assert!(matches!(
            eng.b_step(&s0, &ev("addItem.return", 1, &[("ack", Value::Null)])),
            Err(EngineError::NotPending { .. })
        ));
        assert!(matches!(
            eng.b_step(&s0, &ev("itemRequest", 1, &[])),
            Err(EngineError::PayloadMismatch { .. })
        ));
        assert!(matches!(
            eng.b_step(&s0, &ev("nosuch", 1, &[])),
            Err(EngineError::UnknownEvent(_))
        ));
    }

    #[test]
    fn containers_bound_creation_and_frees_are_reused() {
        let src = r#"
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
        let m = parse(src, "janitor").unwrap();
        m.validate().unwrap();
        let rules = RuleSet::compile(&m).unwrap();
        let bounds: ContainerConfig = [("Thing".to_string(), 1)].into();
        let eng = Engine::with_containers(&m, &rules, &bounds).unwrap();

        let mut s = SystemState::initial(&m);
        s = eng.b_step(&s, &ev("zap", 1, &[])).unwrap().0;
        s = eng.b_step(&s, &ev("make.return", 1, &[])).unwrap().0;
        assert_eq!(
            s.snapshot.instances[&InstanceId(1)].attrs["it"],
            Value::Id(InstanceId(2))
        );
        assert!(!s.snapshot.instances[&InstanceId(2)].blank);

        // Creation is spent: a second fill round would find no container,
        // so its return is not even deliverable.
        let con_make = eng.possible_events(&s);
        assert!(con_make.iter().all(|(e, _, _)| e != "make.return"));

        s = eng.b_step(&s, &ev("zap", 1, &[])).unwrap().0;
        s = eng.b_step(&s, &ev("toss.return", 1, &[])).unwrap().0;
        // The slot survives as a blank container and the next create
        // claims it again.
        assert!(s.snapshot.instances[&InstanceId(2)].blank);
        assert_eq!(s.snapshot.instances[&InstanceId(1)].attrs["it"], Value::Null);
        s = eng.b_step(&s, &ev("zap", 1, &[])).unwrap().0;
        s = eng.b_step(&s, &ev("make.return", 1, &[])).unwrap().0;
        assert_eq!(
            s.snapshot.instances[&InstanceId(1)].attrs["it"],
            Value::Id(InstanceId(2))
        );
        assert!(!s.snapshot.instances[&InstanceId(2)].blank);
    }

    #[test]
    fn unbounded_creation_uses_fresh_ids() {
        let (m, rules) = shop();
        let eng = Engine::new(&m, &rules);
        let mut s = SystemState::initial(&m);
        for round in 0..3u64 {
            s = eng
                .b_step(&s, &ev("itemRequest", 1, &[("code", Value::str("c"))]))
                .unwrap()
                .0;
            s = eng
                .b_step(&s, &ev("addItem.return", 1, &[("ack", Value::str("a"))]))
                .unwrap()
                .0;
            assert!(s.snapshot.instances.contains_key(&InstanceId(round + 2)));
        }
        assert_eq!(s.snapshot.live().count(), 4);
    }

    #[test]
    fn every_linear_extension_agrees() {
        let (m, rules) = shop();
        let eng = Engine::new(&m, &rules);
        let edges = crate::pac::edges(&rules.rules, &rules.relevance);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);

        let script = [
            ev("itemRequest", 1, &[("code", Value::str("c1"))]),
            ev("addItem.return", 1, &[("ack", Value::str("a1"))]),
            ev("itemRequest", 1, &[("code", Value::str("c2"))]),
            ev("addItem.return", 1, &[("ack", Value::str("a2"))]),
            ev("payRequest", 1, &[]),
            ev("pay.return", 1, &[("receipt", Value::str("r"))]),
        ];

        for _ in 0..20 {
            // A random linear extension: Kahn with random ready picks.
            let n = rules.rules.len();
            let mut indeg = vec![0usize; n];
            for out in &edges {
                for &j in out {
                    indeg[j] += 1;
                }
            }
            let mut ready: Vec<usize> = (0..n).filter(|&i| indeg[i] == 0).collect();
            let mut order = Vec::with_capacity(n);
            while !ready.is_empty() {
                let k = *ready.choose(&mut rng).unwrap();
                ready.retain(|&x| x != k);
                order.push(k);
                for &j in &edges[k] {
                    indeg[j] -= 1;
                    if indeg[j] == 0 {
                        ready.push(j);
                    }
                }
            }
            assert_eq!(order.len(), n);

            let mut canonical = SystemState::initial(&m);
            let mut shuffled = canonical.clone();
            for step in &script {
                canonical = eng.b_step(&canonical, step).unwrap().0;
                shuffled = eng.b_step_in_order(&shuffled, step, &order).unwrap().0;
                assert_eq!(canonical, shuffled);
            }
        }
    }

    #[test]
    fn scripts_replay_and_report_failing_steps() {
        let (m, rules) = shop();
        let eng = Engine::new(&m, &rules);
        let script = crate::model::script::parse_script(
            "itemRequest @order1 { code = \"c1\" }\naddItem.return @order1 auto\n",
            "s.events",
            &m,
        )
        .unwrap();
        let a = eng.run_script(&script, 11).unwrap();
        let b = eng.run_script(&script, 11).unwrap();
        assert_eq!(a.len(), 2);
        assert_eq!(a.last().unwrap().0, b.last().unwrap().0);

        let bad = crate::model::script::parse_script(
            "payRequest @order1\npay.return @order1 auto\n",
            "s.events",
            &m,
        )
        .unwrap();
        match eng.run_script(&bad, 0) {
            Err(EngineError::AtStep { index: 1, source }) => {
                assert!(matches!(*source, EngineError::NotPending { .. }))
            }
            other => panic!("expected failure at step 1, got {other:?}"),
        }
    }

    #[test]
    fn traces_render_as_text_and_json() {
        let (m, rules) = shop();
        let eng = Engine::new(&m, &rules);
        let s0 = SystemState::initial(&m);
        let (_, t) = eng
            .b_step(&s0, &ev("itemRequest", 1, &[("code", Value::str("c1"))]))
            .unwrap();
        let text = t.to_string();
        assert!(text.contains("== itemRequest @1 { code = c1 }"));
        assert!(text.contains("incorporate payload"));
        assert!(text.contains("out: addItem(c1)"));
        let json: serde_json::Value = serde_json::from_str(&serde_json::to_string(&t).unwrap()).unwrap();
        assert_eq!(json["event"], "itemRequest");
        assert_eq!(json["micro_steps"][0]["rule"], serde_json::Value::Null);
    }

    #[test]
    fn possible_events_cover_oneways_and_pending_returns() {
        let (m, rules) = shop();
        let eng = Engine::new(&m, &rules);
        let s0 = SystemState::initial(&m);
        let evs = eng.possible_events(&s0);
        assert_eq!(
            evs,
            vec![
                ("itemRequest".to_string(), InstanceId(1), vec!["code".to_string()]),
                ("payRequest".to_string(), InstanceId(1), vec![]),
            ]
        );
        let (s1, _) = eng
            .b_step(&s0, &ev("itemRequest", 1, &[("code", Value::str("c"))]))
            .unwrap();
        let evs = eng.possible_events(&s1);
        assert!(evs.contains(&("addItem.return".to_string(), InstanceId(1), vec!["ack".to_string()])));
    }

    #[test]
    fn turing_machine_runs_to_a_halt() {
        // One-transition machine: writes a symbol, shifts right, halts.
        let spec = crate::model::turing::halting_example();
        let m = crate::model::turing::encode(&spec).unwrap();
        m.validate().unwrap();
        let rules = RuleSet::compile(&m).unwrap();
        let eng = Engine::new(&m, &rules);
        let mut s = SystemState::initial(&m);

        s = eng.b_step(&s, &ev("boot", 1, &[])).unwrap().0;
        s = eng.b_step(&s, &ev("init.return", 1, &[])).unwrap().0;
        let tm = &s.snapshot.instances[&InstanceId(1)];
        assert_eq!(tm.attrs["curState"], Value::str("q0"));
        assert!(tm.stages["Transition"]);
        assert!(s.pending.iter().any(|(_, t)| t.starts_with("step_")));

        // The step return applies the transition; the machine is then in
        // the final state, so Halt is achieved and Transition closes
        // before the shift can open: a fixpoint.
        let ret = s.pending.iter().next().unwrap().1.clone();
        s = eng
            .b_step(&s, &ev(&crate::model::return_event(&ret), 1, &[]))
            .unwrap()
            .0;
        let tm = &s.snapshot.instances[&InstanceId(1)];
        assert_eq!(tm.attrs["curState"], Value::str("qf"));
        assert!(tm.milestones["Halt"]);
        assert!(!tm.stages["Transition"]);
        assert!(s.pending.is_empty());

        // Halted means quiescent: ticks are incorporated and nothing fires.
        let (s2, t) = eng.b_step(&s, &ev("tick", 1, &[])).unwrap();
        assert_eq!(s, s2);
        assert_eq!(t.micro_steps.len(), 1);
    }
}
