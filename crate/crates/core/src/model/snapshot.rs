//! Snapshots: the information model plus status attributes of every
//! artifact instance at one point in time.

use crate::model::{ArtifactShape, ShapeMap};
use crate::value::{InstanceId, Value};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;

/// One artifact instance. `blank` marks a pre-allocated container slot that
/// currently holds no live instance (instance-bounded execution only); blank
/// instances are invisible to conditions, events and the observable state.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Instance {
    pub ty: String,
    pub attrs: BTreeMap<String, Value>,
    pub stages: BTreeMap<String, bool>,
    pub milestones: BTreeMap<String, bool>,
    #[serde(default)]
    pub blank: bool,
}

impl Instance {
    /// Fresh instance of the given shape: attributes null, stages closed,
    /// milestones invalid.
    pub fn fresh(shape: &ArtifactShape) -> Instance {
        Instance {
            ty: shape.name.clone(),
            attrs: shape.attrs.iter().map(|a| (a.clone(), Value::Null)).collect(),
            stages: shape.stages.iter().map(|s| (s.clone(), false)).collect(),
            milestones: shape.milestones.iter().map(|m| (m.clone(), false)).collect(),
            blank: false,
        }
    }

    /// Reset to the blank container state.
    pub fn blank_out(&mut self) {
        for v in self.attrs.values_mut() {
            *v = Value::Null;
        }
        for v in self.stages.values_mut() {
            *v = false;
        }
        for v in self.milestones.values_mut() {
            *v = false;
        }
        self.blank = true;
    }
}

/// A stable system state: every live and blank instance, keyed by id.
/// Stable snapshots carry no pending events; mid-B-step bookkeeping lives in
/// the engine, not here.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize, Default)]
pub struct Snapshot {
    pub instances: BTreeMap<InstanceId, Instance>,
}

impl Snapshot {
    pub fn live(&self) -> impl Iterator<Item = (InstanceId, &Instance)> {
        self.instances
            .iter()
            .filter(|(_, i)| !i.blank)
            .map(|(id, i)| (*id, i))
    }

    pub fn live_of_type<'a>(
        &'a self,
        ty: &'a str,
    ) -> impl Iterator<Item = (InstanceId, &'a Instance)> + 'a {
        self.live().filter(move |(_, i)| i.ty == ty)
    }

    /// Live child instances of `child_ty` whose `parent` attribute points at
    /// `parent`.
    pub fn live_children<'a>(
        &'a self,
        parent: InstanceId,
        child_ty: &'a str,
    ) -> impl Iterator<Item = (InstanceId, &'a Instance)> + 'a {
        self.live_of_type(child_ty)
            .filter(move |(_, i)| i.attrs.get("parent") == Some(&Value::Id(parent)))
    }

    /// Smallest id above every id present in the snapshot. Deterministic in
    /// the snapshot alone, so identical states always allocate identically;
    /// ids of destroyed instances are recycled once they vanish entirely.
    pub fn fresh_id(&self) -> InstanceId {
        InstanceId(self.instances.keys().map(|i| i.0).max().unwrap_or(0) + 1)
    }

    /// Least-id blank container of the given type, if any.
    pub fn least_blank(&self, ty: &str) -> Option<InstanceId> {
        self.instances
            .iter()
            .find(|(_, i)| i.blank && i.ty == ty)
            .map(|(id, _)| *id)
    }

    /// Number of live instances.
    pub fn size(&self) -> usize {
        self.live().count()
    }

    /// The observable state as a sorted fact listing: one
    /// `(type, [id, attrs.., stages.., milestones..])` tuple per live
    /// instance, with columns in model declaration order. This is the shared
    /// content representation the abstraction layer canonicalizes, and it is
    /// what the relational translation's state filter reconstructs.
    pub fn facts(&self, shapes: &ShapeMap) -> Vec<(String, Vec<Value>)> {
        let mut out = Vec::new();
        for (id, inst) in self.live() {
            let Some(shape) = shapes.get(&inst.ty) else {
                continue;
            };
            let mut row = Vec::with_capacity(1 + shape.attrs.len() + shape.stages.len() + shape.milestones.len());
            row.push(Value::Id(id));
            for a in &shape.attrs {
                row.push(inst.attrs.get(a).cloned().unwrap_or(Value::Null));
            }
            for s in &shape.stages {
                row.push(Value::Bool(*inst.stages.get(s).unwrap_or(&false)));
            }
            for m in &shape.milestones {
                row.push(Value::Bool(*inst.milestones.get(m).unwrap_or(&false)));
            }
            out.push((inst.ty.clone(), row));
        }
        out.sort();
        out
    }

    /// Every value occurring in the observable state (live instances only):
    /// ids, attribute values, and null when present.
    pub fn active_domain(&self) -> Vec<Value> {
        let mut out = Vec::new();
        for (id, inst) in self.live() {
            out.push(Value::Id(id));
            out.extend(inst.attrs.values().cloned());
        }
        out.sort();
        out.dedup();
        out
    }
}

impl fmt::Display for Snapshot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (id, inst) in self.instances.iter() {
            if inst.blank {
                writeln!(f, "{id} {} (blank)", inst.ty)?;
                continue;
            }
            write!(f, "{id} {}", inst.ty)?;
            let attrs: Vec<String> = inst
                .attrs
                .iter()
                .map(|(k, v)| format!("{k}={v}"))
                .collect();
            if !attrs.is_empty() {
                write!(f, " {{{}}}", attrs.join(", "))?;
            }
            let open: Vec<&str> = inst
                .stages
                .iter()
                .filter(|(_, v)| **v)
                .map(|(k, _)| k.as_str())
                .collect();
            if !open.is_empty() {
                write!(f, " open[{}]", open.join(", "))?;
            }
            let ach: Vec<&str> = inst
                .milestones
                .iter()
                .filter(|(_, v)| **v)
                .map(|(k, _)| k.as_str())
                .collect();
            if !ach.is_empty() {
                write!(f, " achieved[{}]", ach.join(", "))?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}
