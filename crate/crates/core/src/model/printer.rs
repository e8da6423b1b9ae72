//! Pretty printer for the model text format. Printing then reparsing yields
//! the same model, which the corpus round-trip tests rely on.

use super::{
    Assign, AssignTarget, AssignValue, ArtifactType, ChildType, EventRef, GsmModel, Milestone,
    Sentry, Stage, StageBody, StatusAttr, Task, TaskKind, AttrDecl, AttrSort,
};
use crate::value::Value;
use std::fmt::Write;

fn name_str(name: &str) -> String {
    if !name.is_empty() && name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
        name.to_string()
    } else {
        format!("{name:?}")
    }
}

fn value_str(model: &GsmModel, v: &Value) -> String {
    match v {
        Value::Null => "null".into(),
        Value::Bool(b) => b.to_string(),
        Value::Str(s) => format!("{s:?}"),
        Value::Id(id) => {
            let idx = (id.0 as usize).checked_sub(1);
            match idx.and_then(|i| model.initial.get(i)) {
                Some(decl) => format!("@{}", name_str(&decl.name)),
                None => format!("@{}", id.0),
            }
        }
        // Anonymous values only arise inside the abstraction layer.
        Value::Anon(_) => unreachable!("anonymous value in a model"),
    }
}

fn attr_decls(out: &mut String, indent: &str, attrs: &[AttrDecl]) {
    let parts: Vec<String> = attrs
        .iter()
        .map(|d| match &d.sort {
            AttrSort::Scalar => name_str(&d.name),
            AttrSort::IdRef(ty) => format!("{}: id({})", name_str(&d.name), name_str(ty)),
        })
        .collect();
    let _ = writeln!(out, "{indent}attributes {{ {} }}", parts.join(", "));
}

fn event_ref_str(e: &EventRef) -> String {
    match e {
        EventRef::External(name) => name_str(name),
        EventRef::TaskReturn(task) => format!("{}.return", name_str(task)),
        EventRef::Internal { target, to } => {
            let sign = if *to { '+' } else { '-' };
            let name = match target {
                StatusAttr::Stage(s) => s,
                StatusAttr::Milestone(m) => m,
            };
            format!("{sign}{}", name_str(name))
        }
    }
}

fn sentry_str(s: &Sentry) -> String {
    let mut out = String::new();
    if let Some(e) = &s.on_event {
        let _ = write!(out, "on {}", event_ref_str(e));
    }
    if let Some(c) = &s.condition {
        if !out.is_empty() {
            out.push(' ');
        }
        let _ = write!(out, "if {c}");
    }
    out
}

fn term_str(t: &super::Term) -> String {
    t.to_string()
}

fn task_block(out: &mut String, indent: &str, t: &Task) {
    let _ = writeln!(out, "{indent}task {} {{", name_str(&t.name));
    let inner = format!("{indent}  ");
    match &t.kind {
        TaskKind::Update => {}
        TaskKind::Create { artifact_type } => {
            let _ = writeln!(out, "{inner}create {}", name_str(artifact_type));
        }
        TaskKind::Delete { target } => {
            let _ = writeln!(out, "{inner}delete {}", term_str(target));
        }
    }
    if !t.inputs.is_empty() {
        let parts: Vec<String> = t.inputs.iter().map(term_str).collect();
        let _ = writeln!(out, "{inner}inputs {}", parts.join(", "));
    }
    if !t.returns.is_empty() {
        let parts: Vec<String> = t.returns.iter().map(|s| name_str(s)).collect();
        let _ = writeln!(out, "{inner}returns {}", parts.join(", "));
    }
    for Assign { target, value } in &t.assigns {
        let lhs = match target {
            AssignTarget::SelfPath(p) => {
                let segs: Vec<String> = p.iter().map(|s| name_str(s)).collect();
                format!("self.{}", segs.join("."))
            }
            AssignTarget::NewAttr(a) => format!("new.{}", name_str(a)),
        };
        let rhs = match value {
            AssignValue::Payload(p) => format!("ret.{}", name_str(p)),
            AssignValue::Const(v) => match v {
                Value::Str(s) => format!("{s:?}"),
                other => other.to_string(),
            },
            AssignValue::Term(t) => term_str(t),
            AssignValue::NewId => "new".into(),
        };
        let _ = writeln!(out, "{inner}set {lhs} := {rhs}");
    }
    let _ = writeln!(out, "{indent}}}");
}

fn milestone_block(out: &mut String, indent: &str, m: &Milestone) {
    let _ = writeln!(out, "{indent}milestone {} {{", name_str(&m.name));
    let inner = format!("{indent}  ");
    let _ = writeln!(out, "{inner}achieved {}", sentry_str(&m.achieving));
    for s in &m.invalidating {
        let _ = writeln!(out, "{inner}invalidated {}", sentry_str(s));
    }
    let _ = writeln!(out, "{indent}}}");
}

fn stage_block(out: &mut String, indent: &str, s: &Stage) {
    let _ = writeln!(out, "{indent}stage {} {{", name_str(&s.name));
    let inner = format!("{indent}  ");
    for g in &s.guards {
        let _ = writeln!(out, "{inner}guard {}", sentry_str(g));
    }
    for m in &s.milestones {
        milestone_block(out, &inner, m);
    }
    match &s.body {
        StageBody::Atomic { task: Some(t) } => task_block(out, &inner, t),
        StageBody::Atomic { task: None } => {}
        StageBody::Composite { substages } => {
            for sub in substages {
                stage_block(out, &inner, sub);
            }
        }
    }
    let _ = writeln!(out, "{indent}}}");
}

fn child_block(out: &mut String, indent: &str, c: &ChildType) {
    let _ = writeln!(out, "{indent}child {} {{", name_str(&c.name));
    attr_decls(out, &format!("{indent}  "), &c.attributes);
    let _ = writeln!(out, "{indent}}}");
}

fn artifact_block(out: &mut String, a: &ArtifactType) {
    let _ = writeln!(out, "artifact {} {{", name_str(&a.name));
    if !a.attributes.is_empty() {
        attr_decls(out, "  ", &a.attributes);
    }
    for c in &a.children {
        out.push('\n');
        child_block(out, "  ", c);
    }
    for s in &a.stages {
        out.push('\n');
        stage_block(out, "  ", s);
    }
    let _ = writeln!(out, "}}");
}

pub fn print(model: &GsmModel) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "model {}", name_str(&model.name));
    for e in &model.events {
        out.push('\n');
        let parts: Vec<String> = e.payload.iter().map(|s| name_str(s)).collect();
        let _ = writeln!(out, "event {} {{ {} }}", name_str(&e.name), parts.join(", "));
    }
    for a in &model.artifacts {
        out.push('\n');
        artifact_block(&mut out, a);
    }
    if !model.initial.is_empty() {
        out.push('\n');
    }
    for decl in &model.initial {
        let parts: Vec<String> = decl
            .attrs
            .iter()
            .map(|(k, v)| format!("{} = {}", name_str(k), value_str(model, v)))
            .collect();
        if parts.is_empty() {
            let _ = writeln!(out, "initial {}: {} {{ }}", name_str(&decl.name), name_str(&decl.ty));
        } else {
            let _ = writeln!(
                out,
                "initial {}: {} {{ {} }}",
                name_str(&decl.name),
                name_str(&decl.ty),
                parts.join(", ")
            );
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::super::parser;
    use super::*;

    const FULL: &str = r#"
model roundtrip
event ping { note }
event nudge { }
artifact "Work order" {
  attributes { note, helper: id(Part), done }
  child Part { attributes { v, parent: id("Work order") } }
  stage Outer {
    guard on ping if isnull note
    guard on nudge
    milestone "all set" {
      achieved if note == "x" or (exists Part where (v != null and parent == self)) and not open Inner
      invalidated on +Outer
      invalidated on -"all set"
    }
    stage Inner {
      guard on +Outer if achieved "all set"
      task fill {
        create Part
        inputs note, self
        returns v, w
        set self.helper.v := "seed"
        set new.v := ret.v
        set self.note := ret.w
        set self.helper := new
        set self.done := true
      }
      milestone filled { achieved on fill.return }
    }
  }
  stage Cleanup {
    guard on +filled
    task drop {
      delete helper
    }
  }
}
initial w1: "Work order" { note = "hello world", done = false }
initial p1: Part { parent = @w1, v = null }
"#;

    #[test]
    fn print_parse_identity() {
        let m1 = parser::parse(FULL, "t").unwrap();
        m1.validate().unwrap();
        let text = print(&m1);
        let m2 = parser::parse(&text, "printed").unwrap_or_else(|e| {
            panic!("printed form failed to reparse: {e}\n---\n{text}")
        });
        assert_eq!(m1, m2, "printed form:\n{text}");
        // Printing is idempotent.
        assert_eq!(text, print(&m2));
    }

    #[test]
    fn json_mirror_roundtrip() {
        let m1 = parser::parse(FULL, "t").unwrap();
        let json = serde_json::to_string_pretty(&m1).unwrap();
        let m2: super::super::GsmModel = serde_json::from_str(&json).unwrap();
        assert_eq!(m1, m2);
    }
}
