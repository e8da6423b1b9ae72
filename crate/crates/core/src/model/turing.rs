//! Turing machine encoding into a GSM model.
//!
//! The machine becomes a `TM` artifact whose tape is a doubly linked list of
//! `Cell` child instances, extended on demand. One `boot` event initializes
//! the tape; each `tick` event runs one machine step as a cascade of service
//! calls:
//!
//! 1. `Transition` (composite) reopens on `tick` once the previous step
//!    finished.
//! 2. One `apply_<q>_<sym>` substage matches the current state and symbol,
//!    and its task writes the new state and symbol.
//! 3. `RightShift`/`LeftShift` first extends the tape if the head is at its
//!    end, then moves `curCell` along the link.
//! 4. `Wrap` closes the step; its `stepDone` milestone achieves
//!    `"Transition done"`, closing `Transition` until the next `tick`.
//!
//! `Halt` is a condition milestone on `Transition`: it fires the moment the
//! state attribute takes a final value, and closing `Transition` through it
//! abandons the in-flight shift, leaving `Halt` permanently achieved.
//!
//! A looping machine keeps extending the tape, so its reachable state space
//! is infinite; this is the standard source of unbounded models in the test
//! corpus.

use super::condition::{Atom, CmpOp, Condition, Term};
use super::{
    Assign, AssignTarget, AssignValue, ArtifactType, AttrDecl, AttrSort, ChildType, EventRef,
    EventType, GsmModel, InitialInstance, Milestone, ModelError, Sentry, Stage, StageBody,
    StatusAttr, Task, TaskKind,
};
use crate::value::Value;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dir {
    Left,
    Right,
}

#[derive(Clone, Debug)]
pub struct TmTransition {
    pub from_state: String,
    pub read: String,
    pub to_state: String,
    pub write: String,
    pub dir: Dir,
}

#[derive(Clone, Debug)]
pub struct TmSpec {
    pub name: String,
    pub initial_state: String,
    pub final_states: Vec<String>,
    pub blank: String,
    pub transitions: Vec<TmTransition>,
}

impl TmSpec {
    /// Deterministic one-transition-per-(state, symbol) check.
    pub fn validate(&self) -> Result<(), ModelError> {
        let mut seen = std::collections::BTreeSet::new();
        for t in &self.transitions {
            if !seen.insert((t.from_state.clone(), t.read.clone())) {
                return Err(ModelError::Invalid(format!(
                    "two transitions from state `{}` reading `{}`",
                    t.from_state, t.read
                )));
            }
            if self.final_states.contains(&t.from_state) {
                return Err(ModelError::Invalid(format!(
                    "final state `{}` has an outgoing transition",
                    t.from_state
                )));
            }
        }
        Ok(())
    }
}

fn on_plus_milestone(m: &str) -> Sentry {
    Sentry {
        on_event: Some(EventRef::Internal {
            target: StatusAttr::Milestone(m.into()),
            to: true,
        }),
        condition: None,
    }
}

fn on_return(task: &str) -> Sentry {
    Sentry {
        on_event: Some(EventRef::TaskReturn(task.into())),
        condition: None,
    }
}

fn eq(path: &[&str], v: &str) -> Condition {
    Condition::Atom(Atom::Cmp {
        lhs: Term::Path(path.iter().map(|s| s.to_string()).collect()),
        op: CmpOp::Eq,
        rhs: Term::Const(Value::str(v)),
    })
}

fn set_self(path: &[&str], value: AssignValue) -> Assign {
    Assign {
        target: AssignTarget::SelfPath(path.iter().map(|s| s.to_string()).collect()),
        value,
    }
}

fn atomic(name: &str, guards: Vec<Sentry>, task: Task, milestones: Vec<Milestone>) -> Stage {
    Stage {
        name: name.into(),
        guards,
        milestones,
        body: StageBody::Atomic { task: Some(task) },
    }
}

fn return_milestone(name: &str, task: &str) -> Milestone {
    Milestone {
        name: name.into(),
        achieving: on_return(task),
        invalidating: vec![],
    }
}

/// Shared shift machinery for one direction: extend the tape if the link is
/// missing, then move the head along it.
fn shift_stage(dir: Dir, applied_milestones: &[String], blank: &str) -> Stage {
    let (stage, link, back, extend, extended, mv, moved, shifted) = match dir {
        Dir::Right => (
            "RightShift", "next", "prev", "extendR", "extendedR", "moveR", "movedR", "shiftedR",
        ),
        Dir::Left => (
            "LeftShift", "prev", "next", "extendL", "extendedL", "moveL", "movedL", "shiftedL",
        ),
    };

    let extend_stage = atomic(
        extend,
        vec![Sentry {
            on_event: Some(EventRef::Internal {
                target: StatusAttr::Stage(stage.into()),
                to: true,
            }),
            condition: Some(Condition::Atom(Atom::IsNull(Term::Path(vec![
                "curCell".into(),
                link.into(),
            ])))),
        }],
        Task {
            name: extend.into(),
            kind: TaskKind::Create {
                artifact_type: "Cell".into(),
            },
            inputs: vec![],
            returns: vec![],
            assigns: vec![
                Assign {
                    target: AssignTarget::NewAttr("value".into()),
                    value: AssignValue::Const(Value::str(blank)),
                },
                Assign {
                    target: AssignTarget::NewAttr(back.into()),
                    value: AssignValue::Term(Term::Path(vec!["curCell".into()])),
                },
                set_self(&["curCell", link], AssignValue::NewId),
            ],
        },
        vec![return_milestone(extended, extend)],
    );

    let move_stage = atomic(
        mv,
        vec![
            Sentry {
                on_event: Some(EventRef::Internal {
                    target: StatusAttr::Stage(stage.into()),
                    to: true,
                }),
                condition: Some(Condition::Atom(Atom::NotNull(Term::Path(vec![
                    "curCell".into(),
                    link.into(),
                ])))),
            },
            on_plus_milestone(extended),
        ],
        Task {
            name: mv.into(),
            kind: TaskKind::Update,
            inputs: vec![],
            returns: vec![],
            assigns: vec![set_self(
                &["curCell"],
                AssignValue::Term(Term::Path(vec!["curCell".into(), link.into()])),
            )],
        },
        vec![return_milestone(moved, mv)],
    );

    Stage {
        name: stage.into(),
        guards: applied_milestones.iter().map(|m| on_plus_milestone(m)).collect(),
        milestones: vec![Milestone {
            name: shifted.into(),
            achieving: on_plus_milestone(moved),
            invalidating: vec![],
        }],
        body: StageBody::Composite {
            substages: vec![extend_stage, move_stage],
        },
    }
}

/// Encode a deterministic Turing machine as a GSM model with a single `TM`
/// instance and an initially blank tape.
pub fn encode(spec: &TmSpec) -> Result<GsmModel, ModelError> {
    spec.validate()?;

    let init_stage = atomic(
        "Init",
        vec![Sentry {
            on_event: Some(EventRef::External("boot".into())),
            condition: Some(Condition::not(Condition::Atom(Atom::MilestoneAchieved(
                "initialized".into(),
            )))),
        }],
        Task {
            name: "init".into(),
            kind: TaskKind::Create {
                artifact_type: "Cell".into(),
            },
            inputs: vec![],
            returns: vec![],
            assigns: vec![
                set_self(&["curState"], AssignValue::Const(Value::str(&spec.initial_state))),
                set_self(&["curCell"], AssignValue::NewId),
                Assign {
                    target: AssignTarget::NewAttr("value".into()),
                    value: AssignValue::Const(Value::str(&spec.blank)),
                },
            ],
        },
        vec![return_milestone("initialized", "init")],
    );

    let mut substages = Vec::new();
    let mut applied_r = Vec::new();
    let mut applied_l = Vec::new();
    for t in &spec.transitions {
        let tag = format!("{}_{}", t.from_state, t.read);
        let applied = format!("applied_{tag}");
        match t.dir {
            Dir::Right => applied_r.push(applied.clone()),
            Dir::Left => applied_l.push(applied.clone()),
        }
        substages.push(atomic(
            &format!("apply_{tag}"),
            vec![Sentry {
                on_event: Some(EventRef::Internal {
                    target: StatusAttr::Stage("Transition".into()),
                    to: true,
                }),
                condition: Some(Condition::and(vec![
                    eq(&["curState"], &t.from_state),
                    eq(&["curCell", "value"], &t.read),
                ])),
            }],
            Task {
                name: format!("step_{tag}"),
                kind: TaskKind::Update,
                inputs: vec![],
                returns: vec![],
                assigns: vec![
                    set_self(&["curState"], AssignValue::Const(Value::str(&t.to_state))),
                    set_self(&["curCell", "value"], AssignValue::Const(Value::str(&t.write))),
                ],
            },
            vec![return_milestone(&applied, &format!("step_{tag}"))],
        ));
    }
    if !applied_r.is_empty() {
        substages.push(shift_stage(Dir::Right, &applied_r, &spec.blank));
    }
    if !applied_l.is_empty() {
        substages.push(shift_stage(Dir::Left, &applied_l, &spec.blank));
    }

    let mut shift_milestones = Vec::new();
    if !applied_r.is_empty() {
        shift_milestones.push("shiftedR".to_string());
    }
    if !applied_l.is_empty() {
        shift_milestones.push("shiftedL".to_string());
    }
    substages.push(atomic(
        "Wrap",
        shift_milestones.iter().map(|m| on_plus_milestone(m)).collect(),
        Task {
            name: "wrap".into(),
            kind: TaskKind::Update,
            inputs: vec![],
            returns: vec![],
            assigns: vec![],
        },
        vec![return_milestone("stepDone", "wrap")],
    ));

    let halt_cond = Condition::Or(
        spec.final_states
            .iter()
            .map(|q| eq(&["curState"], q))
            .collect::<Vec<_>>(),
    );
    let halt_cond = match halt_cond {
        Condition::Or(cs) if cs.len() == 1 => cs.into_iter().next().unwrap(),
        c => c,
    };

    let transition_stage = Stage {
        name: "Transition".into(),
        guards: vec![
            on_plus_milestone("initialized"),
            Sentry {
                on_event: Some(EventRef::External("tick".into())),
                condition: Some(Condition::Atom(Atom::MilestoneAchieved(
                    "Transition done".into(),
                ))),
            },
        ],
        milestones: vec![
            Milestone {
                name: "Transition done".into(),
                achieving: on_plus_milestone("stepDone"),
                invalidating: vec![],
            },
            Milestone {
                name: "Halt".into(),
                achieving: Sentry {
                    on_event: None,
                    condition: Some(halt_cond),
                },
                invalidating: vec![],
            },
        ],
        body: StageBody::Composite { substages },
    };

    let model = GsmModel {
        name: spec.name.clone(),
        events: vec![
            EventType { name: "boot".into(), payload: vec![] },
            EventType { name: "tick".into(), payload: vec![] },
        ],
        artifacts: vec![ArtifactType {
            name: "TM".into(),
            attributes: vec![
                AttrDecl { name: "curState".into(), sort: AttrSort::Scalar },
                AttrDecl { name: "curCell".into(), sort: AttrSort::IdRef("Cell".into()) },
            ],
            children: vec![ChildType {
                name: "Cell".into(),
                attributes: vec![
                    AttrDecl { name: "value".into(), sort: AttrSort::Scalar },
                    AttrDecl { name: "prev".into(), sort: AttrSort::IdRef("Cell".into()) },
                    AttrDecl { name: "next".into(), sort: AttrSort::IdRef("Cell".into()) },
                    AttrDecl { name: "parent".into(), sort: AttrSort::IdRef("TM".into()) },
                ],
            }],
            stages: vec![init_stage, transition_stage],
        }],
        initial: vec![InitialInstance {
            name: "tm".into(),
            ty: "TM".into(),
            attrs: vec![],
        }],
    };
    model.validate()?;
    Ok(model)
}

/// Two-state machine that writes one mark and halts: `q0` on blank writes
/// `one`, moves right, and enters `qf`.
pub fn halting_example() -> TmSpec {
    TmSpec {
        name: "tm_halting".into(),
        initial_state: "q0".into(),
        final_states: vec!["qf".into()],
        blank: "blank".into(),
        transitions: vec![TmTransition {
            from_state: "q0".into(),
            read: "blank".into(),
            to_state: "qf".into(),
            write: "one".into(),
            dir: Dir::Right,
        }],
    }
}

/// Machine that never halts: `q0` on blank moves right and stays in `q0`,
/// extending the tape forever.
pub fn looping_example() -> TmSpec {
    TmSpec {
        name: "tm_looping".into(),
        initial_state: "q0".into(),
        final_states: vec!["qf".into()],
        blank: "blank".into(),
        transitions: vec![TmTransition {
            from_state: "q0".into(),
            read: "blank".into(),
            to_state: "q0".into(),
            write: "blank".into(),
            dir: Dir::Right,
        }],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encodings_validate() {
        encode(&halting_example()).unwrap();
        encode(&looping_example()).unwrap();
    }

    #[test]
    fn rejects_nondeterminism() {
        let mut spec = halting_example();
        spec.transitions.push(spec.transitions[0].clone());
        assert!(encode(&spec).is_err());
    }

    #[test]
    fn encoded_text_roundtrips() {
        let m1 = encode(&halting_example()).unwrap();
        let text = super::super::printer::print(&m1);
        let m2 = super::super::parser::parse(&text, "printed").unwrap();
        assert_eq!(m1, m2);
    }
}
