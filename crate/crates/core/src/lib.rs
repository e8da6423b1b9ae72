//! Guard-Stage-Milestone (GSM) artifact systems: modeling, incremental
//! execution, translation into relational data-centric dynamic systems,
//! finite-state abstraction, and mu-calculus verification.
//!
//! The crate is organized bottom-up:
//!
//! * [`model`] - artifact types, lifecycles, the condition language, the
//!   textual/JSON model formats, and the Turing machine encoder;
//! * [`pac`] - compilation of lifecycles into Prerequisite/Antecedent/
//!   Consequent rules and their stratification;
//! * [`engine`] - the incremental B-step semantics over snapshots;
//! * [`dcds`] - generic relational transition systems with condition-action
//!   rules, parameterized actions and nondeterministic services;
//! * [`translate`] - the GSM-to-DCDS compilation, instance-bounding via
//!   pre-allocated containers, and state filtering;
//! * [`statespace`] - abstract transition-system construction for both
//!   semantics, canonical state forms, bisimulation and boundedness checks;
//! * [`mucalc`] - a mu-calculus checker with persistence-guarded
//!   first-order quantification over artifact values.

pub mod dcds;
pub mod engine;
pub mod model;
pub mod mucalc;
pub mod pac;
pub mod statespace;
pub mod translate;
pub mod value;

pub use model::GsmModel;
pub use value::{InstanceId, Value};
