//! The value domain shared by snapshots and relational states.
//!
//! Values are uninterpreted constants: the only operation the semantics ever
//! applies to them is equality (plus a fixed total order used for
//! deterministic tie-breaking, e.g. least-id container selection and sorted
//! fact listings). `Anon` values never appear in source models; they are
//! minted by the abstraction layer, both as fresh payload representatives
//! and as the normal form that canonical renaming maps non-model values to.

use serde::{Deserialize, Serialize};
use std::fmt;

/// Identifier of an artifact instance.
#[derive(
    Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default,
)]
pub struct InstanceId(pub u64);

impl fmt::Display for InstanceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

/// A constant from the countably infinite value domain, plus distinguished
/// null. Booleans exist so that status attributes can live in relational
/// states; the model condition language never mentions them directly.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Value {
    Null,
    Bool(bool),
    Id(InstanceId),
    Str(String),
    /// Abstract representative introduced by canonicalization / the fresh
    /// payload supply. Two `Anon` values are equal iff their indexes are.
    Anon(u64),
}

impl Value {
    pub fn str(s: impl Into<String>) -> Self {
        Value::Str(s.into())
    }

    pub fn is_null(&self) -> bool {
        matches!(self, Value::Null)
    }

    pub fn as_id(&self) -> Option<InstanceId> {
        match self {
            Value::Id(id) => Some(*id),
            _ => None,
        }
    }
}

impl From<InstanceId> for Value {
    fn from(id: InstanceId) -> Self {
        Value::Id(id)
    }
}

impl From<bool> for Value {
    fn from(b: bool) -> Self {
        Value::Bool(b)
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Null => write!(f, "null"),
            Value::Bool(b) => write!(f, "{b}"),
            Value::Id(id) => write!(f, "{id}"),
            Value::Str(s) => {
                if s.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') && !s.is_empty() {
                    write!(f, "{s}")
                } else {
                    write!(f, "{s:?}")
                }
            }
            Value::Anon(n) => write!(f, "${n}"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ordering_is_total_and_stable() {
        let mut vs = vec![
            Value::str("b"),
            Value::Anon(0),
            Value::Null,
            Value::Id(InstanceId(3)),
            Value::Bool(true),
            Value::str("a"),
            Value::Id(InstanceId(1)),
        ];
        vs.sort();
        assert_eq!(
            vs,
            vec![
                Value::Null,
                Value::Bool(true),
                Value::Id(InstanceId(1)),
                Value::Id(InstanceId(3)),
                Value::str("a"),
                Value::str("b"),
                Value::Anon(0),
            ]
        );
    }

    #[test]
    fn display_forms() {
        assert_eq!(Value::Null.to_string(), "null");
        assert_eq!(Value::Id(InstanceId(7)).to_string(), "#7");
        assert_eq!(Value::str("widget").to_string(), "widget");
        assert_eq!(Value::str("two words").to_string(), "\"two words\"");
        assert_eq!(Value::Anon(2).to_string(), "$2");
    }
}
