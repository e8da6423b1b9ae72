//! Event scripts: a line-oriented list of incoming events for simulation
//! runs. Each line is one event occurrence, processed as one step:
//!
//! ```text
//! # comment
//! itemRequest @order1 { code = "c1", qty = "2" }
//! pay.return @order1 { receipt = "r9" }
//! deliver.return @order1 auto
//! ```
//!
//! Targets are `@name` (an initial instance) or `@N` (a raw instance id, for
//! instances created during the run). `auto` asks the service oracle to
//! choose the payload, which is where a simulation seed matters.

use super::{GsmModel, ModelError};
use crate::value::{InstanceId, Value};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EventInstance {
    /// One-way event name or `task.return`.
    pub event: String,
    pub target: InstanceId,
    pub payload: PayloadSpec,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum PayloadSpec {
    Given(Vec<(String, Value)>),
    /// Oracle-chosen payload.
    Auto,
}

fn syntax(path: &str, line: usize, msg: impl Into<String>) -> ModelError {
    ModelError::Syntax {
        path: path.to_string(),
        line,
        col: 1,
        msg: msg.into(),
    }
}

fn parse_target(model: &GsmModel, s: &str) -> Option<InstanceId> {
    let name = s.strip_prefix('@')?;
    if let Ok(n) = name.parse::<u64>() {
        return Some(InstanceId(n));
    }
    model.initial_id(name)
}

fn parse_value(model: &GsmModel, s: &str) -> Option<Value> {
    let s = s.trim();
    if s == "null" {
        return Some(Value::Null);
    }
    if s == "true" || s == "false" {
        return Some(Value::Bool(s == "true"));
    }
    if let Some(q) = s.strip_prefix('"').and_then(|r| r.strip_suffix('"')) {
        // Payload strings are plain; no escapes.
        if q.contains('"') {
            return None;
        }
        return Some(Value::Str(q.to_string()));
    }
    parse_target(model, s).map(Value::Id)
}

pub fn parse_script(src: &str, path: &str, model: &GsmModel) -> Result<Vec<EventInstance>, ModelError> {
    let mut out = Vec::new();
    for (i, raw) in src.lines().enumerate() {
        let lineno = i + 1;
        let line = match raw.find('#') {
            Some(p) => &raw[..p],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }

        let mut rest = line;
        let event = {
            let end = rest.find(char::is_whitespace).ok_or_else(|| {
                syntax(path, lineno, "expected `event @target ...`")
            })?;
            let (e, r) = rest.split_at(end);
            rest = r.trim_start();
            e.to_string()
        };

        let target = {
            let end = rest.find(char::is_whitespace).unwrap_or(rest.len());
            let (t, r) = rest.split_at(end);
            rest = r.trim_start();
            parse_target(model, t).ok_or_else(|| {
                syntax(path, lineno, format!("`{t}` is not `@name` or `@N`"))
            })?
        };

        let payload = if rest == "auto" {
            PayloadSpec::Auto
        } else if rest.is_empty() {
            PayloadSpec::Given(vec![])
        } else {
            let inner = rest
                .strip_prefix('{')
                .and_then(|r| r.strip_suffix('}'))
                .ok_or_else(|| syntax(path, lineno, "expected `{ k = v, ... }` or `auto`"))?
                .trim();
            let mut pairs = Vec::new();
            if !inner.is_empty() {
                // Split on commas outside quotes.
                let mut depth_quote = false;
                let mut start = 0usize;
                let mut fields = Vec::new();
                for (j, c) in inner.char_indices() {
                    match c {
                        '"' => depth_quote = !depth_quote,
                        ',' if !depth_quote => {
                            fields.push(&inner[start..j]);
                            start = j + 1;
                        }
                        _ => {}
                    }
                }
                fields.push(&inner[start..]);
                for field in fields {
                    let Some((k, v)) = field.split_once('=') else {
                        return Err(syntax(path, lineno, format!("`{}` is not `k = v`", field.trim())));
                    };
                    let value = parse_value(model, v).ok_or_else(|| {
                        syntax(path, lineno, format!("`{}` is not a value", v.trim()))
                    })?;
                    pairs.push((k.trim().to_string(), value));
                }
            }
            PayloadSpec::Given(pairs)
        };

        out.push(EventInstance { event, target, payload });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::super::parser;
    use super::*;

    fn model() -> GsmModel {
        parser::parse(
            r#"
model demo
event ping { note }
artifact A {
  attributes { note }
  stage s { guard on ping }
}
initial a1: A { }
"#,
            "t",
        )
        .unwrap()
    }

    #[test]
    fn parses_lines() {
        let m = model();
        let sc = parse_script(
            "# intro\nping @a1 { note = \"hi, there\" }\nping @3 auto\nping @a1\n",
            "s",
            &m,
        )
        .unwrap();
        assert_eq!(sc.len(), 3);
        assert_eq!(sc[0].target, InstanceId(1));
        assert_eq!(
            sc[0].payload,
            PayloadSpec::Given(vec![("note".into(), Value::Str("hi, there".into()))])
        );
        assert_eq!(sc[1].target, InstanceId(3));
        assert_eq!(sc[1].payload, PayloadSpec::Auto);
        assert_eq!(sc[2].payload, PayloadSpec::Given(vec![]));
    }

    #[test]
    fn rejects_bad_target() {
        let m = model();
        let err = parse_script("ping order1", "s", &m).unwrap_err();
        assert!(err.to_string().contains("order1"));
    }
}
