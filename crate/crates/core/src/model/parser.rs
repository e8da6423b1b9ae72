//! Parser for the block-structured model text format (`docs/model-format.md`).
//!
//! Hand-rolled lexer and recursive descent; errors carry line and column.
//! Names are bare identifiers or double-quoted strings, so lifecycle element
//! names may contain spaces. There are no numeric literals: scalar values are
//! uninterpreted string constants.

use super::condition::{Atom, CmpOp, Condition, Term};
use super::{
    Assign, AssignTarget, AssignValue, ArtifactType, AttrDecl, AttrSort, ChildType, EventRef,
    EventType, GsmModel, InitialInstance, Milestone, ModelError, Sentry, Stage, StageBody,
    StatusAttr, Task, TaskKind,
};
use crate::value::Value;

#[derive(Clone, Debug, PartialEq)]
enum Tok {
    Ident(String),
    Str(String),
    LBrace,
    RBrace,
    LParen,
    RParen,
    Comma,
    Colon,
    Dot,
    Plus,
    Minus,
    At,
    EqEq,
    NotEq,
    Assign,
    Eq,
    Eof,
}

impl std::fmt::Display for Tok {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Tok::Ident(s) => write!(f, "`{s}`"),
            Tok::Str(s) => write!(f, "\"{s}\""),
            Tok::LBrace => write!(f, "`{{`"),
            Tok::RBrace => write!(f, "`}}`"),
            Tok::LParen => write!(f, "`(`"),
            Tok::RParen => write!(f, "`)`"),
            Tok::Comma => write!(f, "`,`"),
            Tok::Colon => write!(f, "`:`"),
            Tok::Dot => write!(f, "`.`"),
            Tok::Plus => write!(f, "`+`"),
            Tok::Minus => write!(f, "`-`"),
            Tok::At => write!(f, "`@`"),
            Tok::EqEq => write!(f, "`==`"),
            Tok::NotEq => write!(f, "`!=`"),
            Tok::Assign => write!(f, "`:=`"),
            Tok::Eq => write!(f, "`=`"),
            Tok::Eof => write!(f, "end of input"),
        }
    }
}

struct Lexer<'a> {
    src: &'a str,
    pos: usize,
    line: usize,
    col: usize,
}

type Spanned = (Tok, usize, usize);

impl<'a> Lexer<'a> {
    fn new(src: &'a str) -> Self {
        Lexer { src, pos: 0, line: 1, col: 1 }
    }

    fn bump(&mut self) -> Option<char> {
        let c = self.src[self.pos..].chars().next()?;
        self.pos += c.len_utf8();
        if c == '\n' {
            self.line += 1;
            self.col = 1;
        } else {
            self.col += 1;
        }
        Some(c)
    }

    fn peek(&self) -> Option<char> {
        self.src[self.pos..].chars().next()
    }

    fn tokens(mut self, path: &str) -> Result<Vec<Spanned>, ModelError> {
        let mut out = Vec::new();
        loop {
            while let Some(c) = self.peek() {
                if c == '#' {
                    while let Some(c) = self.peek() {
                        if c == '\n' {
                            break;
                        }
                        self.bump();
                    }
                } else if c.is_whitespace() {
                    self.bump();
                } else {
                    break;
                }
            }
            let (line, col) = (self.line, self.col);
            let Some(c) = self.peek() else {
                out.push((Tok::Eof, line, col));
                return Ok(out);
            };
            let err = |msg: String| ModelError::Syntax {
                path: path.to_string(),
                line,
                col,
                msg,
            };
            let tok = match c {
                '{' => {
                    self.bump();
                    Tok::LBrace
                }
                '}' => {
                    self.bump();
                    Tok::RBrace
                }
                '(' => {
                    self.bump();
                    Tok::LParen
                }
                ')' => {
                    self.bump();
                    Tok::RParen
                }
                ',' => {
                    self.bump();
                    Tok::Comma
                }
                '.' => {
                    self.bump();
                    Tok::Dot
                }
                '+' => {
                    self.bump();
                    Tok::Plus
                }
                '-' => {
                    self.bump();
                    Tok::Minus
                }
                '@' => {
                    self.bump();
                    Tok::At
                }
                ':' => {
                    self.bump();
                    if self.peek() == Some('=') {
                        self.bump();
                        Tok::Assign
                    } else {
                        Tok::Colon
                    }
                }
                '=' => {
                    self.bump();
                    if self.peek() == Some('=') {
                        self.bump();
                        Tok::EqEq
                    } else {
                        Tok::Eq
                    }
                }
                '!' => {
                    self.bump();
                    if self.peek() == Some('=') {
                        self.bump();
                        Tok::NotEq
                    } else {
                        return Err(err("expected `!=`".into()));
                    }
                }
                '"' => {
                    self.bump();
                    let mut s = String::new();
                    loop {
                        match self.bump() {
                            None | Some('\n') => return Err(err("unterminated string".into())),
                            Some('"') => break,
                            Some('\\') => match self.bump() {
                                Some('"') => s.push('"'),
                                Some('\\') => s.push('\\'),
                                other => {
                                    return Err(err(format!(
                                        "unsupported escape `\\{}`",
                                        other.map(String::from).unwrap_or_default()
                                    )))
                                }
                            },
                            Some(c) => s.push(c),
                        }
                    }
                    Tok::Str(s)
                }
                c if c.is_ascii_alphabetic() || c == '_' => {
                    let mut s = String::new();
                    while let Some(c) = self.peek() {
                        if c.is_ascii_alphanumeric() || c == '_' {
                            s.push(c);
                            self.bump();
                        } else {
                            break;
                        }
                    }
                    Tok::Ident(s)
                }
                c => return Err(err(format!("unexpected character `{c}`"))),
            };
            out.push((tok, line, col));
        }
    }
}

struct Parser<'a> {
    toks: Vec<Spanned>,
    pos: usize,
    path: &'a str,
}

impl<'a> Parser<'a> {
    fn peek(&self) -> &Tok {
        &self.toks[self.pos].0
    }

    fn peek2(&self) -> &Tok {
        &self.toks[(self.pos + 1).min(self.toks.len() - 1)].0
    }

    fn next(&mut self) -> Tok {
        let t = self.toks[self.pos].0.clone();
        if self.pos + 1 < self.toks.len() {
            self.pos += 1;
        }
        t
    }

    fn err_here(&self, msg: impl Into<String>) -> ModelError {
        let (_, line, col) = self.toks[self.pos];
        ModelError::Syntax {
            path: self.path.to_string(),
            line,
            col,
            msg: msg.into(),
        }
    }

    fn expect(&mut self, want: Tok) -> Result<(), ModelError> {
        if *self.peek() == want {
            self.next();
            Ok(())
        } else {
            Err(self.err_here(format!("expected {want}, found {}", self.peek())))
        }
    }

    /// Whether the token after next starts a comparison or a path
    /// continuation, meaning the next identifier is a term and not a
    /// prefix-atom keyword.
    fn cmp_follows(&self) -> bool {
        matches!(self.peek2(), Tok::EqEq | Tok::NotEq | Tok::Dot)
    }

    /// Keyword check against the next identifier.
    fn at_kw(&self, kw: &str) -> bool {
        matches!(self.peek(), Tok::Ident(s) if s == kw)
    }

    fn eat_kw(&mut self, kw: &str) -> bool {
        if self.at_kw(kw) {
            self.next();
            true
        } else {
            false
        }
    }

    fn expect_kw(&mut self, kw: &str) -> Result<(), ModelError> {
        if self.eat_kw(kw) {
            Ok(())
        } else {
            Err(self.err_here(format!("expected `{kw}`, found {}", self.peek())))
        }
    }

    /// Bare identifier or quoted string.
    fn name(&mut self) -> Result<String, ModelError> {
        match self.peek().clone() {
            Tok::Ident(s) => {
                self.next();
                Ok(s)
            }
            Tok::Str(s) => {
                self.next();
                Ok(s)
            }
            other => Err(self.err_here(format!("expected a name, found {other}"))),
        }
    }

    fn ident(&mut self) -> Result<String, ModelError> {
        match self.peek().clone() {
            Tok::Ident(s) => {
                self.next();
                Ok(s)
            }
            other => Err(self.err_here(format!("expected an identifier, found {other}"))),
        }
    }

    // ---- model ----

    fn model(&mut self) -> Result<GsmModel, ModelError> {
        self.expect_kw("model")?;
        let name = self.name()?;
        let mut model = GsmModel {
            name,
            events: vec![],
            artifacts: vec![],
            initial: vec![],
        };
        loop {
            if self.eat_kw("event") {
                model.events.push(self.event()?);
            } else if self.eat_kw("artifact") {
                model.artifacts.push(self.artifact()?);
            } else if self.eat_kw("initial") {
                model.initial.push(self.initial(&model)?);
            } else if *self.peek() == Tok::Eof {
                return Ok(model);
            } else {
                return Err(self.err_here(format!(
                    "expected `event`, `artifact` or `initial`, found {}",
                    self.peek()
                )));
            }
        }
    }

    fn event(&mut self) -> Result<EventType, ModelError> {
        let name = self.name()?;
        self.expect(Tok::LBrace)?;
        let mut payload = Vec::new();
        if *self.peek() != Tok::RBrace {
            loop {
                payload.push(self.name()?);
                if !matches!(self.peek(), Tok::Comma) {
                    break;
                }
                self.next();
            }
        }
        self.expect(Tok::RBrace)?;
        Ok(EventType { name, payload })
    }

    fn attr_list(&mut self) -> Result<Vec<AttrDecl>, ModelError> {
        self.expect_kw("attributes")?;
        self.expect(Tok::LBrace)?;
        let mut out = Vec::new();
        if *self.peek() != Tok::RBrace {
            loop {
                let name = self.name()?;
                let sort = if *self.peek() == Tok::Colon {
                    self.next();
                    self.expect_kw("id")?;
                    self.expect(Tok::LParen)?;
                    let ty = self.name()?;
                    self.expect(Tok::RParen)?;
                    AttrSort::IdRef(ty)
                } else {
                    AttrSort::Scalar
                };
                out.push(AttrDecl { name, sort });
                if !matches!(self.peek(), Tok::Comma) {
                    break;
                }
                self.next();
            }
        }
        self.expect(Tok::RBrace)?;
        Ok(out)
    }

    fn artifact(&mut self) -> Result<ArtifactType, ModelError> {
        let name = self.name()?;
        self.expect(Tok::LBrace)?;
        let mut a = ArtifactType {
            name,
            attributes: vec![],
            children: vec![],
            stages: vec![],
        };
        loop {
            if self.at_kw("attributes") {
                a.attributes = self.attr_list()?;
            } else if self.eat_kw("child") {
                let name = self.name()?;
                self.expect(Tok::LBrace)?;
                let mut attributes = self.attr_list()?;
                self.expect(Tok::RBrace)?;
                if !attributes.iter().any(|d| d.name == "parent") {
                    attributes.push(AttrDecl {
                        name: "parent".into(),
                        sort: AttrSort::IdRef(a.name.clone()),
                    });
                }
                a.children.push(ChildType { name, attributes });
            } else if self.eat_kw("stage") {
                a.stages.push(self.stage()?);
            } else if *self.peek() == Tok::RBrace {
                self.next();
                resolve_internal_refs(&mut a, self.path)?;
                return Ok(a);
            } else {
                return Err(self.err_here(format!(
                    "expected `attributes`, `child`, `stage` or `}}`, found {}",
                    self.peek()
                )));
            }
        }
    }

    fn stage(&mut self) -> Result<Stage, ModelError> {
        let name = self.name()?;
        self.expect(Tok::LBrace)?;
        let mut guards = Vec::new();
        let mut milestones = Vec::new();
        let mut task: Option<Task> = None;
        let mut substages = Vec::new();
        loop {
            if self.eat_kw("guard") {
                guards.push(self.sentry()?);
            } else if self.eat_kw("milestone") {
                milestones.push(self.milestone()?);
            } else if self.eat_kw("task") {
                if task.is_some() {
                    return Err(self.err_here("a stage has at most one task"));
                }
                task = Some(self.task()?);
            } else if self.eat_kw("stage") {
                substages.push(self.stage()?);
            } else if *self.peek() == Tok::RBrace {
                self.next();
                break;
            } else {
                return Err(self.err_here(format!(
                    "expected `guard`, `milestone`, `task`, `stage` or `}}`, found {}",
                    self.peek()
                )));
            }
        }
        let body = if substages.is_empty() {
            StageBody::Atomic { task }
        } else {
            if task.is_some() {
                return Err(self.err_here(format!(
                    "stage `{name}` has both substages and a task"
                )));
            }
            StageBody::Composite { substages }
        };
        Ok(Stage { name, guards, milestones, body })
    }

    fn milestone(&mut self) -> Result<Milestone, ModelError> {
        let name = self.name()?;
        self.expect(Tok::LBrace)?;
        let mut achieving: Option<Sentry> = None;
        let mut invalidating = Vec::new();
        loop {
            if self.eat_kw("achieved") {
                if achieving.is_some() {
                    return Err(self.err_here(format!(
                        "milestone `{name}` has more than one achieving sentry"
                    )));
                }
                achieving = Some(self.sentry()?);
            } else if self.eat_kw("invalidated") {
                invalidating.push(self.sentry()?);
            } else if *self.peek() == Tok::RBrace {
                self.next();
                break;
            } else {
                return Err(self.err_here(format!(
                    "expected `achieved`, `invalidated` or `}}`, found {}",
                    self.peek()
                )));
            }
        }
        let Some(achieving) = achieving else {
            return Err(self.err_here(format!(
                "milestone `{name}` lacks an achieving sentry"
            )));
        };
        Ok(Milestone { name, achieving, invalidating })
    }

    /// `on <event> [if <cond>]` or `if <cond>`.
    fn sentry(&mut self) -> Result<Sentry, ModelError> {
        let mut s = Sentry::default();
        if self.eat_kw("on") {
            s.on_event = Some(self.event_ref()?);
        }
        if self.eat_kw("if") {
            s.condition = Some(self.condition()?);
        }
        if s.on_event.is_none() && s.condition.is_none() {
            return Err(self.err_here("sentry needs an `on` event or an `if` condition"));
        }
        Ok(s)
    }

    fn event_ref(&mut self) -> Result<EventRef, ModelError> {
        match self.peek().clone() {
            Tok::Plus => {
                self.next();
                let name = self.name()?;
                // Stage/milestone disambiguation happens once the whole
                // artifact is known; see resolve_internal_refs.
                Ok(EventRef::Internal { target: StatusAttr::Stage(name), to: true })
            }
            Tok::Minus => {
                self.next();
                let name = self.name()?;
                Ok(EventRef::Internal { target: StatusAttr::Stage(name), to: false })
            }
            _ => {
                let name = self.name()?;
                if *self.peek() == Tok::Dot {
                    self.next();
                    self.expect_kw("return")?;
                    Ok(EventRef::TaskReturn(name))
                } else {
                    Ok(EventRef::External(name))
                }
            }
        }
    }

    fn task(&mut self) -> Result<Task, ModelError> {
        let name = self.name()?;
        self.expect(Tok::LBrace)?;
        let mut kind = TaskKind::Update;
        let mut inputs = Vec::new();
        let mut returns = Vec::new();
        let mut assigns = Vec::new();
        loop {
            if self.eat_kw("create") {
                kind = TaskKind::Create { artifact_type: self.name()? };
            } else if self.eat_kw("delete") {
                kind = TaskKind::Delete { target: self.term()? };
            } else if self.eat_kw("inputs") {
                loop {
                    inputs.push(self.term()?);
                    if !matches!(self.peek(), Tok::Comma) {
                        break;
                    }
                    self.next();
                }
            } else if self.eat_kw("returns") {
                loop {
                    returns.push(self.name()?);
                    if !matches!(self.peek(), Tok::Comma) {
                        break;
                    }
                    self.next();
                }
            } else if self.eat_kw("set") {
                assigns.push(self.assign()?);
            } else if *self.peek() == Tok::RBrace {
                self.next();
                break;
            } else {
                return Err(self.err_here(format!(
                    "expected `create`, `delete`, `inputs`, `returns`, `set` or `}}`, found {}",
                    self.peek()
                )));
            }
        }
        Ok(Task { name, kind, inputs, returns, assigns })
    }

    fn assign(&mut self) -> Result<Assign, ModelError> {
        let target = if self.eat_kw("new") {
            self.expect(Tok::Dot)?;
            AssignTarget::NewAttr(self.name()?)
        } else {
            self.expect_kw("self")?;
            self.expect(Tok::Dot)?;
            let mut path = vec![self.name()?];
            if *self.peek() == Tok::Dot {
                self.next();
                path.push(self.name()?);
            }
            AssignTarget::SelfPath(path)
        };
        self.expect(Tok::Assign)?;
        let value = if self.eat_kw("ret") {
            self.expect(Tok::Dot)?;
            AssignValue::Payload(self.name()?)
        } else if self.at_kw("new") && *self.peek2() != Tok::Dot {
            self.next();
            AssignValue::NewId
        } else {
            match self.term()? {
                Term::Const(v) => AssignValue::Const(v),
                t => AssignValue::Term(t),
            }
        };
        Ok(Assign { target, value })
    }

    // ---- conditions ----

    fn condition(&mut self) -> Result<Condition, ModelError> {
        let mut parts = vec![self.cond_and()?];
        while self.eat_kw("or") {
            parts.push(self.cond_and()?);
        }
        Ok(if parts.len() == 1 {
            parts.pop().unwrap()
        } else {
            Condition::Or(parts)
        })
    }

    fn cond_and(&mut self) -> Result<Condition, ModelError> {
        let mut parts = vec![self.cond_not()?];
        while self.eat_kw("and") {
            parts.push(self.cond_not()?);
        }
        Ok(Condition::and(parts))
    }

    fn cond_not(&mut self) -> Result<Condition, ModelError> {
        if self.eat_kw("not") {
            Ok(Condition::Not(Box::new(self.cond_not()?)))
        } else {
            self.cond_primary()
        }
    }

    fn cond_primary(&mut self) -> Result<Condition, ModelError> {
        if *self.peek() == Tok::LParen {
            self.next();
            let c = self.condition()?;
            self.expect(Tok::RParen)?;
            return Ok(c);
        }
        if self.at_kw("true") && !self.cmp_follows() {
            self.next();
            return Ok(Condition::True);
        }
        // Prefix atoms; an attribute that happens to share a keyword's name
        // is still reachable because `kw == ...` parses as a comparison.
        if self.at_kw("open") && !self.cmp_follows() {
            self.next();
            return Ok(Condition::Atom(Atom::StageOpen(self.name()?)));
        }
        if self.at_kw("achieved") && !self.cmp_follows() {
            self.next();
            return Ok(Condition::Atom(Atom::MilestoneAchieved(self.name()?)));
        }
        if self.at_kw("isnull") && !self.cmp_follows() {
            self.next();
            return Ok(Condition::Atom(Atom::IsNull(self.term()?)));
        }
        if self.at_kw("notnull") && !self.cmp_follows() {
            self.next();
            return Ok(Condition::Atom(Atom::NotNull(self.term()?)));
        }
        if self.at_kw("exists") && !self.cmp_follows() {
            self.next();
            let child = self.name()?;
            let cond = if self.eat_kw("where") {
                self.expect(Tok::LParen)?;
                let c = self.condition()?;
                self.expect(Tok::RParen)?;
                Some(Box::new(c))
            } else {
                None
            };
            return Ok(Condition::Atom(Atom::ExistsChild { child, cond }));
        }
        let lhs = self.term()?;
        let op = match self.peek() {
            Tok::EqEq => CmpOp::Eq,
            Tok::NotEq => CmpOp::Ne,
            other => {
                return Err(self.err_here(format!("expected `==` or `!=`, found {other}")))
            }
        };
        self.next();
        let rhs = self.term()?;
        Ok(Condition::Atom(Atom::Cmp { lhs, op, rhs }))
    }

    fn term(&mut self) -> Result<Term, ModelError> {
        match self.peek().clone() {
            Tok::Str(s) => {
                self.next();
                Ok(Term::Const(Value::Str(s)))
            }
            Tok::Ident(s) if s == "null" => {
                self.next();
                Ok(Term::Const(Value::Null))
            }
            Tok::Ident(s) if s == "true" || s == "false" => {
                self.next();
                Ok(Term::Const(Value::Bool(s == "true")))
            }
            Tok::Ident(s) if s == "self" && *self.peek2() != Tok::Dot => {
                self.next();
                Ok(Term::SelfId)
            }
            Tok::Ident(_) => {
                let mut path = Vec::new();
                if self.at_kw("self") {
                    self.next();
                    self.expect(Tok::Dot)?;
                }
                path.push(self.ident()?);
                while *self.peek() == Tok::Dot {
                    self.next();
                    path.push(self.ident()?);
                }
                Ok(Term::Path(path))
            }
            other => Err(self.err_here(format!("expected a term, found {other}"))),
        }
    }

    fn initial(&mut self, model: &GsmModel) -> Result<InitialInstance, ModelError> {
        let name = self.name()?;
        self.expect(Tok::Colon)?;
        let ty = self.name()?;
        self.expect(Tok::LBrace)?;
        let mut attrs = Vec::new();
        if *self.peek() != Tok::RBrace {
            loop {
                let attr = self.name()?;
                self.expect(Tok::Eq)?;
                let v = match self.peek().clone() {
                    Tok::Str(s) => {
                        self.next();
                        Value::Str(s)
                    }
                    Tok::Ident(s) if s == "null" => {
                        self.next();
                        Value::Null
                    }
                    Tok::Ident(s) if s == "true" || s == "false" => {
                        self.next();
                        Value::Bool(s == "true")
                    }
                    Tok::At => {
                        self.next();
                        let target = self.name()?;
                        let mut found = None;
                        for (i, d) in model.initial.iter().enumerate() {
                            if d.name == target {
                                found = Some(crate::value::InstanceId(i as u64 + 1));
                            }
                        }
                        // Self-reference: the declaration being parsed is not
                        // yet in model.initial.
                        if found.is_none() && target == name {
                            found = Some(crate::value::InstanceId(model.initial.len() as u64 + 1));
                        }
                        let Some(id) = found else {
                            return Err(self.err_here(format!(
                                "`@{target}` does not name an earlier initial instance"
                            )));
                        };
                        Value::Id(id)
                    }
                    other => {
                        return Err(self.err_here(format!(
                            "expected a value or `@name`, found {other}"
                        )))
                    }
                };
                attrs.push((attr, v));
                if !matches!(self.peek(), Tok::Comma) {
                    break;
                }
                self.next();
            }
        }
        self.expect(Tok::RBrace)?;
        Ok(InitialInstance { name, ty, attrs })
    }
}

/// `+name`/`-name` sentries are parsed as stage references; once the
/// artifact's lifecycle is complete, rewrite those naming a milestone.
/// A name used by both a stage and a milestone stays ambiguous and is
/// rejected.
fn resolve_internal_refs(a: &mut ArtifactType, path: &str) -> Result<(), ModelError> {
    let stage_names: Vec<String> = a.stages_rec().iter().map(|si| si.stage.name.clone()).collect();
    let milestone_names: Vec<String> = a
        .stages_rec()
        .iter()
        .flat_map(|si| si.stage.milestones.iter().map(|m| m.name.clone()))
        .collect();

    let fix = |s: &mut Sentry| -> Result<(), ModelError> {
        if let Some(EventRef::Internal { target: StatusAttr::Stage(name), to }) = &s.on_event {
            let is_stage = stage_names.iter().any(|n| n == name);
            let is_milestone = milestone_names.iter().any(|n| n == name);
            if is_stage && is_milestone {
                return Err(ModelError::Syntax {
                    path: path.to_string(),
                    line: 0,
                    col: 0,
                    msg: format!(
                        "`{}{name}` is ambiguous: both a stage and a milestone carry that name",
                        if *to { '+' } else { '-' }
                    ),
                });
            }
            if is_milestone {
                s.on_event = Some(EventRef::Internal {
                    target: StatusAttr::Milestone(name.clone()),
                    to: *to,
                });
            }
        }
        Ok(())
    };

    fn walk(stage: &mut Stage, fix: &impl Fn(&mut Sentry) -> Result<(), ModelError>) -> Result<(), ModelError> {
        for g in &mut stage.guards {
            fix(g)?;
        }
        for m in &mut stage.milestones {
            fix(&mut m.achieving)?;
            for s in &mut m.invalidating {
                fix(s)?;
            }
        }
        if let StageBody::Composite { substages } = &mut stage.body {
            for s in substages {
                walk(s, fix)?;
            }
        }
        Ok(())
    }

    for s in &mut a.stages {
        walk(s, &fix)?;
    }
    Ok(())
}

pub fn parse(src: &str, path: &str) -> Result<GsmModel, ModelError> {
    let toks = Lexer::new(src).tokens(path)?;
    let mut p = Parser { toks, pos: 0, path };
    let model = p.model()?;
    debug_assert!(*p.peek() == Tok::Eof);
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    const SMALL: &str = r#"
# A one-stage model.
model demo

event ping { note }

artifact Box {
  attributes { note, lid: id(Box) }

  stage "Open lid" {
    guard on ping if isnull note
    milestone opened {
      achieved on ping if note == "x" and not open "Open lid"
      invalidated on +"Open lid"
    }
  }
}

initial b1: Box { lid = @b1 }
"#;

    #[test]
    fn parses_small_model() {
        let m = parse(SMALL, "small").unwrap();
        assert_eq!(m.name, "demo");
        assert_eq!(m.events[0].payload, vec!["note"]);
        let a = &m.artifacts[0];
        assert_eq!(a.attributes[1].sort, AttrSort::IdRef("Box".into()));
        let stage = &a.stages[0];
        assert_eq!(stage.name, "Open lid");
        assert_eq!(stage.guards.len(), 1);
        let ms = &stage.milestones[0];
        assert_eq!(
            ms.invalidating[0].on_event,
            Some(EventRef::Internal { target: StatusAttr::Stage("Open lid".into()), to: true })
        );
        assert_eq!(m.initial[0].attrs[0], ("lid".into(), Value::Id(crate::value::InstanceId(1))));
    }

    #[test]
    fn plus_ref_resolves_to_milestone() {
        let src = r#"
model demo
event go { }
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
"#;
        let m = parse(src, "t").unwrap();
        let s2 = m.artifacts[0].find_stage("s2").unwrap();
        assert_eq!(
            s2.stage.guards[0].on_event,
            Some(EventRef::Internal { target: StatusAttr::Milestone("m1".into()), to: true })
        );
    }

    #[test]
    fn reports_position() {
        let err = parse("model demo\nevent e { x y }\n", "m.gsm").unwrap_err();
        match err {
            ModelError::Syntax { line, col, .. } => {
                assert_eq!(line, 2);
                assert_eq!(col, 13);
            }
            other => panic!("expected syntax error, got {other}"),
        }
    }

    #[test]
    fn task_returns_and_assigns() {
        let src = r#"
model demo
event go { }
artifact A {
  attributes { r, c: id(B) }
  child B { attributes { v } }
  stage s {
    guard on go
    task t {
      create B
      inputs r, self
      returns out
      set self.c.v := self.r
      set self.r := ret.out
      set new.v := "blank"
      set self.c := new
    }
    milestone done { achieved on t.return }
  }
}
"#;
        let m = parse(src, "t").unwrap();
        let (t, _) = m.artifacts[0].task("t").unwrap();
        assert_eq!(t.kind, TaskKind::Create { artifact_type: "B".into() });
        assert_eq!(t.inputs, vec![Term::Path(vec!["r".into()]), Term::SelfId]);
        assert_eq!(t.assigns[3].value, AssignValue::NewId);
        assert_eq!(
            t.assigns[0].target,
            AssignTarget::SelfPath(vec!["c".into(), "v".into()])
        );
        assert_eq!(
            t.assigns[0].value,
            AssignValue::Term(Term::Path(vec!["r".into()]))
        );
        // Child type B got an implicit parent attribute.
        let b = m.artifacts[0].child("B").unwrap();
        assert!(b.attributes.iter().any(|d| d.name == "parent"));
        m.validate().unwrap();
    }

    #[test]
    fn validation_rejects_ill_typed_tasks() {
        let reject = |src: &str, needle: &str| {
            let err = parse(src, "t").and_then(|m| m.validate()).unwrap_err();
            let msg = err.to_string();
            assert!(msg.contains(needle), "wanted `{needle}` in `{msg}`");
        };

        // Task names route `t.return` events, so they are global.
        reject(
            r#"
model demo
event go { }
artifact A {
  attributes { x }
  stage s { guard on go task t { set self.x := "a" } }
}
artifact B {
  attributes { y }
  stage s { guard on go task t { set self.y := "b" } }
}
"#,
            "duplicate task",
        );

        // Delete targets must end in an id-ref attribute.
        reject(
            r#"
model demo
event go { }
artifact A {
  attributes { x }
  stage s { guard on go task t { delete x } }
}
"#,
            "not an id-ref",
        );

        // Assignments all read the return-time state.
        reject(
            r#"
model demo
event go { }
artifact A {
  attributes { x, y }
  stage s {
    guard on go
    task t {
      returns r
      set self.x := ret.r
      set self.y := self.x
    }
  }
}
"#,
            "read after",
        );
    }
}
