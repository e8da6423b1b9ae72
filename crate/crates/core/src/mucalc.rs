//! Temporal property checking over abstract transition systems.
//!
//! Properties are written in a mu-calculus with next-step modalities and
//! first-order quantification over the data values of the current state.
//! Quantification is persistence-guarded: a bound value only keeps its
//! meaning while it stays in the live part of the state, so every modality
//! in the scope of a quantifier must sit behind a `live` guard for the
//! variables it can see. Crossing an edge rereads each binding through the
//! edge's transport; a value the transport dropped is dead, stays dead, and
//! satisfies no atom except `destroyed`. A recycled container slot reuses
//! its id, but the guard discipline keeps the slot's next occupant
//! unobservable to bindings from its previous life: the guard fails in the
//! gap state, and `live(x) & ...` collapses to false there (dually
//! `live(x) -> ...` to true), so no formula path survives the gap.
//!
//! [`check`] evaluates bottom-up over configurations (a state paired with an
//! environment for the data variables in scope), iterating fixpoints to
//! stabilization. [`check_brute`] recomputes the textbook semantics by
//! direct recursion with no sharing; it is the oracle the fast checker is
//! tested against and only accepts tiny systems.

use crate::statespace::{Edge, EventLabel, TransitionSystem};
use crate::value::Value;
use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use thiserror::Error;

#[derive(Error, Debug)]
pub enum MuError {
    #[error("line {line}, column {col}: {msg}")]
    Syntax { line: usize, col: usize, msg: String },
    #[error("fixpoint variable `{0}` is not bound by an enclosing mu/nu")]
    UnboundFixpoint(String),
    #[error("data variable `{0}` is not bound by an enclosing exists/forall")]
    UnboundData(String),
    #[error("`{0}` is bound twice along one path; rename the inner binder")]
    DuplicateBinder(String),
    #[error("fixpoint variable `{0}` occurs under a negation")]
    NegativeFixpoint(String),
    #[error(
        "modality in the scope of `{var}` lacks a live({var}) guard: a \
         quantified value only keeps its meaning while it persists in the \
         state, so every dia/box under the quantifier must be conjoined \
         with live({var}), or sit in the consequent of live({var}) -> ..."
    )]
    UnguardedQuantifier { var: String },
    #[error(
        "the transition system is truncated, so verdicts would only cover \
         the explored prefix; use check_prefix to accept that explicitly"
    )]
    Truncated,
    #[error("brute-force checking is limited to {limit} states, got {got}")]
    TooLarge { limit: usize, got: usize },
    #[error("`{0}` names neither an artifact type nor an attribute here")]
    UnknownName(String),
    #[error("`{0}` names both an artifact type and an attribute; rename one in the model")]
    AmbiguousName(String),
    #[error("`{0}` is not a stage of any artifact type here")]
    UnknownStage(String),
    #[error("`{0}` is not a milestone of any artifact type here")]
    UnknownMilestone(String),
}

// ==== formulas =============================================================

/// Property syntax tree. The ASCII forms recognized by [`parse_property`]
/// are noted on each variant; `x` stands for a data variable bound by
/// exists/forall and `Z` for a fixpoint variable bound by mu/nu.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum MuFormula {
    True,
    False,
    /// `name(x)`. The name resolves against the system's shapes: an
    /// artifact type tests whether x is the id of one of its live
    /// instances, an attribute name tests whether x occurs in that column
    /// of a live row.
    Apply(String, String),
    /// `open(stage)` / `open(stage, x)`: some live instance, or the one x
    /// names, holds the stage open.
    Open(String, Option<String>),
    /// `achieved(milestone)` / `achieved(milestone, x)`.
    Achieved(String, Option<String>),
    /// `live(x)`: the bound value occurs in the live part of the state.
    Live(String),
    /// `destroyed(x)`: x no longer names a live instance. Dead bindings
    /// satisfy it; so do values that never were instance ids.
    Destroyed(String),
    /// `allclosed(x)`: x names a live instance, all of whose stages are
    /// closed.
    AllClosed(String),
    Not(Box<MuFormula>),
    And(Box<MuFormula>, Box<MuFormula>),
    Or(Box<MuFormula>, Box<MuFormula>),
    /// `a -> b`, material implication.
    Implies(Box<MuFormula>, Box<MuFormula>),
    /// `dia f`: f holds after some next step.
    Dia(Box<MuFormula>),
    /// `box f`: f holds after every next step.
    BoxM(Box<MuFormula>),
    /// `mu Z. f`, least fixpoint.
    Mu(String, Box<MuFormula>),
    /// `nu Z. f`, greatest fixpoint.
    Nu(String, Box<MuFormula>),
    FixVar(String),
    /// `exists x. f`, x ranging over the current state's live values.
    Exists(String, Box<MuFormula>),
    /// `forall x. f`.
    Forall(String, Box<MuFormula>),
}

const KEYWORDS: &[&str] = &[
    "mu", "nu", "dia", "box", "exists", "forall", "live", "destroyed", "allclosed", "open",
    "achieved", "true", "false",
];

impl MuFormula {
    fn prec(&self) -> u8 {
        match self {
            MuFormula::Implies(..)
            | MuFormula::Mu(..)
            | MuFormula::Nu(..)
            | MuFormula::Exists(..)
            | MuFormula::Forall(..) => 1,
            MuFormula::Or(..) => 2,
            MuFormula::And(..) => 3,
            MuFormula::Not(..) | MuFormula::Dia(..) | MuFormula::BoxM(..) => 4,
            _ => 5,
        }
    }

    fn fmt_prec(&self, f: &mut fmt::Formatter<'_>, min: u8) -> fmt::Result {
        let wrap = self.prec() < min;
        if wrap {
            write!(f, "(")?;
        }
        match self {
            MuFormula::True => write!(f, "true")?,
            MuFormula::False => write!(f, "false")?,
            MuFormula::Apply(n, x) => write!(f, "{n}({x})")?,
            MuFormula::Open(n, v) | MuFormula::Achieved(n, v) => {
                let kw = if matches!(self, MuFormula::Open(..)) { "open" } else { "achieved" };
                let quoted = !is_plain_ident(n);
                match (quoted, v) {
                    (false, None) => write!(f, "{kw}({n})")?,
                    (true, None) => write!(f, "{kw}(\"{n}\")")?,
                    (false, Some(x)) => write!(f, "{kw}({n}, {x})")?,
                    (true, Some(x)) => write!(f, "{kw}(\"{n}\", {x})")?,
                }
            }
            MuFormula::Live(x) => write!(f, "live({x})")?,
            MuFormula::Destroyed(x) => write!(f, "destroyed({x})")?,
            MuFormula::AllClosed(x) => write!(f, "allclosed({x})")?,
            MuFormula::Not(a) => {
                write!(f, "!")?;
                a.fmt_prec(f, 4)?;
            }
            MuFormula::And(a, b) => {
                a.fmt_prec(f, 3)?;
                write!(f, " & ")?;
                b.fmt_prec(f, 4)?;
            }
            MuFormula::Or(a, b) => {
                a.fmt_prec(f, 2)?;
                write!(f, " | ")?;
                b.fmt_prec(f, 3)?;
            }
            MuFormula::Implies(a, b) => {
                a.fmt_prec(f, 2)?;
                write!(f, " -> ")?;
                b.fmt_prec(f, 1)?;
            }
            MuFormula::Dia(a) => {
                write!(f, "dia ")?;
                a.fmt_prec(f, 4)?;
            }
            MuFormula::BoxM(a) => {
                write!(f, "box ")?;
                a.fmt_prec(f, 4)?;
            }
            MuFormula::Mu(z, a) => {
                write!(f, "mu {z}. ")?;
                a.fmt_prec(f, 1)?;
            }
            MuFormula::Nu(z, a) => {
                write!(f, "nu {z}. ")?;
                a.fmt_prec(f, 1)?;
            }
            MuFormula::FixVar(z) => write!(f, "{z}")?,
            MuFormula::Exists(x, a) => {
                write!(f, "exists {x}. ")?;
                a.fmt_prec(f, 1)?;
            }
            MuFormula::Forall(x, a) => {
                write!(f, "forall {x}. ")?;
                a.fmt_prec(f, 1)?;
            }
        }
        if wrap {
            write!(f, ")")?;
        }
        Ok(())
    }
}

fn is_plain_ident(s: &str) -> bool {
    let mut chars = s.chars();
    chars.next().is_some_and(|c| c.is_ascii_alphabetic() || c == '_')
        && s.chars().all(|c| c.is_ascii_alphanumeric() || c == '_')
        && !KEYWORDS.contains(&s)
}

impl fmt::Display for MuFormula {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.fmt_prec(f, 0)
    }
}

// ==== parsing ==============================================================

#[derive(Clone, Debug, PartialEq)]
enum Tok {
    Ident(String),
    Quoted(String),
    LParen,
    RParen,
    Comma,
    Dot,
    Bang,
    Amp,
    Pipe,
    Arrow,
}

impl fmt::Display for Tok {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tok::Ident(s) => write!(f, "`{s}`"),
            Tok::Quoted(s) => write!(f, "\"{s}\""),
            Tok::LParen => write!(f, "`(`"),
            Tok::RParen => write!(f, "`)`"),
            Tok::Comma => write!(f, "`,`"),
            Tok::Dot => write!(f, "`.`"),
            Tok::Bang => write!(f, "`!`"),
            Tok::Amp => write!(f, "`&`"),
            Tok::Pipe => write!(f, "`|`"),
            Tok::Arrow => write!(f, "`->`"),
        }
    }
}

fn lex(src: &str) -> Result<Vec<(usize, Tok)>, MuError> {
    let syntax = |col: usize, msg: String| MuError::Syntax { line: 1, col, msg };
    let mut out = Vec::new();
    let chars: Vec<char> = src.chars().collect();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        let col = i + 1;
        match c {
            ' ' | '\t' | '\r' | '\n' => i += 1,
            '(' => {
                out.push((col, Tok::LParen));
                i += 1;
            }
            ')' => {
                out.push((col, Tok::RParen));
                i += 1;
            }
            ',' => {
                out.push((col, Tok::Comma));
                i += 1;
            }
            '.' => {
                out.push((col, Tok::Dot));
                i += 1;
            }
            '!' => {
                out.push((col, Tok::Bang));
                i += 1;
            }
            '&' => {
                out.push((col, Tok::Amp));
                i += 1;
            }
            '|' => {
                out.push((col, Tok::Pipe));
                i += 1;
            }
            '-' => {
                if chars.get(i + 1) == Some(&'>') {
                    out.push((col, Tok::Arrow));
                    i += 2;
                } else {
                    return Err(syntax(col, "expected `->`".to_string()));
                }
            }
            '"' => {
                let start = i + 1;
                let mut j = start;
                while j < chars.len() && chars[j] != '"' {
                    j += 1;
                }
                if j == chars.len() {
                    return Err(syntax(col, "unterminated string".to_string()));
                }
                out.push((col, Tok::Quoted(chars[start..j].iter().collect())));
                i = j + 1;
            }
            c if c.is_ascii_alphabetic() || c == '_' => {
                let start = i;
                while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                    i += 1;
                }
                out.push((col, Tok::Ident(chars[start..i].iter().collect())));
            }
            other => return Err(syntax(col, format!("unexpected character `{other}`"))),
        }
    }
    Ok(out)
}

struct Parser {
    toks: Vec<(usize, Tok)>,
    pos: usize,
}

impl Parser {
    fn syntax(&self, msg: String) -> MuError {
        let col = self.toks.get(self.pos).map(|(c, _)| *c).unwrap_or_else(|| {
            self.toks.last().map(|(c, _)| c + 1).unwrap_or(1)
        });
        MuError::Syntax { line: 1, col, msg }
    }

    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|(_, t)| t)
    }

    fn eat(&mut self, t: &Tok) -> bool {
        if self.peek() == Some(t) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect(&mut self, t: Tok) -> Result<(), MuError> {
        if self.eat(&t) {
            Ok(())
        } else {
            Err(self.syntax(match self.peek() {
                Some(got) => format!("expected {t}, found {got}"),
                None => format!("expected {t} at end of input"),
            }))
        }
    }

    fn ident(&mut self, what: &str) -> Result<String, MuError> {
        match self.peek().cloned() {
            Some(Tok::Ident(s)) => {
                self.pos += 1;
                Ok(s)
            }
            other => Err(self.syntax(match other {
                Some(got) => format!("expected {what}, found {got}"),
                None => format!("expected {what} at end of input"),
            })),
        }
    }

    fn binder_name(&mut self, what: &str) -> Result<String, MuError> {
        let name = self.ident(what)?;
        if KEYWORDS.contains(&name.as_str()) {
            self.pos -= 1;
            return Err(self.syntax(format!("`{name}` is a reserved word")));
        }
        Ok(name)
    }

    /// `open`/`achieved` take a stage or milestone name, quoted when it is
    /// not a plain identifier.
    fn name(&mut self) -> Result<String, MuError> {
        match self.peek().cloned() {
            Some(Tok::Ident(s)) => {
                self.pos += 1;
                Ok(s)
            }
            Some(Tok::Quoted(s)) => {
                self.pos += 1;
                Ok(s)
            }
            other => Err(self.syntax(match other {
                Some(got) => format!("expected a name, found {got}"),
                None => "expected a name at end of input".to_string(),
            })),
        }
    }

    // Precedence, loosest first: `->` (right associative), `|`, `&`,
    // prefix operators. A binder body extends as far right as possible.
    fn formula(&mut self) -> Result<MuFormula, MuError> {
        let lhs = self.disjunction()?;
        if self.eat(&Tok::Arrow) {
            let rhs = self.formula()?;
            Ok(MuFormula::Implies(Box::new(lhs), Box::new(rhs)))
        } else {
            Ok(lhs)
        }
    }

    fn disjunction(&mut self) -> Result<MuFormula, MuError> {
        let mut f = self.conjunction()?;
        while self.eat(&Tok::Pipe) {
            let rhs = self.conjunction()?;
            f = MuFormula::Or(Box::new(f), Box::new(rhs));
        }
        Ok(f)
    }

    fn conjunction(&mut self) -> Result<MuFormula, MuError> {
        let mut f = self.prefix()?;
        while self.eat(&Tok::Amp) {
            let rhs = self.prefix()?;
            f = MuFormula::And(Box::new(f), Box::new(rhs));
        }
        Ok(f)
    }

    fn prefix(&mut self) -> Result<MuFormula, MuError> {
        if self.eat(&Tok::Bang) {
            return Ok(MuFormula::Not(Box::new(self.prefix()?)));
        }
        let kw = match self.peek() {
            Some(Tok::Ident(s)) => Some(s.clone()),
            _ => None,
        };
        match kw.as_deref() {
            Some("dia") => {
                self.pos += 1;
                Ok(MuFormula::Dia(Box::new(self.prefix()?)))
            }
            Some("box") => {
                self.pos += 1;
                Ok(MuFormula::BoxM(Box::new(self.prefix()?)))
            }
            Some(b @ ("mu" | "nu" | "exists" | "forall")) => {
                let b = b.to_string();
                self.pos += 1;
                let var = self.binder_name("a variable")?;
                self.expect(Tok::Dot)?;
                let body = Box::new(self.formula()?);
                Ok(match b.as_str() {
                    "mu" => MuFormula::Mu(var, body),
                    "nu" => MuFormula::Nu(var, body),
                    "exists" => MuFormula::Exists(var, body),
                    _ => MuFormula::Forall(var, body),
                })
            }
            _ => self.primary(),
        }
    }

    fn primary(&mut self) -> Result<MuFormula, MuError> {
        if self.eat(&Tok::LParen) {
            let f = self.formula()?;
            self.expect(Tok::RParen)?;
            return Ok(f);
        }
        let head = self.ident("a formula")?;
        match head.as_str() {
            "true" => Ok(MuFormula::True),
            "false" => Ok(MuFormula::False),
            "live" | "destroyed" | "allclosed" => {
                self.expect(Tok::LParen)?;
                let x = self.ident("a data variable")?;
                self.expect(Tok::RParen)?;
                Ok(match head.as_str() {
                    "live" => MuFormula::Live(x),
                    "destroyed" => MuFormula::Destroyed(x),
                    _ => MuFormula::AllClosed(x),
                })
            }
            "open" | "achieved" => {
                self.expect(Tok::LParen)?;
                let name = self.name()?;
                let var = if self.eat(&Tok::Comma) {
                    Some(self.ident("a data variable")?)
                } else {
                    None
                };
                self.expect(Tok::RParen)?;
                Ok(if head == "open" {
                    MuFormula::Open(name, var)
                } else {
                    MuFormula::Achieved(name, var)
                })
            }
            _ if KEYWORDS.contains(&head.as_str()) => {
                self.pos -= 1;
                Err(self.syntax(format!("`{head}` cannot start a formula here")))
            }
            _ => {
                if self.eat(&Tok::LParen) {
                    let x = self.ident("a data variable")?;
                    self.expect(Tok::RParen)?;
                    Ok(MuFormula::Apply(head, x))
                } else {
                    Ok(MuFormula::FixVar(head))
                }
            }
        }
    }
}

/// Parse and validate one property. Validation enforces the binding
/// discipline: every variable bound exactly once on its path, fixpoint
/// variables positive in their binders, and every modality under a
/// quantifier guarded by `live` of all data variables in scope.
pub fn parse_property(text: &str) -> Result<MuFormula, MuError> {
    let mut p = Parser { toks: lex(text)?, pos: 0 };
    let f = p.formula()?;
    if p.pos < p.toks.len() {
        return Err(p.syntax("trailing input after the formula".to_string()));
    }
    validate(&f)?;
    Ok(f)
}

/// Parse a property file: one formula per line, `#` comments and blank
/// lines skipped. Returns (1-based line, trimmed text, formula) triples.
pub fn parse_property_file(src: &str) -> Result<Vec<(usize, String, MuFormula)>, MuError> {
    let mut out = Vec::new();
    for (idx, raw) in src.lines().enumerate() {
        let text = raw.trim();
        if text.is_empty() || text.starts_with('#') {
            continue;
        }
        let f = parse_property(text).map_err(|e| match e {
            MuError::Syntax { col, msg, .. } => MuError::Syntax { line: idx + 1, col, msg },
            other => MuError::Syntax {
                line: idx + 1,
                col: 1,
                msg: other.to_string(),
            },
        })?;
        out.push((idx + 1, text.to_string(), f));
    }
    Ok(out)
}

// ==== static checks ========================================================

/// `live(x)` conjuncts granted by a guard position: the top-level
/// conjunction structure of the formula.
fn lives(f: &MuFormula) -> BTreeSet<&str> {
    match f {
        MuFormula::Live(x) => [x.as_str()].into(),
        MuFormula::And(a, b) => {
            let mut s = lives(a);
            s.extend(lives(b));
            s
        }
        _ => BTreeSet::new(),
    }
}

struct Scopes<'a> {
    /// Fixpoint variable -> polarity flag at its binder.
    fix: BTreeMap<&'a str, bool>,
    data: BTreeSet<&'a str>,
    all: BTreeSet<&'a str>,
}

fn validate(f: &MuFormula) -> Result<(), MuError> {
    let mut scopes = Scopes { fix: BTreeMap::new(), data: BTreeSet::new(), all: BTreeSet::new() };
    walk(f, &mut scopes, false, &BTreeSet::new())
}

fn walk<'a>(
    f: &'a MuFormula,
    scopes: &mut Scopes<'a>,
    neg: bool,
    granted: &BTreeSet<&'a str>,
) -> Result<(), MuError> {
    let data_var = |scopes: &Scopes, x: &str| -> Result<(), MuError> {
        if scopes.data.contains(x) {
            Ok(())
        } else {
            Err(MuError::UnboundData(x.to_string()))
        }
    };
    match f {
        MuFormula::True | MuFormula::False => Ok(()),
        MuFormula::Apply(_, x)
        | MuFormula::Live(x)
        | MuFormula::Destroyed(x)
        | MuFormula::AllClosed(x) => data_var(scopes, x),
        MuFormula::Open(_, v) | MuFormula::Achieved(_, v) => match v {
            Some(x) => data_var(scopes, x),
            None => Ok(()),
        },
        MuFormula::Not(a) => walk(a, scopes, !neg, &BTreeSet::new()),
        MuFormula::And(a, b) => {
            // Each conjunct may vouch liveness for the other, but only in
            // positive positions, where a conjunction really is one.
            let (ga, gb) = if neg {
                (granted.clone(), granted.clone())
            } else {
                let mut ga = granted.clone();
                ga.extend(lives(b));
                let mut gb = granted.clone();
                gb.extend(lives(a));
                (ga, gb)
            };
            walk(a, scopes, neg, &ga)?;
            walk(b, scopes, neg, &gb)
        }
        MuFormula::Or(a, b) => {
            walk(a, scopes, neg, granted)?;
            walk(b, scopes, neg, granted)
        }
        MuFormula::Implies(a, b) => {
            walk(a, scopes, !neg, &BTreeSet::new())?;
            let mut gb = granted.clone();
            if !neg {
                gb.extend(lives(a));
            }
            walk(b, scopes, neg, &gb)
        }
        MuFormula::Dia(a) | MuFormula::BoxM(a) => {
            if let Some(missing) = scopes.data.iter().find(|x| !granted.contains(*x)) {
                return Err(MuError::UnguardedQuantifier { var: missing.to_string() });
            }
            // Liveness certified here says nothing about the next state.
            walk(a, scopes, neg, &BTreeSet::new())
        }
        MuFormula::Mu(z, a) | MuFormula::Nu(z, a) => {
            if !scopes.all.insert(z) {
                return Err(MuError::DuplicateBinder(z.clone()));
            }
            scopes.fix.insert(z, neg);
            // The body re-enters at arbitrary states through the variable,
            // so guards from outside the binder do not carry in.
            let r = walk(a, scopes, neg, &BTreeSet::new());
            scopes.fix.remove(z.as_str());
            scopes.all.remove(z.as_str());
            r
        }
        MuFormula::FixVar(z) => match scopes.fix.get(z.as_str()) {
            None => Err(MuError::UnboundFixpoint(z.clone())),
            Some(&at_binder) if at_binder != neg => Err(MuError::NegativeFixpoint(z.clone())),
            Some(_) => Ok(()),
        },
        MuFormula::Exists(x, a) | MuFormula::Forall(x, a) => {
            if !scopes.all.insert(x) {
                return Err(MuError::DuplicateBinder(x.clone()));
            }
            scopes.data.insert(x);
            let r = walk(a, scopes, neg, granted);
            scopes.data.remove(x.as_str());
            scopes.all.remove(x.as_str());
            r
        }
    }
}

// ==== evaluation ===========================================================

/// What a data variable holds: a value, or the tombstone left when an edge
/// transport dropped it. Dead bindings never resurrect.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
enum Bind {
    Dead,
    Val(Value),
}

type Env = BTreeMap<String, Bind>;
type Conf = (usize, Env);

/// How `name(x)` atoms read against the system's shapes.
#[derive(Clone, Copy)]
enum AppKind {
    Type,
    Attr,
}

/// Decoded, reusable view of a transition system: live rows split out per
/// state, column positions resolved per shape, and the value universe that
/// environments range over.
struct View<'a> {
    ts: &'a TransitionSystem,
    live: Vec<BTreeSet<Value>>,
    /// Per state: (type, id, full row) of every non-blank fact row.
    rows: Vec<Vec<(&'a str, &'a Value, &'a [Value])>>,
    edges_from: Vec<Vec<&'a Edge>>,
    stage_cols: BTreeMap<&'a str, Vec<(&'a str, usize)>>,
    milestone_cols: BTreeMap<&'a str, Vec<(&'a str, usize)>>,
    attr_cols: BTreeMap<&'a str, Vec<(&'a str, usize)>>,
    /// First stage column and stage count per type, for allclosed.
    stage_span: BTreeMap<&'a str, (usize, usize)>,
    applies: BTreeMap<&'a str, AppKind>,
    universe: Vec<Bind>,
}

impl<'a> View<'a> {
    fn new(ts: &'a TransitionSystem, f: &'a MuFormula) -> Result<View<'a>, MuError> {
        let mut stage_cols: BTreeMap<&str, Vec<(&str, usize)>> = BTreeMap::new();
        let mut milestone_cols: BTreeMap<&str, Vec<(&str, usize)>> = BTreeMap::new();
        let mut attr_cols: BTreeMap<&str, Vec<(&str, usize)>> = BTreeMap::new();
        let mut stage_span = BTreeMap::new();
        for (ty, shape) in &ts.shapes {
            let base = 1 + shape.attrs.len();
            stage_span.insert(ty.as_str(), (base, shape.stages.len()));
            for (i, a) in shape.attrs.iter().enumerate() {
                attr_cols.entry(a.as_str()).or_default().push((ty.as_str(), 1 + i));
            }
            for (i, s) in shape.stages.iter().enumerate() {
                stage_cols.entry(s.as_str()).or_default().push((ty.as_str(), base + i));
            }
            for (i, m) in shape.milestones.iter().enumerate() {
                milestone_cols
                    .entry(m.as_str())
                    .or_default()
                    .push((ty.as_str(), base + shape.stages.len() + i));
            }
        }

        let mut applies = BTreeMap::new();
        resolve_names(f, ts, &stage_cols, &milestone_cols, &attr_cols, &mut applies)?;

        let mut live = Vec::new();
        let mut rows = Vec::new();
        let mut edges_from: Vec<Vec<&Edge>> = vec![Vec::new(); ts.states.len()];
        for s in &ts.states {
            live.push(s.content.live_values());
            rows.push(
                s.content
                    .facts
                    .iter()
                    .filter(|(_, row)| !crate::statespace::row_is_blank(row))
                    .map(|(ty, row)| (ty.as_str(), &row[0], row.as_slice()))
                    .collect(),
            );
        }
        for e in &ts.edges {
            edges_from[e.from].push(e);
        }

        let mut universe = vec![Bind::Dead];
        universe.extend(live.iter().flatten().cloned().map(Bind::Val).collect::<BTreeSet<_>>());
        Ok(View {
            ts,
            live,
            rows,
            edges_from,
            stage_cols,
            milestone_cols,
            attr_cols,
            stage_span,
            applies,
            universe,
        })
    }

    fn atom(&self, f: &MuFormula, s: usize, env: &Env) -> bool {
        let val = |x: &str| match &env[x] {
            Bind::Dead => None,
            Bind::Val(v) => Some(v),
        };
        match f {
            MuFormula::Live(x) => val(x).is_some_and(|v| self.live[s].contains(v)),
            MuFormula::Destroyed(x) => match val(x) {
                None => true,
                Some(v) => !self.rows[s].iter().any(|(_, id, _)| *id == v),
            },
            MuFormula::AllClosed(x) => val(x).is_some_and(|v| {
                self.rows[s].iter().any(|(ty, id, row)| {
                    *id == v && {
                        let (base, n) = self.stage_span[ty];
                        row[base..base + n].iter().all(|c| *c == Value::Bool(false))
                    }
                })
            }),
            MuFormula::Open(name, var) => self.flag(&self.stage_cols, name, var, s, env),
            MuFormula::Achieved(name, var) => self.flag(&self.milestone_cols, name, var, s, env),
            MuFormula::Apply(name, x) => match (self.applies[name.as_str()], val(x)) {
                (_, None) => false,
                (AppKind::Type, Some(v)) => {
                    self.rows[s].iter().any(|(ty, id, _)| *ty == name && *id == v)
                }
                (AppKind::Attr, Some(v)) => self.attr_cols[name.as_str()].iter().any(|(ty, col)| {
                    self.rows[s].iter().any(|(rty, _, row)| rty == ty && &row[*col] == v)
                }),
            },
            other => unreachable!("not an atom: {other}"),
        }
    }

    fn flag(
        &self,
        cols: &BTreeMap<&str, Vec<(&str, usize)>>,
        name: &str,
        var: &Option<String>,
        s: usize,
        env: &Env,
    ) -> bool {
        let want = match var {
            None => None,
            Some(x) => match &env[x] {
                Bind::Dead => return false,
                Bind::Val(v) => Some(v),
            },
        };
        cols[name].iter().any(|(ty, col)| {
            self.rows[s].iter().any(|(rty, id, row)| {
                rty == ty && row[*col] == Value::Bool(true) && want.is_none_or(|v| *id == v)
            })
        })
    }

    /// Reread an environment on the far side of an edge. Values the
    /// transport does not carry are dead from here on.
    fn step_env(&self, env: &Env, e: &Edge) -> Env {
        env.iter()
            .map(|(x, b)| {
                let nb = match b {
                    Bind::Dead => Bind::Dead,
                    Bind::Val(v) => match e.transport.map.get(v) {
                        Some(w) => Bind::Val(w.clone()),
                        None => Bind::Dead,
                    },
                };
                (x.clone(), nb)
            })
            .collect()
    }

    /// Every configuration over the given scope: all states crossed with
    /// all assignments of universe values (or the tombstone) to the scope
    /// variables.
    fn all_confs(&self, scope: &[String]) -> BTreeSet<Conf> {
        let mut envs = vec![Env::new()];
        for x in scope {
            envs = envs
                .into_iter()
                .flat_map(|e| {
                    self.universe.iter().map(move |b| {
                        let mut e2 = e.clone();
                        e2.insert(x.clone(), b.clone());
                        e2
                    })
                })
                .collect();
        }
        (0..self.ts.states.len())
            .flat_map(|s| envs.iter().map(move |e| (s, e.clone())))
            .collect()
    }
}

fn resolve_names<'a>(
    f: &'a MuFormula,
    ts: &TransitionSystem,
    stage_cols: &BTreeMap<&str, Vec<(&str, usize)>>,
    milestone_cols: &BTreeMap<&str, Vec<(&str, usize)>>,
    attr_cols: &BTreeMap<&str, Vec<(&str, usize)>>,
    applies: &mut BTreeMap<&'a str, AppKind>,
) -> Result<(), MuError> {
    match f {
        MuFormula::Open(name, _) if !stage_cols.contains_key(name.as_str()) => {
            Err(MuError::UnknownStage(name.clone()))
        }
        MuFormula::Achieved(name, _) if !milestone_cols.contains_key(name.as_str()) => {
            Err(MuError::UnknownMilestone(name.clone()))
        }
        MuFormula::Apply(name, _) => {
            let is_ty = ts.shapes.contains_key(name);
            let is_attr = attr_cols.contains_key(name.as_str());
            let kind = match (is_ty, is_attr) {
                (true, true) => return Err(MuError::AmbiguousName(name.clone())),
                (true, false) => AppKind::Type,
                (false, true) => AppKind::Attr,
                (false, false) => return Err(MuError::UnknownName(name.clone())),
            };
            applies.insert(name.as_str(), kind);
            Ok(())
        }
        MuFormula::Not(a) | MuFormula::Dia(a) | MuFormula::BoxM(a) => {
            resolve_names(a, ts, stage_cols, milestone_cols, attr_cols, applies)
        }
        MuFormula::Mu(_, a)
        | MuFormula::Nu(_, a)
        | MuFormula::Exists(_, a)
        | MuFormula::Forall(_, a) => {
            resolve_names(a, ts, stage_cols, milestone_cols, attr_cols, applies)
        }
        MuFormula::And(a, b) | MuFormula::Or(a, b) | MuFormula::Implies(a, b) => {
            resolve_names(a, ts, stage_cols, milestone_cols, attr_cols, applies)?;
            resolve_names(b, ts, stage_cols, milestone_cols, attr_cols, applies)
        }
        _ => Ok(()),
    }
}

/// Fixpoint approximations in flight: variable -> (current set, the scope
/// its binder closed over). Deeper occurrences may sit under additional
/// quantifiers; they project their environment down to the binder's scope.
type FixCtx = BTreeMap<String, (BTreeSet<Conf>, Vec<String>)>;

fn project(env: &Env, scope: &[String]) -> Env {
    scope.iter().map(|x| (x.clone(), env[x].clone())).collect()
}

fn denote(view: &View, f: &MuFormula, scope: &Vec<String>, fix: &mut FixCtx) -> BTreeSet<Conf> {
    match f {
        MuFormula::True => view.all_confs(scope),
        MuFormula::False => BTreeSet::new(),
        MuFormula::Live(_)
        | MuFormula::Destroyed(_)
        | MuFormula::AllClosed(_)
        | MuFormula::Open(..)
        | MuFormula::Achieved(..)
        | MuFormula::Apply(..) => view
            .all_confs(scope)
            .into_iter()
            .filter(|(s, e)| view.atom(f, *s, e))
            .collect(),
        MuFormula::Not(a) => {
            let d = denote(view, a, scope, fix);
            view.all_confs(scope).into_iter().filter(|c| !d.contains(c)).collect()
        }
        MuFormula::And(a, b) => {
            let da = denote(view, a, scope, fix);
            let db = denote(view, b, scope, fix);
            da.intersection(&db).cloned().collect()
        }
        MuFormula::Or(a, b) => {
            let mut da = denote(view, a, scope, fix);
            da.extend(denote(view, b, scope, fix));
            da
        }
        MuFormula::Implies(a, b) => {
            let da = denote(view, a, scope, fix);
            let db = denote(view, b, scope, fix);
            view.all_confs(scope)
                .into_iter()
                .filter(|c| !da.contains(c) || db.contains(c))
                .collect()
        }
        MuFormula::Dia(a) => {
            let d = denote(view, a, scope, fix);
            view.all_confs(scope)
                .into_iter()
                .filter(|(s, e)| {
                    view.edges_from[*s].iter().any(|edge| d.contains(&(edge.to, view.step_env(e, edge))))
                })
                .collect()
        }
        MuFormula::BoxM(a) => {
            let d = denote(view, a, scope, fix);
            view.all_confs(scope)
                .into_iter()
                .filter(|(s, e)| {
                    view.edges_from[*s].iter().all(|edge| d.contains(&(edge.to, view.step_env(e, edge))))
                })
                .collect()
        }
        MuFormula::Mu(z, a) | MuFormula::Nu(z, a) => {
            let start = if matches!(f, MuFormula::Mu(..)) {
                BTreeSet::new()
            } else {
                view.all_confs(scope)
            };
            let height = view.all_confs(scope).len();
            fix.insert(z.clone(), (start, scope.clone()));
            let mut iterations = 0usize;
            loop {
                iterations += 1;
                assert!(
                    iterations <= height + 1,
                    "fixpoint `{z}` failed to stabilize within the lattice height"
                );
                let next = denote(view, a, scope, fix);
                let slot = &mut fix.get_mut(z).expect("binder in scope").0;
                if *slot == next {
                    break;
                }
                *slot = next;
            }
            fix.remove(z).expect("binder in scope").0
        }
        MuFormula::FixVar(z) => {
            let (set, bscope) = &fix[z];
            if bscope == scope {
                set.clone()
            } else {
                view.all_confs(scope)
                    .into_iter()
                    .filter(|(s, e)| set.contains(&(*s, project(e, bscope))))
                    .collect()
            }
        }
        MuFormula::Exists(x, a) | MuFormula::Forall(x, a) => {
            let mut sub = scope.clone();
            sub.push(x.clone());
            let d = denote(view, a, &sub, fix);
            let must_all = matches!(f, MuFormula::Forall(..));
            view.all_confs(scope)
                .into_iter()
                .filter(|(s, e)| {
                    let mut picks = view.live[*s].iter().map(|v| {
                        let mut e2 = e.clone();
                        e2.insert(x.clone(), Bind::Val(v.clone()));
                        d.contains(&(*s, e2))
                    });
                    if must_all {
                        picks.all(|b| b)
                    } else {
                        picks.any(|b| b)
                    }
                })
                .collect()
        }
    }
}

// ==== results ==============================================================

/// A path through the system, from the initial state: the reachability
/// witness of a true least-fixpoint property or the violation trace of a
/// failed greatest-fixpoint one.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PathWitness {
    /// Visited state indices; the first is the initial state.
    pub states: Vec<usize>,
    /// Labels between consecutive states; one shorter than `states`.
    pub labels: Vec<EventLabel>,
}

impl fmt::Display for PathWitness {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "state {}", self.states[0])?;
        for (l, s) in self.labels.iter().zip(&self.states[1..]) {
            write!(f, " --{l}--> state {s}")?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CheckResult {
    /// States satisfying the formula (closed formulas only, so no
    /// environment is involved at the top).
    pub sat: BTreeSet<usize>,
    /// Whether the initial state satisfies it.
    pub verdict: bool,
    /// Extracted for single-fixpoint reachability shapes that hold and
    /// safety shapes that fail; `None` for other formulas or verdicts.
    pub witness: Option<PathWitness>,
}

/// Model-check a complete system. Errors out when the exploration was
/// truncated, because fixpoints over a cut-off frontier say nothing about
/// the full system; [`check_prefix`] accepts the cut explicitly.
pub fn check(ts: &TransitionSystem, f: &MuFormula) -> Result<CheckResult, MuError> {
    if ts.truncated {
        return Err(MuError::Truncated);
    }
    check_prefix(ts, f)
}

/// [`check`] without the completeness guard: verdicts describe the explored
/// prefix as if its frontier states had no successors.
pub fn check_prefix(ts: &TransitionSystem, f: &MuFormula) -> Result<CheckResult, MuError> {
    validate(f)?;
    let view = View::new(ts, f)?;
    let mut fix = FixCtx::new();
    let d = denote(&view, f, &Vec::new(), &mut fix);
    let sat: BTreeSet<usize> = d.into_iter().map(|(s, _)| s).collect();
    let verdict = sat.contains(&0);
    let witness = extract_witness(&view, f, &sat, verdict);
    Ok(CheckResult { sat, verdict, witness })
}

/// Textbook semantics by direct recursion: every subformula is re-evaluated
/// at every configuration it is queried at, and fixpoints are iterated from
/// scratch per query. Exponentially wasteful and deliberately so; it is the
/// oracle [`check`] is validated against.
pub fn check_brute(ts: &TransitionSystem, f: &MuFormula) -> Result<CheckResult, MuError> {
    const LIMIT: usize = 12;
    if ts.states.len() > LIMIT {
        return Err(MuError::TooLarge { limit: LIMIT, got: ts.states.len() });
    }
    if ts.truncated {
        return Err(MuError::Truncated);
    }
    validate(f)?;
    let view = View::new(ts, f)?;
    let sat: BTreeSet<usize> = (0..ts.states.len())
        .filter(|&s| brute(&view, f, s, &Env::new(), &FixCtx::new()))
        .collect();
    let verdict = sat.contains(&0);
    Ok(CheckResult { sat, verdict, witness: None })
}

fn brute(view: &View, f: &MuFormula, s: usize, env: &Env, fix: &FixCtx) -> bool {
    match f {
        MuFormula::True => true,
        MuFormula::False => false,
        MuFormula::Live(_)
        | MuFormula::Destroyed(_)
        | MuFormula::AllClosed(_)
        | MuFormula::Open(..)
        | MuFormula::Achieved(..)
        | MuFormula::Apply(..) => view.atom(f, s, env),
        MuFormula::Not(a) => !brute(view, a, s, env, fix),
        MuFormula::And(a, b) => brute(view, a, s, env, fix) && brute(view, b, s, env, fix),
        MuFormula::Or(a, b) => brute(view, a, s, env, fix) || brute(view, b, s, env, fix),
        MuFormula::Implies(a, b) => !brute(view, a, s, env, fix) || brute(view, b, s, env, fix),
        MuFormula::Dia(a) => view.edges_from[s]
            .iter()
            .any(|e| brute(view, a, e.to, &view.step_env(env, e), fix)),
        MuFormula::BoxM(a) => view.edges_from[s]
            .iter()
            .all(|e| brute(view, a, e.to, &view.step_env(env, e), fix)),
        MuFormula::Mu(z, a) | MuFormula::Nu(z, a) => {
            let scope: Vec<String> = env.keys().cloned().collect();
            let confs = view.all_confs(&scope);
            let mut cur = if matches!(f, MuFormula::Mu(..)) {
                BTreeSet::new()
            } else {
                confs.clone()
            };
            let mut iterations = 0usize;
            loop {
                iterations += 1;
                assert!(
                    iterations <= confs.len() + 1,
                    "fixpoint `{z}` failed to stabilize within the lattice height"
                );
                let mut next_fix = fix.clone();
                next_fix.insert(z.clone(), (cur.clone(), scope.clone()));
                let next: BTreeSet<Conf> = confs
                    .iter()
                    .filter(|(s2, e2)| brute(view, a, *s2, e2, &next_fix))
                    .cloned()
                    .collect();
                if next == cur {
                    break;
                }
                cur = next;
            }
            cur.contains(&(s, env.clone()))
        }
        MuFormula::FixVar(z) => {
            let (set, bscope) = &fix[z];
            set.contains(&(s, project(env, bscope)))
        }
        MuFormula::Exists(x, a) | MuFormula::Forall(x, a) => {
            let mut picks = view.live[s].iter().map(|v| {
                let mut e2 = env.clone();
                e2.insert(x.clone(), Bind::Val(v.clone()));
                brute(view, a, s, &e2, fix)
            });
            if matches!(f, MuFormula::Forall(..)) {
                picks.all(|b| b)
            } else {
                picks.any(|b| b)
            }
        }
    }
}

// ==== witness extraction ===================================================

fn flatten_or(f: &MuFormula) -> Vec<&MuFormula> {
    match f {
        MuFormula::Or(a, b) => {
            let mut v = flatten_or(a);
            v.extend(flatten_or(b));
            v
        }
        other => vec![other],
    }
}

fn flatten_and(f: &MuFormula) -> Vec<&MuFormula> {
    match f {
        MuFormula::And(a, b) => {
            let mut v = flatten_and(a);
            v.extend(flatten_and(b));
            v
        }
        other => vec![other],
    }
}

fn mentions(f: &MuFormula, z: &str) -> bool {
    match f {
        MuFormula::FixVar(v) => v == z,
        MuFormula::Not(a)
        | MuFormula::Dia(a)
        | MuFormula::BoxM(a)
        | MuFormula::Mu(_, a)
        | MuFormula::Nu(_, a)
        | MuFormula::Exists(_, a)
        | MuFormula::Forall(_, a) => mentions(a, z),
        MuFormula::And(a, b) | MuFormula::Or(a, b) | MuFormula::Implies(a, b) => {
            mentions(a, z) || mentions(b, z)
        }
        _ => false,
    }
}

fn binder_count(f: &MuFormula) -> usize {
    match f {
        MuFormula::Mu(_, a) | MuFormula::Nu(_, a) => 1 + binder_count(a),
        MuFormula::Not(a)
        | MuFormula::Dia(a)
        | MuFormula::BoxM(a)
        | MuFormula::Exists(_, a)
        | MuFormula::Forall(_, a) => binder_count(a),
        MuFormula::And(a, b) | MuFormula::Or(a, b) | MuFormula::Implies(a, b) => {
            binder_count(a) + binder_count(b)
        }
        _ => 0,
    }
}

/// States satisfying a closed subformula, evaluated standalone.
fn closed_sat(view: &View, f: &MuFormula) -> BTreeSet<usize> {
    let mut fix = FixCtx::new();
    denote(view, f, &Vec::new(), &mut fix).into_iter().map(|(s, _)| s).collect()
}

/// Paths only come out of the two single-fixpoint shapes:
///
/// * reachability `mu Z. base | (chi & dia Z)`, witnessed when true by a
///   shortest path to a base state through chi states;
/// * safety `nu Z. inv & (esc | box Z)`, witnessed when false by a
///   shortest path to an inv-violating state through esc-violating ones.
///
/// Disjuncts/conjuncts may repeat and chi/esc may be absent; anything else
/// returns no path.
fn extract_witness(
    view: &View,
    f: &MuFormula,
    sat: &BTreeSet<usize>,
    verdict: bool,
) -> Option<PathWitness> {
    let all: BTreeSet<usize> = (0..view.ts.states.len()).collect();
    match f {
        MuFormula::Mu(z, body) if binder_count(body) == 0 && verdict => {
            let mut bases = Vec::new();
            let mut step_ok = BTreeSet::new();
            for d in flatten_or(body) {
                if !mentions(d, z) {
                    bases.push(d);
                    continue;
                }
                let conj = flatten_and(d);
                let (steps, chi): (Vec<_>, Vec<_>) = conj
                    .into_iter()
                    .partition(|c| matches!(c, MuFormula::Dia(inner) if **inner == MuFormula::FixVar(z.clone())));
                if steps.len() != 1 || chi.iter().any(|c| mentions(c, z)) {
                    return None;
                }
                let mut ok = all.clone();
                for c in chi {
                    ok = ok.intersection(&closed_sat(view, c)).cloned().collect();
                }
                step_ok.extend(ok);
            }
            let mut goal = BTreeSet::new();
            for b in bases {
                goal.extend(closed_sat(view, b));
            }
            bfs_path(view, &step_ok, &goal)
        }
        MuFormula::Nu(z, body) if binder_count(body) == 0 && !verdict => {
            let mut inv = all.clone();
            let mut step_ok = BTreeSet::new();
            for c in flatten_and(body) {
                if !mentions(c, z) {
                    inv = inv.intersection(&closed_sat(view, c)).cloned().collect();
                    continue;
                }
                let disj = flatten_or(c);
                let (steps, esc): (Vec<_>, Vec<_>) = disj
                    .into_iter()
                    .partition(|d| matches!(d, MuFormula::BoxM(inner) if **inner == MuFormula::FixVar(z.clone())));
                if steps.len() != 1 || esc.iter().any(|d| mentions(d, z)) {
                    return None;
                }
                // Stepping onward is only forced where no escape disjunct
                // holds.
                let mut escaped = BTreeSet::new();
                for d in esc {
                    escaped.extend(closed_sat(view, d));
                }
                step_ok.extend(all.difference(&escaped));
            }
            // Walk failing states to one violating the invariant.
            let fail: BTreeSet<usize> = all.difference(sat).cloned().collect();
            let step: BTreeSet<usize> = step_ok.intersection(&fail).cloned().collect();
            let goal: BTreeSet<usize> = all.difference(&inv).cloned().collect();
            bfs_path(view, &step, &goal)
        }
        _ => None,
    }
}

/// Shortest path from the initial state to a goal state, leaving
/// intermediate states only when they permit stepping.
fn bfs_path(view: &View, step_ok: &BTreeSet<usize>, goal: &BTreeSet<usize>) -> Option<PathWitness> {
    if goal.contains(&0) {
        return Some(PathWitness { states: vec![0], labels: Vec::new() });
    }
    if !step_ok.contains(&0) {
        return None;
    }
    let mut parent: BTreeMap<usize, (usize, &EventLabel)> = BTreeMap::new();
    let mut queue = VecDeque::from([0usize]);
    while let Some(s) = queue.pop_front() {
        for (label, t) in view.ts.out_edges(s) {
            if t == 0 || parent.contains_key(&t) {
                continue;
            }
            parent.insert(t, (s, label));
            if goal.contains(&t) {
                let mut states = vec![t];
                let mut labels = Vec::new();
                let mut cur = t;
                while let Some((p, l)) = parent.get(&cur) {
                    labels.push((*l).clone());
                    states.push(*p);
                    cur = *p;
                }
                states.reverse();
                labels.reverse();
                return Some(PathWitness { states, labels });
            }
            if step_ok.contains(&t) {
                queue.push_back(t);
            }
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{Engine, SystemState};
    use crate::model::parser::parse;
    use crate::model::ArtifactShape;
    use crate::pac::RuleSet;
    use crate::statespace::{
        build_gsm_ts, AbstractionPolicy, Budget, CanonState, EventLabel, ExploreOptions, Renaming,
        TsSource, TsState,
    };
    use crate::value::InstanceId;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

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

    fn janitor_ts() -> TransitionSystem {
        let m = parse(JANITOR, "janitor").unwrap();
        m.validate().unwrap();
        let rules = RuleSet::compile(&m).unwrap();
        let bounds: crate::engine::ContainerConfig = [("Thing".to_string(), 1)].into();
        let engine = Engine::with_containers(&m, &rules, &bounds).unwrap();
        build_gsm_ts(
            &engine,
            &SystemState::initial(&m),
            &AbstractionPolicy::for_model(&m),
            &ExploreOptions { budget: Budget::unlimited(), parallel: false },
        )
        .unwrap()
    }

    fn prop(text: &str) -> MuFormula {
        parse_property(text).unwrap()
    }

    #[test]
    fn parser_accepts_the_lifecycle_correctness_shapes() {
        let or_variant = prop(
            "nu Z. (forall id. Thing(id) -> mu Y. (destroyed(id) | allclosed(id) | (live(id) & dia Y))) & box Z",
        );
        let round = or_variant.to_string();
        assert_eq!(prop(&round), or_variant);

        prop("mu Z. achieved(filled) | dia Z");
        prop("achieved(\"Order paid\") -> open(\"Manage order\")");
        prop("exists x. live(x) & box (destroyed(x) | live(x))");
    }

    #[test]
    fn parser_rejects_malformed_and_ill_bound_input() {
        let unguarded = parse_property("exists x. dia Keeper(x)");
        assert!(matches!(unguarded, Err(MuError::UnguardedQuantifier { var }) if var == "x"));

        assert!(matches!(
            parse_property("mu Z. !Z"),
            Err(MuError::NegativeFixpoint(z)) if z == "Z"
        ));
        assert!(matches!(
            parse_property("mu Z. Z -> true"),
            Err(MuError::NegativeFixpoint(_))
        ));
        assert!(matches!(parse_property("dia Y"), Err(MuError::UnboundFixpoint(_))));
        assert!(matches!(parse_property("live(x)"), Err(MuError::UnboundData(_))));
        assert!(matches!(
            parse_property("mu Z. exists Z. live(Z)"),
            Err(MuError::DuplicateBinder(_))
        ));
        assert!(matches!(parse_property("mu Z. (dia Z"), Err(MuError::Syntax { .. })));
        assert!(matches!(parse_property("true true"), Err(MuError::Syntax { .. })));
        assert!(matches!(parse_property("mu mu. true"), Err(MuError::Syntax { .. })));
    }

    #[test]
    fn guards_carry_through_conjunction_implication_and_disjunction() {
        prop("forall x. live(x) -> box destroyed(x)");
        prop("exists x. live(x) & (dia Keeper(x) | box destroyed(x))");
        // A guard from outside a fixpoint binder does not protect the body.
        assert!(matches!(
            parse_property("exists x. live(x) & mu Z. Keeper(x) | dia Z"),
            Err(MuError::UnguardedQuantifier { .. })
        ));
        // Nested modalities need their own guards.
        assert!(matches!(
            parse_property("exists x. live(x) & dia dia Keeper(x)"),
            Err(MuError::UnguardedQuantifier { .. })
        ));
        prop("exists x. live(x) & dia (live(x) & dia Keeper(x))");
    }

    #[test]
    fn property_files_skip_comments_and_locate_errors() {
        let src = "# lifecycle\n\nmu Z. achieved(filled) | dia Z\n  true\n";
        let props = parse_property_file(src).unwrap();
        assert_eq!(props.len(), 2);
        assert_eq!(props[0].0, 3);
        assert_eq!(props[1].1, "true");

        let bad = parse_property_file("true\nmu Z. (\n");
        assert!(matches!(bad, Err(MuError::Syntax { line: 2, .. })));
    }

    /// One artifact type, one state, one self-loop; the smallest system the
    /// fixpoint examples are stated on.
    fn self_loop() -> TransitionSystem {
        let shapes: crate::model::ShapeMap = [(
            "W".to_string(),
            ArtifactShape {
                name: "W".to_string(),
                attrs: vec!["a".to_string()],
                stages: vec!["s1".to_string()],
                milestones: vec!["m1".to_string()],
                is_child: false,
            },
        )]
        .into();
        let content = CanonState {
            facts: vec![(
                "W".to_string(),
                vec![Value::Id(InstanceId(1)), Value::Null, Value::Bool(false), Value::Bool(true)],
            )],
            pending: BTreeSet::new(),
        };
        let live = content.live_values();
        TransitionSystem {
            source: TsSource::Direct,
            shapes,
            states: vec![TsState { content, size: 1, depth: 0, expanded: true }],
            edges: [Edge {
                from: 0,
                label: EventLabel {
                    event: "tick".to_string(),
                    target: InstanceId(1),
                    payload: Vec::new(),
                },
                transport: Renaming { map: live.iter().map(|v| (v.clone(), v.clone())).collect() },
                to: 0,
            }]
            .into(),
            truncated: false,
            violations: Vec::new(),
        }
    }

    #[test]
    fn fixpoints_on_the_self_loop_separate_mu_from_nu() {
        let ts = self_loop();
        assert!(!check(&ts, &prop("mu Z. dia Z")).unwrap().verdict);
        assert!(check(&ts, &prop("nu Z. dia Z")).unwrap().verdict);
        let everywhere = check(&ts, &prop("nu Z. true & box Z")).unwrap();
        assert!(everywhere.verdict);
        assert_eq!(everywhere.sat, [0].into());
    }

    #[test]
    fn reachability_on_the_janitor_yields_a_checkable_witness() {
        let ts = janitor_ts();
        let goal = prop("mu Z. achieved(dropped) | dia Z");
        let r = check(&ts, &goal).unwrap();
        assert!(r.verdict);
        let w = r.witness.expect("reachability witness");
        assert_eq!(w.states[0], 0);
        assert_eq!(w.states.len(), w.labels.len() + 1);
        // Path follows real edges and ends where `dropped` is achieved.
        for (i, l) in w.labels.iter().enumerate() {
            assert!(ts
                .out_edges(w.states[i])
                .any(|(el, t)| el == l && t == w.states[i + 1]));
        }
        let base = check(&ts, &prop("achieved(dropped)")).unwrap();
        assert!(base.sat.contains(w.states.last().unwrap()));
        assert!(!base.sat.contains(&0));

        // Everything below the bound stays on the shortest path.
        assert!(w.labels.len() >= 4, "zap/make/zap/toss at least: {}", w.labels.len());
    }

    #[test]
    fn ordering_queries_distinguish_achievable_prefixes() {
        let ts = janitor_ts();
        // Nothing is droppable before something was filled.
        let premature = prop(
            "mu Z. (achieved(dropped) & !achieved(filled)) | (!achieved(filled) & dia Z)",
        );
        assert!(!check(&ts, &premature).unwrap().verdict);
        // The reverse order is how the lifecycle actually runs.
        let proper = prop(
            "mu Z. (achieved(filled) & !achieved(dropped)) | (!achieved(dropped) & dia Z)",
        );
        let r = check(&ts, &proper).unwrap();
        assert!(r.verdict);
        assert!(r.witness.is_some());
    }

    #[test]
    fn safety_failures_come_with_a_violation_path() {
        let ts = janitor_ts();
        let safe = prop("nu Z. !achieved(filled) & box Z");
        let r = check(&ts, &safe).unwrap();
        assert!(!r.verdict);
        let w = r.witness.expect("violation path");
        let filled = check(&ts, &prop("achieved(filled)")).unwrap().sat;
        assert!(filled.contains(w.states.last().unwrap()));
        for s in &w.states[..w.states.len() - 1] {
            assert!(!filled.contains(s));
        }

        let holds = prop("nu Z. !achieved(nothing_yet) & box Z");
        assert!(matches!(check(&ts, &holds), Err(MuError::UnknownMilestone(_))));
    }

    #[test]
    fn the_lifecycle_properties_hold_and_the_until_variant_is_stronger() {
        let ts = janitor_ts();
        let or_variant = prop(
            "nu Z. (forall id. Thing(id) -> mu Y. (destroyed(id) | allclosed(id) | (live(id) & dia Y))) & box Z",
        );
        let until_variant = prop(
            "nu Z. (forall id. Thing(id) -> mu Y. (allclosed(id) | (live(id) & dia Y))) & box Z",
        );
        let or_r = check(&ts, &or_variant).unwrap();
        let until_r = check(&ts, &until_variant).unwrap();
        // Fewer ways to discharge the obligation, so a smaller sat set.
        assert!(until_r.sat.is_subset(&or_r.sat));
        assert!(or_r.verdict);

        // Keepers live forever and always can reach the all-closed lull.
        let keeper = prop(
            "nu Z. (forall id. Keeper(id) -> mu Y. (allclosed(id) | (live(id) & dia Y))) & box Z",
        );
        let k = check(&ts, &keeper).unwrap();
        assert_eq!(k.sat.len(), ts.states.len());
    }

    #[test]
    fn truncated_systems_are_refused_unless_prefix_checking_is_explicit() {
        let m = parse(JANITOR, "janitor").unwrap();
        m.validate().unwrap();
        let rules = RuleSet::compile(&m).unwrap();
        let bounds: crate::engine::ContainerConfig = [("Thing".to_string(), 1)].into();
        let engine = Engine::with_containers(&m, &rules, &bounds).unwrap();
        let ts = build_gsm_ts(
            &engine,
            &SystemState::initial(&m),
            &AbstractionPolicy::for_model(&m),
            &ExploreOptions { budget: Budget::depth(1), parallel: false },
        )
        .unwrap();
        assert!(ts.truncated);
        let f = prop("mu Z. achieved(filled) | dia Z");
        assert!(matches!(check(&ts, &f), Err(MuError::Truncated)));
        assert!(!check_prefix(&ts, &f).unwrap().verdict);
    }

    // ==== binding transport semantics ====================================

    /// Two states over one artifact row; the edge either carries the row's
    /// attribute value across or drops it.
    fn carrier(keep: bool) -> TransitionSystem {
        let shapes: crate::model::ShapeMap = [(
            "W".to_string(),
            ArtifactShape {
                name: "W".to_string(),
                attrs: vec!["a".to_string()],
                stages: vec!["s1".to_string()],
                milestones: vec!["m1".to_string()],
                is_child: false,
            },
        )]
        .into();
        let row = |attr: Value| CanonState {
            facts: vec![(
                "W".to_string(),
                vec![Value::Id(InstanceId(1)), attr, Value::Bool(false), Value::Bool(true)],
            )],
            pending: BTreeSet::new(),
        };
        let s0 = row(Value::Anon(0));
        let s1 = row(if keep { Value::Anon(0) } else { Value::Null });
        let mut transport: BTreeMap<Value, Value> =
            [(Value::Id(InstanceId(1)), Value::Id(InstanceId(1)))].into();
        if keep {
            transport.insert(Value::Anon(0), Value::Anon(0));
        }
        TransitionSystem {
            source: TsSource::Direct,
            shapes,
            states: vec![
                TsState { content: s0, size: 1, depth: 0, expanded: true },
                TsState { content: s1, size: 1, depth: 1, expanded: true },
            ],
            edges: [Edge {
                from: 0,
                label: EventLabel {
                    event: "go".to_string(),
                    target: InstanceId(1),
                    payload: Vec::new(),
                },
                transport: Renaming { map: transport },
                to: 1,
            }]
            .into(),
            truncated: false,
            violations: Vec::new(),
        }
    }

    #[test]
    fn bindings_survive_or_die_with_the_edge_transport() {
        let persists = prop("exists x. a(x) & live(x) & dia live(x)");
        assert!(check(&carrier(true), &persists).unwrap().verdict);
        assert!(!check(&carrier(false), &persists).unwrap().verdict);

        // A dead binding satisfies destroyed and nothing else. A scalar that
        // merely left the state would keep live(x) false but a(x) open to
        // coming back; a dropped transport closes every atom for good.
        let dies = prop("exists x. a(x) & live(x) & dia (destroyed(x) & !live(x) & !a(x))");
        assert!(check(&carrier(false), &dies).unwrap().verdict);
        assert!(!check(&carrier(true), &dies).unwrap().verdict);

        // The guarded universal collapses to true where liveness fails.
        let vacuous = prop("forall x. a(x) -> (live(x) -> box !live(x))");
        assert!(check(&carrier(false), &vacuous).unwrap().verdict);
        assert!(!check(&carrier(true), &vacuous).unwrap().verdict);
    }

    #[test]
    fn atoms_read_rows_stages_and_milestones() {
        let ts = carrier(true);
        assert!(check(&ts, &prop("achieved(m1)")).unwrap().verdict);
        assert!(!check(&ts, &prop("open(s1)")).unwrap().verdict);
        assert!(check(&ts, &prop("exists x. W(x)")).unwrap().verdict);
        assert!(check(&ts, &prop("exists x. W(x) & allclosed(x)")).unwrap().verdict);
        assert!(check(&ts, &prop("exists x. W(x) & achieved(m1, x)")).unwrap().verdict);
        assert!(check(&ts, &prop("forall x. W(x) -> !destroyed(x)")).unwrap().verdict);
        assert!(check(&ts, &prop("exists x. a(x) & !W(x)")).unwrap().verdict);
        assert!(matches!(
            check(&ts, &prop("exists x. nope(x)")),
            Err(MuError::UnknownName(_))
        ));
    }

    // ==== oracle agreement ================================================

    fn random_ts(rng: &mut ChaCha8Rng) -> TransitionSystem {
        let shapes: crate::model::ShapeMap = [(
            "W".to_string(),
            ArtifactShape {
                name: "W".to_string(),
                attrs: vec!["a".to_string()],
                stages: vec!["s1".to_string()],
                milestones: vec!["m1".to_string()],
                is_child: false,
            },
        )]
        .into();
        let scalars = [Value::Null, Value::Anon(0), Value::Anon(1), Value::str("k")];
        let n = rng.gen_range(1..=6usize);
        let mut states = Vec::new();
        for _ in 0..n {
            let mut facts = Vec::new();
            for id in 1..=rng.gen_range(0..=2u64) {
                facts.push((
                    "W".to_string(),
                    vec![
                        Value::Id(InstanceId(id)),
                        scalars.choose(rng).unwrap().clone(),
                        Value::Bool(rng.gen_bool(0.5)),
                        Value::Bool(rng.gen_bool(0.5)),
                    ],
                ));
            }
            facts.sort();
            let content = CanonState { facts, pending: BTreeSet::new() };
            states.push(TsState {
                content: content.clone(),
                size: content.facts.len(),
                depth: 0,
                expanded: true,
            });
        }
        let mut edges = BTreeSet::new();
        for from in 0..n {
            for _ in 0..rng.gen_range(0..=2usize) {
                let to = rng.gen_range(0..n);
                let src_live: Vec<Value> = states[from].content.live_values().into_iter().collect();
                let dst_live: Vec<Value> = states[to].content.live_values().into_iter().collect();
                let mut transport = BTreeMap::new();
                for v in &src_live {
                    match rng.gen_range(0..3u8) {
                        0 => {}
                        1 => {
                            transport.insert(v.clone(), v.clone());
                        }
                        _ => {
                            if let Some(w) = dst_live.choose(rng) {
                                transport.insert(v.clone(), w.clone());
                            }
                        }
                    }
                }
                edges.insert(Edge {
                    from,
                    label: EventLabel {
                        event: format!("e{}", rng.gen_range(0..3u8)),
                        target: InstanceId(1),
                        payload: Vec::new(),
                    },
                    transport: Renaming { map: transport },
                    to,
                });
            }
        }
        TransitionSystem {
            source: TsSource::Direct,
            shapes,
            states,
            edges,
            truncated: false,
            violations: Vec::new(),
        }
    }

    /// Random well-formed formula: guards are inserted in front of every
    /// modality under a quantifier, fixpoint variables only appear
    /// positively, and at most two binders nest.
    fn random_formula(
        rng: &mut ChaCha8Rng,
        depth: usize,
        scope: &[String],
        fixes: &[String],
        binders: usize,
    ) -> MuFormula {
        let atom = |rng: &mut ChaCha8Rng| -> MuFormula {
            let x = scope.choose(rng).cloned();
            match (rng.gen_range(0..8u8), x) {
                (0, _) => MuFormula::True,
                (1, _) => MuFormula::False,
                (2, _) => MuFormula::Open("s1".to_string(), None),
                (3, _) => MuFormula::Achieved("m1".to_string(), None),
                (4, Some(x)) => MuFormula::Live(x),
                (5, Some(x)) => MuFormula::Destroyed(x),
                (6, Some(x)) => MuFormula::Apply("W".to_string(), x),
                (7, Some(x)) => MuFormula::Apply("a".to_string(), x),
                _ => MuFormula::Achieved("m1".to_string(), None),
            }
        };
        if depth == 0 {
            // Fixpoint variables must stay guarded... by construction the
            // generator only leaves them under a modality, so bottoming out
            // falls back to plain atoms.
            return atom(rng);
        }
        let guard = |rng: &mut ChaCha8Rng, inner: MuFormula, scope: &[String]| -> MuFormula {
            let modal = if rng.gen_bool(0.5) {
                MuFormula::Dia(Box::new(inner))
            } else {
                MuFormula::BoxM(Box::new(inner))
            };
            let mut lives = scope.iter().map(|x| MuFormula::Live(x.clone()));
            match lives.next() {
                None => modal,
                Some(first) => {
                    let guards = lives.fold(first, |acc, l| {
                        MuFormula::And(Box::new(acc), Box::new(l))
                    });
                    if rng.gen_bool(0.5) {
                        MuFormula::And(Box::new(guards), Box::new(modal))
                    } else {
                        MuFormula::Implies(Box::new(guards), Box::new(modal))
                    }
                }
            }
        };
        match rng.gen_range(0..10u8) {
            0 => MuFormula::Not(Box::new(atom(rng))),
            1 => MuFormula::And(
                Box::new(random_formula(rng, depth - 1, scope, fixes, binders)),
                Box::new(random_formula(rng, depth - 1, scope, fixes, binders)),
            ),
            2 => MuFormula::Or(
                Box::new(random_formula(rng, depth - 1, scope, fixes, binders)),
                Box::new(random_formula(rng, depth - 1, scope, fixes, binders)),
            ),
            3 => MuFormula::Implies(
                Box::new(atom(rng)),
                Box::new(random_formula(rng, depth - 1, scope, fixes, binders)),
            ),
            4 | 5 => {
                // Modalities may close over a fixpoint variable; that is
                // the only place the generator uses one.
                let inner = if !fixes.is_empty() && rng.gen_bool(0.6) {
                    MuFormula::FixVar(fixes.choose(rng).unwrap().clone())
                } else {
                    random_formula(rng, depth - 1, scope, fixes, binders)
                };
                guard(rng, inner, scope)
            }
            6 | 7 if binders < 2 => {
                let z = format!("Z{binders}");
                let mut fixes = fixes.to_vec();
                fixes.push(z.clone());
                let body = random_formula(rng, depth - 1, scope, &fixes, binders + 1);
                if rng.gen_bool(0.5) {
                    MuFormula::Mu(z, Box::new(body))
                } else {
                    MuFormula::Nu(z, Box::new(body))
                }
            }
            8 | 9 if scope.len() < 2 && binders < 2 => {
                let x = format!("x{}", scope.len());
                let mut scope = scope.to_vec();
                scope.push(x.clone());
                // A fresh quantifier opens a new state, so inherited
                // fixpoint variables would sit unguarded; start clean.
                let body = random_formula(rng, depth - 1, &scope, &[], binders + 1);
                if rng.gen_bool(0.5) {
                    MuFormula::Exists(x, Box::new(body))
                } else {
                    MuFormula::Forall(x, Box::new(body))
                }
            }
            _ => atom(rng),
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(120))]

        #[test]
        fn the_fast_checker_agrees_with_the_brute_oracle(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let ts = random_ts(&mut rng);
            let f = random_formula(&mut rng, 3, &[], &[], 0);
            prop_assume!(validate(&f).is_ok());
            let fast = check(&ts, &f).unwrap();
            let brute = check_brute(&ts, &f).unwrap();
            prop_assert_eq!(&fast.sat, &brute.sat, "formula {}", f);
            prop_assert_eq!(fast.verdict, brute.verdict);
        }

        #[test]
        fn verdicts_ignore_value_names(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let ts = random_ts(&mut rng);
            let f = random_formula(&mut rng, 3, &[], &[], 0);
            prop_assume!(validate(&f).is_ok());

            // Swap the two anonymous scalars everywhere they occur.
            let swap = |v: &Value| match v {
                Value::Anon(0) => Value::Anon(1),
                Value::Anon(1) => Value::Anon(0),
                other => other.clone(),
            };
            let mut renamed = ts.clone();
            for s in &mut renamed.states {
                for (_, row) in &mut s.content.facts {
                    for v in row.iter_mut() {
                        *v = swap(v);
                    }
                }
            }
            renamed.edges = renamed
                .edges
                .iter()
                .map(|e| Edge {
                    from: e.from,
                    label: e.label.clone(),
                    transport: Renaming {
                        map: e.transport.map.iter().map(|(k, v)| (swap(k), swap(v))).collect(),
                    },
                    to: e.to,
                })
                .collect();

            let plain = check(&ts, &f).unwrap();
            let permuted = check(&renamed, &f).unwrap();
            prop_assert_eq!(plain.sat, permuted.sat);
        }
    }

    #[test]
    fn verdict_always_matches_initial_membership() {
        let ts = janitor_ts();
        for text in [
            "mu Z. achieved(dropped) | dia Z",
            "nu Z. !achieved(filled) & box Z",
            "exists x. Keeper(x)",
            "false",
        ] {
            let r = check(&ts, &prop(text)).unwrap();
            assert_eq!(r.verdict, r.sat.contains(&0));
        }
    }
}
