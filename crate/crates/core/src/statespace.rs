//! Finite abstractions of reachable state spaces.
//!
//! A state-bounded model has infinitely many reachable states even when the
//! number of live instances stays small, because payloads range over an
//! infinite value domain. The abstraction collapses that domain: successor
//! events draw payload values from the active domain of the current state
//! plus a fixed pool of fresh representatives, and every stable state is
//! renamed to a canonical form in which value identity carries no
//! information beyond the equalities the state itself exhibits. Conditions
//! only ever compare values for equality, every operational tie-break (least
//! free container, next fresh id) is invariant under renaming the non-fixed
//! values, and a value that has left the active domain can never be compared
//! against again, so the quotient is faithful: two states with the same
//! canonical form admit the same futures up to renaming.
//!
//! The same canonical form is built from both execution semantics, direct
//! B-steps over snapshots and the compiled relational form, which is what
//! makes the two transition systems comparable state for state. The
//! relational builder walks the action chain at micro-step granularity and
//! collapses each chain into a single labeled edge between unblocked states,
//! checking the bookkeeping bounds and the forced-chain shape as it goes.

use crate::dcds::{apply_action, enabled_actions, DbInstance, DcdsError, DcdsSpec, GroundCall, ServiceOracle};
use crate::engine::{payload_slots, ContainerLayout, Engine, EngineError, EventAt, SystemState};
use crate::model::{return_event, GsmModel, Instance, ShapeMap, Snapshot};
use crate::translate::{check_aux_bounds, filter_state, pend_of, ServiceRole, TranslateError, TranslationMap};
use crate::value::{InstanceId, Value};
use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use thiserror::Error;

#[derive(Error, Debug)]
pub enum AbstractionError {
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Relational(#[from] DcdsError),
    #[error(transparent)]
    Translation(#[from] TranslateError),
}

// ==== canonical form ======================================================

/// Value renaming produced by canonicalization: maps the raw values of a
/// state onto their canonical names. Values the model pins down (null,
/// booleans, condition constants, initial and container ids) are never
/// renamed and do not appear in the map.
#[derive(Clone, Debug, Default, PartialEq, Eq, PartialOrd, Ord)]
pub struct Renaming {
    pub map: BTreeMap<Value, Value>,
}

impl Renaming {
    pub fn apply(&self, v: &Value) -> Value {
        self.map.get(v).cloned().unwrap_or_else(|| v.clone())
    }
}

/// Canonical observable content of a stable state: the sorted fact listing
/// of the live instances and the pending service calls, with non-fixed
/// values renamed to their normal form. Equality of canonical forms is the
/// state identity used by the transition-system builders and by
/// bisimulation.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct CanonState {
    pub facts: Vec<(String, Vec<Value>)>,
    pub pending: BTreeSet<(InstanceId, String)>,
}

impl CanonState {
    /// Smallest index not used by an anonymous scalar; canonical scalars are
    /// dense, so this is also their count.
    pub fn anon_count(&self) -> u64 {
        self.facts
            .iter()
            .flat_map(|(_, row)| row)
            .filter_map(|v| match v {
                Value::Anon(n) => Some(n + 1),
                _ => None,
            })
            .max()
            .unwrap_or(0)
    }

    /// Data values of the live part of the state: everything in a non-blank
    /// fact row plus pending call targets. Null and status booleans are
    /// lifecycle encoding, not data, and blank container rows are storage,
    /// so none of them contribute. This is the domain first-order
    /// quantifiers range over and the liveness test behind `live(x)`.
    pub fn live_values(&self) -> BTreeSet<Value> {
        let mut out = BTreeSet::new();
        for (rel, row) in &self.facts {
            if !rel.starts_with("pending:") && row_is_blank(row) {
                continue;
            }
            out.extend(row.iter().filter(|v| {
                matches!(v, Value::Id(_) | Value::Str(_) | Value::Anon(_))
            }).cloned());
        }
        out.extend(self.pending.iter().map(|(id, _)| Value::Id(*id)));
        out
    }

    /// Reconstruct a steppable system state: live instances from the fact
    /// rows, blank container slots for every reserved id the facts do not
    /// claim.
    fn to_system(&self, shapes: &ShapeMap, layout: Option<&ContainerLayout>) -> SystemState {
        let mut snap = Snapshot::default();
        for (ty, row) in &self.facts {
            let shape = &shapes[ty];
            let id = row[0].as_id().expect("canonical fact rows lead with an id");
            let mut inst = Instance::fresh(shape);
            let mut col = 1;
            for a in &shape.attrs {
                inst.attrs.insert(a.clone(), row[col].clone());
                col += 1;
            }
            for s in &shape.stages {
                inst.stages.insert(s.clone(), as_flag(&row[col]));
                col += 1;
            }
            for m in &shape.milestones {
                inst.milestones.insert(m.clone(), as_flag(&row[col]));
                col += 1;
            }
            snap.instances.insert(id, inst);
        }
        materialize_blanks(&mut snap, shapes, layout);
        SystemState {
            snapshot: snap,
            pending: self.pending.clone(),
        }
    }
}

impl fmt::Display for CanonState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (ty, row) in &self.facts {
            let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            writeln!(f, "{ty}({})", cells.join(", "))?;
        }
        for (id, task) in &self.pending {
            writeln!(f, "pending {task} @ {id}")?;
        }
        Ok(())
    }
}

fn as_flag(v: &Value) -> bool {
    match v {
        Value::Bool(b) => *b,
        other => panic!("canonical status column held {other}"),
    }
}

/// A reserved container slot nothing lives in: every attribute null, every
/// status flag false. Indistinguishable from a destroyed instance by
/// construction, so the live part of a state is exactly the non-blank rows.
pub fn row_is_blank(row: &[Value]) -> bool {
    row[1..].iter().all(|v| matches!(v, Value::Null | Value::Bool(false)))
}

/// Seed a blank instance into every reserved container slot the snapshot
/// leaves unclaimed. The engine treats absent and blank slots alike, but the
/// explorers keep them materialized so that instance rows, bookkeeping rows
/// and fresh-id choices line up exactly with the relational side.
fn materialize_blanks(snap: &mut Snapshot, shapes: &ShapeMap, layout: Option<&ContainerLayout>) {
    let Some(layout) = layout else { return };
    for (ty, (lo, hi)) in &layout.ranges {
        for k in *lo..*hi {
            snap.instances.entry(InstanceId(k)).or_insert_with(|| {
                let mut inst = Instance::fresh(&shapes[ty]);
                inst.blank_out();
                inst
            });
        }
    }
}

/// Ids at or below this bound are fixed by the model: initial instances and
/// reserved container slots. Everything above is a created id subject to
/// renaming.
fn fixed_ceiling(model: &GsmModel, layout: Option<&ContainerLayout>) -> u64 {
    model.initial.len() as u64 + layout.map(|l| l.total()).unwrap_or(0)
}

fn renamable(v: &Value, constants: &BTreeSet<Value>, fixed_ids: u64) -> bool {
    match v {
        Value::Id(id) => id.0 > fixed_ids,
        Value::Str(_) => !constants.contains(v),
        Value::Anon(_) => true,
        Value::Null | Value::Bool(_) => false,
    }
}

/// Where each live value of a source state lands in a successor's canonical
/// form. Fixed values carry over as themselves; renamed values follow the
/// successor's renaming; a value absent from the result died on this step
/// and any property binding holding it dies with it.
fn edge_transport(
    source_live: &BTreeSet<Value>,
    ren: &Renaming,
    constants: &BTreeSet<Value>,
    fixed_ids: u64,
) -> Renaming {
    let mut map = BTreeMap::new();
    for v in source_live {
        if renamable(v, constants, fixed_ids) {
            if let Some(w) = ren.map.get(v) {
                map.insert(v.clone(), w.clone());
            }
        } else {
            map.insert(v.clone(), v.clone());
        }
    }
    Renaming { map }
}

/// Row cell in the refinement encoding: fixed values stand for themselves,
/// renamable values for their current color.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
enum Enc {
    Fixed(Value),
    Color(usize),
}

/// Canonicalize one stable state: rename every non-fixed value (created ids,
/// payload scalars) to a normal form determined by first occurrence in the
/// sorted fact listing. Two preparatory color-refinement passes make the
/// listing order itself independent of the raw names, so isomorphic states
/// (equal up to a bijection of non-fixed values) reach equal forms, and the
/// form of a canonical state is itself, making the map idempotent.
pub fn canonical_state(
    shapes: &ShapeMap,
    constants: &BTreeSet<Value>,
    fixed_ids: u64,
    snapshot: &Snapshot,
    pending: &BTreeSet<(InstanceId, String)>,
) -> (CanonState, Renaming) {
    let mut rows = snapshot.facts(shapes);
    for (id, task) in pending {
        rows.push((format!("pending:{task}"), vec![Value::Id(*id)]));
    }

    let renamable = |v: &Value| renamable(v, constants, fixed_ids);

    // Color refinement: start from the value kind, then repeatedly split by
    // the multiset of occurrence contexts until the partition is stable.
    // Contexts mention other values only through their colors, so the final
    // coloring is invariant under renaming; values sharing a color after
    // refinement are interchangeable.
    let mut colors: BTreeMap<Value, usize> = rows
        .iter()
        .flat_map(|(_, row)| row)
        .filter(|v| renamable(v))
        .map(|v| (v.clone(), if v.as_id().is_some() { 1 } else { 0 }))
        .collect();
    let encode = |row: &[Value], colors: &BTreeMap<Value, usize>| -> Vec<Enc> {
        row.iter()
            .map(|v| match colors.get(v) {
                Some(c) => Enc::Color(*c),
                None => Enc::Fixed(v.clone()),
            })
            .collect()
    };
    let mut distinct = colors.values().collect::<BTreeSet<_>>().len();
    for _ in 0..=colors.len() {
        let mut sigs: BTreeMap<(usize, Vec<(String, usize, Vec<Enc>)>), Vec<Value>> = BTreeMap::new();
        for v in colors.keys() {
            let mut ctx: Vec<(String, usize, Vec<Enc>)> = Vec::new();
            for (rel, row) in &rows {
                for (pos, cell) in row.iter().enumerate() {
                    if cell == v {
                        ctx.push((rel.clone(), pos, encode(row, &colors)));
                    }
                }
            }
            ctx.sort();
            sigs.entry((colors[v], ctx)).or_default().push(v.clone());
        }
        let next: BTreeMap<Value, usize> = sigs
            .values()
            .enumerate()
            .flat_map(|(c, vs)| vs.iter().map(move |v| (v.clone(), c)))
            .collect();
        let next_distinct = sigs.len();
        colors = next;
        if next_distinct == distinct {
            break;
        }
        distinct = next_distinct;
    }

    // First-occurrence renaming over the refined listing order.
    rows.sort_by(|a, b| (&a.0, encode(&a.1, &colors)).cmp(&(&b.0, encode(&b.1, &colors))));
    let mut ren = Renaming::default();
    let mut next_scalar = 0u64;
    let mut next_id = fixed_ids;
    for (_, row) in &rows {
        for v in row {
            if !renamable(v) || ren.map.contains_key(v) {
                continue;
            }
            let fresh = match v {
                Value::Id(_) => {
                    next_id += 1;
                    Value::Id(InstanceId(next_id))
                }
                _ => {
                    let n = next_scalar;
                    next_scalar += 1;
                    Value::Anon(n)
                }
            };
            ren.map.insert(v.clone(), fresh);
        }
    }

    let mut facts = Vec::new();
    let mut canon_pending = BTreeSet::new();
    for (rel, row) in rows {
        let renamed: Vec<Value> = row.iter().map(|v| ren.apply(v)).collect();
        match rel.strip_prefix("pending:") {
            Some(task) => {
                let id = renamed[0].as_id().expect("pending rows hold an id");
                canon_pending.insert((id, task.to_string()));
            }
            None => facts.push((rel, renamed)),
        }
    }
    facts.sort();
    (CanonState { facts, pending: canon_pending }, ren)
}

// ==== abstraction policy ==================================================

/// How payload values are abstracted when enumerating successor events: the
/// supply offered for each payload or return slot is the scalar active
/// domain of the current state, the model's condition constants, null, and
/// `fresh` anonymous representatives that are new to the state.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AbstractionPolicy {
    pub fresh: usize,
}

impl AbstractionPolicy {
    /// Enough fresh representatives for any single event: the widest payload
    /// or return tuple the model can consume in one B-step.
    pub fn for_model(m: &GsmModel) -> AbstractionPolicy {
        let events = m.events.iter().map(|e| e.payload.len());
        let returns = m
            .artifacts
            .iter()
            .flat_map(|a| a.stages_rec())
            .filter_map(|si| si.stage.task())
            .map(|t| t.returns.len());
        AbstractionPolicy {
            fresh: events.chain(returns).max().unwrap_or(0),
        }
    }

    pub fn with_fresh(fresh: usize) -> AbstractionPolicy {
        AbstractionPolicy { fresh }
    }
}

/// Payload value supply for events leaving a canonical state. Payload slots
/// are scalar-sorted, so ids stay out; the fresh representatives extend the
/// state's dense anonymous-scalar prefix.
fn payload_supply(content: &CanonState, constants: &BTreeSet<Value>, fresh: usize) -> Vec<Value> {
    let mut supply: BTreeSet<Value> = constants
        .iter()
        .filter(|v| v.as_id().is_none())
        .cloned()
        .collect();
    supply.insert(Value::Null);
    for (_, row) in &content.facts {
        for v in row {
            if matches!(v, Value::Str(_) | Value::Anon(_)) {
                supply.insert(v.clone());
            }
        }
    }
    let base = content.anon_count();
    for j in 0..fresh as u64 {
        supply.insert(Value::Anon(base + j));
    }
    supply.into_iter().collect()
}

fn combos(supply: &[Value], slots: usize) -> Vec<Vec<Value>> {
    let mut out = vec![Vec::new()];
    for _ in 0..slots {
        let mut next = Vec::with_capacity(out.len() * supply.len());
        for prefix in &out {
            for v in supply {
                let mut row = prefix.clone();
                row.push(v.clone());
                next.push(row);
            }
        }
        out = next;
    }
    out
}

// ==== transition systems ==================================================

/// Which semantics produced a transition system.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TsSource {
    /// Direct B-step execution over snapshots.
    Direct,
    /// The compiled relational form, chains collapsed to unblocked states.
    Relational,
}

/// Edge label: the delivered event with its canonicalized payload. Values
/// that survive into the successor appear under their canonical successor
/// names; values that die with the step are folded to anonymous
/// representatives past the successor's scalar prefix, so the label is
/// independent of which fresh representative carried them.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct EventLabel {
    pub event: String,
    pub target: InstanceId,
    pub payload: Vec<(String, Value)>,
}

impl fmt::Display for EventLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} @ {}", self.event, self.target)?;
        if !self.payload.is_empty() {
            let cells: Vec<String> =
                self.payload.iter().map(|(k, v)| format!("{k}={v}")).collect();
            write!(f, " {{{}}}", cells.join(", "))?;
        }
        Ok(())
    }
}

fn canonical_label(
    event: &str,
    target: InstanceId,
    slots: &[String],
    combo: &[Value],
    ren: &Renaming,
    next_anon: u64,
) -> EventLabel {
    let mut dead: BTreeMap<Value, Value> = BTreeMap::new();
    let mut payload = Vec::with_capacity(slots.len());
    for (slot, v) in slots.iter().zip(combo) {
        let canon = if let Some(mapped) = ren.map.get(v) {
            mapped.clone()
        } else if matches!(v, Value::Str(_) | Value::Anon(_)) && !dead.contains_key(v) {
            let n = next_anon + dead.len() as u64;
            dead.insert(v.clone(), Value::Anon(n));
            Value::Anon(n)
        } else if let Some(d) = dead.get(v) {
            d.clone()
        } else {
            v.clone()
        };
        payload.push((slot.clone(), canon));
    }
    EventLabel {
        event: event.to_string(),
        target: ren.apply(&Value::Id(target)).as_id().expect("targets survive their event"),
        payload,
    }
}

/// One canonical stable state in a transition system.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TsState {
    pub content: CanonState,
    /// Information-model tuples: live instance rows plus reserved container
    /// slots. The boundedness monitor watches this.
    pub size: usize,
    /// B-step distance from the initial state.
    pub depth: usize,
    /// Whether the successors of this state were explored; truncated builds
    /// leave their final frontier unexpanded.
    pub expanded: bool,
}

/// One labeled transition. Two concrete steps can reach the same canonical
/// target under the same label yet move the source's values differently
/// (interchangeable values swapping roles), so the transport is part of the
/// edge identity: property bindings need every distinct way across.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct Edge {
    pub from: usize,
    pub label: EventLabel,
    /// Where each live value of the source state reads in the target's
    /// canonical form; values absent from the map died on this step.
    pub transport: Renaming,
    pub to: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TransitionSystem {
    pub source: TsSource,
    /// Row layout of the canonical fact listings, by artifact type.
    pub shapes: ShapeMap,
    /// Index 0 is the initial state; the rest appear in discovery order.
    pub states: Vec<TsState>,
    pub edges: BTreeSet<Edge>,
    /// Whether exploration stopped at a budget with states left to expand.
    pub truncated: bool,
    /// Bookkeeping-bound and chain-shape findings from relational builds;
    /// empty means every reachable state honored them.
    pub violations: Vec<String>,
}

impl TransitionSystem {
    pub fn max_size(&self) -> usize {
        self.states.iter().map(|s| s.size).max().unwrap_or(0)
    }

    /// Depth at which exploration stopped, if it did: unexpanded states all
    /// sit on the final frontier.
    pub fn horizon(&self) -> Option<usize> {
        self.states.iter().filter(|s| !s.expanded).map(|s| s.depth).min()
    }

    /// Outgoing (label, target) pairs, deduplicated: edges differing only in
    /// transport are one observable transition.
    pub fn out_edges(&self, state: usize) -> impl Iterator<Item = (&EventLabel, usize)> {
        self.edges
            .iter()
            .filter(move |e| e.from == state)
            .map(|e| (&e.label, e.to))
            .collect::<BTreeSet<_>>()
            .into_iter()
    }

    pub fn out_full(&self, state: usize) -> impl Iterator<Item = &Edge> {
        self.edges.iter().filter(move |e| e.from == state)
    }

    /// Same system with states reordered canonically (initial state pinned
    /// first, the rest by content), so structurally identical builds compare
    /// equal regardless of discovery order.
    pub fn normalized(&self) -> TransitionSystem {
        let mut order: Vec<usize> = (0..self.states.len()).collect();
        order.sort_by(|&a, &b| {
            (a != 0, &self.states[a].content).cmp(&(b != 0, &self.states[b].content))
        });
        let mut place = vec![0usize; order.len()];
        for (new, &old) in order.iter().enumerate() {
            place[old] = new;
        }
        TransitionSystem {
            source: self.source,
            shapes: self.shapes.clone(),
            states: order.iter().map(|&old| self.states[old].clone()).collect(),
            edges: self
                .edges
                .iter()
                .map(|e| Edge { from: place[e.from], to: place[e.to], ..e.clone() })
                .collect(),
            truncated: self.truncated,
            violations: self.violations.clone(),
        }
    }

    /// Graphviz rendering; doubled quotes in labels are escaped.
    pub fn to_dot(&self) -> String {
        let esc = |s: String| s.replace('"', "\\\"");
        let mut out = String::from("digraph ts {\n  rankdir=LR;\n");
        for (i, s) in self.states.iter().enumerate() {
            let peri = if i == 0 { ", peripheries=2" } else { "" };
            out.push_str(&format!(
                "  s{i} [label=\"s{i}\\n{} tuples\"{peri}];\n",
                s.size
            ));
        }
        let arrows: BTreeSet<(usize, usize, String)> =
            self.edges.iter().map(|e| (e.from, e.to, e.label.to_string())).collect();
        for (s, t, l) in arrows {
            out.push_str(&format!("  s{s} -> s{t} [label=\"{}\"];\n", esc(l)));
        }
        out.push_str("}\n");
        out
    }
}

impl fmt::Display for TransitionSystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "states: {}  edges: {}{}",
            self.states.len(),
            self.edges.len(),
            if self.truncated { "  (truncated)" } else { "" }
        )?;
        for (i, s) in self.states.iter().enumerate() {
            let init = if i == 0 { "  initial" } else { "" };
            writeln!(f, "state {i}  [{} tuples]{init}", s.size)?;
            for (l, t) in self.out_edges(i) {
                writeln!(f, "  {l}  ->  {t}")?;
            }
        }
        Ok(())
    }
}

/// Exploration cut-offs. Budgets are checked between breadth-first layers,
/// so a build may overshoot `max_states` by one layer but never stops with a
/// half-expanded state.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Budget {
    pub max_states: Option<usize>,
    pub max_depth: Option<usize>,
}

impl Budget {
    pub fn unlimited() -> Budget {
        Budget::default()
    }

    pub fn states(n: usize) -> Budget {
        Budget { max_states: Some(n), max_depth: None }
    }

    pub fn depth(d: usize) -> Budget {
        Budget { max_states: None, max_depth: Some(d) }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ExploreOptions {
    pub budget: Budget,
    /// Expand frontier states on the rayon pool. The merge is sequential in
    /// frontier order either way, so results never depend on scheduling;
    /// without the `parallel` feature this flag is ignored.
    pub parallel: bool,
}

impl Default for ExploreOptions {
    fn default() -> ExploreOptions {
        ExploreOptions {
            budget: Budget::unlimited(),
            parallel: cfg!(feature = "parallel"),
        }
    }
}

fn map_frontier<W, T, F>(work: &[W], parallel: bool, f: F) -> Vec<T>
where
    W: Sync,
    T: Send,
    F: Fn(&W) -> T + Sync,
{
    #[cfg(feature = "parallel")]
    if parallel {
        use rayon::prelude::*;
        return work.par_iter().map(&f).collect();
    }
    let _ = parallel;
    work.iter().map(f).collect()
}

/// Successors of one state: canonical edges plus any findings, sorted so
/// the merge is deterministic.
struct Expansion {
    succs: BTreeSet<(EventLabel, Renaming, CanonState, usize)>,
    violations: Vec<String>,
}

/// Shared breadth-first driver over canonical states.
fn explore<F>(
    initial: (CanonState, usize),
    source: TsSource,
    shapes: ShapeMap,
    options: &ExploreOptions,
    expand: F,
) -> Result<TransitionSystem, AbstractionError>
where
    F: Fn(&CanonState) -> Result<Expansion, AbstractionError> + Sync,
{
    let (c0, size0) = initial;
    let mut ts = TransitionSystem {
        source,
        shapes,
        states: vec![TsState { content: c0.clone(), size: size0, depth: 0, expanded: false }],
        edges: BTreeSet::new(),
        truncated: false,
        violations: Vec::new(),
    };
    let mut index: BTreeMap<CanonState, usize> = [(c0, 0)].into();
    let mut frontier: Vec<usize> = vec![0];
    let mut depth = 0usize;

    while !frontier.is_empty() {
        let depth_out = options.budget.max_depth.is_some_and(|d| depth >= d);
        let states_out = options.budget.max_states.is_some_and(|n| ts.states.len() >= n);
        if depth_out || states_out {
            ts.truncated = true;
            break;
        }
        let work: Vec<CanonState> = frontier.iter().map(|&i| ts.states[i].content.clone()).collect();
        let results = map_frontier(&work, options.parallel, &expand);
        let mut next = Vec::new();
        for (&i, result) in frontier.iter().zip(results) {
            let exp = result?;
            ts.states[i].expanded = true;
            for msg in exp.violations {
                ts.violations.push(format!("state {i}: {msg}"));
            }
            for (label, transport, content, size) in exp.succs {
                let j = *index.entry(content.clone()).or_insert_with(|| {
                    ts.states.push(TsState { content, size, depth: depth + 1, expanded: false });
                    next.push(ts.states.len() - 1);
                    ts.states.len() - 1
                });
                ts.edges.insert(Edge { from: i, label, transport, to: j });
            }
        }
        frontier = next;
        depth += 1;
    }
    Ok(ts)
}

// ==== the B-step builder ==================================================

/// Reachable stable states of a model under direct B-step execution,
/// abstracted over payload values. Exploration starts from `s0` (normally
/// the initial state) and follows every deliverable event with every payload
/// combination the policy supplies.
pub fn build_gsm_ts(
    engine: &Engine,
    s0: &SystemState,
    policy: &AbstractionPolicy,
    options: &ExploreOptions,
) -> Result<TransitionSystem, AbstractionError> {
    let shapes = &engine.shapes;
    let constants = engine.model.constants();
    let fixed = fixed_ceiling(engine.model, engine.containers.as_ref());

    let mut start = s0.clone();
    materialize_blanks(&mut start.snapshot, shapes, engine.containers.as_ref());
    let (c0, _) = canonical_state(shapes, &constants, fixed, &start.snapshot, &start.pending);
    let size0 = start.snapshot.instances.len();

    explore((c0, size0), TsSource::Direct, shapes.clone(), options, |content| {
        let state = content.to_system(shapes, engine.containers.as_ref());
        let supply = payload_supply(content, &constants, policy.fresh);
        let live = content.live_values();
        let mut succs = BTreeSet::new();
        for (event, target, slots) in engine.possible_events(&state) {
            for combo in combos(&supply, slots.len()) {
                let ev = EventAt {
                    event: event.clone(),
                    target,
                    payload: slots.iter().cloned().zip(combo.iter().cloned()).collect(),
                };
                let (next, _) = engine.b_step(&state, &ev)?;
                let (canon, ren) =
                    canonical_state(shapes, &constants, fixed, &next.snapshot, &next.pending);
                let label = canonical_label(&event, target, &slots, &combo, &ren, canon.anon_count());
                let transport = edge_transport(&live, &ren, &constants, fixed);
                succs.insert((label, transport, canon, next.snapshot.instances.len()));
            }
        }
        Ok(Expansion { succs, violations: Vec::new() })
    })
}

// ==== the relational builder ==============================================

/// Routes each service to a fixed value: payload and return slots to the
/// chosen combination, fresh-id services to the next unused id.
struct SlotRoutes(BTreeMap<String, Value>);

impl ServiceOracle for SlotRoutes {
    fn assignments(&mut self, calls: &[GroundCall]) -> Vec<Vec<Value>> {
        vec![calls.iter().map(|c| self.0[&c.service].clone()).collect()]
    }
}

fn slot_routes(map: &TranslationMap, event: &str, slots: &[String], combo: &[Value], next_id: InstanceId) -> SlotRoutes {
    let slot_value = |slot: &str| {
        slots
            .iter()
            .position(|s| s == slot)
            .map(|i| combo[i].clone())
            .unwrap_or(Value::Null)
    };
    let mut routes = BTreeMap::new();
    for (name, role) in &map.services {
        match role {
            ServiceRole::Payload { event: e, slot } if e == event => {
                routes.insert(name.clone(), slot_value(slot));
            }
            ServiceRole::Return { task, slot } if return_event(task) == event => {
                routes.insert(name.clone(), slot_value(slot));
            }
            ServiceRole::FreshId { .. } => {
                routes.insert(name.clone(), Value::Id(next_id));
            }
            _ => {}
        }
    }
    SlotRoutes(routes)
}

/// Rebuild the relational state a canonical form stands for: instance rows
/// (live content plus blank container slots), unblocked bookkeeping, and
/// pending-call rows. Change tables and payload pools are empty in every
/// unblocked state, so nothing else is needed.
fn rebuild_db(map: &TranslationMap, content: &CanonState) -> DbInstance {
    let mut db = DbInstance::default();
    let mut ids = Vec::new();
    let mut seen: BTreeSet<InstanceId> = BTreeSet::new();
    for (ty, row) in &content.facts {
        let mut att = row.clone();
        att.push(Value::Bool(false));
        db.insert(&map.att[ty], att);
        let id = row[0].as_id().expect("canonical fact rows lead with an id");
        ids.push(row[0].clone());
        seen.insert(id);
    }
    if let Some(bounds) = &map.containers {
        let layout = ContainerLayout::new(&map.model, bounds).expect("layout already built once");
        for (ty, (lo, hi)) in &layout.ranges {
            let shape = &map.shapes[ty];
            let width = shape.stages.len() + shape.milestones.len();
            for k in *lo..*hi {
                if seen.contains(&InstanceId(k)) {
                    continue;
                }
                let mut row = vec![Value::Id(InstanceId(k))];
                row.extend(std::iter::repeat_n(Value::Null, shape.attrs.len()));
                row.extend(std::iter::repeat_n(Value::Bool(false), width));
                row.push(Value::Bool(true));
                db.insert(&map.att[ty], row);
                ids.push(Value::Id(InstanceId(k)));
            }
        }
    }
    for id in ids {
        db.insert(&map.block, vec![id.clone(), Value::Bool(false)]);
        let mut exec = vec![id];
        exec.extend(std::iter::repeat_n(Value::Bool(true), map.rule_count));
        db.insert(&map.exec, exec);
    }
    for (id, task) in &content.pending {
        db.insert(&map.pend[task], vec![Value::Id(*id)]);
    }
    db
}

fn is_blocked(map: &TranslationMap, db: &DbInstance) -> bool {
    db.rows(&map.block).any(|r| r[1] == Value::Bool(true))
}

fn att_rows(map: &TranslationMap, db: &DbInstance) -> usize {
    map.att.values().map(|rel| db.rows(rel).count()).sum()
}

fn next_free_id(map: &TranslationMap, db: &DbInstance) -> InstanceId {
    let max = map
        .att
        .values()
        .flat_map(|rel| db.rows(rel))
        .filter_map(|row| row[0].as_id())
        .map(|id| id.0)
        .max()
        .unwrap_or(0);
    InstanceId(max + 1)
}

/// Reachable unblocked states of the compiled relational form. Each edge
/// stands for one full action chain, injection through finalize, driven at
/// micro-step granularity; blocked intermediate states never become states
/// of the result. Along every chain the builder checks the bookkeeping
/// bounds, key cleanliness, and that blocked states force exactly one
/// action; findings land in `violations` instead of aborting the build.
pub fn build_dcds_ts(
    spec: &DcdsSpec,
    map: &TranslationMap,
    policy: &AbstractionPolicy,
    options: &ExploreOptions,
) -> Result<TransitionSystem, AbstractionError> {
    let shapes = &map.shapes;
    let constants = map.model.constants();
    let layout = map
        .containers
        .as_ref()
        .map(|b| ContainerLayout::new(&map.model, b))
        .transpose()?;
    let fixed = fixed_ceiling(&map.model, layout.as_ref());

    let snap0 = filter_state(map, &spec.initial)?;
    let pend0 = pend_of(map, &spec.initial)?;
    let (c0, _) = canonical_state(shapes, &constants, fixed, &snap0, &pend0);
    let size0 = att_rows(map, &spec.initial);

    // Injection action -> (event, expected chain bound context).
    let injections: BTreeMap<&str, &str> = map
        .inject_actions
        .iter()
        .flat_map(|(event, targets)| targets.values().map(move |a| (a.as_str(), event.as_str())))
        .collect();

    explore((c0, size0), TsSource::Relational, shapes.clone(), options, |content| {
        let db = rebuild_db(map, content);
        let supply = payload_supply(content, &constants, policy.fresh);
        let live = content.live_values();
        let mut succs = BTreeSet::new();
        let mut violations = Vec::new();
        for (action, binding) in enabled_actions(spec, &db) {
            let Some(&event) = injections.get(action.as_str()) else {
                violations.push(format!("`{action}` enabled in an unblocked state"));
                continue;
            };
            let target = binding["id"].as_id().expect("injections bind the target id");
            let slots: Vec<String> = payload_slots(&map.model, event)
                .map_err(AbstractionError::from)?
                .into_iter()
                .map(str::to_string)
                .collect();
            for combo in combos(&supply, slots.len()) {
                let mut routes = slot_routes(map, event, &slots, &combo, next_free_id(map, &db));
                let mut cur = db.clone();
                let mut act = action.clone();
                let mut bind = binding.clone();
                let mut seen_chain: BTreeSet<DbInstance> = BTreeSet::new();
                let mut steps = 0usize;
                loop {
                    let out = apply_action(spec, &cur, &act, &bind, &mut routes)?;
                    for kv in &out.discarded {
                        violations.push(format!("`{act}` discarded a successor: {kv}"));
                    }
                    if out.successors.len() != 1 {
                        violations.push(format!(
                            "`{act}` produced {} successors under a fixed oracle",
                            out.successors.len()
                        ));
                    }
                    let Some(next) = out.successors.into_iter().next() else { break };
                    cur = next;
                    for v in check_aux_bounds(map, &cur) {
                        violations.push(format!("after `{act}`: {v}"));
                    }
                    if !is_blocked(map, &cur) {
                        let snap = filter_state(map, &cur)?;
                        let pend = pend_of(map, &cur)?;
                        let (canon, ren) = canonical_state(shapes, &constants, fixed, &snap, &pend);
                        let label =
                            canonical_label(event, target, &slots, &combo, &ren, canon.anon_count());
                        let transport = edge_transport(&live, &ren, &constants, fixed);
                        succs.insert((label, transport, canon, att_rows(map, &cur)));
                        break;
                    }
                    if !seen_chain.insert(cur.clone()) {
                        violations.push(format!("chain after `{event}` revisited a state"));
                        break;
                    }
                    steps += 1;
                    if steps > map.rule_count + 1 {
                        violations.push(format!("chain after `{event}` exceeded its bound"));
                        break;
                    }
                    let enabled = enabled_actions(spec, &cur);
                    if enabled.len() != 1 {
                        violations.push(format!(
                            "blocked state after `{event}` enables {} actions",
                            enabled.len()
                        ));
                    }
                    let Some((a, b)) = enabled.into_iter().next() else { break };
                    act = a;
                    bind = b;
                }
            }
        }
        Ok(Expansion { succs, violations })
    })
}

// ==== bisimulation ========================================================

/// A state pair the bisimulation game loses on, with the event path that
/// reaches it from the initial pair.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CounterexamplePair {
    /// State index in the left system.
    pub left: usize,
    /// State index in the right system.
    pub right: usize,
    pub path: Vec<EventLabel>,
    pub reason: String,
}

impl fmt::Display for CounterexamplePair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "states {} | {}: {}", self.left, self.right, self.reason)?;
        if !self.path.is_empty() {
            let steps: Vec<String> = self.path.iter().map(|l| l.to_string()).collect();
            write!(f, "  (after {})", steps.join(", "))?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum BisimResult {
    Equivalent,
    Inequivalent(CounterexamplePair),
}

impl BisimResult {
    pub fn holds(&self) -> bool {
        matches!(self, BisimResult::Equivalent)
    }
}

/// Check the two systems bisimilar, labeling states by canonical content and
/// edges by canonical events. Complete systems are compared by partition
/// refinement to the full fixpoint. If either side is truncated the game is
/// depth-bounded instead: it is played to the shallower horizon, and
/// unexpanded frontier states match anything with equal content, so the
/// verdict certifies equivalence exactly up to that depth.
pub fn check_bisimulation(a: &TransitionSystem, b: &TransitionSystem) -> BisimResult {
    match (a.horizon(), b.horizon()) {
        (None, None) => refinement_bisim(a, b),
        (ha, hb) => bounded_bisim(a, b, ha.into_iter().chain(hb).min().expect("one side truncated")),
    }
}

fn adjacency(ts: &TransitionSystem) -> Vec<Vec<(&EventLabel, usize)>> {
    let mut adj: Vec<BTreeSet<(&EventLabel, usize)>> = vec![BTreeSet::new(); ts.states.len()];
    for e in &ts.edges {
        adj[e.from].insert((&e.label, e.to));
    }
    adj.into_iter().map(|set| set.into_iter().collect()).collect()
}

fn refinement_bisim(a: &TransitionSystem, b: &TransitionSystem) -> BisimResult {
    let n = a.states.len();
    let total = n + b.states.len();
    let content = |k: usize| {
        if k < n {
            &a.states[k].content
        } else {
            &b.states[k - n].content
        }
    };
    let adj_a = adjacency(a);
    let adj_b = adjacency(b);
    let succ = |k: usize| -> Vec<(&EventLabel, usize)> {
        if k < n {
            adj_a[k].clone()
        } else {
            adj_b[k - n].iter().map(|(l, t)| (*l, t + n)).collect()
        }
    };

    // history[r][k] is state k's block after r rounds of splitting.
    let mut by_content: BTreeMap<&CanonState, usize> = BTreeMap::new();
    let mut blocks: Vec<usize> = (0..total)
        .map(|k| {
            let next = by_content.len();
            *by_content.entry(content(k)).or_insert(next)
        })
        .collect();
    let mut history = vec![blocks.clone()];
    loop {
        let mut keys: BTreeMap<(usize, BTreeSet<(&EventLabel, usize)>), usize> = BTreeMap::new();
        let next: Vec<usize> = (0..total)
            .map(|k| {
                let sig: BTreeSet<(&EventLabel, usize)> =
                    succ(k).into_iter().map(|(l, t)| (l, blocks[t])).collect();
                let fresh = keys.len();
                *keys.entry((blocks[k], sig)).or_insert(fresh)
            })
            .collect();
        let stable = keys.len() == blocks.iter().collect::<BTreeSet<_>>().len();
        blocks = next;
        history.push(blocks.clone());
        if stable {
            break;
        }
    }

    if blocks[0] == blocks[n] {
        return BisimResult::Equivalent;
    }

    // Walk the refinement history down to a distinguishing pair. Successors
    // of a-states stay in a, of b-states in b, so `i` indexes a and `j`
    // indexes b throughout.
    let mut i = 0;
    let mut j = n;
    let mut path = Vec::new();
    loop {
        let round = history.iter().position(|h| h[i] != h[j]).expect("pair distinguishable");
        if round == 0 {
            return BisimResult::Inequivalent(CounterexamplePair {
                left: i,
                right: j - n,
                path,
                reason: "observable content differs".to_string(),
            });
        }
        // First difference at `round`: blocks agreed one round earlier, so
        // the signatures over that round's blocks must disagree.
        let prev = &history[round - 1];
        let sig_of = |k: usize| -> BTreeSet<(&EventLabel, usize)> {
            succ(k).into_iter().map(|(l, t)| (l, prev[t])).collect()
        };
        let sig_i = sig_of(i);
        let sig_j = sig_of(j);
        let (from, to, mine, theirs, from_left) = if sig_i.difference(&sig_j).next().is_some() {
            (i, j, &sig_i, &sig_j, true)
        } else {
            (j, i, &sig_j, &sig_i, false)
        };
        let (label, block) = mine.difference(theirs).next().expect("signatures differ");
        let (_, succ_from) = succ(from)
            .into_iter()
            .find(|(l, t)| l == label && prev[*t] == *block)
            .expect("edge behind the signature entry");
        match succ(to).into_iter().find(|(l, _)| l == label) {
            None => {
                let side = if from_left { "left" } else { "right" };
                return BisimResult::Inequivalent(CounterexamplePair {
                    left: i,
                    right: j - n,
                    path,
                    reason: format!("only the {side} state can take `{label}`"),
                });
            }
            // Any same-label answer differs at the previous round, because
            // (label, block) is missing from the answering signature.
            Some((_, succ_to)) => {
                path.push((*label).clone());
                (i, j) = if from_left { (succ_from, succ_to) } else { (succ_to, succ_from) };
            }
        }
    }
}

fn bounded_bisim(a: &TransitionSystem, b: &TransitionSystem, horizon: usize) -> BisimResult {
    let adj_a = adjacency(a);
    let adj_b = adjacency(b);
    let mut memo: BTreeMap<(usize, usize, usize), bool> = BTreeMap::new();

    fn equal(
        a: &TransitionSystem,
        b: &TransitionSystem,
        adj_a: &[Vec<(&EventLabel, usize)>],
        adj_b: &[Vec<(&EventLabel, usize)>],
        memo: &mut BTreeMap<(usize, usize, usize), bool>,
        i: usize,
        j: usize,
        fuel: usize,
    ) -> bool {
        if a.states[i].content != b.states[j].content {
            return false;
        }
        if fuel == 0 || !a.states[i].expanded || !b.states[j].expanded {
            return true;
        }
        if let Some(&hit) = memo.get(&(i, j, fuel)) {
            return hit;
        }
        let forward = adj_a[i].iter().all(|(l, t)| {
            adj_b[j]
                .iter()
                .any(|(l2, t2)| l2 == l && equal(a, b, adj_a, adj_b, memo, *t, *t2, fuel - 1))
        });
        let backward = forward
            && adj_b[j].iter().all(|(l, t)| {
                adj_a[i]
                    .iter()
                    .any(|(l2, t2)| l2 == l && equal(a, b, adj_a, adj_b, memo, *t2, *t, fuel - 1))
            });
        memo.insert((i, j, fuel), backward);
        backward
    }

    if equal(a, b, &adj_a, &adj_b, &mut memo, 0, 0, horizon) {
        return BisimResult::Equivalent;
    }

    // Replay the losing game for a witness path.
    let mut i = 0;
    let mut j = 0;
    let mut fuel = horizon;
    let mut path = Vec::new();
    loop {
        if a.states[i].content != b.states[j].content {
            return BisimResult::Inequivalent(CounterexamplePair {
                left: i,
                right: j,
                path,
                reason: "observable content differs".to_string(),
            });
        }
        debug_assert!(fuel > 0 && a.states[i].expanded && b.states[j].expanded);
        let unmatched_left = adj_a[i].iter().find(|(l, t)| {
            !adj_b[j]
                .iter()
                .any(|(l2, t2)| l2 == l && equal(a, b, &adj_a, &adj_b, &mut memo, *t, *t2, fuel - 1))
        });
        if let Some((label, t)) = unmatched_left {
            match adj_b[j].iter().find(|(l2, _)| l2 == label) {
                None => {
                    return BisimResult::Inequivalent(CounterexamplePair {
                        left: i,
                        right: j,
                        path,
                        reason: format!("only the left state can take `{label}`"),
                    })
                }
                Some((_, t2)) => {
                    path.push((*label).clone());
                    i = *t;
                    j = *t2;
                    fuel -= 1;
                    continue;
                }
            }
        }
        let unmatched_right = adj_b[j]
            .iter()
            .find(|(l, t)| {
                !adj_a[i]
                    .iter()
                    .any(|(l2, t2)| l2 == l && equal(a, b, &adj_a, &adj_b, &mut memo, *t2, *t, fuel - 1))
            })
            .expect("one side loses the game");
        let (label, t2) = unmatched_right;
        match adj_a[i].iter().find(|(l2, _)| l2 == label) {
            None => {
                return BisimResult::Inequivalent(CounterexamplePair {
                    left: i,
                    right: j,
                    path,
                    reason: format!("only the right state can take `{label}`"),
                })
            }
            Some((_, t)) => {
                path.push((*label).clone());
                i = *t;
                j = *t2;
                fuel -= 1;
            }
        }
    }
}

// ==== boundedness monitor =================================================

/// Witness that a transition system leaves the size bound: the shortest
/// event path from the initial state to an oversized state, with the
/// information-model size after every step.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ViolationPath {
    pub state: usize,
    pub size: usize,
    pub bound: usize,
    pub initial_size: usize,
    pub steps: Vec<(EventLabel, usize)>,
}

impl fmt::Display for ViolationPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "size {}", self.initial_size)?;
        for (label, size) in &self.steps {
            write!(f, "  --{label}-->  {size}")?;
        }
        write!(f, "  exceeds bound {}", self.bound)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Boundedness {
    Bounded {
        max_size: usize,
        /// False when the system was truncated: the bound held on every
        /// explored state but deeper states were not examined.
        exhaustive: bool,
    },
    Violation(ViolationPath),
}

/// Check every state's information-model size against `bound`; the first
/// oversized state (in discovery order) yields a shortest witness path.
pub fn monitor_boundedness(ts: &TransitionSystem, bound: usize) -> Boundedness {
    let Some(bad) = ts.states.iter().position(|s| s.size > bound) else {
        return Boundedness::Bounded {
            max_size: ts.max_size(),
            exhaustive: !ts.truncated,
        };
    };

    // Shortest path by breadth-first parents; edge iteration order makes the
    // choice of parents deterministic.
    let mut parent: Vec<Option<(usize, &EventLabel)>> = vec![None; ts.states.len()];
    let mut seen = vec![false; ts.states.len()];
    seen[0] = true;
    let mut queue = VecDeque::from([0usize]);
    while let Some(s) = queue.pop_front() {
        if s == bad {
            break;
        }
        for (label, t) in ts.out_edges(s) {
            if !seen[t] {
                seen[t] = true;
                parent[t] = Some((s, label));
                queue.push_back(t);
            }
        }
    }
    let mut steps = Vec::new();
    let mut at = bad;
    while let Some((prev, label)) = parent[at] {
        steps.push((label.clone(), ts.states[at].size));
        at = prev;
    }
    steps.reverse();
    Boundedness::Violation(ViolationPath {
        state: bad,
        size: ts.states[bad].size,
        bound,
        initial_size: ts.states[0].size,
        steps,
    })
}
