//! Sentence-plan extraction, subgraph-schema canonicalization, frequent
//! schema mining and schema instantiation.
//!
//! A schema is a connected graph of typed slots joined by forward relations.
//! Its canonical code is the lexicographically smallest
//! `(slot kinds, sorted edge list)` tuple over all slot orderings, so
//! isomorphic graphs share one code. Slot order in a [`SubgraphSchema`] is the
//! canonical order.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hkg::{Hkg, NodeId, NodeKind, RelationId, RelationTable};

pub type SchemaId = usize;

pub const STOP: SchemaId = 0;
pub const EMPTY: SchemaId = 1;
pub const STOP_CODE: &str = "STOP";
pub const EMPTY_CODE: &str = "EMPTY";
pub const DEFAULT_MAX_SLOTS: usize = 6;

/// A relation-labeled graph over typed nodes, indexed `0..kinds.len()`.
/// Edges are `(from, relation, to)` with forward relations.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabeledGraph {
    pub kinds: Vec<NodeKind>,
    pub edges: Vec<(usize, RelationId, usize)>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SubgraphSchema {
    pub slot_kinds: Vec<NodeKind>,
    pub edges: Vec<(usize, RelationId, usize)>,
    pub code: String,
}

impl SubgraphSchema {
    fn reserved(code: &str) -> Self {
        SubgraphSchema {
            slot_kinds: Vec::new(),
            edges: Vec::new(),
            code: code.to_string(),
        }
    }

    pub fn slots(&self) -> usize {
        self.slot_kinds.len()
    }

    pub fn is_reserved(&self) -> bool {
        self.code == STOP_CODE || self.code == EMPTY_CODE
    }

    /// Multiset of `(from kind, relation, to kind)` edge labels.
    fn edge_labels(&self, rels: &RelationTable) -> BTreeMap<(char, String, char), usize> {
        let mut m = BTreeMap::new();
        for &(a, r, b) in &self.edges {
            *m.entry((
                self.slot_kinds[a].code(),
                rels.name(r).to_string(),
                self.slot_kinds[b].code(),
            ))
            .or_insert(0) += 1;
        }
        m
    }

    /// Parses a canonical code back into a schema, interning relation names.
    pub fn from_code(code: &str, rels: &mut RelationTable) -> Result<Self> {
        if code == STOP_CODE || code == EMPTY_CODE {
            return Ok(SubgraphSchema::reserved(code));
        }
        let bad = || Error::Schema(format!("malformed schema code '{code}'"));
        let (kinds, edges) = code.split_once('|').ok_or_else(bad)?;
        let slot_kinds = kinds
            .chars()
            .map(|c| NodeKind::from_code(c).ok_or_else(bad))
            .collect::<Result<Vec<_>>>()?;
        let mut parsed = Vec::new();
        for e in edges.split(';').filter(|s| !s.is_empty()) {
            let parts: Vec<&str> = e.split(',').collect();
            if parts.len() != 3 {
                return Err(bad());
            }
            let a: usize = parts[0].parse().map_err(|_| bad())?;
            let b: usize = parts[2].parse().map_err(|_| bad())?;
            if a >= slot_kinds.len() || b >= slot_kinds.len() {
                return Err(bad());
            }
            parsed.push((a, rels.intern(parts[1]), b));
        }
        let schema = SubgraphSchema {
            slot_kinds,
            edges: parsed,
            code: code.to_string(),
        };
        Ok(schema)
    }
}

fn is_connected(n: usize, edges: &[(usize, RelationId, usize)]) -> bool {
    if n == 0 {
        return false;
    }
    let mut adj = vec![Vec::new(); n];
    for &(a, _, b) in edges {
        adj[a].push(b);
        adj[b].push(a);
    }
    let mut seen = vec![false; n];
    seen[0] = true;
    let mut stack = vec![0];
    while let Some(v) = stack.pop() {
        for &w in &adj[v] {
            if !seen[w] {
                seen[w] = true;
                stack.push(w);
            }
        }
    }
    seen.into_iter().all(|s| s)
}

type CodeKey = (Vec<char>, Vec<(usize, String, usize)>);

fn code_key(g: &LabeledGraph, rels: &RelationTable, order: &[usize]) -> CodeKey {
    // order[pos] = original slot at canonical position pos
    let mut pos_of = vec![0; order.len()];
    for (p, &orig) in order.iter().enumerate() {
        pos_of[orig] = p;
    }
    let kinds = order.iter().map(|&o| g.kinds[o].code()).collect();
    let mut edges: Vec<(usize, String, usize)> = g
        .edges
        .iter()
        .map(|&(a, r, b)| (pos_of[a], rels.name(r).to_string(), pos_of[b]))
        .collect();
    edges.sort();
    (kinds, edges)
}

fn render_code(key: &CodeKey) -> String {
    let mut s: String = key.0.iter().collect();
    s.push('|');
    for (i, (a, r, b)) in key.1.iter().enumerate() {
        if i > 0 {
            s.push(';');
        }
        let _ = write!(s, "{a},{r},{b}");
    }
    s
}

/// Visits every permutation of each same-kind block, blocks ordered by kind.
fn for_each_ordering(kinds: &[NodeKind], mut f: impl FnMut(&[usize])) {
    let mut idx: Vec<usize> = (0..kinds.len()).collect();
    idx.sort_by_key(|&i| (kinds[i].code(), i));
    let mut blocks: Vec<(usize, usize)> = Vec::new();
    let mut start = 0;
    for i in 1..=idx.len() {
        if i == idx.len() || kinds[idx[i]].code() != kinds[idx[start]].code() {
            blocks.push((start, i));
            start = i;
        }
    }
    fn rec(order: &mut Vec<usize>, blocks: &[(usize, usize)], b: usize, f: &mut dyn FnMut(&[usize])) {
        if b == blocks.len() {
            f(order);
            return;
        }
        let (lo, hi) = blocks[b];
        permute(order, lo, lo, hi, blocks, b, f);
    }
    fn permute(
        order: &mut Vec<usize>,
        k: usize,
        lo: usize,
        hi: usize,
        blocks: &[(usize, usize)],
        b: usize,
        f: &mut dyn FnMut(&[usize]),
    ) {
        if k + 1 >= hi {
            rec(order, blocks, b + 1, f);
            return;
        }
        let _ = lo;
        for i in k..hi {
            order.swap(k, i);
            permute(order, k + 1, lo, hi, blocks, b, f);
            order.swap(k, i);
        }
    }
    rec(&mut idx, &blocks, 0, &mut f);
}

/// Canonical schema of a labeled graph, plus the slot ordering: `order[s]`
/// is the input node placed in canonical slot `s`.
pub fn schema_of(
    g: &LabeledGraph,
    rels: &RelationTable,
    max_slots: usize,
) -> Result<(SubgraphSchema, Vec<usize>)> {
    let n = g.kinds.len();
    if n == 0 {
        return Err(Error::Schema("empty graph has no schema".into()));
    }
    if n > max_slots {
        return Err(Error::Schema(format!(
            "graph has {n} nodes, more than max_slots = {max_slots}"
        )));
    }
    if !is_connected(n, &g.edges) {
        return Err(Error::Schema("graph is disconnected".into()));
    }
    let mut best: Option<(CodeKey, Vec<usize>)> = None;
    for_each_ordering(&g.kinds, |order| {
        let key = code_key(g, rels, order);
        if best.as_ref().is_none_or(|(b, _)| key < *b) {
            best = Some((key, order.to_vec()));
        }
    });
    let (key, order) = best.expect("at least one ordering");
    let mut pos_of = vec![0; n];
    for (p, &orig) in order.iter().enumerate() {
        pos_of[orig] = p;
    }
    let mut edges: Vec<(usize, RelationId, usize)> = g
        .edges
        .iter()
        .map(|&(a, r, b)| (pos_of[a], r, pos_of[b]))
        .collect();
    edges.sort_by(|x, y| {
        (x.0, rels.name(x.1), x.2).cmp(&(y.0, rels.name(y.1), y.2))
    });
    let schema = SubgraphSchema {
        slot_kinds: order.iter().map(|&o| g.kinds[o]).collect(),
        edges,
        code: render_code(&key),
    };
    Ok((schema, order))
}

/// Forward edges among `nodes` in `local`, as a labeled graph indexed by the
/// position in `nodes`.
pub fn induced_labeled(local: &Hkg, nodes: &[NodeId]) -> LabeledGraph {
    let pos: HashMap<NodeId, usize> = nodes.iter().enumerate().map(|(i, &n)| (n, i)).collect();
    let rels = local.relations();
    let mut edges = Vec::new();
    for (i, &n) in nodes.iter().enumerate() {
        for &(r, m) in local.neighbors(n) {
            if rels.is_forward(r) {
                if let Some(&j) = pos.get(&m) {
                    edges.push((i, r, j));
                }
            }
        }
    }
    LabeledGraph {
        kinds: nodes.iter().map(|&n| local.kind(n).expect("member")).collect(),
        edges,
    }
}

/// One sentence's plan as extracted from gold text.
#[derive(Clone, Debug, PartialEq)]
pub enum SentencePlan {
    Empty,
    Graph {
        schema: SubgraphSchema,
        /// Node per canonical slot.
        nodes: Vec<NodeId>,
    },
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AlignedReview {
    pub sentences: Vec<SentencePlan>,
    /// Mentions whose node is absent from the local graph.
    pub dropped_mentions: usize,
}

fn components(local: &Hkg, set: &BTreeSet<NodeId>) -> Vec<BTreeSet<NodeId>> {
    let mut seen: BTreeSet<NodeId> = BTreeSet::new();
    let mut out = Vec::new();
    for &s in set {
        if seen.contains(&s) {
            continue;
        }
        let mut comp = BTreeSet::new();
        let mut queue = VecDeque::from([s]);
        seen.insert(s);
        while let Some(v) = queue.pop_front() {
            comp.insert(v);
            for &(_, w) in local.neighbors(v) {
                if set.contains(&w) && seen.insert(w) {
                    queue.push_back(w);
                }
            }
        }
        out.push(comp);
    }
    out
}

/// Connected node set covering a sentence's mentions: disconnected mentions
/// are bridged through single intermediate nodes where possible, otherwise
/// the largest component is kept. Result is capped at `max_slots` nodes.
fn sentence_nodes(local: &Hkg, mentions: &BTreeSet<NodeId>, max_slots: usize) -> Vec<NodeId> {
    let mut set = mentions.clone();
    loop {
        let comps = components(local, &set);
        if comps.len() <= 1 {
            break;
        }
        let comp_of = |n: NodeId| comps.iter().position(|c| c.contains(&n));
        let bridge = local.nodes().filter(|n| !set.contains(n)).find(|&x| {
            let touched: BTreeSet<usize> = local
                .neighbors(x)
                .iter()
                .filter_map(|&(_, m)| comp_of(m))
                .collect();
            touched.len() >= 2
        });
        match bridge {
            Some(x) => {
                set.insert(x);
            }
            None => {
                let best = comps
                    .iter()
                    .max_by(|a, b| {
                        a.len()
                            .cmp(&b.len())
                            .then_with(|| b.iter().next().cmp(&a.iter().next()))
                    })
                    .expect("non-empty");
                set = best.clone();
                break;
            }
        }
    }
    if set.len() <= max_slots {
        return set.into_iter().collect();
    }
    // BFS from the smallest node, restricted to the set
    let start = *set.iter().next().unwrap();
    let mut kept = vec![start];
    let mut seen = BTreeSet::from([start]);
    let mut queue = VecDeque::from([start]);
    while let Some(v) = queue.pop_front() {
        for &(_, w) in local.neighbors(v) {
            if kept.len() >= max_slots {
                break;
            }
            if set.contains(&w) && seen.insert(w) {
                kept.push(w);
                queue.push_back(w);
            }
        }
    }
    kept.sort_unstable();
    kept
}

/// Extracts one sentence plan per sentence from its mentioned nodes.
pub fn align_sentence_subgraphs(
    sentence_mentions: &[Vec<NodeId>],
    local: &Hkg,
    max_slots: usize,
) -> AlignedReview {
    let rels = local.relations();
    let mut out = AlignedReview::default();
    for mentions in sentence_mentions {
        let mut set = BTreeSet::new();
        for &m in mentions {
            if local.contains(m) {
                set.insert(m);
            } else {
                out.dropped_mentions += 1;
            }
        }
        if set.is_empty() {
            out.sentences.push(SentencePlan::Empty);
            continue;
        }
        let nodes = sentence_nodes(local, &set, max_slots);
        let g = induced_labeled(local, &nodes);
        let (schema, order) = schema_of(&g, rels, max_slots).expect("connected and capped");
        out.sentences.push(SentencePlan::Graph {
            schema,
            nodes: order.iter().map(|&o| nodes[o]).collect(),
        });
    }
    out
}

/// Mined schema vocabulary. Ids `STOP` and `EMPTY` are reserved; mined
/// schemas follow in descending frequency.
#[derive(Clone, Debug, PartialEq)]
pub struct SchemaRegistry {
    schemas: Vec<SubgraphSchema>,
    frequency: Vec<u64>,
    by_code: HashMap<String, SchemaId>,
}

impl SchemaRegistry {
    pub fn from_schemas(mined: Vec<(SubgraphSchema, u64)>) -> Self {
        let mut reg = SchemaRegistry {
            schemas: vec![
                SubgraphSchema::reserved(STOP_CODE),
                SubgraphSchema::reserved(EMPTY_CODE),
            ],
            frequency: vec![0, 0],
            by_code: HashMap::new(),
        };
        reg.by_code.insert(STOP_CODE.into(), STOP);
        reg.by_code.insert(EMPTY_CODE.into(), EMPTY);
        for (s, f) in mined {
            reg.by_code.insert(s.code.clone(), reg.schemas.len());
            reg.schemas.push(s);
            reg.frequency.push(f);
        }
        reg
    }

    pub fn len(&self) -> usize {
        self.schemas.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn get(&self, id: SchemaId) -> &SubgraphSchema {
        &self.schemas[id]
    }

    pub fn frequency(&self, id: SchemaId) -> u64 {
        self.frequency[id]
    }

    pub fn id_of(&self, code: &str) -> Option<SchemaId> {
        self.by_code.get(code).copied()
    }

    /// Mined (non-reserved) schema ids.
    pub fn mined_ids(&self) -> impl Iterator<Item = SchemaId> {
        2..self.schemas.len()
    }

    /// Registry id for `schema`, remapping schemas outside the vocabulary to
    /// the mined schema sharing the most edge labels (ties by frequency).
    pub fn label(&self, schema: &SubgraphSchema, rels: &RelationTable) -> (SchemaId, bool) {
        if let Some(id) = self.id_of(&schema.code) {
            return (id, false);
        }
        let want = schema.edge_labels(rels);
        let want_kinds: BTreeMap<char, usize> =
            schema.slot_kinds.iter().fold(BTreeMap::new(), |mut m, k| {
                *m.entry(k.code()).or_insert(0) += 1;
                m
            });
        let best = self
            .mined_ids()
            .max_by(|&a, &b| {
                let score = |id: SchemaId| {
                    let have = self.schemas[id].edge_labels(rels);
                    let common: usize = want
                        .iter()
                        .map(|(k, &c)| c.min(have.get(k).copied().unwrap_or(0)))
                        .sum();
                    let kinds: usize = self.schemas[id]
                        .slot_kinds
                        .iter()
                        .fold(BTreeMap::new(), |mut m: BTreeMap<char, usize>, k| {
                            *m.entry(k.code()).or_insert(0) += 1;
                            m
                        })
                        .iter()
                        .map(|(k, &c)| c.min(want_kinds.get(k).copied().unwrap_or(0)))
                        .sum();
                    (common, kinds, self.frequency[id])
                };
                score(a).cmp(&score(b)).then(b.cmp(&a))
            });
        (best.unwrap_or(EMPTY), true)
    }

    /// Turns an aligned review into a labeled document plan ending in STOP.
    /// Reviews longer than `max_plan_len - 1` sentences are truncated.
    pub fn label_review(
        &self,
        aligned: &AlignedReview,
        rels: &RelationTable,
        max_plan_len: usize,
    ) -> (DocumentPlan, usize) {
        let mut steps = Vec::new();
        let mut remapped = 0;
        for s in aligned.sentences.iter().take(max_plan_len.saturating_sub(1)) {
            match s {
                SentencePlan::Empty => steps.push(PlanStep::empty()),
                SentencePlan::Graph { schema, nodes } => {
                    let (id, was_remapped) = self.label(schema, rels);
                    remapped += was_remapped as usize;
                    steps.push(PlanStep {
                        schema_id: id,
                        nodes: nodes.clone(),
                    });
                }
            }
        }
        steps.push(PlanStep::stop());
        (DocumentPlan { steps }, remapped)
    }

    const HEADER: &'static str = "#cetp-schemas v1";

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "{}", Self::HEADER)?;
        for (id, s) in self.schemas.iter().enumerate() {
            writeln!(f, "{id}\t{}\t{}", s.code, self.frequency[id])?;
        }
        Ok(())
    }

    pub fn load(path: &Path, rels: &mut RelationTable) -> Result<Self> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        let name = path.display().to_string();
        let mut lines = f.lines();
        let header = lines.next().transpose()?.unwrap_or_default();
        if header.trim() != Self::HEADER {
            return Err(Error::Version {
                what: name,
                expected: Self::HEADER.into(),
                found: header,
            });
        }
        let mut mined = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let perr = |msg: &str| Error::Parse {
                path: name.clone(),
                line: i + 2,
                msg: msg.to_string(),
            };
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 3 {
                return Err(perr("expected schema_id<TAB>code<TAB>frequency"));
            }
            let id: usize = cols[0].parse().map_err(|_| perr("bad schema id"))?;
            let freq: u64 = cols[2].parse().map_err(|_| perr("bad frequency"))?;
            let schema =
                SubgraphSchema::from_code(cols[1], rels).map_err(|e| perr(&e.to_string()))?;
            let expected_reserved = match id {
                STOP => Some(STOP_CODE),
                EMPTY => Some(EMPTY_CODE),
                _ => None,
            };
            match expected_reserved {
                Some(code) if code != schema.code => return Err(perr("reserved id mismatch")),
                Some(_) => continue,
                None if id != mined.len() + 2 => return Err(perr("schema ids must be dense")),
                None => mined.push((schema, freq)),
            }
        }
        Ok(SchemaRegistry::from_schemas(mined))
    }
}

/// Counts whole-sentence schemas across aligned reviews and keeps the
/// `top_k` most frequent (ties broken by canonical code).
pub fn mine_frequent_schemas(reviews: &[AlignedReview], top_k: usize) -> SchemaRegistry {
    let mut counts: BTreeMap<String, (SubgraphSchema, u64)> = BTreeMap::new();
    for r in reviews {
        for s in &r.sentences {
            if let SentencePlan::Graph { schema, .. } = s {
                counts
                    .entry(schema.code.clone())
                    .or_insert_with(|| (schema.clone(), 0))
                    .1 += 1;
            }
        }
    }
    let mut ranked: Vec<(SubgraphSchema, u64)> = counts.into_values().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.code.cmp(&b.0.code)));
    ranked.truncate(top_k.max(1));
    SchemaRegistry::from_schemas(ranked)
}

/// Fills schema slots greedily in slot order with the best-scoring unused
/// node of the right kind whose edges to already-filled slots exist and
/// whose edges to unfilled slots have at least one candidate endpoint.
/// Returns `None` when a slot has no candidate.
pub fn instantiate_schema(
    schema: &SubgraphSchema,
    score: &dyn Fn(NodeId) -> f64,
    local: &Hkg,
) -> Option<Vec<NodeId>> {
    if schema.is_reserved() {
        return None;
    }
    let mut filled: Vec<NodeId> = Vec::with_capacity(schema.slots());
    for (slot, &kind) in schema.slot_kinds.iter().enumerate() {
        let mut best: Option<(f64, NodeId)> = None;
        for n in local.nodes() {
            if local.kind(n) != Some(kind) || filled.contains(&n) {
                continue;
            }
            let edges_ok = schema.edges.iter().all(|&(a, r, b)| {
                if a == slot && b < slot {
                    local.has_edge(n, r, filled[b])
                } else if b == slot && a < slot {
                    local.has_edge(filled[a], r, n)
                } else if a == slot && b == slot {
                    false
                } else {
                    true
                }
            });
            if !edges_ok || !has_partners(schema, slot, n, &filled, local) {
                continue;
            }
            let s = score(n);
            if best.is_none_or(|(bs, _)| s > bs) {
                best = Some((s, n));
            }
        }
        filled.push(best?.1);
    }
    Some(filled)
}

/// Every schema edge from `slot` to a later slot has at least one unused
/// candidate partner of the right kind around `n`.
fn has_partners(
    schema: &SubgraphSchema,
    slot: usize,
    n: NodeId,
    filled: &[NodeId],
    local: &Hkg,
) -> bool {
    let rels = local.relations();
    schema.edges.iter().all(|&(a, r, b)| {
        let (other, rel) = if a == slot && b > slot {
            (b, r)
        } else if b == slot && a > slot {
            (a, rels.inverse(r))
        } else {
            return true;
        };
        local.neighbors(n).iter().any(|&(er, m)| {
            er == rel && m != n && !filled.contains(&m) && local.kind(m) == Some(schema.slot_kinds[other])
        })
    })
}

/// Checks the subgraph invariants: injective, kind-consistent, and every
/// schema edge present in `local`.
pub fn is_valid_instance(schema: &SubgraphSchema, nodes: &[NodeId], local: &Hkg) -> bool {
    if nodes.len() != schema.slots() {
        return false;
    }
    let distinct: BTreeSet<_> = nodes.iter().collect();
    if distinct.len() != nodes.len() {
        return false;
    }
    nodes
        .iter()
        .zip(&schema.slot_kinds)
        .all(|(&n, &k)| local.kind(n) == Some(k))
        && schema
            .edges
            .iter()
            .all(|&(a, r, b)| local.has_edge(nodes[a], r, nodes[b]))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanStep {
    pub schema_id: SchemaId,
    /// Node per slot; empty for STOP and EMPTY.
    pub nodes: Vec<NodeId>,
}

impl PlanStep {
    pub fn stop() -> Self {
        PlanStep {
            schema_id: STOP,
            nodes: Vec::new(),
        }
    }

    pub fn empty() -> Self {
        PlanStep {
            schema_id: EMPTY,
            nodes: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocumentPlan {
    pub steps: Vec<PlanStep>,
}

impl DocumentPlan {
    pub fn is_complete(&self) -> bool {
        self.steps.last().is_some_and(|s| s.schema_id == STOP)
    }

    /// Steps before STOP.
    pub fn sentences(&self) -> impl Iterator<Item = &PlanStep> {
        self.steps.iter().take_while(|s| s.schema_id != STOP)
    }

    pub fn schema_ids(&self) -> Vec<SchemaId> {
        self.steps.iter().map(|s| s.schema_id).collect()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct PlanHeader {
    format: String,
    version: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanRecord {
    pub review: usize,
    pub steps: Vec<PlanStep>,
}

pub const PLANS_FORMAT: &str = "cetp-plans";
pub const PLANS_VERSION: u32 = 1;

pub fn write_plans(path: &Path, plans: &[(usize, DocumentPlan)]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer(
        &mut f,
        &PlanHeader {
            format: PLANS_FORMAT.into(),
            version: PLANS_VERSION,
        },
    )?;
    writeln!(f)?;
    for (review, plan) in plans {
        serde_json::to_writer(
            &mut f,
            &PlanRecord {
                review: *review,
                steps: plan.steps.clone(),
            },
        )?;
        writeln!(f)?;
    }
    Ok(())
}

pub fn read_plans(path: &Path) -> Result<Vec<(usize, DocumentPlan)>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let name = path.display().to_string();
    let mut out = Vec::new();
    for (i, line) in f.lines().enumerate() {
        let line = line?;
        if i == 0 {
            let h: PlanHeader = serde_json::from_str(&line).map_err(|e| Error::Parse {
                path: name.clone(),
                line: 1,
                msg: e.to_string(),
            })?;
            if h.format != PLANS_FORMAT || h.version != PLANS_VERSION {
                return Err(Error::Version {
                    what: name,
                    expected: format!("{PLANS_FORMAT} v{PLANS_VERSION}"),
                    found: format!("{} v{}", h.format, h.version),
                });
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let rec: PlanRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: name.clone(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push((rec.review, DocumentPlan { steps: rec.steps }));
    }
    Ok(out)
}
