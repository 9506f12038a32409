//! Heterogeneous knowledge graph: item KG triples augmented with user-item
//! interaction edges and entity-keyword co-occurrence edges.
//!
//! Every stored edge has its inverse stored as well, so adjacency lists can be
//! walked in either direction. Relation ids come in forward/inverse pairs.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u32);

impl NodeId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeKind {
    User,
    Item,
    Entity,
    Keyword,
}

impl NodeKind {
    pub fn as_str(self) -> &'static str {
        match self {
            NodeKind::User => "user",
            NodeKind::Item => "item",
            NodeKind::Entity => "entity",
            NodeKind::Keyword => "keyword",
        }
    }

    pub fn code(self) -> char {
        match self {
            NodeKind::User => 'U',
            NodeKind::Item => 'I',
            NodeKind::Entity => 'E',
            NodeKind::Keyword => 'W',
        }
    }

    pub fn from_code(c: char) -> Option<Self> {
        match c {
            'U' => Some(NodeKind::User),
            'I' => Some(NodeKind::Item),
            'E' => Some(NodeKind::Entity),
            'W' => Some(NodeKind::Keyword),
            _ => None,
        }
    }
}

impl std::str::FromStr for NodeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "user" => Ok(NodeKind::User),
            "item" => Ok(NodeKind::Item),
            "entity" => Ok(NodeKind::Entity),
            "keyword" | "word" => Ok(NodeKind::Keyword),
            other => Err(Error::InvalidGraph(format!("unknown node kind '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RelationId(pub u32);

impl RelationId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// Interaction relation (user -> item).
pub const R_INT: RelationId = RelationId(0);
/// Co-occurrence relation (entity -> keyword).
pub const R_CO: RelationId = RelationId(2);

pub const R_INT_NAME: &str = "interact";
pub const R_CO_NAME: &str = "cooccur";
const INVERSE_PREFIX: char = '~';

#[derive(Clone, Debug, PartialEq, Eq)]
struct Relation {
    name: String,
    inverse: RelationId,
    forward: bool,
}

/// Relation vocabulary. Relations are interned in forward/inverse pairs:
/// forward ids are even, the inverse is `id + 1` and is named `~name`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RelationTable {
    rels: Vec<Relation>,
    by_name: HashMap<String, RelationId>,
}

impl Default for RelationTable {
    fn default() -> Self {
        Self::new()
    }
}

impl RelationTable {
    pub fn new() -> Self {
        let mut table = RelationTable {
            rels: Vec::new(),
            by_name: HashMap::new(),
        };
        let int = table.intern(R_INT_NAME);
        let co = table.intern(R_CO_NAME);
        debug_assert_eq!((int, co), (R_INT, R_CO));
        table
    }

    /// Returns the id for `name`, creating the forward/inverse pair on first use.
    /// A leading `~` names the inverse of an existing or new relation.
    pub fn intern(&mut self, name: &str) -> RelationId {
        if let Some(&id) = self.by_name.get(name) {
            return id;
        }
        let base = name.trim_start_matches(INVERSE_PREFIX);
        let forward_id = RelationId(self.rels.len() as u32);
        let inverse_id = RelationId(forward_id.0 + 1);
        let inverse_name = format!("{INVERSE_PREFIX}{base}");
        self.rels.push(Relation {
            name: base.to_string(),
            inverse: inverse_id,
            forward: true,
        });
        self.rels.push(Relation {
            name: inverse_name.clone(),
            inverse: forward_id,
            forward: false,
        });
        self.by_name.insert(base.to_string(), forward_id);
        self.by_name.insert(inverse_name, inverse_id);
        if name.starts_with(INVERSE_PREFIX) {
            inverse_id
        } else {
            forward_id
        }
    }

    pub fn get(&self, name: &str) -> Option<RelationId> {
        self.by_name.get(name).copied()
    }

    pub fn name(&self, id: RelationId) -> &str {
        &self.rels[id.index()].name
    }

    pub fn inverse(&self, id: RelationId) -> RelationId {
        self.rels[id.index()].inverse
    }

    pub fn is_forward(&self, id: RelationId) -> bool {
        self.rels[id.index()].forward
    }

    pub fn contains(&self, id: RelationId) -> bool {
        id.index() < self.rels.len()
    }

    pub fn len(&self) -> usize {
        self.rels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rels.is_empty()
    }

    /// Forward relation names in id order.
    pub fn forward_names(&self) -> impl Iterator<Item = (RelationId, &str)> {
        self.rels
            .iter()
            .enumerate()
            .filter(|(_, r)| r.forward)
            .map(|(i, r)| (RelationId(i as u32), r.name.as_str()))
    }
}

/// Named nodes with kinds and surface tokens.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct NodeRegistry {
    names: Vec<String>,
    kinds: Vec<NodeKind>,
    surfaces: Vec<Vec<String>>,
    by_name: HashMap<String, NodeId>,
}

impl NodeRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers `name` with `kind`. Re-registering with the same kind returns
    /// the existing id; a different kind is an error.
    pub fn register(&mut self, name: &str, kind: NodeKind) -> Result<NodeId> {
        if let Some(&id) = self.by_name.get(name) {
            if self.kinds[id.index()] != kind {
                return Err(Error::InvalidGraph(format!(
                    "node '{name}' declared as both {} and {}",
                    self.kinds[id.index()].as_str(),
                    kind.as_str()
                )));
            }
            return Ok(id);
        }
        let id = NodeId(self.names.len() as u32);
        self.names.push(name.to_string());
        self.kinds.push(kind);
        self.surfaces.push(crate::corpus::surface_tokens(name));
        self.by_name.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn get(&self, name: &str) -> Option<NodeId> {
        self.by_name.get(name).copied()
    }

    pub fn lookup(&self, name: &str) -> Result<NodeId> {
        self.get(name)
            .ok_or_else(|| Error::UnknownNode(name.to_string()))
    }

    pub fn name(&self, id: NodeId) -> &str {
        &self.names[id.index()]
    }

    pub fn kind(&self, id: NodeId) -> NodeKind {
        self.kinds[id.index()]
    }

    /// Lowercased surface tokens used when a node is verbalized.
    pub fn surface(&self, id: NodeId) -> &[String] {
        &self.surfaces[id.index()]
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = NodeId> {
        (0..self.names.len() as u32).map(NodeId)
    }

    pub fn ids_of_kind(&self, kind: NodeKind) -> Vec<NodeId> {
        self.ids().filter(|&id| self.kind(id) == kind).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Triple {
    pub head: NodeId,
    pub relation: RelationId,
    pub tail: NodeId,
}

impl Triple {
    pub fn new(head: NodeId, relation: RelationId, tail: NodeId) -> Self {
        Triple {
            head,
            relation,
            tail,
        }
    }
}

/// A heterogeneous knowledge graph (or an induced local view of one).
///
/// Immutable after construction; adjacency lists are sorted by
/// `(relation, neighbor)` which fixes BFS tie-breaking.
#[derive(Clone, Debug, PartialEq)]
pub struct Hkg {
    relations: RelationTable,
    kinds: BTreeMap<NodeId, NodeKind>,
    adj: BTreeMap<NodeId, Vec<(RelationId, NodeId)>>,
    cooccur: BTreeMap<(NodeId, NodeId), u32>,
}

fn kind_error(
    registry: &NodeRegistry,
    relations: &RelationTable,
    t: &Triple,
    reason: &str,
) -> Error {
    Error::KindMismatch {
        head: registry.name(t.head).to_string(),
        relation: relations.name(t.relation).to_string(),
        tail: registry.name(t.tail).to_string(),
        reason: reason.to_string(),
    }
}

fn check_triple(registry: &NodeRegistry, relations: &RelationTable, t: &Triple) -> Result<()> {
    for n in [t.head, t.tail] {
        if n.index() >= registry.len() {
            return Err(Error::UnknownNode(format!("#{}", n.0)));
        }
    }
    if !relations.contains(t.relation) {
        return Err(Error::UnknownRelation(format!("#{}", t.relation.0)));
    }
    if t.head == t.tail {
        return Err(Error::SelfLoop(registry.name(t.head).to_string()));
    }
    let (hk, tk) = (registry.kind(t.head), registry.kind(t.tail));
    // normalize to the forward direction before checking
    let (fwd, hk, tk) = if relations.is_forward(t.relation) {
        (t.relation, hk, tk)
    } else {
        (relations.inverse(t.relation), tk, hk)
    };
    let ok = match fwd {
        R_INT => hk == NodeKind::User && tk == NodeKind::Item,
        R_CO => hk == NodeKind::Entity && tk == NodeKind::Keyword,
        _ => {
            matches!(hk, NodeKind::Item | NodeKind::Entity)
                && matches!(tk, NodeKind::Item | NodeKind::Entity)
        }
    };
    if ok {
        Ok(())
    } else {
        let reason = match fwd {
            R_INT => "interaction edges must connect user -> item",
            R_CO => "co-occurrence edges must connect entity -> keyword",
            _ => "KG relations must connect item/entity nodes",
        };
        Err(kind_error(registry, relations, t, reason))
    }
}

impl Hkg {
    pub fn empty(relations: RelationTable) -> Self {
        Hkg {
            relations,
            kinds: BTreeMap::new(),
            adj: BTreeMap::new(),
            cooccur: BTreeMap::new(),
        }
    }

    /// Builds the HKG from KG triples, user-item interactions and
    /// precomputed entity-keyword co-occurrence counts.
    ///
    /// Every node in `registry` becomes a graph node. KG triples and
    /// interactions are deduplicated; a co-occurrence pair becomes an edge when
    /// its count reaches `min_cooccur`.
    pub fn build(
        registry: &NodeRegistry,
        relations: &RelationTable,
        kg_triples: &[Triple],
        interactions: &[(NodeId, NodeId)],
        cooccurrence: &BTreeMap<(NodeId, NodeId), u32>,
        min_cooccur: u32,
    ) -> Result<Hkg> {
        if min_cooccur == 0 {
            return Err(Error::Config("min_cooccur must be >= 1".into()));
        }
        let mut forward: BTreeSet<Triple> = BTreeSet::new();
        for t in kg_triples {
            if t.relation == R_INT || t.relation == R_CO {
                return Err(kind_error(
                    registry,
                    relations,
                    t,
                    "reserved relation used in KG triples",
                ));
            }
            check_triple(registry, relations, t)?;
            forward.insert(*t);
        }
        for &(u, i) in interactions {
            let t = Triple::new(u, R_INT, i);
            check_triple(registry, relations, &t)?;
            forward.insert(t);
        }
        let mut cooccur = BTreeMap::new();
        for (&(e, w), &count) in cooccurrence {
            if count < min_cooccur {
                continue;
            }
            let t = Triple::new(e, R_CO, w);
            check_triple(registry, relations, &t)?;
            forward.insert(t);
            cooccur.insert((e, w), count);
        }

        let mut g = Hkg::empty(relations.clone());
        for id in registry.ids() {
            g.kinds.insert(id, registry.kind(id));
        }
        for t in &forward {
            g.insert_pair(t);
        }
        g.cooccur = cooccur;
        g.sort_adjacency();
        Ok(g)
    }

    fn insert_pair(&mut self, t: &Triple) {
        let inv = self.relations.inverse(t.relation);
        let fwd = self.adj.entry(t.head).or_default();
        if !fwd.contains(&(t.relation, t.tail)) {
            fwd.push((t.relation, t.tail));
        }
        let back = self.adj.entry(t.tail).or_default();
        if !back.contains(&(inv, t.head)) {
            back.push((inv, t.head));
        }
    }

    fn sort_adjacency(&mut self) {
        for list in self.adj.values_mut() {
            list.sort_unstable();
            list.dedup();
        }
    }

    pub fn relations(&self) -> &RelationTable {
        &self.relations
    }

    pub fn contains(&self, n: NodeId) -> bool {
        self.kinds.contains_key(&n)
    }

    pub fn kind(&self, n: NodeId) -> Option<NodeKind> {
        self.kinds.get(&n).copied()
    }

    /// Nodes in ascending id order.
    pub fn nodes(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.kinds.keys().copied()
    }

    pub fn node_count(&self) -> usize {
        self.kinds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kinds.is_empty()
    }

    /// Directed edge count, inverses included.
    pub fn edge_count(&self) -> usize {
        self.adj.values().map(Vec::len).sum()
    }

    pub fn neighbors(&self, n: NodeId) -> &[(RelationId, NodeId)] {
        self.adj.get(&n).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn degree(&self, n: NodeId) -> usize {
        self.neighbors(n).len()
    }

    pub fn has_edge(&self, head: NodeId, relation: RelationId, tail: NodeId) -> bool {
        self.neighbors(head).binary_search(&(relation, tail)).is_ok()
    }

    /// All directed edges, inverses included, in (head, relation, tail) order.
    pub fn edges(&self) -> impl Iterator<Item = Triple> + '_ {
        self.adj
            .iter()
            .flat_map(|(&h, list)| list.iter().map(move |&(r, t)| Triple::new(h, r, t)))
    }

    /// Edges whose relation is a forward relation.
    pub fn forward_edges(&self) -> impl Iterator<Item = Triple> + '_ {
        self.edges().filter(|t| self.relations.is_forward(t.relation))
    }

    pub fn cooccurrence_count(&self, entity: NodeId, keyword: NodeId) -> u32 {
        self.cooccur.get(&(entity, keyword)).copied().unwrap_or(0)
    }

    /// Induced subgraph on `keep` (nodes absent from the graph are ignored).
    pub fn induced(&self, keep: &BTreeSet<NodeId>) -> Hkg {
        let mut g = Hkg::empty(self.relations.clone());
        for &n in keep {
            if let Some(k) = self.kind(n) {
                g.kinds.insert(n, k);
            }
        }
        for &n in keep {
            if !g.contains(n) {
                continue;
            }
            let list: Vec<_> = self
                .neighbors(n)
                .iter()
                .copied()
                .filter(|(_, m)| g.kinds.contains_key(m))
                .collect();
            if !list.is_empty() {
                g.adj.insert(n, list);
            }
        }
        g.cooccur = self
            .cooccur
            .iter()
            .filter(|((e, w), _)| g.contains(*e) && g.contains(*w))
            .map(|(&k, &v)| (k, v))
            .collect();
        g
    }
}

/// Per-(user, item) view of the HKG used for planning.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalHkg {
    pub graph: Hkg,
    pub user: NodeId,
    pub item: NodeId,
    /// True when the user had no stored interaction with the item; the edge
    /// is added to the local view only.
    pub cold_start: bool,
}

pub const DEFAULT_LOCAL_CAP: usize = 64;

/// Builds the local HKG for a (user, item) pair: the item, its one-hop
/// entity neighbors, the keywords co-occurring with those entities and the
/// user. When more than `cap` nodes qualify, entities are kept by descending
/// degree and keywords by descending co-occurrence count.
pub fn local_hkg(hkg: &Hkg, user: NodeId, item: NodeId, cap: usize) -> Result<LocalHkg> {
    for n in [user, item] {
        if !hkg.contains(n) {
            return Err(Error::UnknownNode(format!("#{}", n.0)));
        }
    }
    if hkg.kind(user) != Some(NodeKind::User) || hkg.kind(item) != Some(NodeKind::Item) {
        return Err(Error::InvalidGraph(
            "local_hkg expects a user node and an item node".into(),
        ));
    }
    let cap = cap.max(2);
    let rels = hkg.relations();

    let mut entities: Vec<NodeId> = hkg
        .neighbors(item)
        .iter()
        .filter(|(r, n)| {
            let fwd = if rels.is_forward(*r) { *r } else { rels.inverse(*r) };
            fwd != R_INT && hkg.kind(*n) == Some(NodeKind::Entity)
        })
        .map(|&(_, n)| n)
        .collect();
    entities.sort_unstable();
    entities.dedup();
    entities.sort_by(|a, b| hkg.degree(*b).cmp(&hkg.degree(*a)).then(a.cmp(b)));

    let mut keep: BTreeSet<NodeId> = BTreeSet::new();
    keep.insert(item);
    keep.insert(user);
    let mut kept_entities = Vec::new();
    for e in entities {
        if keep.len() >= cap {
            break;
        }
        keep.insert(e);
        kept_entities.push(e);
    }

    let mut keywords: BTreeMap<NodeId, u32> = BTreeMap::new();
    for &e in &kept_entities {
        for &(r, w) in hkg.neighbors(e) {
            if r == R_CO {
                let c = hkg.cooccurrence_count(e, w);
                let slot = keywords.entry(w).or_insert(0);
                *slot = (*slot).max(c);
            }
        }
    }
    let mut keywords: Vec<(NodeId, u32)> = keywords.into_iter().collect();
    keywords.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    for (w, _) in keywords {
        if keep.len() >= cap {
            break;
        }
        keep.insert(w);
    }

    // only the query user and item from the interaction layer
    let mut graph = hkg.induced(&keep);
    let cold_start = !hkg.has_edge(user, R_INT, item);
    if cold_start {
        graph.insert_pair(&Triple::new(user, R_INT, item));
        graph.sort_adjacency();
    }
    Ok(LocalHkg {
        graph,
        user,
        item,
        cold_start,
    })
}

/// Relation sequence along a shortest path, or no path within the hop limit.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum RelationPath {
    Path(Vec<RelationId>),
    NoPath,
}

impl RelationPath {
    /// The path traversed backwards, each relation replaced by its inverse.
    pub fn reversed(&self, rels: &RelationTable) -> RelationPath {
        match self {
            RelationPath::NoPath => RelationPath::NoPath,
            RelationPath::Path(p) => {
                RelationPath::Path(p.iter().rev().map(|&r| rels.inverse(r)).collect())
            }
        }
    }
}

pub const DEFAULT_MAX_HOPS: usize = 4;

/// BFS shortest relation path from `a` to `b`. Adjacency is visited in
/// `(relation, node)` order, so among shortest paths the one with the
/// lexicographically smallest (relation, intermediate node) sequence wins.
pub fn shortest_relation_path(
    hkg: &Hkg,
    a: NodeId,
    b: NodeId,
    max_hops: usize,
) -> Result<RelationPath> {
    for n in [a, b] {
        if !hkg.contains(n) {
            return Err(Error::UnknownNode(format!("#{}", n.0)));
        }
    }
    if a == b {
        return Ok(RelationPath::Path(Vec::new()));
    }
    let mut parent: HashMap<NodeId, (NodeId, RelationId)> = HashMap::new();
    let mut depth: HashMap<NodeId, usize> = HashMap::new();
    depth.insert(a, 0);
    let mut queue = VecDeque::from([a]);
    while let Some(n) = queue.pop_front() {
        let d = depth[&n];
        if d >= max_hops {
            continue;
        }
        for &(r, m) in hkg.neighbors(n) {
            if depth.contains_key(&m) {
                continue;
            }
            depth.insert(m, d + 1);
            parent.insert(m, (n, r));
            if m == b {
                let mut rels = Vec::with_capacity(d + 1);
                let mut cur = b;
                while cur != a {
                    let (p, r) = parent[&cur];
                    rels.push(r);
                    cur = p;
                }
                rels.reverse();
                return Ok(RelationPath::Path(rels));
            }
            queue.push_back(m);
        }
    }
    Ok(RelationPath::NoPath)
}

/// All-pairs relation paths over a (local) graph, in ascending node order.
#[derive(Clone, Debug)]
pub struct PathTable {
    pub nodes: Vec<NodeId>,
    paths: Vec<RelationPath>,
}

impl PathTable {
    pub fn compute(hkg: &Hkg, max_hops: usize) -> PathTable {
        let nodes: Vec<NodeId> = hkg.nodes().collect();
        let mut paths = Vec::with_capacity(nodes.len() * nodes.len());
        for &a in &nodes {
            for &b in &nodes {
                paths.push(shortest_relation_path(hkg, a, b, max_hops).expect("member nodes"));
            }
        }
        PathTable { nodes, paths }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Path from the `j`-th to the `k`-th node.
    pub fn get(&self, j: usize, k: usize) -> &RelationPath {
        &self.paths[j * self.nodes.len() + k]
    }
}
