//! Synthetic corpora with planted plan statistics.
//!
//! Items get one actor, genre and director plus up to two extra neighbors;
//! directors carry one or two keywords. Every user follows a fixed schema
//! sequence ("habit") drawn from a Markov chain over a small schema pool, and
//! habits are allocated to users by largest remainder so the corpus-level
//! schema bigrams track the chain. Each planned subgraph is verbalized with
//! one template whose node slots are copyable surfaces.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{split_indices, Corpus, GenerationContext, IngestStats, Mention, ReviewDocument, Sentence, Vocab};
use crate::error::{Error, Result};
use crate::hkg::{Hkg, NodeId, NodeKind, NodeRegistry, RelationTable, Triple};
use crate::mining::{induced_labeled, schema_of, DEFAULT_MAX_SLOTS, EMPTY_CODE, STOP_CODE};

pub const START_CODE: &str = "START";

/// Relations of the synthetic item graph, in interning order.
pub const SYNTH_RELATIONS: [&str; 4] = ["actor", "genre", "director", "studio"];
const ACTOR: usize = 0;
const GENRE: usize = 1;
const DIRECTOR: usize = 2;

const KEYWORDS: [&str; 16] = [
    "gripping", "witty", "bleak", "tender", "slow", "stylish", "tense", "warm", "grim", "playful",
    "moody", "clever", "quiet", "brash", "lush", "raw",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Slot {
    Item,
    /// The smallest-id entity linked to the item by this relation.
    Entity(usize),
    /// The smallest-id keyword of the entity in the given slot.
    Keyword(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Tok {
    Word(&'static str),
    Slot(usize),
}

/// One entry of the schema pool: slots plus the sentence template.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SynthSchema {
    pub name: &'static str,
    /// Empty for the EMPTY entry.
    pub slots: Vec<Slot>,
    pub template: Vec<Tok>,
}

/// Schema pool with a Markov chain over it. `transition[0]` is START;
/// `transition[1 + p]` follows pool entry `p`. Columns are pool entries
/// followed by STOP.
#[derive(Clone, Debug, PartialEq)]
pub struct SchemaPool {
    pub schemas: Vec<SynthSchema>,
    pub transition: Vec<Vec<f64>>,
    /// Sentences per review; STOP is forced after this many.
    pub max_sentences: usize,
}

impl SchemaPool {
    fn validate(&self) -> Result<()> {
        let k = self.schemas.len();
        if self.transition.len() != k + 1 || self.transition.iter().any(|r| r.len() != k + 1) {
            return Err(Error::Config("transition matrix must be (pool + 1) square".into()));
        }
        for row in &self.transition {
            if row.iter().any(|&p| p < 0.0) || (row.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return Err(Error::Config("transition rows must be distributions".into()));
            }
        }
        if self.max_sentences == 0 {
            return Err(Error::Config("max_sentences must be >= 1".into()));
        }
        Ok(())
    }

    /// Every schema sequence the chain can emit, with its probability.
    pub fn sequences(&self) -> Vec<(Vec<usize>, f64)> {
        let k = self.schemas.len();
        let mut out = Vec::new();
        let mut stack = vec![(Vec::new(), 0usize, 1.0)];
        while let Some((seq, state, p)) = stack.pop() {
            if seq.len() == self.max_sentences {
                out.push((seq, p));
                continue;
            }
            let row = &self.transition[state];
            if row[k] > 0.0 {
                out.push((seq.clone(), p * row[k]));
            }
            for (next, &q) in row[..k].iter().enumerate() {
                if q > 0.0 {
                    let mut s = seq.clone();
                    s.push(next);
                    stack.push((s, next + 1, p * q));
                }
            }
        }
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    /// Expected bigram distribution of the chain, START and STOP included.
    /// Keys are pool names mapped through `code`.
    pub fn bigram_reference(&self, code: impl Fn(usize) -> String) -> BTreeMap<(String, String), f64> {
        let mut counts: BTreeMap<(String, String), f64> = BTreeMap::new();
        for (seq, p) in self.sequences() {
            for (a, b) in sequence_bigrams(&seq.iter().map(|&s| code(s)).collect::<Vec<_>>()) {
                *counts.entry((a, b)).or_insert(0.0) += p;
            }
        }
        normalize(counts)
    }
}

/// `(START, s1), (s1, s2), ..., (sn, STOP)`.
pub fn sequence_bigrams(codes: &[String]) -> Vec<(String, String)> {
    let mut full = Vec::with_capacity(codes.len() + 2);
    full.push(START_CODE.to_string());
    full.extend(codes.iter().cloned());
    full.push(STOP_CODE.to_string());
    full.windows(2).map(|w| (w[0].clone(), w[1].clone())).collect()
}

fn normalize(counts: BTreeMap<(String, String), f64>) -> BTreeMap<(String, String), f64> {
    let total: f64 = counts.values().sum();
    counts.into_iter().map(|(k, v)| (k, v / total)).collect()
}

/// Item/actor, item/genre, director/keyword and a two-entity schema, plus
/// EMPTY. EMPTY runs make the next schema depend on more than the last
/// step.
pub fn default_pool() -> SchemaPool {
    use Tok::{Slot as S, Word as W};
    let schemas = vec![
        SynthSchema {
            name: "empty",
            slots: vec![],
            template: vec![W("i"), W("would"), W("watch"), W("it"), W("again"), W(".")],
        },
        SynthSchema {
            name: "cast",
            slots: vec![Slot::Item, Slot::Entity(ACTOR)],
            template: vec![S(0), W("stars"), S(1), W(".")],
        },
        SynthSchema {
            name: "genre",
            slots: vec![Slot::Item, Slot::Entity(GENRE)],
            template: vec![S(0), W("is"), W("a"), S(1), W("film"), W(".")],
        },
        SynthSchema {
            name: "direction",
            slots: vec![Slot::Item, Slot::Entity(DIRECTOR), Slot::Keyword(1)],
            template: vec![S(1), W("directed"), S(0), W("and"), W("it"), W("feels"), S(2), W(".")],
        },
        SynthSchema {
            name: "cast_genre",
            slots: vec![Slot::Item, Slot::Entity(ACTOR), Slot::Entity(GENRE)],
            template: vec![S(1), W("shines"), W("in"), W("this"), S(2), W("story"), W("about"), S(0), W(".")],
        },
    ];
    //             empty cast genre direction cast_genre STOP
    let transition = vec![
        vec![0.25, 0.4, 0.15, 0.0, 0.2, 0.0], // START
        vec![0.45, 0.0, 0.25, 0.0, 0.0, 0.3], // empty
        vec![0.2, 0.0, 0.5, 0.3, 0.0, 0.0],   // cast
        vec![0.3, 0.0, 0.0, 0.4, 0.0, 0.3],   // genre
        vec![0.4, 0.2, 0.0, 0.0, 0.0, 0.4],   // direction
        vec![0.3, 0.0, 0.0, 0.5, 0.0, 0.2],   // cast_genre
    ];
    SchemaPool {
        schemas,
        transition,
        max_sentences: 4,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub seed: u64,
    pub n_users: usize,
    pub n_items: usize,
    pub n_reviews: usize,
    pub split: [f64; 3],
}

impl SynthSpec {
    pub fn new(seed: u64, n_users: usize, n_items: usize, n_reviews: usize) -> Self {
        SynthSpec {
            seed,
            n_users,
            n_items,
            n_reviews,
            split: [0.8, 0.1, 0.1],
        }
    }
}

/// Ground truth recorded by the generator.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PlantedStats {
    /// Occurrences of each canonical schema code over non-empty sentences.
    pub schema_counts: BTreeMap<String, u64>,
    /// Pool indices of every review's sentences.
    pub plans: Vec<Vec<usize>>,
    /// Canonical code of every pool entry (EMPTY for the empty entry).
    pub pool_codes: Vec<String>,
    /// Habit of each user, by user order.
    pub habits: Vec<Vec<usize>>,
    /// Expected schema-bigram distribution of the chain, as
    /// `(from, to, probability)` over canonical codes.
    pub bigram_reference: Vec<(String, String, f64)>,
}

impl PlantedStats {
    pub fn reference_map(&self) -> BTreeMap<(String, String), f64> {
        self.bigram_reference
            .iter()
            .map(|(a, b, p)| ((a.clone(), b.clone()), *p))
            .collect()
    }
}

pub struct SynthCorpus {
    pub corpus: Corpus,
    pub hkg: Hkg,
    pub planted: PlantedStats,
}

struct World {
    registry: NodeRegistry,
    relations: RelationTable,
    triples: Vec<Triple>,
    planted_co: Vec<(NodeId, NodeId)>,
    users: Vec<NodeId>,
    items: Vec<NodeId>,
    /// Per item, per relation: linked entities in id order.
    links: BTreeMap<(NodeId, usize), Vec<NodeId>>,
    keywords_of: BTreeMap<NodeId, Vec<NodeId>>,
}

fn build_world(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Result<World> {
    let mut registry = NodeRegistry::new();
    let mut relations = RelationTable::new();
    let rel_ids: Vec<_> = SYNTH_RELATIONS.iter().map(|r| relations.intern(r)).collect();
    let users = (0..spec.n_users)
        .map(|u| registry.register(&format!("user_{u}"), NodeKind::User))
        .collect::<Result<Vec<_>>>()?;
    let items = (0..spec.n_items)
        .map(|i| registry.register(&format!("movie_{i}"), NodeKind::Item))
        .collect::<Result<Vec<_>>>()?;
    let pool_size = (spec.n_items / 2).max(2);
    let mut entities: Vec<Vec<NodeId>> = Vec::new();
    for rel in SYNTH_RELATIONS {
        entities.push(
            (0..pool_size)
                .map(|e| registry.register(&format!("{rel}_{e}"), NodeKind::Entity))
                .collect::<Result<Vec<_>>>()?,
        );
    }
    let keywords: Vec<NodeId> = KEYWORDS
        .iter()
        .map(|k| registry.register(k, NodeKind::Keyword))
        .collect::<Result<Vec<_>>>()?;

    let mut triples = Vec::new();
    let mut links: BTreeMap<(NodeId, usize), Vec<NodeId>> = BTreeMap::new();
    for &item in &items {
        let mut rels = vec![ACTOR, GENRE, DIRECTOR];
        for _ in 0..rng.gen_range(0..=2) {
            rels.push(rng.gen_range(0..SYNTH_RELATIONS.len()));
        }
        for r in rels {
            let e = *entities[r].choose(rng).expect("non-empty pool");
            let list = links.entry((item, r)).or_default();
            if !list.contains(&e) {
                list.push(e);
                list.sort_unstable();
                triples.push(Triple::new(item, rel_ids[r], e));
            }
        }
    }
    let mut keywords_of: BTreeMap<NodeId, Vec<NodeId>> = BTreeMap::new();
    let mut planted_co = Vec::new();
    for (r, pool) in entities.iter().enumerate() {
        for &e in pool {
            let lo = if r == DIRECTOR { 1 } else { 0 };
            let count = rng.gen_range(lo..=2);
            let mut ks: Vec<NodeId> = keywords
                .choose_multiple(rng, count)
                .copied()
                .collect();
            ks.sort_unstable();
            for &k in &ks {
                planted_co.push((e, k));
            }
            keywords_of.insert(e, ks);
        }
    }
    Ok(World {
        registry,
        relations,
        triples,
        planted_co,
        users,
        items,
        links,
        keywords_of,
    })
}

fn fill_slots(world: &World, item: NodeId, slots: &[Slot]) -> Vec<NodeId> {
    let mut out: Vec<NodeId> = Vec::with_capacity(slots.len());
    for s in slots {
        let n = match *s {
            Slot::Item => item,
            Slot::Entity(r) => world.links[&(item, r)][0],
            Slot::Keyword(of) => world.keywords_of[&out[of]][0],
        };
        out.push(n);
    }
    out
}

fn verbalize(world: &World, schema: &SynthSchema, nodes: &[NodeId]) -> Sentence {
    let mut words = Vec::new();
    let mut mentions = Vec::new();
    for t in &schema.template {
        match *t {
            Tok::Word(w) => words.push(w.to_string()),
            Tok::Slot(s) => {
                let surface = world.registry.surface(nodes[s]);
                mentions.push(Mention {
                    node: nodes[s],
                    start: words.len(),
                    end: words.len() + surface.len(),
                    copyable: true,
                });
                words.extend(surface.iter().cloned());
            }
        }
    }
    Sentence::new(words, mentions)
}

/// Largest-remainder allocation of `n` users over the chain's sequences.
fn allocate_habits(pool: &SchemaPool, n: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let seqs = pool.sequences();
    let mut alloc: Vec<(usize, f64, usize)> = seqs
        .iter()
        .enumerate()
        .map(|(i, (_, p))| {
            let exact = p * n as f64;
            (exact.floor() as usize, exact - exact.floor(), i)
        })
        .collect();
    let assigned: usize = alloc.iter().map(|a| a.0).sum();
    let mut order: Vec<usize> = (0..alloc.len()).collect();
    order.sort_by(|&a, &b| alloc[b].1.total_cmp(&alloc[a].1).then(a.cmp(&b)));
    for &i in order.iter().take(n - assigned) {
        alloc[i].0 += 1;
    }
    let mut habits: Vec<Vec<usize>> = alloc
        .iter()
        .flat_map(|&(c, _, i)| std::iter::repeat(seqs[i].0.clone()).take(c))
        .collect();
    habits.shuffle(rng);
    habits
}

/// Generates a corpus and its HKG from `spec` and `pool`.
pub fn synth_corpus(spec: &SynthSpec, pool: &SchemaPool) -> Result<SynthCorpus> {
    pool.validate()?;
    if spec.n_users == 0 || spec.n_items == 0 {
        return Err(Error::Config("synthetic corpus needs at least one user and item".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let world = build_world(spec, &mut rng)?;
    let habits = allocate_habits(pool, spec.n_users, &mut rng);

    let mut reviews = Vec::with_capacity(spec.n_reviews);
    let mut plans = Vec::with_capacity(spec.n_reviews);
    let mut interactions = Vec::new();
    for r in 0..spec.n_reviews {
        let u = r % spec.n_users;
        let item = *world.items.choose(&mut rng).expect("items exist");
        let rating = rng.gen_range(1..=5u8);
        let habit = &habits[u];
        let sentences = habit
            .iter()
            .map(|&p| {
                let sc = &pool.schemas[p];
                verbalize(&world, sc, &fill_slots(&world, item, &sc.slots))
            })
            .collect();
        interactions.push((world.users[u], item));
        reviews.push(ReviewDocument {
            ctx: GenerationContext {
                user: world.users[u],
                item,
                rating,
            },
            sentences,
        });
        plans.push(habit.clone());
    }

    let mut cooccur = crate::corpus::count_cooccurrence(&reviews, &world.registry);
    for &pair in &world.planted_co {
        *cooccur.entry(pair).or_insert(0) += 2;
    }
    let hkg = Hkg::build(&world.registry, &world.relations, &world.triples, &interactions, &cooccur, 2)?;

    // canonical codes of pool entries, computed on a witness instance
    let witness = world.items[0];
    let mut pool_codes = Vec::with_capacity(pool.schemas.len());
    for sc in &pool.schemas {
        if sc.slots.is_empty() {
            pool_codes.push(EMPTY_CODE.to_string());
            continue;
        }
        let nodes = fill_slots(&world, witness, &sc.slots);
        let g = induced_labeled(&hkg, &nodes);
        pool_codes.push(schema_of(&g, hkg.relations(), DEFAULT_MAX_SLOTS)?.0.code);
    }
    let mut schema_counts = BTreeMap::new();
    for plan in &plans {
        for &p in plan {
            if !pool.schemas[p].slots.is_empty() {
                *schema_counts.entry(pool_codes[p].clone()).or_insert(0) += 1;
            }
        }
    }
    let bigram_reference = pool
        .bigram_reference(|p| pool_codes[p].clone())
        .into_iter()
        .map(|((a, b), p)| (a, b, p))
        .collect();

    let splits = split_indices(reviews.len(), spec.split, spec.seed);
    let vocab = Vocab::build(
        reviews
            .iter()
            .zip(&splits)
            .filter(|(_, s)| **s == crate::corpus::Split::Train)
            .flat_map(|(r, _)| r.sentences.iter().flat_map(|s| s.words.iter().map(String::as_str))),
        30_000,
    );
    let stats = IngestStats {
        reviews_read: reviews.len(),
        ..IngestStats::default()
    };
    Ok(SynthCorpus {
        corpus: Corpus {
            registry: world.registry,
            relations: world.relations,
            reviews,
            splits,
            vocab,
            stats,
        },
        hkg,
        planted: PlantedStats {
            schema_counts,
            plans,
            pool_codes,
            habits,
            bigram_reference,
        },
    })
}
