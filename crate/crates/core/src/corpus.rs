//! Review corpus: tokenization, ingestion of the raw input files, vocabulary,
//! train/valid/test split and the on-disk dataset layout.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::DataConfig;
use crate::error::{Error, Result};
use crate::hkg::{Hkg, NodeId, NodeKind, NodeRegistry, RelationTable, Triple, R_CO, R_INT};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Lowercases and splits into word tokens (alphanumerics and `_`) and
/// single-character punctuation tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() || ch == '_' {
            cur.extend(ch.to_lowercase());
            continue;
        }
        if !cur.is_empty() {
            out.push(std::mem::take(&mut cur));
        }
        if !ch.is_whitespace() {
            out.push(ch.to_lowercase().collect());
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Tokens a node name is verbalized as; underscores separate words.
pub fn surface_tokens(name: &str) -> Vec<String> {
    tokenize(&name.replace('_', " "))
}

fn is_terminator(tok: &str) -> bool {
    matches!(tok, "." | "!" | "?")
}

/// Sentence boundaries `[start, end)` over a token sequence. A run of
/// terminators closes a sentence unless it falls inside a protected span.
pub fn segment(tokens: &[String], protected: &[(usize, usize)]) -> Vec<(usize, usize)> {
    let inside = |i: usize| protected.iter().any(|&(s, e)| i >= s && i < e);
    let mut out = Vec::new();
    let mut start = 0;
    let mut i = 0;
    while i < tokens.len() {
        if is_terminator(&tokens[i]) && !inside(i) {
            while i + 1 < tokens.len() && is_terminator(&tokens[i + 1]) && !inside(i + 1) {
                i += 1;
            }
            out.push((start, i + 1));
            start = i + 1;
        }
        i += 1;
    }
    if start < tokens.len() {
        out.push((start, tokens.len()));
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    /// Specials followed by the `max_words` most frequent words (ties by
    /// word order).
    pub fn build<'a>(words: impl IntoIterator<Item = &'a str>, max_words: usize) -> Vocab {
        let mut counts: BTreeMap<&str, u64> = BTreeMap::new();
        for w in words {
            *counts.entry(w).or_insert(0) += 1;
        }
        let mut ranked: Vec<(&str, u64)> = counts
            .into_iter()
            .filter(|(w, _)| !SPECIALS.contains(w))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        ranked.truncate(max_words);
        Vocab::from_words(ranked.into_iter().map(|(w, _)| w.to_string()))
    }

    fn from_words(words: impl IntoIterator<Item = String>) -> Vocab {
        let mut v = Vocab {
            words: Vec::new(),
            index: HashMap::new(),
        };
        for w in SPECIALS.iter().map(|s| s.to_string()).chain(words) {
            if !v.index.contains_key(&w) {
                v.index.insert(w.clone(), v.words.len() as u32);
                v.words.push(w);
            }
        }
        v
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, word: &str) -> u32 {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn word(&self, id: u32) -> &str {
        &self.words[id as usize]
    }

    const HEADER: &'static str = "#cetp-vocab v1";

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "{}", Self::HEADER)?;
        for w in &self.words[SPECIALS.len()..] {
            writeln!(f, "{w}")?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Vocab> {
        let text = std::fs::read_to_string(path)?;
        let mut lines = text.lines();
        check_header(path, lines.next(), Self::HEADER)?;
        Ok(Vocab::from_words(lines.map(str::to_string)))
    }
}

fn check_header(path: &Path, found: Option<&str>, expected: &str) -> Result<()> {
    let found = found.unwrap_or("").trim();
    if found != expected {
        return Err(Error::Version {
            what: path.display().to_string(),
            expected: expected.into(),
            found: found.into(),
        });
    }
    Ok(())
}

/// Sentence-relative mention `[start, end)` of a graph node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct Mention {
    pub node: NodeId,
    pub start: usize,
    pub end: usize,
    /// The span equals the node's surface tokens, so it can be copied.
    pub copyable: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sentence {
    pub words: Vec<String>,
    /// Copy indicator per token: `false` where the token is copied from a
    /// mentioned node, `true` where it is generated.
    pub gen: Vec<bool>,
    /// Non-overlapping, sorted by start.
    pub mentions: Vec<Mention>,
}

impl Sentence {
    /// Builds a sentence and derives copy indicators from copyable mentions.
    pub fn new(words: Vec<String>, mut mentions: Vec<Mention>) -> Sentence {
        mentions.sort_by_key(|m| (m.start, m.end, m.node));
        let mut gen = vec![true; words.len()];
        for m in &mentions {
            if m.copyable {
                gen[m.start..m.end].iter_mut().for_each(|g| *g = false);
            }
        }
        Sentence {
            words,
            gen,
            mentions,
        }
    }

    pub fn nodes(&self) -> Vec<NodeId> {
        self.mentions.iter().map(|m| m.node).collect()
    }

    pub fn ids(&self, vocab: &Vocab) -> Vec<u32> {
        self.words.iter().map(|w| vocab.id(w)).collect()
    }

    pub fn text(&self) -> String {
        self.words.join(" ")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GenerationContext {
    pub user: NodeId,
    pub item: NodeId,
    /// 1-based rating.
    pub rating: u8,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReviewDocument {
    pub ctx: GenerationContext,
    pub sentences: Vec<Sentence>,
}

impl ReviewDocument {
    pub fn token_count(&self) -> usize {
        self.sentences.iter().map(|s| s.words.len()).sum()
    }

    pub fn sentence_mentions(&self) -> Vec<Vec<NodeId>> {
        self.sentences.iter().map(Sentence::nodes).collect()
    }

    /// Checks span bounds, ordering, surface agreement and copy labels.
    pub fn validate(&self, registry: &NodeRegistry, max_tokens: usize) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidGraph(m));
        if self.token_count() > max_tokens {
            return bad(format!("review longer than {max_tokens} tokens"));
        }
        for (si, s) in self.sentences.iter().enumerate() {
            if s.gen.len() != s.words.len() {
                return bad(format!("sentence {si}: label count differs from token count"));
            }
            let mut last_end = 0;
            let mut copied = vec![false; s.words.len()];
            for m in &s.mentions {
                if m.start >= m.end || m.end > s.words.len() || m.start < last_end {
                    return bad(format!("sentence {si}: bad mention span"));
                }
                if m.node.index() >= registry.len() {
                    return bad(format!("sentence {si}: unknown node #{}", m.node.0));
                }
                let surface_match = s.words[m.start..m.end] == *registry.surface(m.node);
                if m.copyable != surface_match {
                    return bad(format!("sentence {si}: copyable flag disagrees with surface"));
                }
                if m.copyable {
                    copied[m.start..m.end].iter_mut().for_each(|c| *c = true);
                }
                last_end = m.end;
            }
            for (t, (&g, &c)) in s.gen.iter().zip(&copied).enumerate() {
                if g == c {
                    return bad(format!("sentence {si}, token {t}: copy label mismatch"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestStats {
    pub reviews_read: usize,
    pub filtered_long: usize,
    pub filtered_empty: usize,
    pub dropped_mentions: usize,
    pub keyword_mentions: usize,
}

/// Reviews with their split labels plus everything needed to rebuild the HKG.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub registry: NodeRegistry,
    pub relations: RelationTable,
    pub reviews: Vec<ReviewDocument>,
    pub splits: Vec<Split>,
    pub vocab: Vocab,
    pub stats: IngestStats,
}

impl Corpus {
    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.reviews.len())
            .filter(|&i| self.splits[i] == split)
            .collect()
    }

    /// Dense index of each node of `kind`, in id order.
    pub fn kind_index(&self, kind: NodeKind) -> HashMap<NodeId, usize> {
        self.registry
            .ids_of_kind(kind)
            .into_iter()
            .enumerate()
            .map(|(i, n)| (n, i))
            .collect()
    }
}

/// Seeded split into train/valid/test by the given proportions.
pub fn split_indices(n: usize, proportions: [f64; 3], seed: u64) -> Vec<Split> {
    let total: f64 = proportions.iter().sum();
    let n_train = ((n as f64) * proportions[0] / total).round() as usize;
    let n_valid = (((n as f64) * proportions[1] / total).round() as usize).min(n - n_train.min(n));
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut out = vec![Split::Test; n];
    for (rank, &i) in order.iter().enumerate() {
        out[i] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_valid {
            Split::Valid
        } else {
            Split::Test
        };
    }
    out
}

/// Entity-keyword co-occurrence counts, once per sentence.
pub fn count_cooccurrence(
    reviews: &[ReviewDocument],
    registry: &NodeRegistry,
) -> BTreeMap<(NodeId, NodeId), u32> {
    let mut counts = BTreeMap::new();
    for r in reviews {
        for s in &r.sentences {
            let mut ents: Vec<NodeId> = Vec::new();
            let mut kws: Vec<NodeId> = Vec::new();
            for m in &s.mentions {
                match registry.kind(m.node) {
                    NodeKind::Entity => ents.push(m.node),
                    NodeKind::Keyword => kws.push(m.node),
                    _ => {}
                }
            }
            ents.sort_unstable();
            ents.dedup();
            kws.sort_unstable();
            kws.dedup();
            for &e in &ents {
                for &k in &kws {
                    *counts.entry((e, k)).or_insert(0) += 1;
                }
            }
        }
    }
    counts
}

/// Adds keyword mentions for keyword surfaces found outside existing
/// mentions (longest match first). Returns the number added.
pub fn detect_keywords(sentence: &mut Sentence, keywords: &[(NodeId, Vec<String>)]) -> usize {
    let mut taken = vec![false; sentence.words.len()];
    for m in &sentence.mentions {
        taken[m.start..m.end].iter_mut().for_each(|t| *t = true);
    }
    let mut added = Vec::new();
    let mut i = 0;
    while i < sentence.words.len() {
        let hit = keywords
            .iter()
            .filter(|(_, surf)| {
                !surf.is_empty()
                    && i + surf.len() <= sentence.words.len()
                    && sentence.words[i..i + surf.len()] == surf[..]
                    && !taken[i..i + surf.len()].iter().any(|&t| t)
            })
            .max_by(|a, b| a.1.len().cmp(&b.1.len()).then(b.0.cmp(&a.0)));
        match hit {
            Some((node, surf)) => {
                added.push(Mention {
                    node: *node,
                    start: i,
                    end: i + surf.len(),
                    copyable: true,
                });
                i += surf.len();
            }
            None => i += 1,
        }
    }
    let n = added.len();
    let mut mentions = std::mem::take(&mut sentence.mentions);
    mentions.extend(added);
    *sentence = Sentence::new(std::mem::take(&mut sentence.words), mentions);
    n
}

#[derive(Debug, Deserialize)]
struct RawMention {
    sentence_idx: usize,
    token_span: [usize; 2],
    node: String,
}

#[derive(Debug, Deserialize)]
struct RawReview {
    user: String,
    item: String,
    rating: u8,
    text: String,
    #[serde(default)]
    mentions: Vec<RawMention>,
}

fn read_tsv(path: &Path, columns: usize) -> Result<Vec<(usize, Vec<String>)>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let cols: Vec<String> = line.split('\t').map(|c| c.trim().to_string()).collect();
        if cols.len() != columns {
            return Err(Error::Parse {
                path: path.display().to_string(),
                line: i + 1,
                msg: format!("expected {columns} tab-separated columns, found {}", cols.len()),
            });
        }
        out.push((i + 1, cols));
    }
    Ok(out)
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line,
        msg: msg.into(),
    }
}

/// Reads the raw input files named in `data` under `dir`, builds the review
/// corpus and the HKG.
pub fn ingest_corpus(
    dir: &Path,
    data: &DataConfig,
    rating_levels: usize,
    seed: u64,
) -> Result<(Corpus, Hkg)> {
    let kinds_path = dir.join(&data.kinds);
    let triples_path = dir.join(&data.triples);
    let inter_path = dir.join(&data.interactions);
    let kw_path = dir.join(&data.keywords);
    let reviews_path = dir.join(&data.reviews);

    let mut registry = NodeRegistry::new();
    for (line, cols) in read_tsv(&kinds_path, 2)? {
        let kind: NodeKind = cols[1]
            .parse()
            .map_err(|_| parse_err(&kinds_path, line, format!("unknown kind '{}'", cols[1])))?;
        registry
            .register(&cols[0], kind)
            .map_err(|e| parse_err(&kinds_path, line, e.to_string()))?;
    }
    let mut keywords = Vec::new();
    let kw_text = std::fs::read_to_string(&kw_path)?;
    for (i, line) in kw_text.lines().enumerate() {
        let name = line.trim();
        if name.is_empty() || name.starts_with('#') {
            continue;
        }
        let id = registry
            .register(name, NodeKind::Keyword)
            .map_err(|e| parse_err(&kw_path, i + 1, e.to_string()))?;
        keywords.push((id, registry.surface(id).to_vec()));
    }

    let mut relations = RelationTable::new();
    let mut triples = Vec::new();
    for (line, cols) in read_tsv(&triples_path, 3)? {
        let h = registry
            .lookup(&cols[0])
            .map_err(|e| parse_err(&triples_path, line, e.to_string()))?;
        let t = registry
            .lookup(&cols[2])
            .map_err(|e| parse_err(&triples_path, line, e.to_string()))?;
        if cols[1].starts_with('~') || cols[1].contains([',', ';', '|']) {
            return Err(parse_err(&triples_path, line, "relation names may not start with '~' or contain ',', ';' or '|'"));
        }
        let r = relations.intern(&cols[1]);
        triples.push(Triple::new(h, r, t));
    }
    let mut interactions = Vec::new();
    for (line, cols) in read_tsv(&inter_path, 2)? {
        let u = registry
            .lookup(&cols[0])
            .map_err(|e| parse_err(&inter_path, line, e.to_string()))?;
        let i = registry
            .lookup(&cols[1])
            .map_err(|e| parse_err(&inter_path, line, e.to_string()))?;
        interactions.push((u, i));
    }

    let mut stats = IngestStats::default();
    let mut reviews = Vec::new();
    let f = std::io::BufReader::new(std::fs::File::open(&reviews_path)?);
    for (i, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let lineno = i + 1;
        stats.reviews_read += 1;
        let raw: RawReview = serde_json::from_str(&line)
            .map_err(|e| parse_err(&reviews_path, lineno, e.to_string()))?;
        let review = build_review(&raw, &registry, rating_levels, &mut stats)
            .map_err(|msg| parse_err(&reviews_path, lineno, msg))?;
        let Some(mut review) = review else { continue };
        if review.token_count() > data.max_review_tokens {
            stats.filtered_long += 1;
            continue;
        }
        for s in &mut review.sentences {
            stats.keyword_mentions += detect_keywords(s, &keywords);
        }
        reviews.push(review);
    }

    let splits = split_indices(reviews.len(), data.split, seed);
    let vocab = Vocab::build(
        reviews
            .iter()
            .zip(&splits)
            .filter(|(_, s)| **s == Split::Train)
            .flat_map(|(r, _)| r.sentences.iter().flat_map(|s| s.words.iter().map(String::as_str))),
        data.vocab_size,
    );
    let cooccur = count_cooccurrence(&reviews, &registry);
    let hkg = Hkg::build(
        &registry,
        &relations,
        &triples,
        &interactions,
        &cooccur,
        data.min_cooccur,
    )?;
    log::info!(
        "ingested {} reviews ({} too long, {} empty, {} mentions dropped)",
        reviews.len(),
        stats.filtered_long,
        stats.filtered_empty,
        stats.dropped_mentions
    );
    let corpus = Corpus {
        registry,
        relations,
        reviews,
        splits,
        vocab,
        stats,
    };
    Ok((corpus, hkg))
}

fn build_review(
    raw: &RawReview,
    registry: &NodeRegistry,
    rating_levels: usize,
    stats: &mut IngestStats,
) -> std::result::Result<Option<ReviewDocument>, String> {
    let user = registry.get(&raw.user).ok_or(format!("unknown user '{}'", raw.user))?;
    let item = registry.get(&raw.item).ok_or(format!("unknown item '{}'", raw.item))?;
    if registry.kind(user) != NodeKind::User || registry.kind(item) != NodeKind::Item {
        return Err("review user/item have wrong node kinds".into());
    }
    if raw.rating == 0 || raw.rating as usize > rating_levels {
        return Err(format!("rating {} outside 1..={rating_levels}", raw.rating));
    }
    let tokens = tokenize(&raw.text);
    if tokens.is_empty() {
        stats.filtered_empty += 1;
        return Ok(None);
    }
    let spans: Vec<(usize, usize)> = raw
        .mentions
        .iter()
        .map(|m| (m.token_span[0], m.token_span[1]))
        .collect();
    for &(s, e) in &spans {
        if s >= e || e > tokens.len() {
            return Err(format!("mention span [{s}, {e}) out of range"));
        }
    }
    let bounds = segment(&tokens, &spans);
    let mut per_sentence: Vec<Vec<Mention>> = vec![Vec::new(); bounds.len()];
    for m in &raw.mentions {
        let (s, e) = (m.token_span[0], m.token_span[1]);
        let idx = bounds
            .iter()
            .position(|&(bs, be)| s >= bs && e <= be)
            .ok_or("mention span crosses a sentence boundary")?;
        if idx != m.sentence_idx {
            return Err(format!(
                "mention [{s}, {e}) lies in sentence {idx}, annotated as {}",
                m.sentence_idx
            ));
        }
        let Some(node) = registry.get(&m.node) else {
            stats.dropped_mentions += 1;
            continue;
        };
        let bs = bounds[idx].0;
        per_sentence[idx].push(Mention {
            node,
            start: s - bs,
            end: e - bs,
            copyable: tokens[s..e] == *registry.surface(node),
        });
    }
    let mut sentences = Vec::new();
    for ((bs, be), mut mentions) in bounds.into_iter().zip(per_sentence) {
        mentions.sort();
        // overlapping annotations: keep the earliest
        let mut kept: Vec<Mention> = Vec::new();
        for m in mentions {
            if kept.last().is_some_and(|k| m.start < k.end) {
                stats.dropped_mentions += 1;
            } else {
                kept.push(m);
            }
        }
        sentences.push(Sentence::new(tokens[bs..be].to_vec(), kept));
    }
    Ok(Some(ReviewDocument {
        ctx: GenerationContext {
            user,
            item,
            rating: raw.rating,
        },
        sentences,
    }))
}

pub const NODES_HEADER: &str = "#cetp-nodes v1";
pub const HKG_HEADER: &str = "#cetp-hkg v1";
pub const CORPUS_FORMAT: &str = "cetp-corpus";
pub const CORPUS_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CorpusHeader {
    format: String,
    version: u32,
    stats: IngestStats,
}

#[derive(Serialize, Deserialize)]
struct MentionRecord {
    node: String,
    start: usize,
    end: usize,
}

#[derive(Serialize, Deserialize)]
struct SentenceRecord {
    words: Vec<String>,
    mentions: Vec<MentionRecord>,
}

#[derive(Serialize, Deserialize)]
struct ReviewRecord {
    user: String,
    item: String,
    rating: u8,
    split: Split,
    sentences: Vec<SentenceRecord>,
}

/// Writes `nodes.tsv`, `hkg.tsv`, `vocab.txt` and `corpus.jsonl` into `dir`.
pub fn save_dataset(dir: &Path, corpus: &Corpus, hkg: &Hkg) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let reg = &corpus.registry;
    let mut f = BufWriter::new(std::fs::File::create(dir.join("nodes.tsv"))?);
    writeln!(f, "{NODES_HEADER}")?;
    for id in reg.ids() {
        writeln!(f, "{}\t{}", reg.name(id), reg.kind(id).as_str())?;
    }
    f.flush()?;

    let rels = hkg.relations();
    let mut f = BufWriter::new(std::fs::File::create(dir.join("hkg.tsv"))?);
    writeln!(f, "{HKG_HEADER}")?;
    for (_, name) in rels.forward_names() {
        writeln!(f, "relation\t{name}")?;
    }
    for t in hkg.forward_edges() {
        let count = if t.relation == R_CO {
            hkg.cooccurrence_count(t.head, t.tail)
        } else {
            0
        };
        writeln!(
            f,
            "edge\t{}\t{}\t{}\t{count}",
            reg.name(t.head),
            rels.name(t.relation),
            reg.name(t.tail)
        )?;
    }
    f.flush()?;

    corpus.vocab.save(&dir.join("vocab.txt"))?;

    let mut f = BufWriter::new(std::fs::File::create(dir.join("corpus.jsonl"))?);
    serde_json::to_writer(
        &mut f,
        &CorpusHeader {
            format: CORPUS_FORMAT.into(),
            version: CORPUS_VERSION,
            stats: corpus.stats.clone(),
        },
    )?;
    writeln!(f)?;
    for (r, split) in corpus.reviews.iter().zip(&corpus.splits) {
        let rec = ReviewRecord {
            user: reg.name(r.ctx.user).into(),
            item: reg.name(r.ctx.item).into(),
            rating: r.ctx.rating,
            split: *split,
            sentences: r
                .sentences
                .iter()
                .map(|s| SentenceRecord {
                    words: s.words.clone(),
                    mentions: s
                        .mentions
                        .iter()
                        .map(|m| MentionRecord {
                            node: reg.name(m.node).into(),
                            start: m.start,
                            end: m.end,
                        })
                        .collect(),
                })
                .collect(),
        };
        serde_json::to_writer(&mut f, &rec)?;
        writeln!(f)?;
    }
    f.flush()?;
    Ok(())
}

/// Reads a dataset written by [`save_dataset`].
pub fn load_dataset(dir: &Path) -> Result<(Corpus, Hkg)> {
    let nodes_path = dir.join("nodes.tsv");
    let text = std::fs::read_to_string(&nodes_path)?;
    let mut lines = text.lines();
    check_header(&nodes_path, lines.next(), NODES_HEADER)?;
    let mut registry = NodeRegistry::new();
    for (i, line) in lines.enumerate() {
        let (name, kind) = line
            .split_once('\t')
            .ok_or_else(|| parse_err(&nodes_path, i + 2, "expected name<TAB>kind"))?;
        let kind: NodeKind = kind
            .parse()
            .map_err(|_| parse_err(&nodes_path, i + 2, "unknown kind"))?;
        registry
            .register(name, kind)
            .map_err(|e| parse_err(&nodes_path, i + 2, e.to_string()))?;
    }

    let hkg_path = dir.join("hkg.tsv");
    let text = std::fs::read_to_string(&hkg_path)?;
    let mut lines = text.lines();
    check_header(&hkg_path, lines.next(), HKG_HEADER)?;
    let mut relations = RelationTable::new();
    let mut triples = Vec::new();
    let mut interactions = Vec::new();
    let mut cooccur = BTreeMap::new();
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        let cols: Vec<&str> = line.split('\t').collect();
        match cols.as_slice() {
            ["relation", name] => {
                relations.intern(name);
            }
            ["edge", h, r, t, count] => {
                let h = registry
                    .lookup(h)
                    .map_err(|e| parse_err(&hkg_path, lineno, e.to_string()))?;
                let t = registry
                    .lookup(t)
                    .map_err(|e| parse_err(&hkg_path, lineno, e.to_string()))?;
                let r = relations
                    .get(r)
                    .ok_or_else(|| parse_err(&hkg_path, lineno, format!("undeclared relation '{r}'")))?;
                let count: u32 = count
                    .parse()
                    .map_err(|_| parse_err(&hkg_path, lineno, "bad count"))?;
                match r {
                    R_INT => interactions.push((h, t)),
                    R_CO => {
                        cooccur.insert((h, t), count);
                    }
                    _ => triples.push(Triple::new(h, r, t)),
                }
            }
            _ => return Err(parse_err(&hkg_path, lineno, "unrecognized line")),
        }
    }
    let hkg = Hkg::build(&registry, &relations, &triples, &interactions, &cooccur, 1)?;

    let vocab = Vocab::load(&dir.join("vocab.txt"))?;

    let corpus_path = dir.join("corpus.jsonl");
    let f = std::io::BufReader::new(std::fs::File::open(&corpus_path)?);
    let mut lines = f.lines();
    let header_line = lines.next().transpose()?.unwrap_or_default();
    let header: CorpusHeader = serde_json::from_str(&header_line)
        .map_err(|e| parse_err(&corpus_path, 1, e.to_string()))?;
    if header.format != CORPUS_FORMAT || header.version != CORPUS_VERSION {
        return Err(Error::Version {
            what: corpus_path.display().to_string(),
            expected: format!("{CORPUS_FORMAT} v{CORPUS_VERSION}"),
            found: format!("{} v{}", header.format, header.version),
        });
    }
    let mut reviews = Vec::new();
    let mut splits = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let lineno = i + 2;
        let rec: ReviewRecord = serde_json::from_str(&line)
            .map_err(|e| parse_err(&corpus_path, lineno, e.to_string()))?;
        let look = |n: &str| {
            registry
                .lookup(n)
                .map_err(|e| parse_err(&corpus_path, lineno, e.to_string()))
        };
        let mut sentences = Vec::new();
        for s in rec.sentences {
            let mut mentions = Vec::new();
            for m in s.mentions {
                let node = look(&m.node)?;
                if m.start >= m.end || m.end > s.words.len() {
                    return Err(parse_err(&corpus_path, lineno, "mention span out of range"));
                }
                mentions.push(Mention {
                    node,
                    start: m.start,
                    end: m.end,
                    copyable: s.words[m.start..m.end] == *registry.surface(node),
                });
            }
            sentences.push(Sentence::new(s.words, mentions));
        }
        reviews.push(ReviewDocument {
            ctx: GenerationContext {
                user: look(&rec.user)?,
                item: look(&rec.item)?,
                rating: rec.rating,
            },
            sentences,
        });
        splits.push(rec.split);
    }
    let corpus = Corpus {
        registry,
        relations,
        reviews,
        splits,
        vocab,
        stats: header.stats,
    };
    Ok((corpus, hkg))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    #[test]
    fn tokenizer_lowercases_and_splits_punctuation() {
        assert_eq!(
            tokenize("Great film, Tom-Hanks!  really_good"),
            toks("great film , tom - hanks ! really_good")
        );
        assert_eq!(surface_tokens("Tom_Hanks"), toks("tom hanks"));
        assert!(tokenize("   ").is_empty());
    }

    #[test]
    fn segmentation_respects_protected_spans() {
        let t = toks("i liked mr . smith . great ! ! ok");
        assert_eq!(segment(&t, &[]), vec![(0, 4), (4, 6), (6, 9), (9, 10)]);
        assert_eq!(segment(&t, &[(2, 5)]), vec![(0, 6), (6, 9), (9, 10)]);
    }

    #[test]
    fn mentions_are_ordered_by_position() {
        let m = |node, start, end| Mention {
            node: NodeId(node),
            start,
            end,
            copyable: true,
        };
        let s = Sentence::new(toks("a b c d"), vec![m(1, 2, 4), m(5, 0, 1)]);
        assert_eq!(s.nodes(), vec![NodeId(5), NodeId(1)]);
        assert_eq!(s.gen, vec![false, true, false, false]);
    }

    #[test]
    fn vocab_ranks_by_frequency() {
        let words = ["b", "a", "b", "c", "a", "b"];
        let v = Vocab::build(words.iter().copied(), 2);
        assert_eq!(v.len(), 6);
        assert_eq!(v.id("b"), 4);
        assert_eq!(v.id("a"), 5);
        assert_eq!(v.id("c"), UNK);
        assert_eq!(v.word(BOS), "<bos>");
    }

    #[test]
    fn split_is_seeded_and_proportional() {
        let a = split_indices(100, [0.8, 0.1, 0.1], 5);
        assert_eq!(a, split_indices(100, [0.8, 0.1, 0.1], 5));
        assert_ne!(a, split_indices(100, [0.8, 0.1, 0.1], 6));
        let count = |s| a.iter().filter(|&&x| x == s).count();
        assert_eq!((count(Split::Train), count(Split::Valid), count(Split::Test)), (80, 10, 10));
        assert!(split_indices(0, [0.8, 0.1, 0.1], 1).is_empty());
    }

    #[test]
    fn keyword_detection_skips_mentions() {
        let mut reg = NodeRegistry::new();
        let e = reg.register("good_acting", NodeKind::Entity).unwrap();
        let k = reg.register("acting", NodeKind::Keyword).unwrap();
        let mut s = Sentence::new(
            toks("good acting and more acting"),
            vec![Mention {
                node: e,
                start: 0,
                end: 2,
                copyable: true,
            }],
        );
        let n = detect_keywords(&mut s, &[(k, reg.surface(k).to_vec())]);
        assert_eq!(n, 1);
        assert_eq!(s.mentions[1].start, 4);
        assert_eq!(s.gen, vec![false, false, true, true, false]);
    }

    fn write_fixture(dir: &Path, reviews: &str) {
        std::fs::write(
            dir.join("kinds.tsv"),
            "u1\tuser\nm1\titem\ntom_hanks\tentity\ndrama\tentity\n",
        )
        .unwrap();
        std::fs::write(dir.join("triples.tsv"), "m1\tactor\ttom_hanks\nm1\tgenre\tdrama\n").unwrap();
        std::fs::write(dir.join("interactions.tsv"), "u1\tm1\n").unwrap();
        std::fs::write(dir.join("keywords.txt"), "acting\nplot\n").unwrap();
        std::fs::write(dir.join("reviews.jsonl"), reviews).unwrap();
    }

    #[test]
    fn ingestion_counts_sentence_cooccurrence() {
        let dir = tempfile::tempdir().unwrap();
        let line = |text: &str| {
            format!(
                "{{\"user\":\"u1\",\"item\":\"m1\",\"rating\":4,\"text\":\"{text}\",\"mentions\":[{{\"sentence_idx\":0,\"token_span\":[0,2],\"node\":\"tom_hanks\"}}]}}\n"
            )
        };
        // acting co-occurs with tom_hanks in 3 sentences, plot in 1
        let reviews = [
            line("Tom Hanks : great acting ."),
            line("Tom Hanks . acting is good ."),
            line("Tom Hanks acting acting ! the plot"),
            line("Tom Hanks and acting plot ."),
        ]
        .concat();
        write_fixture(dir.path(), &reviews);
        let cfg = DataConfig::default();
        let (corpus, hkg) = ingest_corpus(dir.path(), &cfg, 5, 1).unwrap();
        assert_eq!(corpus.reviews.len(), 4);
        let r = &corpus.registry;
        let (e, acting, plot) = (
            r.get("tom_hanks").unwrap(),
            r.get("acting").unwrap(),
            r.get("plot").unwrap(),
        );
        assert_eq!(hkg.cooccurrence_count(e, acting), 3);
        assert!(hkg.has_edge(e, R_CO, acting));
        assert!(!hkg.has_edge(e, R_CO, plot));
        let first = &corpus.reviews[0].sentences[0];
        assert_eq!(first.gen, vec![false, false, true, true, false, true]);
        for rev in &corpus.reviews {
            rev.validate(r, 100).unwrap();
        }
    }

    #[test]
    fn long_reviews_filtered_and_bad_lines_reported() {
        let dir = tempfile::tempdir().unwrap();
        let long = vec!["w"; 101].join(" ");
        let ok = vec!["w"; 100].join(" ");
        let reviews = format!(
            "{{\"user\":\"u1\",\"item\":\"m1\",\"rating\":1,\"text\":\"{long}\"}}\n{{\"user\":\"u1\",\"item\":\"m1\",\"rating\":1,\"text\":\"{ok}\"}}\n"
        );
        write_fixture(dir.path(), &reviews);
        let (corpus, _) = ingest_corpus(dir.path(), &DataConfig::default(), 5, 1).unwrap();
        assert_eq!(corpus.reviews.len(), 1);
        assert_eq!(corpus.stats.filtered_long, 1);

        write_fixture(dir.path(), "{\"user\":\"u1\",\"item\":\"m1\",\"rating\":9,\"text\":\"x\"}\n");
        let err = ingest_corpus(dir.path(), &DataConfig::default(), 5, 1).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }), "{err}");
    }

    #[test]
    fn unknown_mention_dropped() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(
            dir.path(),
            "{\"user\":\"u1\",\"item\":\"m1\",\"rating\":3,\"text\":\"bob is fine\",\"mentions\":[{\"sentence_idx\":0,\"token_span\":[0,1],\"node\":\"bob\"}]}\n",
        );
        let (corpus, _) = ingest_corpus(dir.path(), &DataConfig::default(), 5, 1).unwrap();
        assert_eq!(corpus.stats.dropped_mentions, 1);
        assert!(corpus.reviews[0].sentences[0].mentions.is_empty());
    }

    #[test]
    fn dataset_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(
            dir.path(),
            "{\"user\":\"u1\",\"item\":\"m1\",\"rating\":5,\"text\":\"Tom Hanks shines . a fine drama .\",\"mentions\":[{\"sentence_idx\":0,\"token_span\":[0,2],\"node\":\"tom_hanks\"},{\"sentence_idx\":1,\"token_span\":[6,7],\"node\":\"drama\"}]}\n",
        );
        let (corpus, hkg) = ingest_corpus(dir.path(), &DataConfig::default(), 5, 1).unwrap();
        let out = dir.path().join("ds");
        save_dataset(&out, &corpus, &hkg).unwrap();
        let (c2, h2) = load_dataset(&out).unwrap();
        assert_eq!(c2, corpus);
        assert_eq!(h2, hkg);
    }
}
