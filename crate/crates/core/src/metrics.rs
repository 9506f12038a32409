//! Generation and coherence metrics.
//!
//! BLEU is corpus-level (clipped counts and lengths summed over the corpus);
//! ROUGE is the mean of per-pair scores. Both take tokenized text.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::hash::Hash;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::hkg::{NodeId, NodeKind, NodeRegistry};

fn ngrams<T: Hash + Eq + Clone>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut out = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w).or_insert(0) += 1;
        }
    }
    out
}

fn clipped_overlap<T: Hash + Eq + Clone>(cand: &[T], reference: &[T], n: usize) -> (usize, usize, usize) {
    let c = ngrams(cand, n);
    let r = ngrams(reference, n);
    let overlap = c.iter().map(|(g, &k)| k.min(r.get(g).copied().unwrap_or(0))).sum();
    (overlap, cand.len().saturating_sub(n - 1), reference.len().saturating_sub(n - 1))
}

fn check_corpus(cands: usize, refs: usize) -> Result<()> {
    if cands == 0 {
        return Err(Error::Metric("empty corpus".into()));
    }
    if cands != refs {
        return Err(Error::Metric(format!("{cands} candidates but {refs} references")));
    }
    Ok(())
}

/// Corpus BLEU in `[0, 100]` with one reference per candidate. Orders
/// above one use add-one smoothing.
pub fn bleu<T: Hash + Eq + Clone>(cands: &[Vec<T>], refs: &[Vec<T>], max_n: usize) -> Result<f64> {
    check_corpus(cands.len(), refs.len())?;
    if max_n == 0 {
        return Err(Error::Metric("max_n must be >= 1".into()));
    }
    let c_len: usize = cands.iter().map(Vec::len).sum();
    let r_len: usize = refs.iter().map(Vec::len).sum();
    if c_len == 0 {
        return Ok(0.0);
    }
    let mut log_p = 0.0;
    for n in 1..=max_n {
        let (mut hit, mut total) = (0usize, 0usize);
        for (c, r) in cands.iter().zip(refs) {
            let (o, t, _) = clipped_overlap(c, r, n);
            hit += o;
            total += t;
        }
        let p = if n == 1 {
            hit as f64 / total as f64
        } else {
            (hit as f64 + 1.0) / (total as f64 + 1.0)
        };
        if p == 0.0 {
            return Ok(0.0);
        }
        log_p += p.ln() / max_n as f64;
    }
    let bp = if c_len > r_len {
        1.0
    } else {
        (1.0 - r_len as f64 / c_len as f64).exp()
    };
    Ok(100.0 * bp * log_p.exp())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RougeVariant {
    One,
    Two,
    L,
}

fn lcs_len<T: Eq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// One pair: n-gram recall for ROUGE-1/2, LCS F1 for ROUGE-L. A reference
/// without n-grams scores 1 against a candidate without n-grams, else 0.
pub fn rouge_pair<T: Hash + Eq + Clone>(cand: &[T], reference: &[T], variant: RougeVariant) -> f64 {
    match variant {
        RougeVariant::One | RougeVariant::Two => {
            let n = if variant == RougeVariant::One { 1 } else { 2 };
            let (o, ct, rt) = clipped_overlap(cand, reference, n);
            if rt == 0 {
                return if ct == 0 { 1.0 } else { 0.0 };
            }
            o as f64 / rt as f64
        }
        RougeVariant::L => {
            if cand.is_empty() && reference.is_empty() {
                return 1.0;
            }
            let l = lcs_len(cand, reference);
            if l == 0 {
                return 0.0;
            }
            let p = l as f64 / cand.len() as f64;
            let r = l as f64 / reference.len() as f64;
            2.0 * p * r / (p + r)
        }
    }
}

/// Mean per-pair ROUGE in `[0, 1]`.
pub fn rouge<T: Hash + Eq + Clone>(cands: &[Vec<T>], refs: &[Vec<T>], variant: RougeVariant) -> Result<f64> {
    check_corpus(cands.len(), refs.len())?;
    let sum: f64 = cands.iter().zip(refs).map(|(c, r)| rouge_pair(c, r, variant)).sum();
    Ok(sum / cands.len() as f64)
}

/// Unordered pairs of distinct annotated entities sharing a sentence.
pub fn entity_pairs<T: Ord + Clone>(review: &[Vec<T>]) -> BTreeSet<(T, T)> {
    let mut out = BTreeSet::new();
    for sentence in review {
        let set: BTreeSet<&T> = sentence.iter().collect();
        let v: Vec<&T> = set.into_iter().collect();
        for i in 0..v.len() {
            for j in i + 1..v.len() {
                out.insert((v[i].clone(), v[j].clone()));
            }
        }
    }
    out
}

/// Entity co-occurrence ratio in `[0, 100]`: micro-averaged precision of
/// candidate intra-sentence entity pairs against reference pairs. `None`
/// when no candidate review has a pair.
pub fn ecr<T: Ord + Clone>(cands: &[Vec<Vec<T>>], refs: &[Vec<Vec<T>>]) -> Result<Option<f64>> {
    check_corpus(cands.len(), refs.len())?;
    let (mut hit, mut total) = (0usize, 0usize);
    for (c, r) in cands.iter().zip(refs) {
        let cp = entity_pairs(c);
        if cp.is_empty() {
            continue;
        }
        let rp = entity_pairs(r);
        hit += cp.intersection(&rp).count();
        total += cp.len();
    }
    Ok((total > 0).then(|| 100.0 * hit as f64 / total as f64))
}

/// Whether a node counts as an entity for co-occurrence scoring.
pub fn is_ecr_node(registry: &NodeRegistry, n: NodeId) -> bool {
    matches!(registry.kind(n), NodeKind::Item | NodeKind::Entity)
}

/// Longest-first, left-to-right exact surface matching of entity nodes.
pub struct SurfaceMatcher {
    by_first: HashMap<String, Vec<(Vec<String>, NodeId)>>,
}

impl SurfaceMatcher {
    pub fn new(registry: &NodeRegistry) -> Self {
        let mut by_first: HashMap<String, Vec<(Vec<String>, NodeId)>> = HashMap::new();
        for n in registry.ids() {
            if !is_ecr_node(registry, n) {
                continue;
            }
            let s = registry.surface(n).to_vec();
            if let Some(first) = s.first() {
                by_first.entry(first.clone()).or_default().push((s, n));
            }
        }
        for v in by_first.values_mut() {
            v.sort_by(|a, b| b.0.len().cmp(&a.0.len()).then(a.1.cmp(&b.1)));
        }
        SurfaceMatcher { by_first }
    }

    pub fn annotate(&self, words: &[String]) -> Vec<NodeId> {
        let mut out = Vec::new();
        let mut i = 0;
        while i < words.len() {
            let hit = self.by_first.get(&words[i]).and_then(|cands| {
                cands
                    .iter()
                    .find(|(s, _)| words.len() - i >= s.len() && words[i..i + s.len()] == s[..])
            });
            match hit {
                Some((s, n)) => {
                    out.push(*n);
                    i += s.len();
                }
                None => i += 1,
            }
        }
        out
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    (na > 0.0 && nb > 0.0).then(|| dot / (na * nb))
}

/// Mean cosine over unordered sentence pairs of one review; `None` for
/// fewer than two sentences or when every pair was skipped.
pub fn sen_sim(sentences: &[Vec<String>], embed: &dyn Fn(&[String]) -> Vec<f64>) -> Option<f64> {
    if sentences.len() < 2 {
        return None;
    }
    let vecs: Vec<Vec<f64>> = sentences.iter().map(|s| embed(s)).collect();
    let (mut sum, mut n) = (0.0, 0usize);
    for i in 0..vecs.len() {
        for j in i + 1..vecs.len() {
            match cosine(&vecs[i], &vecs[j]) {
                Some(c) => {
                    sum += c;
                    n += 1;
                }
                None => log::warn!("sen_sim: zero-norm sentence embedding, pair skipped"),
            }
        }
    }
    (n > 0).then(|| sum / n as f64)
}

/// Mean of per-review Sen-Sim over reviews where it is defined.
pub fn sen_sim_corpus(reviews: &[Vec<Vec<String>>], embed: &dyn Fn(&[String]) -> Vec<f64>) -> Option<f64> {
    let scores: Vec<f64> = reviews.iter().filter_map(|r| sen_sim(r, embed)).collect();
    (!scores.is_empty()).then(|| scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Sentence vector as the mean of known word vectors.
pub fn mean_word_embedding(table: &HashMap<String, Vec<f64>>, dim: usize, words: &[String]) -> Vec<f64> {
    let mut out = vec![0.0; dim];
    let mut n = 0;
    for w in words {
        if let Some(v) = table.get(w) {
            out.iter_mut().zip(v).for_each(|(o, x)| *o += x);
            n += 1;
        }
    }
    if n > 0 {
        out.iter_mut().for_each(|o| *o /= n as f64);
    }
    out
}

/// Relative frequencies of the gold top-k labels in both plan sets, plus an
/// "other" bucket when either set has mass outside them.
pub fn schema_frequencies<T: Ord + Clone>(
    generated: &[Vec<T>],
    gold: &[Vec<T>],
    top_k: usize,
) -> Result<(Vec<Option<T>>, Vec<f64>, Vec<f64>)> {
    let count = |plans: &[Vec<T>]| {
        let mut m: BTreeMap<T, usize> = BTreeMap::new();
        for p in plans {
            for s in p {
                *m.entry(s.clone()).or_insert(0) += 1;
            }
        }
        m
    };
    let (gc, gg) = (count(generated), count(gold));
    let (gen_total, gold_total): (usize, usize) = (gc.values().sum(), gg.values().sum());
    if gen_total == 0 || gold_total == 0 {
        return Err(Error::Metric("empty plan set".into()));
    }
    let mut ranked: Vec<(&T, &usize)> = gg.iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(a.1).then(a.0.cmp(b.0)));
    let top: Vec<T> = ranked.into_iter().take(top_k).map(|(t, _)| t.clone()).collect();
    let mut labels: Vec<Option<T>> = top.iter().cloned().map(Some).collect();
    let freq = |m: &BTreeMap<T, usize>, total: usize| -> Vec<f64> {
        top.iter()
            .map(|t| m.get(t).copied().unwrap_or(0) as f64 / total as f64)
            .collect()
    };
    let mut g = freq(&gc, gen_total);
    let mut o = freq(&gg, gold_total);
    let (rest_g, rest_o) = (1.0 - g.iter().sum::<f64>(), 1.0 - o.iter().sum::<f64>());
    if rest_g > 1e-12 || rest_o > 1e-12 {
        labels.push(None);
        g.push(rest_g.max(0.0));
        o.push(rest_o.max(0.0));
    }
    Ok((labels, g, o))
}

/// (MAE, RMSE) between generated and gold schema frequency vectors.
pub fn schema_distribution_error<T: Ord + Clone>(generated: &[Vec<T>], gold: &[Vec<T>], top_k: usize) -> Result<(f64, f64)> {
    let (_, g, o) = schema_frequencies(generated, gold, top_k)?;
    let n = g.len() as f64;
    let mae = g.iter().zip(&o).map(|(a, b)| (a - b).abs()).sum::<f64>() / n;
    let rmse = (g.iter().zip(&o).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n).sqrt();
    Ok((mae, rmse))
}

/// Normalized bigram distribution of label sequences, each wrapped in
/// `start` and `stop`.
pub fn bigram_distribution(plans: &[Vec<String>], start: &str, stop: &str) -> BTreeMap<(String, String), f64> {
    let mut counts: BTreeMap<(String, String), f64> = BTreeMap::new();
    for p in plans {
        let mut prev = start.to_string();
        for s in p.iter().map(String::as_str).chain(std::iter::once(stop)) {
            *counts.entry((prev.clone(), s.to_string())).or_insert(0.0) += 1.0;
            prev = s.to_string();
        }
    }
    let total: f64 = counts.values().sum();
    counts.into_iter().map(|(k, v)| (k, v / total)).collect()
}

pub fn total_variation<K: Ord>(p: &BTreeMap<K, f64>, q: &BTreeMap<K, f64>) -> f64 {
    let keys: BTreeSet<&K> = p.keys().chain(q.keys()).collect();
    0.5 * keys
        .into_iter()
        .map(|k| (p.get(k).copied().unwrap_or(0.0) - q.get(k).copied().unwrap_or(0.0)).abs())
        .sum::<f64>()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Bootstrap {
    /// Mean of `a - b`.
    pub mean_diff: f64,
    /// Fraction of resamples whose mean difference is `<= 0`.
    pub p_value: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

/// Paired bootstrap over per-item scores of two systems.
pub fn paired_bootstrap(a: &[f64], b: &[f64], samples: usize, seed: u64) -> Result<Bootstrap> {
    if a.is_empty() || a.len() != b.len() || samples == 0 {
        return Err(Error::Metric("paired bootstrap needs equal, non-empty score lists".into()));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = diffs.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut means: Vec<f64> = (0..samples)
        .map(|_| (0..n).map(|_| diffs[rng.gen_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let at = |q: f64| means[((q * (samples - 1) as f64).round() as usize).min(samples - 1)];
    Ok(Bootstrap {
        mean_diff: diffs.iter().sum::<f64>() / n as f64,
        p_value: means.iter().filter(|&&m| m <= 0.0).count() as f64 / samples as f64,
        ci_low: at(0.025),
        ci_high: at(0.975),
    })
}

/// Grouped bar chart of gold and generated schema frequencies.
pub fn schema_histogram_svg(labels: &[String], gold: &[f64], generated: &[f64]) -> String {
    let (bar, gap, height, left, bottom) = (14.0, 10.0, 200.0, 40.0, 120.0);
    let group = 2.0 * bar + gap;
    let width = left + group * labels.len() as f64 + gap;
    let top = gold.iter().chain(generated).copied().fold(0.0, f64::max).max(1e-9);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{:.0}" height="{:.0}" font-family="sans-serif" font-size="9">"#,
        width,
        height + bottom
    );
    let _ = writeln!(s, r#"<line x1="{left}" y1="{height}" x2="{width:.0}" y2="{height}" stroke="black"/>"#);
    for (i, label) in labels.iter().enumerate() {
        let x = left + gap + group * i as f64;
        for (j, (v, color)) in [(gold[i], "#4c72b0"), (generated[i], "#dd8452")].into_iter().enumerate() {
            let h = (v / top) * (height - 10.0);
            let _ = writeln!(
                s,
                r#"<rect x="{:.1}" y="{:.1}" width="{bar}" height="{:.1}" fill="{color}"/>"#,
                x + j as f64 * bar,
                height - h,
                h
            );
        }
        let _ = writeln!(
            s,
            r#"<text transform="translate({:.1},{:.1}) rotate(60)">{}</text>"#,
            x,
            height + 8.0,
            xml_escape(label)
        );
    }
    let _ = writeln!(s, r##"<text x="{left}" y="10" fill="#4c72b0">gold</text>"##);
    let _ = writeln!(s, r##"<text x="{}" y="10" fill="#dd8452">generated</text>"##, left + 40.0);
    s.push_str("</svg>\n");
    s
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// `metric,value` CSV; undefined values are written as `n/a`.
pub fn write_report(path: &Path, rows: &[(String, Option<f64>)]) -> Result<()> {
    let mut s = String::from("metric,value\n");
    for (name, v) in rows {
        match v {
            Some(v) => {
                let _ = writeln!(s, "{name},{v:.6}");
            }
            None => {
                let _ = writeln!(s, "{name},n/a");
            }
        }
    }
    std::fs::write(path, s)?;
    Ok(())
}
