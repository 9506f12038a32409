//! Sentence realization: a causal transformer decoder conditioned on one
//! planned subgraph, with a supervised generate-or-copy switch and beam
//! search.
//!
//! The decoder's action space is `Gen(word) ∪ Copy(node)`; copying a node
//! emits its whole surface token sequence. With switch `λ`,
//! `P(Gen w) = λ · Pr₁(w)` and `P(Copy n) = (1 − λ) · Pr₂(n)`. For an EMPTY
//! subgraph, or with copying disabled, `λ = 1`.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::corpus::{GenerationContext, Sentence, Vocab, BOS, EOS, PAD};
use crate::encoder::Encoded;
use crate::error::{Error, Result};
use crate::hkg::{NodeId, NodeRegistry};
use crate::mining::{DocumentPlan, PlanStep, SchemaId, EMPTY, STOP};
use crate::model::Model;
use crate::nn::Run;
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Action {
    Gen(u32),
    Copy(NodeId),
}

/// The subgraph a sentence is conditioned on.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Condition {
    pub schema: SchemaId,
    /// Distinct nodes in slot order; empty for EMPTY.
    pub nodes: Vec<NodeId>,
}

impl Condition {
    pub fn from_step(step: &PlanStep) -> Condition {
        let mut nodes = Vec::new();
        for &n in &step.nodes {
            if !nodes.contains(&n) {
                nodes.push(n);
            }
        }
        Condition {
            schema: step.schema_id,
            nodes,
        }
    }

    pub fn copy_active(&self, model: &Model) -> bool {
        model.cfg.use_copy && self.schema != EMPTY && !self.nodes.is_empty()
    }
}

/// Teacher-forcing targets for a gold sentence: copyable mentions of
/// subgraph nodes become `Copy`, everything else `Gen`, then EOS. At most
/// `max_len` actions.
pub fn gold_actions(sentence: &Sentence, cond: &Condition, vocab: &Vocab, use_copy: bool, max_len: usize) -> Vec<Action> {
    let mut out = Vec::new();
    let mut t = 0;
    while t < sentence.words.len() {
        let m = sentence.mentions.iter().find(|m| m.start == t);
        match m {
            Some(m) if use_copy && m.copyable && cond.nodes.contains(&m.node) => {
                out.push(Action::Copy(m.node));
                t = m.end;
            }
            _ => {
                out.push(Action::Gen(vocab.id(&sentence.words[t])));
                t += 1;
            }
        }
    }
    out.truncate(max_len.saturating_sub(1));
    out.push(Action::Gen(EOS));
    out
}

/// Copy indicator per action: 1 for generate, 0 for copy.
pub fn action_labels(actions: &[Action]) -> Vec<bool> {
    actions.iter().map(|a| matches!(a, Action::Gen(_))).collect()
}

pub struct DecoderOut {
    /// `[T, V]` log Pr₁
    pub gen_logp: Var,
    /// `[T, 1]` log λ and log(1 − λ), present when copying is active.
    pub log_lambda: Option<(Var, Var)>,
    /// `[T, k]` log Pr₂ over `cond.nodes`.
    pub copy_logp: Option<Var>,
}

/// Runs the decoder over `inputs` (the actions already emitted; BOS is
/// implicit) and returns next-action distributions for every position.
pub fn decoder_forward(
    tape: &mut Tape,
    run: &mut Run,
    model: &Model,
    enc: &Encoded,
    ctx_rows: Var,
    cond: &Condition,
    inputs: &[Action],
) -> Result<DecoderOut> {
    let cfg = &model.cfg;
    let rp = &model.real;
    let t_len = inputs.len() + 1;
    if t_len > cfg.max_sent_len {
        return Err(Error::Shape(format!(
            "prefix of {} actions reaches max_sent_len = {}",
            inputs.len(),
            cfg.max_sent_len
        )));
    }
    if cond.schema >= cfg.schema_count || cond.schema == STOP {
        return Err(Error::Schema(format!("cannot realize schema {}", cond.schema)));
    }
    let node_rows = cond
        .nodes
        .iter()
        .map(|&n| enc.row(n).ok_or_else(|| Error::UnknownNode(format!("#{} not in the encoded graph", n.0))))
        .collect::<Result<Vec<_>>>()?;

    // token inputs: word rows first, then projected rows of copied nodes
    let mut word_ids = Vec::with_capacity(t_len);
    let mut pick = Vec::with_capacity(t_len);
    let mut copy_rows = Vec::new();
    for (t, a) in std::iter::once(Action::Gen(BOS)).chain(inputs.iter().copied()).enumerate() {
        match a {
            Action::Gen(w) => {
                if w as usize >= cfg.vocab_size {
                    return Err(Error::Shape(format!("word id {w} outside the vocabulary")));
                }
                word_ids.push(w as usize);
                pick.push(t);
            }
            Action::Copy(n) => {
                let r = enc.row(n).ok_or_else(|| Error::UnknownNode(format!("#{}", n.0)))?;
                word_ids.push(PAD as usize);
                pick.push(t_len + copy_rows.len());
                copy_rows.push(r);
            }
        }
    }
    let wtab = tape.param(model.shared.word);
    let words = tape.gather_rows(wtab, word_ids);
    let mut x = if copy_rows.is_empty() {
        words
    } else {
        let hn = tape.gather_rows(enc.h, copy_rows);
        let proj = rp.w_copy_in.forward(tape, hn);
        let all = tape.concat_rows(&[words, proj]);
        tape.gather_rows(all, pick)
    };
    let ptab = tape.param(rp.pos);
    let pos = tape.gather_rows(ptab, (0..t_len).collect());
    x = tape.add(x, pos);
    let stab = tape.param(rp.schema);
    let mut c = tape.gather_rows(stab, vec![cond.schema]);
    if !node_rows.is_empty() {
        let hn = tape.gather_rows(enc.h, node_rows.clone());
        let mean = tape.mean_rows(hn);
        let sub = rp.w_sub.forward(tape, mean);
        c = tape.add(c, sub);
    }
    x = tape.add_row(x, c);

    let causal: Vec<bool> = (0..t_len * t_len).map(|i| i % t_len <= i / t_len).collect();
    for block in &rp.blocks {
        let xl = block.ln1.forward(tape, x);
        let a = block
            .attn
            .forward(tape, run, "decoder_attention", xl, xl, Some(&causal));
        x = tape.add(x, a);
        let xl = block.ln2.forward(tape, x);
        let f = block.ffn.forward(tape, run, xl);
        x = tape.add(x, f);
    }
    let h = rp.ln_out.forward(tape, x);
    let (ctx_vec, _) = rp.ctx.forward(tape, run, h, ctx_rows);
    let feat = tape.concat_cols(&[h, ctx_vec]);
    let logits = rp.w6.forward(tape, feat);
    let gen_logp = tape.log_softmax(logits);

    if !cond.copy_active(model) {
        return Ok(DecoderOut {
            gen_logp,
            log_lambda: None,
            copy_logp: None,
        });
    }
    let z = rp.w_gen.forward(tape, feat);
    let log_lam = tape.log_sigmoid(z);
    let neg = tape.scale(z, -1.0);
    let log_1m = tape.log_sigmoid(neg);

    let k = node_rows.len();
    let (w7a, w7b, w7c) = (tape.param(rp.w7a), tape.param(rp.w7b), tape.param(rp.w7c));
    let ha = tape.matmul(h, w7a);
    let hn = tape.gather_rows(enc.h, node_rows);
    let nb = tape.matmul(hn, w7b);
    let ga = tape.gather_rows(ha, (0..t_len * k).map(|i| i / k).collect());
    let gb = tape.gather_rows(nb, (0..t_len * k).map(|i| i % k).collect());
    let s = tape.add(ga, gb);
    let s = tape.tanh(s);
    let s = tape.matmul(s, w7c);
    let s = tape.reshape(s, t_len, k);
    if run.is_probing() {
        let p = tape.softmax(s, None);
        run.record("copy_distribution", tape, p, None);
    }
    let copy_logp = tape.log_softmax(s);
    Ok(DecoderOut {
        gen_logp,
        log_lambda: Some((log_lam, log_1m)),
        copy_logp: Some(copy_logp),
    })
}

/// Teacher-forced losses of one gold action sequence: (word NLL, switch
/// BCE). The switch term is `None` when copying is inactive.
pub fn sentence_losses(
    tape: &mut Tape,
    run: &mut Run,
    model: &Model,
    enc: &Encoded,
    ctx_rows: Var,
    cond: &Condition,
    actions: &[Action],
) -> Result<(Var, Option<Var>)> {
    let inputs = &actions[..actions.len() - 1];
    let out = decoder_forward(tape, run, model, enc, ctx_rows, cond, inputs)?;
    let mut gen_at = Vec::new();
    let mut copy_at = Vec::new();
    let mut lam_at = Vec::new();
    let mut one_minus_at = Vec::new();
    for (t, a) in actions.iter().enumerate() {
        match *a {
            Action::Gen(w) => {
                gen_at.push((t, w as usize));
                lam_at.push((t, 0));
            }
            Action::Copy(n) => {
                let j = cond
                    .nodes
                    .iter()
                    .position(|&m| m == n)
                    .ok_or_else(|| Error::Schema(format!("copy target #{} not in the subgraph", n.0)))?;
                if out.copy_logp.is_none() {
                    return Err(Error::Schema("copy action while copying is inactive".into()));
                }
                copy_at.push((t, j));
                one_minus_at.push((t, 0));
            }
        }
    }
    let mut terms = Vec::new();
    if !gen_at.is_empty() {
        let p = tape.pick(out.gen_logp, gen_at);
        terms.push(tape.sum(p));
    }
    if let Some(c) = out.copy_logp {
        if !copy_at.is_empty() {
            let p = tape.pick(c, copy_at);
            terms.push(tape.sum(p));
        }
    }
    let mut si = None;
    if let Some((ll, l1)) = out.log_lambda {
        let mut sw = Vec::new();
        if !lam_at.is_empty() {
            let p = tape.pick(ll, lam_at);
            sw.push(tape.sum(p));
        }
        if !one_minus_at.is_empty() {
            let p = tape.pick(l1, one_minus_at);
            sw.push(tape.sum(p));
        }
        let total = sum_vars(tape, &sw);
        terms.push(total);
        si = Some(tape.scale(total, -1.0));
    }
    let ll = sum_vars(tape, &terms);
    Ok((tape.scale(ll, -1.0), si))
}

fn sum_vars(tape: &mut Tape, vs: &[Var]) -> Var {
    let mut acc = vs[0];
    for &v in &vs[1..] {
        acc = tape.add(acc, v);
    }
    acc
}

/// Next-action distributions after a prefix.
#[derive(Clone, Debug)]
pub struct CopyStep {
    pub gen_dist: Vec<f64>,
    /// Over `copy_nodes`; empty when copying is inactive.
    pub copy_dist: Vec<f64>,
    pub copy_nodes: Vec<NodeId>,
    pub lambda: f64,
}

impl CopyStep {
    /// Total mass of the generate/copy mixture.
    pub fn mixture_mass(&self) -> f64 {
        self.lambda * self.gen_dist.iter().sum::<f64>()
            + (1.0 - self.lambda) * self.copy_dist.iter().sum::<f64>()
    }
}

/// Parameter-independent inputs for decoding sentences of one review,
/// taken from an encoder pass.
#[derive(Clone, Debug)]
pub struct DecodeContext {
    pub nodes: Vec<NodeId>,
    pub node_h: Matrix,
    pub ctx_rows: Matrix,
}

impl DecodeContext {
    pub fn capture(tape: &Tape, enc: &Encoded, ctx_rows: Var) -> DecodeContext {
        DecodeContext {
            nodes: enc.nodes.clone(),
            node_h: tape.value(enc.h).clone(),
            ctx_rows: tape.value(ctx_rows).clone(),
        }
    }

    fn load(&self, tape: &mut Tape) -> (Encoded, Var) {
        let h = tape.constant(self.node_h.clone());
        let c = tape.constant(self.ctx_rows.clone());
        let enc = Encoded {
            nodes: self.nodes.clone(),
            index: self.nodes.iter().enumerate().map(|(i, &n)| (n, i)).collect::<HashMap<_, _>>(),
            h,
        };
        (enc, c)
    }
}

pub fn decode_step(model: &Model, dc: &DecodeContext, cond: &Condition, prefix: &[Action]) -> Result<CopyStep> {
    decode_step_with(model, dc, cond, prefix, &mut Run::eval())
}

pub fn decode_step_with(
    model: &Model,
    dc: &DecodeContext,
    cond: &Condition,
    prefix: &[Action],
    run: &mut Run,
) -> Result<CopyStep> {
    let mut tape = Tape::new(&model.store);
    let (enc, ctx) = dc.load(&mut tape);
    let out = decoder_forward(&mut tape, run, model, &enc, ctx, cond, prefix)?;
    let last = prefix.len();
    let gen_dist = tape.value(out.gen_logp).row(last).iter().map(|x| x.exp()).collect();
    let (copy_dist, copy_nodes, lambda) = match (out.copy_logp, out.log_lambda) {
        (Some(c), Some((ll, _))) => (
            tape.value(c).row(last).iter().map(|x| x.exp()).collect(),
            cond.nodes.clone(),
            tape.value(ll).get(last, 0).exp(),
        ),
        _ => (Vec::new(), Vec::new(), 1.0),
    };
    Ok(CopyStep {
        gen_dist,
        copy_dist,
        copy_nodes,
        lambda,
    })
}

/// Surface tokens of actions; used for sentence lengths and output text.
pub trait Lexicon {
    fn word(&self, id: u32) -> &str;
    fn surface(&self, node: NodeId) -> &[String];
}

pub struct VocabLexicon<'a> {
    pub vocab: &'a Vocab,
    pub registry: &'a NodeRegistry,
}

impl Lexicon for VocabLexicon<'_> {
    fn word(&self, id: u32) -> &str {
        self.vocab.word(id)
    }

    fn surface(&self, node: NodeId) -> &[String] {
        self.registry.surface(node)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Gen,
    Copy,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedSentence {
    /// Emitted actions without the final EOS.
    pub actions: Vec<Action>,
    pub words: Vec<String>,
    pub tags: Vec<Source>,
    /// Length-normalized log-probability, EOS included.
    pub score: f64,
}

impl GeneratedSentence {
    pub fn copied_nodes(&self) -> Vec<NodeId> {
        self.actions
            .iter()
            .filter_map(|a| match a {
                Action::Copy(n) => Some(*n),
                _ => None,
            })
            .collect()
    }

    pub fn text(&self) -> String {
        self.words.join(" ")
    }
}

#[derive(Clone, Debug)]
struct Hyp {
    actions: Vec<Action>,
    logp: f64,
    tokens: usize,
    done: bool,
}

impl Hyp {
    fn normalized(&self) -> f64 {
        self.logp / self.actions.len().max(1) as f64
    }
}

fn expand(
    model: &Model,
    dc: &DecodeContext,
    cond: &Condition,
    lex: &dyn Lexicon,
    hyp: &Hyp,
    width: usize,
    out: &mut Vec<Hyp>,
) -> Result<()> {
    let step = decode_step(model, dc, cond, &hyp.actions)?;
    let max_len = model.cfg.max_sent_len;
    let log_lam = step.lambda.ln();
    let mut options: Vec<(f64, Action)> = step
        .gen_dist
        .iter()
        .enumerate()
        .filter(|&(w, _)| w as u32 != PAD && w as u32 != BOS)
        .map(|(w, &p)| (log_lam + p.ln(), Action::Gen(w as u32)))
        .collect();
    let log_1m = (1.0 - step.lambda).ln();
    for (&n, &p) in step.copy_nodes.iter().zip(&step.copy_dist) {
        options.push((log_1m + p.ln(), Action::Copy(n)));
    }
    options.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    for (lp, a) in options.into_iter().take(width) {
        if !lp.is_finite() {
            continue;
        }
        let mut next = hyp.clone();
        next.logp += lp;
        next.actions.push(a);
        match a {
            Action::Gen(EOS) => next.done = true,
            Action::Gen(_) => next.tokens += 1,
            Action::Copy(n) => next.tokens += lex.surface(n).len(),
        }
        if next.tokens >= max_len || next.actions.len() >= max_len {
            next.done = true;
        }
        out.push(next);
    }
    Ok(())
}

fn search(model: &Model, dc: &DecodeContext, cond: &Condition, lex: &dyn Lexicon, beam: usize) -> Result<Vec<Hyp>> {
    let mut alive = vec![Hyp {
        actions: Vec::new(),
        logp: 0.0,
        tokens: 0,
        done: false,
    }];
    let mut finished = Vec::new();
    while !alive.is_empty() && finished.len() < beam {
        let mut cand = Vec::new();
        for h in &alive {
            expand(model, dc, cond, lex, h, beam, &mut cand)?;
        }
        cand.sort_by(|a, b| b.logp.total_cmp(&a.logp).then_with(|| a.actions.cmp(&b.actions)));
        cand.truncate(beam);
        alive.clear();
        for h in cand {
            if h.done {
                finished.push(h);
            } else {
                alive.push(h);
            }
        }
    }
    Ok(finished)
}

/// Beam search over the generate/copy mixture, ranking finished hypotheses
/// by length-normalized log-probability. The greedy path is always among
/// the final candidates, so a wider beam never scores below greedy.
pub fn generate_sentence(
    model: &Model,
    dc: &DecodeContext,
    cond: &Condition,
    lex: &dyn Lexicon,
    beam: usize,
) -> Result<GeneratedSentence> {
    let beam = beam.max(1);
    let mut finished = search(model, dc, cond, lex, beam)?;
    if beam > 1 {
        finished.extend(search(model, dc, cond, lex, 1)?);
    }
    let best = finished
        .into_iter()
        .max_by(|a, b| a.normalized().total_cmp(&b.normalized()).then_with(|| b.actions.cmp(&a.actions)));
    let Some(best) = best else {
        return Ok(GeneratedSentence {
            actions: Vec::new(),
            words: Vec::new(),
            tags: Vec::new(),
            score: f64::NEG_INFINITY,
        });
    };
    let score = best.normalized();
    let mut actions = best.actions;
    if actions.last() == Some(&Action::Gen(EOS)) {
        actions.pop();
    }
    let mut words = Vec::new();
    let mut tags = Vec::new();
    for a in &actions {
        match *a {
            Action::Gen(w) => {
                words.push(lex.word(w).to_string());
                tags.push(Source::Gen);
            }
            Action::Copy(n) => {
                for s in lex.surface(n) {
                    words.push(s.clone());
                    tags.push(Source::Copy);
                }
            }
        }
    }
    Ok(GeneratedSentence {
        actions,
        words,
        tags,
        score,
    })
}

/// One sentence per non-STOP plan step.
pub fn realize_document(
    model: &Model,
    plan: &DocumentPlan,
    dc: &DecodeContext,
    lex: &dyn Lexicon,
    beam: usize,
) -> Result<Vec<GeneratedSentence>> {
    plan.sentences()
        .map(|step| generate_sentence(model, dc, &Condition::from_step(step), lex, beam))
        .collect()
}

/// One line of the generated-output JSONL.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratedReview {
    pub review: usize,
    pub user: String,
    pub item: String,
    pub rating: u8,
    pub sentences: Vec<String>,
    pub plan: Vec<PlanStep>,
    pub tags: Vec<Vec<Source>>,
    /// Copied node names per sentence.
    pub copied: Vec<Vec<String>>,
}

impl GeneratedReview {
    pub fn new(
        review: usize,
        ctx: &GenerationContext,
        registry: &NodeRegistry,
        plan: &DocumentPlan,
        sentences: &[GeneratedSentence],
    ) -> Self {
        GeneratedReview {
            review,
            user: registry.name(ctx.user).into(),
            item: registry.name(ctx.item).into(),
            rating: ctx.rating,
            sentences: sentences.iter().map(GeneratedSentence::text).collect(),
            plan: plan.steps.clone(),
            tags: sentences.iter().map(|s| s.tags.clone()).collect(),
            copied: sentences
                .iter()
                .map(|s| s.copied_nodes().iter().map(|&n| registry.name(n).to_string()).collect())
                .collect(),
        }
    }

    /// Rebuilds sentences from the stored text, tags and copied names; the
    /// actions hold only the copy steps.
    pub fn to_sentences(&self, registry: &NodeRegistry) -> Result<Vec<GeneratedSentence>> {
        if self.tags.len() != self.sentences.len() || self.copied.len() != self.sentences.len() {
            return Err(Error::Shape(format!("review {}: sentence, tag and copy lists differ in length", self.review)));
        }
        self.sentences
            .iter()
            .zip(&self.tags)
            .zip(&self.copied)
            .map(|((text, tags), copied)| {
                let words: Vec<String> = text.split_whitespace().map(str::to_string).collect();
                if words.len() != tags.len() {
                    return Err(Error::Shape(format!("review {}: tag count differs from token count", self.review)));
                }
                let actions = copied
                    .iter()
                    .map(|name| registry.lookup(name).map(Action::Copy))
                    .collect::<Result<Vec<_>>>()?;
                Ok(GeneratedSentence {
                    actions,
                    words,
                    tags: tags.clone(),
                    score: f64::NAN,
                })
            })
            .collect()
    }
}

pub const GENERATED_FORMAT: &str = "cetp-generated";
pub const GENERATED_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct GeneratedHeader {
    format: String,
    version: u32,
}

pub fn write_generated(path: &Path, reviews: &[GeneratedReview]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer(
        &mut f,
        &GeneratedHeader {
            format: GENERATED_FORMAT.into(),
            version: GENERATED_VERSION,
        },
    )?;
    writeln!(f)?;
    for r in reviews {
        serde_json::to_writer(&mut f, r)?;
        writeln!(f)?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_generated(path: &Path) -> Result<Vec<GeneratedReview>> {
    let text = std::fs::read_to_string(path)?;
    let name = path.display().to_string();
    let mut lines = text.lines();
    let header: GeneratedHeader = serde_json::from_str(lines.next().unwrap_or("")).map_err(|e| Error::Parse {
        path: name.clone(),
        line: 1,
        msg: e.to_string(),
    })?;
    if header.format != GENERATED_FORMAT || header.version != GENERATED_VERSION {
        return Err(Error::Version {
            what: name,
            expected: format!("{GENERATED_FORMAT} v{GENERATED_VERSION}"),
            found: format!("{} v{}", header.format, header.version),
        });
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: name.clone(),
                line: i + 2,
                msg: e.to_string(),
            })
        })
        .collect()
}
