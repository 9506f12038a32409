//! Teacher-forced losses and two-stage optimization.
//!
//! Stage 1 trains the encoder and planner on the plan loss; stage 2 trains
//! the decoder and copy heads on the realization loss while fine-tuning the
//! shared embeddings at a reduced rate.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Grads, ParamGroup, ParamStore, Tape, Var};
use crate::config::TrainConfig;
use crate::corpus::{GenerationContext, ReviewDocument, Vocab};
use crate::encoder::{encode_nodes, Encoded, GraphInput};
use crate::error::{Error, Result};
use crate::hkg::{local_hkg, Hkg};
use crate::mining::{align_sentence_subgraphs, DocumentPlan, SchemaRegistry, STOP};
use crate::model::Model;
use crate::nn::Run;
use crate::planner::{context_vector, encode_plan_prefix, predict_next_nodes, predict_next_schema, ContextIndex, PlanItem};
use crate::realizer::{gold_actions, sentence_losses, Action, Condition};
use crate::tensor::Matrix;

/// One review prepared for teacher forcing.
#[derive(Clone, Debug)]
pub struct Example {
    pub review: usize,
    pub ctx: GenerationContext,
    pub local: Hkg,
    pub graph: GraphInput,
    /// Gold plan ending in STOP.
    pub plan: DocumentPlan,
    /// One entry per non-STOP plan step.
    pub sentences: Vec<(Condition, Vec<Action>)>,
}

impl Example {
    pub fn action_count(&self) -> usize {
        self.sentences.iter().map(|(_, a)| a.len()).sum()
    }
}

pub struct ExampleSettings {
    pub local_cap: usize,
    pub max_slots: usize,
    pub max_plan_len: usize,
    pub max_sent_len: usize,
    pub max_path_hops: usize,
    pub relation_count: usize,
    pub use_copy: bool,
}

impl ExampleSettings {
    pub fn from_config(cfg: &crate::config::Config) -> Self {
        ExampleSettings {
            local_cap: cfg.data.local_cap,
            max_slots: cfg.mining.max_slots,
            max_plan_len: cfg.model.max_plan_len,
            max_sent_len: cfg.model.max_sent_len,
            max_path_hops: cfg.model.max_path_hops,
            relation_count: cfg.model.relation_count,
            use_copy: cfg.model.use_copy,
        }
    }
}

/// Aligns, labels and converts one review. Returns the example and the
/// number of remapped sentence schemas.
pub fn prepare_example(
    index: usize,
    review: &ReviewDocument,
    hkg: &Hkg,
    schemas: &SchemaRegistry,
    vocab: &Vocab,
    st: &ExampleSettings,
) -> Result<(Example, usize)> {
    let local = local_hkg(hkg, review.ctx.user, review.ctx.item, st.local_cap)?.graph;
    let aligned = align_sentence_subgraphs(&review.sentence_mentions(), &local, st.max_slots);
    let (plan, remapped) = schemas.label_review(&aligned, hkg.relations(), st.max_plan_len);
    let sentences = plan
        .sentences()
        .zip(&review.sentences)
        .map(|(step, s)| {
            let cond = Condition::from_step(step);
            let actions = gold_actions(s, &cond, vocab, st.use_copy, st.max_sent_len);
            (cond, actions)
        })
        .collect();
    let graph = GraphInput::new(&local, st.max_path_hops, st.relation_count)?;
    Ok((
        Example {
            review: index,
            ctx: review.ctx,
            local,
            graph,
            plan,
            sentences,
        },
        remapped,
    ))
}

/// Plan loss pieces of one example, as tape variables.
pub struct PlanTerms {
    pub schema_nll: Var,
    pub node_nll: Option<Var>,
    pub total: Var,
    /// `(position, predicted, gold)` per plan step.
    pub schema_hits: Vec<(usize, usize, usize)>,
}

fn gold_items(plan: &DocumentPlan) -> Vec<PlanItem> {
    let mut items = vec![PlanItem::Start];
    items.extend(plan.steps[..plan.steps.len() - 1].iter().map(PlanItem::from_step));
    items
}

pub fn plan_terms(
    tape: &mut Tape,
    run: &mut Run,
    model: &Model,
    ex: &Example,
    enc: &Encoded,
    ctx_rows: Var,
) -> Result<PlanTerms> {
    let plan = &ex.plan;
    if !plan.is_complete() {
        return Err(Error::Schema(format!("review {}: gold plan does not end in STOP", ex.review)));
    }
    if let Some(bad) = plan.steps.iter().find(|s| s.schema_id >= model.cfg.schema_count) {
        return Err(Error::Schema(format!("review {}: schema {} outside the registry", ex.review, bad.schema_id)));
    }
    let items = gold_items(plan);
    let h = encode_plan_prefix(tape, run, model, enc, &items)?;
    let c = context_vector(tape, run, model, h, ctx_rows);
    let s_logp = predict_next_schema(tape, run, model, h, c);
    let n_logp = predict_next_nodes(tape, run, model, h, c, enc);

    let gold: Vec<(usize, usize)> = plan.steps.iter().enumerate().map(|(j, s)| (j, s.schema_id)).collect();
    let picked = tape.pick(s_logp, gold.clone());
    let ll = tape.sum(picked);
    let schema_nll = tape.scale(ll, -1.0);
    let mut node_at = Vec::new();
    for (j, step) in plan.steps.iter().enumerate() {
        for &n in &step.nodes {
            let col = enc
                .row(n)
                .ok_or_else(|| Error::UnknownNode(format!("review {}: plan node #{} outside the local graph", ex.review, n.0)))?;
            node_at.push((j, col));
        }
    }
    let node_nll = (!node_at.is_empty()).then(|| {
        let p = tape.pick(n_logp, node_at);
        let s = tape.sum(p);
        tape.scale(s, -1.0)
    });
    let total = match node_nll {
        Some(n) => tape.add(schema_nll, n),
        None => schema_nll,
    };
    let sv = tape.value(s_logp);
    let schema_hits = gold
        .iter()
        .map(|&(j, g)| {
            let row = sv.row(j);
            let pred = (0..row.len()).fold(0, |best, k| if row[k] > row[best] { k } else { best });
            (j, pred, g)
        })
        .collect();
    Ok(PlanTerms {
        schema_nll,
        node_nll,
        total,
        schema_hits,
    })
}

/// Realization loss pieces of one example.
pub struct RealizeTerms {
    pub word_nll: Var,
    pub si: Option<Var>,
    pub total: Var,
    pub actions: usize,
}

pub fn realize_terms(
    tape: &mut Tape,
    run: &mut Run,
    model: &Model,
    ex: &Example,
    enc: &Encoded,
    ctx_rows: Var,
    si_weight: f64,
) -> Result<Option<RealizeTerms>> {
    let mut nll = Vec::new();
    let mut si = Vec::new();
    let mut actions = 0;
    for (cond, acts) in &ex.sentences {
        let (n, s) = sentence_losses(tape, run, model, enc, ctx_rows, cond, acts)?;
        nll.push(n);
        si.extend(s);
        actions += acts.len();
    }
    if nll.is_empty() {
        return Ok(None);
    }
    let word_nll = sum_all(tape, &nll);
    let si = (!si.is_empty()).then(|| sum_all(tape, &si));
    let total = match si {
        Some(s) => {
            let w = tape.scale(s, si_weight);
            tape.add(word_nll, w)
        }
        None => word_nll,
    };
    Ok(Some(RealizeTerms {
        word_nll,
        si,
        total,
        actions,
    }))
}

fn sum_all(tape: &mut Tape, vs: &[Var]) -> Var {
    let mut acc = vs[0];
    for &v in &vs[1..] {
        acc = tape.add(acc, v);
    }
    acc
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Plan,
    Realize,
}

impl Stage {
    pub fn number(self) -> u8 {
        match self {
            Stage::Plan => 1,
            Stage::Realize => 2,
        }
    }

    /// Learning-rate multiplier per parameter group; 0 freezes.
    pub fn group_scale(self, group: ParamGroup, shared_scale: f64) -> f64 {
        match (self, group) {
            (Stage::Plan, ParamGroup::Planner | ParamGroup::Shared) => 1.0,
            (Stage::Plan, ParamGroup::Realizer) => 0.0,
            (Stage::Realize, ParamGroup::Realizer) => 1.0,
            (Stage::Realize, ParamGroup::Shared) => shared_scale,
            (Stage::Realize, ParamGroup::Planner) => 0.0,
        }
    }
}

/// Loss of one example for `stage`, building a fresh graph on `tape`.
fn example_loss(
    tape: &mut Tape,
    run: &mut Run,
    model: &Model,
    cidx: &ContextIndex,
    ex: &Example,
    stage: Stage,
    si_weight: f64,
) -> Result<Option<(Var, LossParts)>> {
    let enc = encode_nodes(tape, run, model, &ex.graph)?;
    let ctx_rows = cidx.rows(tape, model, &ex.ctx)?;
    match stage {
        Stage::Plan => {
            let t = plan_terms(tape, run, model, ex, &enc, ctx_rows)?;
            let parts = LossParts {
                schema: tape.scalar(t.schema_nll),
                nodes: t.node_nll.map_or(0.0, |v| tape.scalar(v)),
                schema_correct: t.schema_hits.iter().filter(|h| h.1 == h.2).count(),
                schema_total: t.schema_hits.len(),
                ..LossParts::default()
            };
            Ok(Some((t.total, parts)))
        }
        Stage::Realize => {
            let Some(t) = realize_terms(tape, run, model, ex, &enc, ctx_rows, si_weight)? else {
                return Ok(None);
            };
            let parts = LossParts {
                word_nll: tape.scalar(t.word_nll),
                si: t.si.map_or(0.0, |v| tape.scalar(v)),
                actions: t.actions,
                ..LossParts::default()
            };
            Ok(Some((t.total, parts)))
        }
    }
}

/// Summed loss components over a set of examples.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub schema: f64,
    pub nodes: f64,
    pub schema_correct: usize,
    pub schema_total: usize,
    pub word_nll: f64,
    pub si: f64,
    pub actions: usize,
}

impl LossParts {
    fn add(&mut self, o: &LossParts) {
        self.schema += o.schema;
        self.nodes += o.nodes;
        self.schema_correct += o.schema_correct;
        self.schema_total += o.schema_total;
        self.word_nll += o.word_nll;
        self.si += o.si;
        self.actions += o.actions;
    }

    pub fn schema_accuracy(&self) -> f64 {
        self.schema_correct as f64 / self.schema_total.max(1) as f64
    }

    /// `exp` of the mean word NLL per decoder action.
    pub fn perplexity(&self) -> f64 {
        (self.word_nll / self.actions.max(1) as f64).exp()
    }
}

/// Mean plan loss over `batch` without dropout.
pub fn plan_loss(model: &Model, cidx: &ContextIndex, batch: &[&Example]) -> Result<f64> {
    mean_loss(model, cidx, batch, Stage::Plan, 1.0)
}

/// Mean realization loss (word NLL + `si_weight` · switch BCE) over `batch`.
pub fn realize_loss(model: &Model, cidx: &ContextIndex, batch: &[&Example], si_weight: f64) -> Result<f64> {
    mean_loss(model, cidx, batch, Stage::Realize, si_weight)
}

fn mean_loss(model: &Model, cidx: &ContextIndex, batch: &[&Example], stage: Stage, si_weight: f64) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Shape("empty batch".into()));
    }
    let mut sum = 0.0;
    for ex in batch {
        let mut tape = Tape::new(&model.store);
        if let Some((loss, _)) = example_loss(&mut tape, &mut Run::eval(), model, cidx, ex, stage, si_weight)? {
            sum += tape.scalar(loss);
        }
    }
    Ok(sum / batch.len() as f64)
}

/// Mean loss and its gradient over `batch`. `dropout_seed` of `None`
/// disables dropout.
pub fn batch_gradients(
    model: &Model,
    cidx: &ContextIndex,
    batch: &[&Example],
    stage: Stage,
    si_weight: f64,
    dropout_seed: Option<u64>,
) -> Result<(f64, LossParts, Grads)> {
    if batch.is_empty() {
        return Err(Error::Shape("empty batch".into()));
    }
    let mut grads = Grads::zeros_like(&model.store);
    let mut loss = 0.0;
    let mut parts = LossParts::default();
    let w = 1.0 / batch.len() as f64;
    for (k, ex) in batch.iter().enumerate() {
        let mut run = match dropout_seed {
            Some(s) => Run::train(model.cfg.dropout, mix_seed(s, k as u64)),
            None => Run::eval(),
        };
        let mut tape = Tape::new(&model.store);
        let Some((l, p)) = example_loss(&mut tape, &mut run, model, cidx, ex, stage, si_weight)? else {
            continue;
        };
        loss += w * tape.scalar(l);
        parts.add(&p);
        grads.add_scaled(&tape.backward(l), w);
    }
    Ok((loss, parts, grads))
}

fn mix_seed(a: u64, b: u64) -> u64 {
    // splitmix64 finalizer over the pair
    let mut z = a ^ b.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Warmup then inverse square root, peaking at `peak` after `warmup` steps.
pub fn noam_lr(peak: f64, warmup: usize, step: usize) -> f64 {
    let step = step.max(1) as f64;
    let warmup = warmup.max(1) as f64;
    peak * (step / warmup).min((warmup / step).sqrt())
}

/// Adam with per-group learning-rate scales; frozen parameters keep their
/// values and moments.
pub struct Adam {
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    t: usize,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(store: &ParamStore, cfg: &TrainConfig) -> Self {
        let zeros = |id| {
            let p: &Matrix = store.get(id);
            Matrix::zeros(p.rows, p.cols)
        };
        Adam {
            m: store.ids().map(zeros).collect(),
            v: store.ids().map(zeros).collect(),
            t: 0,
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads, lr: f64, scale: &dyn Fn(ParamGroup) -> f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (id, g) in grads.iter() {
            let s = scale(store.group(id));
            if s == 0.0 {
                continue;
            }
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            let p = store.get_mut(id);
            for i in 0..g.data.len() {
                let gi = g.data[i];
                m.data[i] = self.beta1 * m.data[i] + (1.0 - self.beta1) * gi;
                v.data[i] = self.beta2 * v.data[i] + (1.0 - self.beta2) * gi * gi;
                let mh = m.data[i] / bc1;
                let vh = v.data[i] / bc2;
                p.data[i] -= lr * s * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

/// Scales `grads` so their global norm is at most `max_norm`.
pub fn clip_grads(grads: &mut Grads, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if max_norm > 0.0 && norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub stage: u8,
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub schema_nll: f64,
    pub node_nll: f64,
    pub word_nll: f64,
    pub si: f64,
    pub lr: f64,
    pub grad_norm: f64,
    /// Set on the last step of an epoch when validation data exists.
    pub valid_loss: Option<f64>,
}

pub const METRICS_HEADER: &str = "stage,epoch,step,loss,schema_nll,node_nll,word_nll,si,lr,grad_norm,valid_loss";

impl MetricRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.8},{:.6},{}",
            self.stage,
            self.epoch,
            self.step,
            self.loss,
            self.schema_nll,
            self.node_nll,
            self.word_nll,
            self.si,
            self.lr,
            self.grad_norm,
            self.valid_loss.map(|v| format!("{v:.6}")).unwrap_or_default()
        )
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Stage checkpoints `stage1.ckpt` and `stage2.ckpt` are written here.
    pub checkpoint_dir: Option<PathBuf>,
    pub metrics_csv: Option<PathBuf>,
    pub stages: Vec<u8>,
}

impl TrainOptions {
    pub fn both_stages() -> Self {
        TrainOptions {
            stages: vec![1, 2],
            ..TrainOptions::default()
        }
    }
}

pub struct TrainOutcome {
    pub rows: Vec<MetricRow>,
    /// Epoch-mean training loss per stage, in order.
    pub epoch_losses: Vec<(u8, Vec<f64>)>,
}

/// Runs the requested stages in order on `model`.
pub fn train(
    model: &mut Model,
    cidx: &ContextIndex,
    train_set: &[Example],
    valid_set: &[Example],
    cfg: &TrainConfig,
    seed: u64,
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    if train_set.is_empty() {
        return Err(Error::Config("no training examples".into()));
    }
    let mut csv = match &opts.metrics_csv {
        Some(p) => {
            let mut f = std::io::BufWriter::new(std::fs::File::create(p)?);
            writeln!(f, "{METRICS_HEADER}")?;
            Some(f)
        }
        None => None,
    };
    let mut rows = Vec::new();
    let mut epoch_losses = Vec::new();
    for &stage_no in &opts.stages {
        let (stage, epochs) = match stage_no {
            1 => (Stage::Plan, cfg.stage1_epochs),
            2 => (Stage::Realize, cfg.stage2_epochs),
            other => return Err(Error::Config(format!("unknown stage {other}"))),
        };
        let mut adam = Adam::new(&model.store, cfg);
        let mut step = 0usize;
        let mut losses = Vec::with_capacity(epochs);
        for epoch in 0..epochs {
            let mut order: Vec<usize> = (0..train_set.len()).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, (stage_no as u64) << 32 | epoch as u64));
            order.shuffle(&mut rng);
            let mut epoch_sum = 0.0;
            let mut batches = 0usize;
            for (b, chunk) in order.chunks(cfg.batch_size.max(1)).enumerate() {
                step += 1;
                let batch: Vec<&Example> = chunk.iter().map(|&i| &train_set[i]).collect();
                let drop_seed = mix_seed(seed ^ 0x5eed, (stage_no as u64) << 48 | step as u64);
                let (loss, parts, mut grads) = batch_gradients(model, cidx, &batch, stage, cfg.si_weight, Some(drop_seed))?;
                if !loss.is_finite() || !grads.is_finite() {
                    return Err(Error::NonFiniteLoss { step, batch: b });
                }
                let grad_norm = clip_grads(&mut grads, cfg.grad_clip);
                let lr = noam_lr(cfg.lr, cfg.warmup_steps, step);
                let shared = cfg.shared_lr_scale;
                adam.step(&mut model.store, &grads, lr, &|g| stage.group_scale(g, shared));
                epoch_sum += loss;
                batches += 1;
                let n = batch.len() as f64;
                rows.push(MetricRow {
                    stage: stage_no,
                    epoch,
                    step,
                    loss,
                    schema_nll: parts.schema / n,
                    node_nll: parts.nodes / n,
                    word_nll: parts.word_nll / n,
                    si: parts.si / n,
                    lr,
                    grad_norm,
                    valid_loss: None,
                });
            }
            if !valid_set.is_empty() {
                let refs: Vec<&Example> = valid_set.iter().collect();
                let v = mean_loss(model, cidx, &refs, stage, cfg.si_weight)?;
                if let Some(last) = rows.last_mut() {
                    last.valid_loss = Some(v);
                }
            }
            let mean = epoch_sum / batches.max(1) as f64;
            log::info!("stage {stage_no} epoch {epoch}: loss {mean:.4}");
            losses.push(mean);
            if let Some(f) = csv.as_mut() {
                let start = rows.len() - batches;
                for r in &rows[start..] {
                    writeln!(f, "{}", r.csv())?;
                }
                f.flush()?;
            }
        }
        epoch_losses.push((stage_no, losses));
        if let Some(dir) = &opts.checkpoint_dir {
            std::fs::create_dir_all(dir)?;
            model.save(&dir.join(format!("stage{stage_no}.ckpt")))?;
        }
    }
    Ok(TrainOutcome { rows, epoch_losses })
}

/// Teacher-forced schema accuracy, plan loss, token perplexity and
/// realization loss over `examples`, without dropout.
pub fn teacher_forced_stats(model: &Model, cidx: &ContextIndex, examples: &[Example], si_weight: f64) -> Result<LossParts> {
    let mut total = LossParts::default();
    for ex in examples {
        for stage in [Stage::Plan, Stage::Realize] {
            let mut tape = Tape::new(&model.store);
            if let Some((_, p)) = example_loss(&mut tape, &mut Run::eval(), model, cidx, ex, stage, si_weight)? {
                total.add(&p);
            }
        }
    }
    Ok(total)
}

/// Gold plans of `examples` with their review indices.
pub fn gold_plans(examples: &[Example]) -> Vec<(usize, DocumentPlan)> {
    examples.iter().map(|e| (e.review, e.plan.clone())).collect()
}

/// Non-STOP schema ids of a plan.
pub fn sentence_schemas(plan: &DocumentPlan) -> Vec<usize> {
    plan.steps.iter().map(|s| s.schema_id).filter(|&s| s != STOP).collect()
}

pub fn checkpoint_path(dir: &Path, stage: u8) -> PathBuf {
    dir.join(format!("stage{stage}.ckpt"))
}
