//! Document planning: subgraph-sequence encoding with subgraph- and
//! node-level attention, schema and node prediction, and greedy plan decoding.

use std::collections::{BTreeMap, HashMap};

use crate::autograd::{Tape, Var};
use crate::corpus::GenerationContext;
use crate::encoder::{encode_nodes, Encoded, GraphInput};
use crate::error::{Error, Result};
use crate::hkg::{Hkg, NodeId, NodeKind, NodeRegistry};
use crate::mining::{instantiate_schema, DocumentPlan, PlanStep, SchemaRegistry, EMPTY, STOP};
use crate::model::Model;
use crate::nn::Run;

/// Dense rows of users and items in the context embedding tables.
#[derive(Clone, Debug, Default)]
pub struct ContextIndex {
    users: HashMap<NodeId, usize>,
    items: HashMap<NodeId, usize>,
}

impl ContextIndex {
    pub fn from_registry(reg: &NodeRegistry) -> Self {
        let index = |kind| {
            reg.ids_of_kind(kind)
                .into_iter()
                .enumerate()
                .map(|(i, n)| (n, i))
                .collect()
        };
        ContextIndex {
            users: index(NodeKind::User),
            items: index(NodeKind::Item),
        }
    }

    pub fn user_count(&self) -> usize {
        self.users.len()
    }

    pub fn item_count(&self) -> usize {
        self.items.len()
    }

    /// `[3, d_e]` rows: user, item, rating embeddings.
    pub fn rows(&self, tape: &mut Tape, model: &Model, ctx: &GenerationContext) -> Result<Var> {
        let u = *self
            .users
            .get(&ctx.user)
            .ok_or_else(|| Error::UnknownNode(format!("user #{}", ctx.user.0)))?;
        let i = *self
            .items
            .get(&ctx.item)
            .ok_or_else(|| Error::UnknownNode(format!("item #{}", ctx.item.0)))?;
        if ctx.rating == 0 || ctx.rating as usize > model.cfg.rating_levels {
            return Err(Error::Config(format!("rating {} outside the rating scale", ctx.rating)));
        }
        let (tu, ti, ta) = (
            tape.param(model.shared.user),
            tape.param(model.shared.item),
            tape.param(model.shared.rating),
        );
        let ru = tape.gather_rows(tu, vec![u]);
        let ri = tape.gather_rows(ti, vec![i]);
        let ra = tape.gather_rows(ta, vec![ctx.rating as usize - 1]);
        Ok(tape.concat_rows(&[ru, ri, ra]))
    }
}

/// One position of the subgraph sequence fed to the planner.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum PlanItem {
    Start,
    Empty,
    Stop,
    Nodes(Vec<NodeId>),
}

impl PlanItem {
    pub fn from_step(step: &PlanStep) -> PlanItem {
        match step.schema_id {
            STOP => PlanItem::Stop,
            EMPTY => PlanItem::Empty,
            _ => PlanItem::Nodes(step.nodes.clone()),
        }
    }

    fn nodes(&self) -> &[NodeId] {
        match self {
            PlanItem::Nodes(n) => n,
            _ => &[],
        }
    }
}

/// Mean of member node embeddings, or the dedicated START/EMPTY/STOP vector.
pub fn embed_subgraph(tape: &mut Tape, model: &Model, enc: &Encoded, item: &PlanItem) -> Result<Var> {
    match item {
        PlanItem::Start => Ok(tape.param(model.plan.start)),
        PlanItem::Empty => Ok(tape.param(model.plan.empty)),
        PlanItem::Stop => Ok(tape.param(model.plan.stop)),
        PlanItem::Nodes(nodes) => {
            if nodes.is_empty() {
                return Err(Error::Schema("subgraph without nodes".into()));
            }
            let rows = nodes
                .iter()
                .map(|&n| {
                    enc.row(n)
                        .ok_or_else(|| Error::UnknownNode(format!("#{} not in the encoded graph", n.0)))
                })
                .collect::<Result<Vec<_>>>()?;
            let g = tape.gather_rows(enc.h, rows);
            Ok(tape.mean_rows(g))
        }
    }
}

/// Planner states `ṽ_g` `[m, d_e]` for a subgraph sequence starting at
/// START. Position j attends only to positions `< j` and to the nodes of
/// their subgraphs, so each row is unaffected by later items.
pub fn encode_plan_prefix(
    tape: &mut Tape,
    run: &mut Run,
    model: &Model,
    enc: &Encoded,
    items: &[PlanItem],
) -> Result<Var> {
    let m = items.len();
    if m == 0 {
        return Err(Error::Shape("empty plan prefix".into()));
    }
    let rows = items
        .iter()
        .map(|it| embed_subgraph(tape, model, enc, it))
        .collect::<Result<Vec<_>>>()?;
    let mut x = tape.concat_rows(&rows);

    let sub_mask: Vec<bool> = (0..m * m).map(|i| i % m < i / m).collect();
    let mut key_rows = Vec::new();
    let mut key_pos = Vec::new();
    for (p, it) in items.iter().enumerate() {
        for &n in it.nodes() {
            key_rows.push(enc.row(n).expect("checked by embed_subgraph"));
            key_pos.push(p);
        }
    }
    let kn = key_rows.len();
    let node_mask: Vec<bool> = (0..m * kn).map(|i| key_pos[i % kn] < i / kn).collect();
    let node_keys = (kn > 0).then(|| tape.gather_rows(enc.h, key_rows));

    for block in &model.plan.blocks {
        if model.cfg.use_subgraph_attention {
            let xl = block.ln_sub.forward(tape, x);
            let a = block
                .sub_attn
                .forward(tape, run, "subgraph_attention", xl, xl, Some(&sub_mask));
            x = tape.add(x, a);
        }
        if model.cfg.use_node_attention {
            if let Some(keys) = node_keys {
                let xl = block.ln_node.forward(tape, x);
                let a = block
                    .node_attn
                    .forward(tape, run, "node_attention", xl, keys, Some(&node_mask));
                x = tape.add(x, a);
            }
        }
        let xl = block.ln_ffn.forward(tape, x);
        let f = block.ffn.forward(tape, run, xl);
        x = tape.add(x, f);
    }
    Ok(model.plan.ln_out.forward(tape, x))
}

/// Additive attention of planner states over ⟨u, i, a⟩; returns `c̃ [m, d_e]`.
pub fn context_vector(tape: &mut Tape, run: &mut Run, model: &Model, query: Var, ctx_rows: Var) -> Var {
    model.plan.ctx.forward(tape, run, query, ctx_rows).0
}

/// Log-probabilities over all schemas `[m, S]`.
pub fn predict_next_schema(tape: &mut Tape, run: &mut Run, model: &Model, h: Var, c: Var) -> Var {
    let hc = tape.concat_cols(&[h, c]);
    let logits = model.plan.w4.forward(tape, hc);
    if run.is_probing() {
        let p = tape.softmax(logits, None);
        run.record("schema_distribution", tape, p, None);
    }
    tape.log_softmax(logits)
}

/// Log-probabilities over the encoded graph's nodes `[m, n]` (columns in
/// `enc.nodes` order); nodes outside the graph get no mass.
pub fn predict_next_nodes(
    tape: &mut Tape,
    run: &mut Run,
    model: &Model,
    h: Var,
    c: Var,
    enc: &Encoded,
) -> Var {
    let hc = tape.concat_cols(&[h, c]);
    let idx: Vec<usize> = enc.nodes.iter().map(|n| n.index()).collect();
    let w5 = tape.param(model.plan.w5);
    let b5 = tape.param(model.plan.b5);
    let w = tape.gather_rows(w5, idx.clone());
    let wt = tape.transpose(w);
    let b = tape.gather_rows(b5, idx);
    let bt = tape.transpose(b);
    let logits = tape.matmul(hc, wt);
    let logits = tape.add_row(logits, bt);
    if run.is_probing() {
        let p = tape.softmax(logits, None);
        run.record("node_distribution", tape, p, None);
    }
    tape.log_softmax(logits)
}

/// Everything the planner needs for one (user, item) pair.
pub struct PlanContext<'a> {
    pub local: &'a Hkg,
    pub graph: &'a GraphInput,
    pub ctx: GenerationContext,
}

/// Greedy plan decoding. The most probable schema is taken at each step;
/// a schema that cannot be instantiated on the local graph falls through to
/// the next most probable one (STOP and EMPTY are always feasible).
pub fn plan_document(
    model: &Model,
    pc: &PlanContext,
    cidx: &ContextIndex,
    registry: &SchemaRegistry,
) -> Result<DocumentPlan> {
    if registry.len() != model.cfg.schema_count {
        return Err(Error::Shape("schema registry does not match the model".into()));
    }
    let mut tape = Tape::new(&model.store);
    let mut run = Run::eval();
    let enc = encode_nodes(&mut tape, &mut run, model, pc.graph)?;
    let ctx_rows = cidx.rows(&mut tape, model, &pc.ctx)?;
    let mut items = vec![PlanItem::Start];
    let mut steps = Vec::new();
    let max_sentences = model.cfg.max_plan_len.saturating_sub(1);
    while steps.len() < max_sentences {
        let h = encode_plan_prefix(&mut tape, &mut run, model, &enc, &items)?;
        let last = tape.gather_rows(h, vec![items.len() - 1]);
        let c = context_vector(&mut tape, &mut run, model, last, ctx_rows);
        let s_logp = predict_next_schema(&mut tape, &mut run, model, last, c);
        let n_logp = predict_next_nodes(&mut tape, &mut run, model, last, c, &enc);
        let scores: BTreeMap<NodeId, f64> = enc
            .nodes
            .iter()
            .zip(&tape.value(n_logp).data)
            .map(|(&n, &lp)| (n, lp.exp()))
            .collect();
        let score = |n: NodeId| scores.get(&n).copied().unwrap_or(0.0);
        let mut ranked: Vec<(usize, f64)> = tape.value(s_logp).data.iter().copied().enumerate().collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let mut chosen = None;
        for (sid, _) in ranked {
            match sid {
                STOP | EMPTY => {
                    chosen = Some(PlanStep {
                        schema_id: sid,
                        nodes: Vec::new(),
                    });
                }
                _ => {
                    if let Some(nodes) = instantiate_schema(registry.get(sid), &score, pc.local) {
                        chosen = Some(PlanStep { schema_id: sid, nodes });
                    }
                }
            }
            if chosen.is_some() {
                break;
            }
        }
        let step = chosen.expect("STOP is always feasible");
        if step.schema_id == STOP {
            break;
        }
        items.push(PlanItem::from_step(&step));
        steps.push(step);
    }
    steps.push(PlanStep::stop());
    Ok(DocumentPlan { steps })
}

/// Schema and node distributions for a fixed prefix, as plain values.
pub fn next_distributions(
    model: &Model,
    pc: &PlanContext,
    cidx: &ContextIndex,
    items: &[PlanItem],
) -> Result<(Vec<f64>, Vec<(NodeId, f64)>)> {
    let mut tape = Tape::new(&model.store);
    let mut run = Run::eval();
    let enc = encode_nodes(&mut tape, &mut run, model, pc.graph)?;
    let ctx_rows = cidx.rows(&mut tape, model, &pc.ctx)?;
    let h = encode_plan_prefix(&mut tape, &mut run, model, &enc, items)?;
    let last = tape.gather_rows(h, vec![items.len() - 1]);
    let c = context_vector(&mut tape, &mut run, model, last, ctx_rows);
    let s = predict_next_schema(&mut tape, &mut run, model, last, c);
    let n = predict_next_nodes(&mut tape, &mut run, model, last, c, &enc);
    let schema = tape.value(s).data.iter().map(|x| x.exp()).collect();
    let nodes = enc
        .nodes
        .iter()
        .zip(&tape.value(n).data)
        .map(|(&id, lp)| (id, lp.exp()))
        .collect();
    Ok((schema, nodes))
}
