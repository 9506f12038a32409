//! Relation-enhanced graph transformer over a local HKG.
//!
//! For nodes j, k with shortest relation path encoding p_jk, block queries
//! and keys are `q_jk = LN(x_j) + p_jk` and `k_kj = LN(x_k) + p_kj`; the
//! score of head h is `(q_jk W^Q_h) · (k_kj W^K_h) / sqrt(d_h)` and attention
//! runs over every node pair of the graph.

use std::collections::HashMap;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::hkg::{Hkg, NodeId, PathTable, RelationPath};
use crate::model::Model;
use crate::nn::Run;
use crate::tensor::Matrix;

/// Parameter-independent encoder input for one local graph.
#[derive(Clone, Debug)]
pub struct GraphInput {
    /// Ascending node ids; row order of every encoder output.
    pub nodes: Vec<NodeId>,
    /// `[n², R+1]` relation multiplicities of the path from row-major pair
    /// `(j, k)`; the last column marks "no path".
    pub path_counts: Matrix,
}

impl GraphInput {
    pub fn new(local: &Hkg, max_hops: usize, relation_count: usize) -> Result<GraphInput> {
        let table = PathTable::compute(local, max_hops);
        let n = table.len();
        let mut counts = Matrix::zeros(n * n, relation_count + 1);
        for j in 0..n {
            for k in 0..n {
                let row = j * n + k;
                match table.get(j, k) {
                    RelationPath::NoPath => counts.set(row, relation_count, 1.0),
                    RelationPath::Path(rels) => {
                        for r in rels {
                            if r.index() >= relation_count {
                                return Err(Error::UnknownRelation(format!("#{}", r.0)));
                            }
                            let c = counts.get(row, r.index());
                            counts.set(row, r.index(), c + 1.0);
                        }
                    }
                }
            }
        }
        Ok(GraphInput {
            nodes: table.nodes,
            path_counts: counts,
        })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

/// Sum of relation embeddings along `path`; the no-path row for NO_PATH.
pub fn relation_path_encoding(path: &RelationPath, model: &Model) -> Result<Vec<f64>> {
    let table = model.store.get(model.enc.relations);
    let r_count = model.cfg.relation_count;
    match path {
        RelationPath::NoPath => Ok(table.row(r_count).to_vec()),
        RelationPath::Path(rels) => {
            if rels.len() > model.cfg.max_path_hops {
                return Err(Error::Shape(format!(
                    "path of {} hops exceeds max_path_hops",
                    rels.len()
                )));
            }
            let mut out = vec![0.0; table.cols];
            for r in rels {
                if r.index() >= r_count {
                    return Err(Error::UnknownRelation(format!("#{}", r.0)));
                }
                for (o, v) in out.iter_mut().zip(table.row(r.index())) {
                    *o += v;
                }
            }
            Ok(out)
        }
    }
}

/// Contextual node embeddings `ṽ` for one graph.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub nodes: Vec<NodeId>,
    pub index: HashMap<NodeId, usize>,
    /// `[n, d_e]`
    pub h: Var,
}

impl Encoded {
    pub fn row(&self, n: NodeId) -> Option<usize> {
        self.index.get(&n).copied()
    }
}

pub fn encode_nodes(tape: &mut Tape, run: &mut Run, model: &Model, input: &GraphInput) -> Result<Encoded> {
    let n = input.len();
    if n == 0 {
        return Err(Error::InvalidGraph("cannot encode an empty graph".into()));
    }
    let cfg = &model.cfg;
    if input.path_counts.cols != cfg.relation_count + 1 {
        return Err(Error::Shape("path counts do not match relation_count".into()));
    }
    if let Some(bad) = input.nodes.iter().find(|id| id.index() >= cfg.node_count) {
        return Err(Error::Shape(format!("node #{} outside the embedding table", bad.0)));
    }
    let heads = cfg.heads;
    let d = cfg.d_e;
    let dh = cfg.d_h();

    let table = tape.param(model.shared.node);
    let mut x = tape.gather_rows(table, input.nodes.iter().map(|id| id.index()).collect());

    let counts = tape.constant(input.path_counts.clone());
    let rel = tape.param(model.enc.relations);
    let p = tape.matmul(counts, rel);
    let p_t = tape.gather_rows(p, (0..n * n).map(|i| (i % n) * n + i / n).collect());
    let row_j: Vec<usize> = (0..n * n).map(|i| i / n).collect();
    let row_k: Vec<usize> = (0..n * n).map(|i| i % n).collect();
    let mut head_sum = Matrix::zeros(d, heads);
    for c in 0..d {
        head_sum.set(c, c / dh, 1.0);
    }
    let head_sum = tape.constant(head_sum);
    let scale = 1.0 / (dh as f64).sqrt();

    for block in &model.enc.blocks {
        let xl = block.ln1.forward(tape, x);
        let qj = tape.gather_rows(xl, row_j.clone());
        let q = tape.add(qj, p);
        let kk = tape.gather_rows(xl, row_k.clone());
        let k = tape.add(kk, p_t);
        let (wq, wk, wv, wo) = (
            tape.param(block.attn.wq),
            tape.param(block.attn.wk),
            tape.param(block.attn.wv),
            tape.param(block.attn.wo),
        );
        let qw = tape.matmul(q, wq);
        let kw = tape.matmul(k, wk);
        let prod = tape.mul(qw, kw);
        let scores = tape.matmul(prod, head_sum);
        let scores = tape.scale(scores, scale);
        let v = tape.matmul(xl, wv);
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let s = tape.slice_cols(scores, h, 1);
            let s = tape.reshape(s, n, n);
            let a = tape.softmax(s, None);
            run.record("encoder_attention", tape, a, None);
            let a = run.dropout(tape, a);
            let vh = tape.slice_cols(v, h * dh, dh);
            outs.push(tape.matmul(a, vh));
        }
        let cat = tape.concat_cols(&outs);
        let att = tape.matmul(cat, wo);
        x = tape.add(x, att);
        let xl = block.ln2.forward(tape, x);
        let f = block.ffn.forward(tape, run, xl);
        x = tape.add(x, f);
    }
    let h = model.enc.ln_out.forward(tape, x);
    Ok(Encoded {
        index: input.nodes.iter().enumerate().map(|(i, &id)| (id, i)).collect(),
        nodes: input.nodes.clone(),
        h,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::hkg::{NodeKind, NodeRegistry, RelationId, RelationTable, Triple};
    use std::collections::BTreeMap;

    fn cfg(d: usize, heads: usize) -> ModelConfig {
        ModelConfig {
            d_e: d,
            d_w: d,
            heads,
            ffn_hidden: 2 * d,
            blocks_enc: 1,
            blocks_plan: 1,
            blocks_dec: 1,
            copy_hidden: 2,
            max_sent_len: 4,
            vocab_size: 5,
            schema_count: 3,
            node_count: 3,
            relation_count: 6,
            user_count: 1,
            item_count: 1,
            ..ModelConfig::default()
        }
    }

    fn chain() -> (Hkg, RelationId) {
        let mut rels = RelationTable::new();
        let actor = rels.intern("actor");
        let mut reg = NodeRegistry::new();
        let u = reg.register("u", NodeKind::User).unwrap();
        let i = reg.register("i", NodeKind::Item).unwrap();
        let e = reg.register("e", NodeKind::Entity).unwrap();
        let g = Hkg::build(&reg, &rels, &[Triple::new(i, actor, e)], &[(u, i)], &BTreeMap::new(), 1).unwrap();
        (g, actor)
    }

    #[test]
    fn path_encoding_sums_relation_rows() {
        let c = cfg(4, 1);
        let mut m = Model::new(&c, 0).unwrap();
        let t = m.store.get_mut(m.enc.relations);
        for r in 0..t.rows {
            for k in 0..4 {
                t.set(r, k, (r * 10 + k) as f64);
            }
        }
        let empty = relation_path_encoding(&RelationPath::Path(vec![]), &m).unwrap();
        assert_eq!(empty, vec![0.0; 4]);
        let two = relation_path_encoding(&RelationPath::Path(vec![RelationId(1), RelationId(4)]), &m).unwrap();
        assert_eq!(two, vec![50.0, 52.0, 54.0, 56.0]);
        let none = relation_path_encoding(&RelationPath::NoPath, &m).unwrap();
        assert_eq!(none, vec![60.0, 61.0, 62.0, 63.0]);
        assert!(relation_path_encoding(&RelationPath::Path(vec![RelationId(9)]), &m).is_err());
    }

    #[test]
    fn path_counts_mark_paths() {
        let (g, actor) = chain();
        let gi = GraphInput::new(&g, 4, 6).unwrap();
        assert_eq!(gi.len(), 3);
        // user -> entity: [interact, actor]
        let row = gi.path_counts.row(2);
        assert_eq!(row[0], 1.0);
        assert_eq!(row[actor.index()], 1.0);
        assert_eq!(row[6], 0.0);
        assert!(gi.path_counts.row(0).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_node_attends_to_itself() {
        let mut c = cfg(4, 2);
        c.node_count = 1;
        let m = Model::new(&c, 1).unwrap();
        let gi = GraphInput {
            nodes: vec![NodeId(0)],
            path_counts: Matrix::zeros(1, 7),
        };
        let mut tape = Tape::new(&m.store);
        let mut run = Run::probing();
        encode_nodes(&mut tape, &mut run, &m, &gi).unwrap();
        for (_, a) in run.take_probe() {
            assert_eq!(a.data, vec![1.0]);
        }
    }

    #[test]
    fn zero_query_key_weights_give_uniform_attention() {
        let (g, _) = chain();
        let mut m = Model::new(&cfg(4, 2), 1).unwrap();
        let (wq, wk) = (m.enc.blocks[0].attn.wq, m.enc.blocks[0].attn.wk);
        m.store.get_mut(wq).fill(0.0);
        m.store.get_mut(wk).fill(0.0);
        let gi = GraphInput::new(&g, 4, 6).unwrap();
        let mut tape = Tape::new(&m.store);
        let mut run = Run::probing();
        encode_nodes(&mut tape, &mut run, &m, &gi).unwrap();
        let probe = run.take_probe();
        assert_eq!(probe.len(), 2);
        for (_, a) in probe {
            for v in a.data {
                assert!((v - 1.0 / 3.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn unknown_relation_rejected() {
        let (g, _) = chain();
        assert!(matches!(GraphInput::new(&g, 4, 2), Err(Error::UnknownRelation(_))));
    }
}
