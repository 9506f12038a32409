//! End-to-end glue: schema mining over a corpus, example preparation,
//! plan and text generation, and evaluation.

use std::collections::HashMap;

use crate::config::{Config, ModelConfig};
use crate::corpus::{Corpus, Split};
use crate::encoder::encode_nodes;
use crate::error::{Error, Result};
use crate::hkg::{local_hkg, Hkg, NodeId, NodeKind};
use crate::metrics::{
    bleu, ecr, is_ecr_node, mean_word_embedding, rouge, schema_distribution_error, sen_sim_corpus, RougeVariant,
    SurfaceMatcher,
};
use crate::mining::{align_sentence_subgraphs, mine_frequent_schemas, DocumentPlan, SchemaRegistry};
use crate::model::Model;
use crate::nn::Run;
use crate::planner::{plan_document, ContextIndex, PlanContext};
use crate::realizer::{realize_document, DecodeContext, GeneratedSentence, VocabLexicon};
use crate::training::{prepare_example, sentence_schemas, Example, ExampleSettings};
use crate::autograd::Tape;

/// Mines the schema registry from the aligned sentences of `split`.
pub fn mine_schemas(corpus: &Corpus, hkg: &Hkg, cfg: &Config, split: Split) -> Result<SchemaRegistry> {
    let mut aligned = Vec::new();
    for i in corpus.indices(split) {
        let r = &corpus.reviews[i];
        let local = local_hkg(hkg, r.ctx.user, r.ctx.item, cfg.data.local_cap)?.graph;
        aligned.push(align_sentence_subgraphs(&r.sentence_mentions(), &local, cfg.mining.max_slots));
    }
    Ok(mine_frequent_schemas(&aligned, cfg.mining.top_k))
}

/// Model sizes from `base` with every count taken from the data.
pub fn fit_model_config(base: &ModelConfig, corpus: &Corpus, hkg: &Hkg, schemas: &SchemaRegistry) -> ModelConfig {
    ModelConfig {
        vocab_size: corpus.vocab.len(),
        schema_count: schemas.len(),
        node_count: corpus.registry.len(),
        relation_count: hkg.relations().len(),
        user_count: corpus.registry.ids_of_kind(NodeKind::User).len(),
        item_count: corpus.registry.ids_of_kind(NodeKind::Item).len(),
        ..base.clone()
    }
}

/// Examples for every review, in corpus order, plus the remap tally.
pub fn prepare_examples(corpus: &Corpus, hkg: &Hkg, schemas: &SchemaRegistry, cfg: &Config) -> Result<(Vec<Example>, usize)> {
    let st = ExampleSettings::from_config(cfg);
    let mut out = Vec::with_capacity(corpus.reviews.len());
    let mut remapped = 0;
    for (i, r) in corpus.reviews.iter().enumerate() {
        let (ex, n) = prepare_example(i, r, hkg, schemas, &corpus.vocab, &st)?;
        remapped += n;
        out.push(ex);
    }
    Ok((out, remapped))
}

/// Examples of one split, in corpus order.
pub fn select(examples: &[Example], corpus: &Corpus, split: Split) -> Vec<Example> {
    corpus.indices(split).into_iter().map(|i| examples[i].clone()).collect()
}

/// Encoder outputs and context rows of one example, detached for decoding.
pub fn decode_context(model: &Model, cidx: &ContextIndex, ex: &Example) -> Result<DecodeContext> {
    let mut tape = Tape::new(&model.store);
    let enc = encode_nodes(&mut tape, &mut Run::eval(), model, &ex.graph)?;
    let ctx_rows = cidx.rows(&mut tape, model, &ex.ctx)?;
    Ok(DecodeContext::capture(&tape, &enc, ctx_rows))
}

/// Greedy plan for the example's context.
pub fn generate_plan(model: &Model, cidx: &ContextIndex, schemas: &SchemaRegistry, ex: &Example) -> Result<DocumentPlan> {
    let pc = PlanContext {
        local: &ex.local,
        graph: &ex.graph,
        ctx: ex.ctx,
    };
    plan_document(model, &pc, cidx, schemas)
}

/// Plans and realizes one review.
pub fn generate_review(
    model: &Model,
    cidx: &ContextIndex,
    schemas: &SchemaRegistry,
    corpus: &Corpus,
    ex: &Example,
    beam: usize,
) -> Result<(DocumentPlan, Vec<GeneratedSentence>)> {
    let plan = generate_plan(model, cidx, schemas, ex)?;
    let dc = decode_context(model, cidx, ex)?;
    let lex = VocabLexicon {
        vocab: &corpus.vocab,
        registry: &corpus.registry,
    };
    let sentences = realize_document(model, &plan, &dc, &lex, beam)?;
    Ok((plan, sentences))
}

/// How entities are located in generated text for co-occurrence scoring.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EcrAnnotation {
    /// Nodes emitted by copy actions.
    CopyTags,
    /// Exact surface matches of entity names.
    SurfaceMatch,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub bleu1: f64,
    pub bleu4: f64,
    pub rouge1: f64,
    pub rouge2: f64,
    pub rouge_l: f64,
    pub ecr: Option<f64>,
    pub sen_sim: Option<f64>,
    pub schema_mae: f64,
    pub schema_rmse: f64,
}

impl EvalReport {
    pub fn rows(&self) -> Vec<(String, Option<f64>)> {
        vec![
            ("bleu1".into(), Some(self.bleu1)),
            ("bleu4".into(), Some(self.bleu4)),
            ("rouge1".into(), Some(self.rouge1)),
            ("rouge2".into(), Some(self.rouge2)),
            ("rougeL".into(), Some(self.rouge_l)),
            ("ecr".into(), self.ecr),
            ("sen_sim".into(), self.sen_sim),
            ("schema_mae".into(), Some(self.schema_mae)),
            ("schema_rmse".into(), Some(self.schema_rmse)),
        ]
    }
}

/// One generated review aligned with its reference.
pub struct Generated<'a> {
    pub example: &'a Example,
    pub plan: DocumentPlan,
    pub sentences: Vec<GeneratedSentence>,
}

/// Generated entity annotation per sentence.
pub fn generated_entities(corpus: &Corpus, sentences: &[GeneratedSentence], mode: EcrAnnotation) -> Vec<Vec<NodeId>> {
    match mode {
        EcrAnnotation::CopyTags => sentences
            .iter()
            .map(|s| {
                s.copied_nodes()
                    .into_iter()
                    .filter(|&n| is_ecr_node(&corpus.registry, n))
                    .collect()
            })
            .collect(),
        EcrAnnotation::SurfaceMatch => {
            let m = SurfaceMatcher::new(&corpus.registry);
            sentences.iter().map(|s| m.annotate(&s.words)).collect()
        }
    }
}

/// Reference entity annotation per sentence.
pub fn reference_entities(corpus: &Corpus, review: usize, mode: EcrAnnotation) -> Vec<Vec<NodeId>> {
    let r = &corpus.reviews[review];
    match mode {
        EcrAnnotation::CopyTags => r
            .sentences
            .iter()
            .map(|s| s.nodes().into_iter().filter(|&n| is_ecr_node(&corpus.registry, n)).collect())
            .collect(),
        EcrAnnotation::SurfaceMatch => {
            let m = SurfaceMatcher::new(&corpus.registry);
            r.sentences.iter().map(|s| m.annotate(&s.words)).collect()
        }
    }
}

pub fn evaluate(
    corpus: &Corpus,
    model: &Model,
    outputs: &[Generated],
    mode: EcrAnnotation,
    report_top_k: usize,
) -> Result<EvalReport> {
    if outputs.is_empty() {
        return Err(Error::Metric("nothing to evaluate".into()));
    }
    let cands: Vec<Vec<String>> = outputs
        .iter()
        .map(|g| g.sentences.iter().flat_map(|s| s.words.iter().cloned()).collect())
        .collect();
    let refs: Vec<Vec<String>> = outputs
        .iter()
        .map(|g| {
            corpus.reviews[g.example.review]
                .sentences
                .iter()
                .flat_map(|s| s.words.iter().cloned())
                .collect()
        })
        .collect();
    let gen_ents: Vec<Vec<Vec<NodeId>>> = outputs.iter().map(|g| generated_entities(corpus, &g.sentences, mode)).collect();
    let ref_ents: Vec<Vec<Vec<NodeId>>> = outputs.iter().map(|g| reference_entities(corpus, g.example.review, mode)).collect();

    let table = model.store.get(model.shared.word);
    let words: HashMap<String, Vec<f64>> = (0..corpus.vocab.len())
        .map(|i| (corpus.vocab.word(i as u32).to_string(), table.row(i).to_vec()))
        .collect();
    let dim = table.cols;
    let embed = |s: &[String]| mean_word_embedding(&words, dim, s);
    let gen_sentences: Vec<Vec<Vec<String>>> = outputs
        .iter()
        .map(|g| g.sentences.iter().map(|s| s.words.clone()).collect())
        .collect();

    let gen_plans: Vec<Vec<usize>> = outputs.iter().map(|g| sentence_schemas(&g.plan)).collect();
    let gold_plans: Vec<Vec<usize>> = outputs.iter().map(|g| sentence_schemas(&g.example.plan)).collect();
    let (mae, rmse) = schema_distribution_error(&gen_plans, &gold_plans, report_top_k)?;
    Ok(EvalReport {
        bleu1: bleu(&cands, &refs, 1)?,
        bleu4: bleu(&cands, &refs, 4)?,
        rouge1: rouge(&cands, &refs, RougeVariant::One)?,
        rouge2: rouge(&cands, &refs, RougeVariant::Two)?,
        rouge_l: rouge(&cands, &refs, RougeVariant::L)?,
        ecr: ecr(&gen_ents, &ref_ents)?,
        sen_sim: sen_sim_corpus(&gen_sentences, &embed),
        schema_mae: mae,
        schema_rmse: rmse,
    })
}
