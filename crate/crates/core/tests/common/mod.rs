#![allow(dead_code)]

use cetp::config::Config;
use cetp::corpus::Split;
use cetp::mining::SchemaRegistry;
use cetp::model::Model;
use cetp::pipeline::{fit_model_config, mine_schemas, prepare_examples};
use cetp::planner::ContextIndex;
use cetp::synth::{default_pool, synth_corpus, SynthCorpus, SynthSpec};
use cetp::training::Example;

pub struct Fixture {
    pub sc: SynthCorpus,
    pub cfg: Config,
    pub schemas: SchemaRegistry,
    pub examples: Vec<Example>,
    pub cidx: ContextIndex,
}

pub fn config(d: usize) -> Config {
    let mut cfg = Config::default();
    cfg.seed = 17;
    cfg.model.d_e = d;
    cfg.model.d_w = d;
    cfg.model.heads = 2;
    cfg.model.ffn_hidden = 2 * d;
    cfg.model.blocks_enc = 1;
    cfg.model.blocks_plan = 1;
    cfg.model.blocks_dec = 1;
    cfg.model.copy_hidden = 8;
    cfg.model.dropout = 0.0;
    cfg.train.batch_size = 4;
    cfg.train.warmup_steps = 10;
    cfg.train.lr = 5e-3;
    cfg
}

pub fn fixture_with(spec: &SynthSpec, mut cfg: Config) -> Fixture {
    let sc = synth_corpus(spec, &default_pool()).unwrap();
    let schemas = mine_schemas(&sc.corpus, &sc.hkg, &cfg, Split::Train).unwrap();
    cfg.model = fit_model_config(&cfg.model, &sc.corpus, &sc.hkg, &schemas);
    let (examples, _) = prepare_examples(&sc.corpus, &sc.hkg, &schemas, &cfg).unwrap();
    let cidx = ContextIndex::from_registry(&sc.corpus.registry);
    Fixture {
        sc,
        cfg,
        schemas,
        examples,
        cidx,
    }
}

/// Small corpus with a randomly initialized model configuration.
pub fn fixture() -> Fixture {
    fixture_with(&SynthSpec::new(4, 6, 12, 30), config(16))
}

impl Fixture {
    pub fn model(&self, seed: u64) -> Model {
        Model::new(&self.cfg.model, seed).unwrap()
    }
}
