use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use cetp::config::Config;
use cetp::corpus::{ingest_corpus, load_dataset, save_dataset, Corpus, Split};
use cetp::hkg::Hkg;
use cetp::metrics::{schema_distribution_error, schema_frequencies, schema_histogram_svg, write_report};
use cetp::mining::{read_plans, write_plans, SchemaRegistry};
use cetp::model::Model;
use cetp::pipeline::{evaluate, fit_model_config, generate_review, mine_schemas, prepare_examples, select, EcrAnnotation, Generated};
use cetp::planner::ContextIndex;
use cetp::realizer::{read_generated, write_generated, GeneratedReview};
use cetp::synth::{default_pool, synth_corpus, SynthSpec};
use cetp::training::{gold_plans, sentence_schemas, train, TrainOptions};

#[derive(Parser)]
#[command(name = "cetp", version, about = "Knowledge-graph-grounded review generation with text plans")]
struct Cli {
    /// TOML configuration; defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Valid,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Valid => Split::Valid,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum EcrArg {
    /// Generated entities come from copy actions.
    Copy,
    /// Entities are found by surface matching on both sides.
    Surface,
}

#[derive(Subcommand)]
enum Command {
    /// Ingest raw reviews, triples, interactions, kinds and keywords into a dataset.
    BuildHkg {
        /// Directory holding the raw input files named in the config.
        #[arg(long)]
        input: PathBuf,
    },
    /// Write a synthetic dataset with planted plan statistics.
    SynthCorpus {
        #[arg(long, default_value_t = 60)]
        users: usize,
        #[arg(long, default_value_t = 100)]
        items: usize,
        #[arg(long, default_value_t = 600)]
        reviews: usize,
    },
    /// Mine frequent subgraph schemas from the training split.
    MineSchemas {
        #[arg(long)]
        data: PathBuf,
    },
    /// Align every review to a schema-labeled gold plan.
    AlignPlans {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        schemas: PathBuf,
    },
    /// Two-stage training; writes stage checkpoints and a metrics log.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        schemas: PathBuf,
        /// Stages to run, in order.
        #[arg(long, value_delimiter = ',', default_value = "1,2")]
        stages: Vec<u8>,
    },
    /// Plan and realize reviews for the contexts of one split.
    Generate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        schemas: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// Beam width; the checkpoint's setting by default.
        #[arg(long)]
        beam: Option<usize>,
    },
    /// Score generated reviews against their references.
    Evaluate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        schemas: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        generated: PathBuf,
        #[arg(long, value_enum, default_value = "copy")]
        ecr: EcrArg,
    },
    /// Schema distribution table and histogram of generated vs gold plans.
    Report {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        schemas: PathBuf,
        /// Gold plans JSONL.
        #[arg(long)]
        gold: PathBuf,
        /// Generated plans JSONL.
        #[arg(long)]
        plans: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let validation = e
                .chain()
                .find_map(|c| c.downcast_ref::<cetp::Error>())
                .is_some_and(cetp::Error::is_validation);
            ExitCode::from(if validation { 2 } else { 1 })
        }
    }
}

fn load_config(cli: &Cli) -> Result<Config> {
    let mut cfg = match &cli.config {
        Some(p) => Config::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => Config::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn load_schemas(path: &Path, hkg: &Hkg) -> Result<SchemaRegistry> {
    let mut rels = hkg.relations().clone();
    let reg = SchemaRegistry::load(path, &mut rels).with_context(|| format!("loading {}", path.display()))?;
    if rels.len() != hkg.relations().len() {
        bail!(cetp::Error::UnknownRelation(format!(
            "{} names relations missing from the dataset",
            path.display()
        )));
    }
    Ok(reg)
}

fn load_data(dir: &Path) -> Result<(Corpus, Hkg)> {
    load_dataset(dir).with_context(|| format!("loading dataset {}", dir.display()))
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(&cli)?;
    let out = cli.out.clone();
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    match cli.cmd {
        Command::BuildHkg { input } => {
            let (corpus, hkg) = ingest_corpus(&input, &cfg.data, cfg.model.rating_levels, cfg.seed)?;
            save_dataset(&out, &corpus, &hkg)?;
            log::info!("dataset with {} reviews written to {}", corpus.reviews.len(), out.display());
        }
        Command::SynthCorpus { users, items, reviews } => {
            let mut spec = SynthSpec::new(cfg.seed, users, items, reviews);
            spec.split = cfg.data.split;
            let sc = synth_corpus(&spec, &default_pool())?;
            save_dataset(&out, &sc.corpus, &sc.hkg)?;
            std::fs::write(out.join("planted.json"), serde_json::to_string_pretty(&sc.planted)?)?;
            log::info!("synthetic dataset with {reviews} reviews written to {}", out.display());
        }
        Command::MineSchemas { data } => {
            let (corpus, hkg) = load_data(&data)?;
            let reg = mine_schemas(&corpus, &hkg, &cfg, Split::Train)?;
            reg.save(&out.join("schemas.tsv"))?;
            log::info!("{} schemas (including STOP and EMPTY)", reg.len());
        }
        Command::AlignPlans { data, schemas } => {
            let (corpus, hkg) = load_data(&data)?;
            let reg = load_schemas(&schemas, &hkg)?;
            cfg.model = fit_model_config(&cfg.model, &corpus, &hkg, &reg);
            let (examples, remapped) = prepare_examples(&corpus, &hkg, &reg, &cfg)?;
            write_plans(&out.join("gold_plans.jsonl"), &gold_plans(&examples))?;
            log::info!("{} plans aligned, {remapped} sentences remapped to the nearest schema", examples.len());
        }
        Command::Train { data, schemas, stages } => {
            let (corpus, hkg) = load_data(&data)?;
            let reg = load_schemas(&schemas, &hkg)?;
            cfg.model = fit_model_config(&cfg.model, &corpus, &hkg, &reg);
            cfg.model.validate()?;
            std::fs::write(out.join("config.toml"), cfg.to_toml())?;
            let (examples, _) = prepare_examples(&corpus, &hkg, &reg, &cfg)?;
            let train_set = select(&examples, &corpus, Split::Train);
            let valid_set = select(&examples, &corpus, Split::Valid);
            let cidx = ContextIndex::from_registry(&corpus.registry);
            let mut model = match stages.first() {
                Some(2) if out.join("stage1.ckpt").exists() => Model::load(&out.join("stage1.ckpt"))?,
                _ => Model::new(&cfg.model, cfg.seed)?,
            };
            let opts = TrainOptions {
                checkpoint_dir: Some(out.clone()),
                metrics_csv: Some(out.join("metrics.csv")),
                stages,
            };
            train(&mut model, &cidx, &train_set, &valid_set, &cfg.train, cfg.seed, &opts)?;
            model.save(&out.join("model.ckpt"))?;
            log::info!("model written to {}", out.join("model.ckpt").display());
        }
        Command::Generate {
            data,
            schemas,
            checkpoint,
            split,
            beam,
        } => {
            let (corpus, hkg) = load_data(&data)?;
            let reg = load_schemas(&schemas, &hkg)?;
            let model = Model::load(&checkpoint)?;
            cfg.model = model.cfg.clone();
            let (examples, _) = prepare_examples(&corpus, &hkg, &reg, &cfg)?;
            let cidx = ContextIndex::from_registry(&corpus.registry);
            let beam = beam.unwrap_or(model.cfg.beam_size);
            let mut records = Vec::new();
            let mut plans = Vec::new();
            for ex in select(&examples, &corpus, split.into()) {
                let (plan, sentences) = generate_review(&model, &cidx, &reg, &corpus, &ex, beam)?;
                records.push(GeneratedReview::new(ex.review, &ex.ctx, &corpus.registry, &plan, &sentences));
                plans.push((ex.review, plan));
            }
            write_generated(&out.join("generated.jsonl"), &records)?;
            write_plans(&out.join("plans.jsonl"), &plans)?;
            log::info!("{} reviews generated", records.len());
        }
        Command::Evaluate {
            data,
            schemas,
            checkpoint,
            generated,
            ecr,
        } => {
            let (corpus, hkg) = load_data(&data)?;
            let reg = load_schemas(&schemas, &hkg)?;
            let model = Model::load(&checkpoint)?;
            cfg.model = model.cfg.clone();
            let (examples, _) = prepare_examples(&corpus, &hkg, &reg, &cfg)?;
            let records = read_generated(&generated)?;
            let mut outputs = Vec::with_capacity(records.len());
            for r in &records {
                let example = examples
                    .get(r.review)
                    .ok_or_else(|| cetp::Error::Metric(format!("generated review {} is not in the dataset", r.review)))?;
                outputs.push(Generated {
                    example,
                    plan: cetp::mining::DocumentPlan { steps: r.plan.clone() },
                    sentences: r.to_sentences(&corpus.registry)?,
                });
            }
            let mode = match ecr {
                EcrArg::Copy => EcrAnnotation::CopyTags,
                EcrArg::Surface => EcrAnnotation::SurfaceMatch,
            };
            let report = evaluate(&corpus, &model, &outputs, mode, cfg.mining.report_top_k)?;
            write_report(&out.join("report.csv"), &report.rows())?;
            for (name, v) in report.rows() {
                println!("{name}\t{}", v.map_or("n/a".to_string(), |v| format!("{v:.4}")));
            }
        }
        Command::Report {
            data,
            schemas,
            gold,
            plans,
        } => {
            let (_, hkg) = load_data(&data)?;
            let reg = load_schemas(&schemas, &hkg)?;
            let codes = |path: &Path| -> Result<Vec<Vec<String>>> {
                Ok(read_plans(path)?
                    .iter()
                    .map(|(_, p)| sentence_schemas(p).into_iter().map(|s| reg.get(s).code.clone()).collect())
                    .collect())
            };
            let (gold, generated) = (codes(&gold)?, codes(&plans)?);
            let k = cfg.mining.report_top_k;
            let (labels, g, o) = schema_frequencies(&generated, &gold, k)?;
            let (mae, rmse) = schema_distribution_error(&generated, &gold, k)?;
            let labels: Vec<String> = labels.into_iter().map(|l| l.unwrap_or_else(|| "other".into())).collect();
            let mut csv = String::from("schema,gold,generated\n");
            for ((l, go), ge) in labels.iter().zip(&o).zip(&g) {
                csv.push_str(&format!("\"{l}\",{go:.6},{ge:.6}\n"));
            }
            std::fs::write(out.join("schema_distribution.csv"), csv)?;
            std::fs::write(out.join("schema_histogram.svg"), schema_histogram_svg(&labels, &o, &g))?;
            write_report(
                &out.join("schema_error.csv"),
                &[("schema_mae".into(), Some(mae)), ("schema_rmse".into(), Some(rmse))],
            )?;
            println!("schema_mae\t{mae:.4}\nschema_rmse\t{rmse:.4}");
        }
    }
    Ok(())
}
