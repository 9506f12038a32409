//! Parameter layout of the full model and binary checkpoints.

use std::io::{Read, Write};
use std::path::Path;

use crate::autograd::{ParamGroup, ParamStore};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{ContextAttention, Ffn, Init, LayerNorm, Linear, Mha};
use crate::tensor::Matrix;
use crate::autograd::ParamId;

use ParamGroup::{Planner, Realizer, Shared};

#[derive(Clone, Debug)]
pub struct SharedParams {
    pub node: ParamId,
    pub word: ParamId,
    pub user: ParamId,
    pub item: ParamId,
    pub rating: ParamId,
}

#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub ln1: LayerNorm,
    pub attn: Mha,
    pub ln2: LayerNorm,
    pub ffn: Ffn,
}

#[derive(Clone, Debug)]
pub struct EncoderParams {
    /// Relation embeddings; the extra last row encodes "no path".
    pub relations: ParamId,
    pub blocks: Vec<EncoderBlock>,
    pub ln_out: LayerNorm,
}

#[derive(Clone, Debug)]
pub struct PlannerBlock {
    pub ln_sub: LayerNorm,
    pub sub_attn: Mha,
    pub ln_node: LayerNorm,
    pub node_attn: Mha,
    pub ln_ffn: LayerNorm,
    pub ffn: Ffn,
}

#[derive(Clone, Debug)]
pub struct PlannerParams {
    pub start: ParamId,
    pub empty: ParamId,
    pub stop: ParamId,
    pub blocks: Vec<PlannerBlock>,
    pub ln_out: LayerNorm,
    pub ctx: ContextAttention,
    /// Schema classifier over `[ṽ_g; c̃]`.
    pub w4: Linear,
    /// Node classifier rows `[node_count, 2 d_e]`, one per global node.
    pub w5: ParamId,
    pub b5: ParamId,
}

#[derive(Clone, Debug)]
pub struct DecoderBlock {
    pub ln1: LayerNorm,
    pub attn: Mha,
    pub ln2: LayerNorm,
    pub ffn: Ffn,
}

#[derive(Clone, Debug)]
pub struct RealizerParams {
    pub pos: ParamId,
    /// Per-schema conditioning vector added at every input position.
    pub schema: ParamId,
    /// Projects the mean subgraph node embedding into the conditioning vector.
    pub w_sub: Linear,
    /// Projects a copied node's embedding into the next input.
    pub w_copy_in: Linear,
    pub blocks: Vec<DecoderBlock>,
    pub ln_out: LayerNorm,
    pub ctx: ContextAttention,
    pub w6: Linear,
    pub w7a: ParamId,
    pub w7b: ParamId,
    pub w7c: ParamId,
    pub w_gen: Linear,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub shared: SharedParams,
    pub enc: EncoderParams,
    pub plan: PlannerParams,
    pub real: RealizerParams,
}

impl Model {
    /// Allocates and initializes all parameters from `seed`.
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Model> {
        cfg.validate()?;
        for (name, v) in [
            ("vocab_size", cfg.vocab_size),
            ("schema_count", cfg.schema_count),
            ("node_count", cfg.node_count),
            ("relation_count", cfg.relation_count),
            ("user_count", cfg.user_count),
            ("item_count", cfg.item_count),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be set before building a model")));
            }
        }
        let (de, dw, h) = (cfg.d_e, cfg.d_w, cfg.heads);
        let mut store = ParamStore::new();
        let mut init = Init::new(&mut store, seed);

        let shared = SharedParams {
            node: init.normal("emb.node", cfg.node_count, de, Shared),
            word: init.normal("emb.word", cfg.vocab_size, dw, Shared),
            user: init.normal("emb.user", cfg.user_count, de, Shared),
            item: init.normal("emb.item", cfg.item_count, de, Shared),
            rating: init.normal("emb.rating", cfg.rating_levels, de, Shared),
        };

        let enc = EncoderParams {
            relations: init.normal("enc.relations", cfg.relation_count + 1, de, Planner),
            blocks: (0..cfg.blocks_enc)
                .map(|b| EncoderBlock {
                    ln1: LayerNorm::new(&mut init, &format!("enc.{b}.ln1"), de, Planner),
                    attn: Mha::new(&mut init, &format!("enc.{b}.attn"), de, h, Planner),
                    ln2: LayerNorm::new(&mut init, &format!("enc.{b}.ln2"), de, Planner),
                    ffn: Ffn::new(&mut init, &format!("enc.{b}.ffn"), de, cfg.ffn_hidden, Planner),
                })
                .collect(),
            ln_out: LayerNorm::new(&mut init, "enc.ln_out", de, Planner),
        };

        let plan = PlannerParams {
            start: init.normal("plan.start", 1, de, Planner),
            empty: init.normal("plan.empty", 1, de, Planner),
            stop: init.normal("plan.stop", 1, de, Planner),
            blocks: (0..cfg.blocks_plan)
                .map(|b| PlannerBlock {
                    ln_sub: LayerNorm::new(&mut init, &format!("plan.{b}.ln_sub"), de, Planner),
                    sub_attn: Mha::new(&mut init, &format!("plan.{b}.sub"), de, h, Planner),
                    ln_node: LayerNorm::new(&mut init, &format!("plan.{b}.ln_node"), de, Planner),
                    node_attn: Mha::new(&mut init, &format!("plan.{b}.node"), de, h, Planner),
                    ln_ffn: LayerNorm::new(&mut init, &format!("plan.{b}.ln_ffn"), de, Planner),
                    ffn: Ffn::new(&mut init, &format!("plan.{b}.ffn"), de, cfg.ffn_hidden, Planner),
                })
                .collect(),
            ln_out: LayerNorm::new(&mut init, "plan.ln_out", de, Planner),
            ctx: ContextAttention::new(&mut init, "plan.ctx", de, de, de, Planner),
            w4: Linear::new(&mut init, "plan.w4", 2 * de, cfg.schema_count, true, Planner),
            w5: init.xavier("plan.w5", cfg.node_count, 2 * de, Planner),
            b5: init.zeros("plan.b5", cfg.node_count, 1, Planner),
        };

        let real = RealizerParams {
            pos: init.normal("dec.pos", cfg.max_sent_len + 1, dw, Realizer),
            schema: init.normal("dec.schema", cfg.schema_count, dw, Realizer),
            w_sub: Linear::new(&mut init, "dec.w_sub", de, dw, false, Realizer),
            w_copy_in: Linear::new(&mut init, "dec.w_copy_in", de, dw, false, Realizer),
            blocks: (0..cfg.blocks_dec)
                .map(|b| DecoderBlock {
                    ln1: LayerNorm::new(&mut init, &format!("dec.{b}.ln1"), dw, Realizer),
                    attn: Mha::new(&mut init, &format!("dec.{b}.attn"), dw, h, Realizer),
                    ln2: LayerNorm::new(&mut init, &format!("dec.{b}.ln2"), dw, Realizer),
                    ffn: Ffn::new(&mut init, &format!("dec.{b}.ffn"), dw, cfg.ffn_hidden, Realizer),
                })
                .collect(),
            ln_out: LayerNorm::new(&mut init, "dec.ln_out", dw, Realizer),
            ctx: ContextAttention::new(&mut init, "dec.ctx", dw, de, de, Realizer),
            w6: Linear::new(&mut init, "dec.w6", dw + de, cfg.vocab_size, true, Realizer),
            w7a: init.xavier("dec.w7a", dw, cfg.copy_hidden, Realizer),
            w7b: init.xavier("dec.w7b", de, cfg.copy_hidden, Realizer),
            w7c: init.xavier("dec.w7c", cfg.copy_hidden, 1, Realizer),
            w_gen: Linear::new(&mut init, "dec.w_gen", dw + de, 1, true, Realizer),
        };

        Ok(Model {
            cfg: cfg.clone(),
            store,
            shared,
            enc,
            plan,
            real,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, &self.cfg, &self.store)
    }

    /// Rebuilds the layout from the stored configuration and fills in the
    /// stored tensors.
    pub fn load(path: &Path) -> Result<Model> {
        let (cfg, tensors) = read_checkpoint(path)?;
        let mut model = Model::new(&cfg, 0)?;
        if tensors.len() != model.store.len() {
            return Err(Error::Shape(format!(
                "checkpoint has {} tensors, model expects {}",
                tensors.len(),
                model.store.len()
            )));
        }
        for (name, m) in tensors {
            let id = model
                .store
                .find(&name)
                .ok_or_else(|| Error::Shape(format!("unexpected tensor '{name}'")))?;
            if model.store.get(id).shape() != m.shape() {
                return Err(Error::Shape(format!("tensor '{name}' has wrong shape")));
            }
            *model.store.get_mut(id) = m;
        }
        Ok(model)
    }
}

const MAGIC: &[u8; 8] = b"CETPCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Layout: magic, version, config hash, config JSON, then named f32 tensors,
/// all little-endian. Written to a temporary file and renamed into place.
pub fn save_checkpoint(path: &Path, cfg: &ModelConfig, store: &ParamStore) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&cfg.hash().to_le_bytes());
    let cfg_json = serde_json::to_vec(cfg)?;
    buf.extend_from_slice(&(cfg_json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&cfg_json);
    buf.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for id in store.ids() {
        let name = store.name(id).as_bytes();
        let m = store.get(id);
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name);
        buf.extend_from_slice(&(m.rows as u32).to_le_bytes());
        buf.extend_from_slice(&(m.cols as u32).to_le_bytes());
        for &x in &m.data {
            buf.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&buf)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
    what: String,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.at + n > self.bytes.len() {
            return Err(Error::Parse {
                path: self.what.clone(),
                line: 0,
                msg: "truncated checkpoint".into(),
            });
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn read_checkpoint(path: &Path) -> Result<(ModelConfig, Vec<(String, Matrix)>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let what = path.display().to_string();
    let mut c = Cursor {
        bytes: &bytes,
        at: 0,
        what: what.clone(),
    };
    if c.take(8)? != MAGIC {
        return Err(Error::Version {
            what,
            expected: "CETPCKPT".into(),
            found: "unknown file type".into(),
        });
    }
    let version = c.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            what,
            expected: CHECKPOINT_VERSION.to_string(),
            found: version.to_string(),
        });
    }
    let hash = c.u64()?;
    let n = c.u32()? as usize;
    let cfg: ModelConfig = serde_json::from_slice(c.take(n)?)?;
    if cfg.hash() != hash {
        return Err(Error::Version {
            what,
            expected: format!("config hash {:016x}", cfg.hash()),
            found: format!("{hash:016x}"),
        });
    }
    let count = c.u32()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let len = c.u32()? as usize;
        let name = String::from_utf8_lossy(c.take(len)?).into_owned();
        let rows = c.u32()? as usize;
        let cols = c.u32()? as usize;
        let raw = c.take(rows * cols * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect();
        tensors.push((name, Matrix::from_vec(rows, cols, data)));
    }
    Ok((cfg, tensors))
}
