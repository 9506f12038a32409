//! Layers shared by the encoder, planner and decoder.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::autograd::{ParamGroup, ParamId, ParamStore, Tape, Var};
use crate::tensor::Matrix;

/// Per-forward-pass settings: dropout and optional capture of attention
/// distributions.
pub struct Run {
    dropout: f64,
    rng: Option<ChaCha8Rng>,
    probe: Option<Vec<(&'static str, Matrix)>>,
}

impl Run {
    /// Inference: no dropout.
    pub fn eval() -> Run {
        Run {
            dropout: 0.0,
            rng: None,
            probe: None,
        }
    }

    pub fn train(dropout: f64, seed: u64) -> Run {
        Run {
            dropout,
            rng: Some(ChaCha8Rng::seed_from_u64(seed)),
            probe: None,
        }
    }

    /// Inference that records every normalized distribution it computes.
    pub fn probing() -> Run {
        Run {
            dropout: 0.0,
            rng: None,
            probe: Some(Vec::new()),
        }
    }

    pub fn is_probing(&self) -> bool {
        self.probe.is_some()
    }

    pub fn take_probe(&mut self) -> Vec<(&'static str, Matrix)> {
        self.probe.as_mut().map(std::mem::take).unwrap_or_default()
    }

    /// Records the rows of `probs` that had at least one admissible entry.
    pub fn record(&mut self, name: &'static str, tape: &Tape, probs: Var, allowed: Option<&[bool]>) {
        let Some(probe) = self.probe.as_mut() else {
            return;
        };
        let m = tape.value(probs);
        let mut rows = Vec::new();
        for r in 0..m.rows {
            let live = allowed.is_none_or(|a| a[r * m.cols..(r + 1) * m.cols].iter().any(|&x| x));
            if live {
                rows.push(m.row(r).to_vec());
            }
        }
        if !rows.is_empty() {
            probe.push((name, Matrix::from_rows(&rows)));
        }
    }

    pub fn dropout(&mut self, tape: &mut Tape, v: Var) -> Var {
        let p = self.dropout;
        let Some(rng) = self.rng.as_mut() else {
            return v;
        };
        if p <= 0.0 {
            return v;
        }
        let (r, c) = tape.shape(v);
        let keep = 1.0 / (1.0 - p);
        let mask = (0..r * c)
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        tape.mul_const(v, Matrix::from_vec(r, c, mask))
    }
}

/// Parameter allocation with seeded initialization.
pub struct Init<'a> {
    pub store: &'a mut ParamStore,
    rng: ChaCha8Rng,
}

impl<'a> Init<'a> {
    pub fn new(store: &'a mut ParamStore, seed: u64) -> Self {
        Init {
            store,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Embedding table, entries ~ Normal(0, 0.02).
    pub fn normal(&mut self, name: &str, rows: usize, cols: usize, group: ParamGroup) -> ParamId {
        let dist = Normal::new(0.0, 0.02).unwrap();
        let data = (0..rows * cols).map(|_| dist.sample(&mut self.rng)).collect();
        self.store.add(name, Matrix::from_vec(rows, cols, data), group)
    }

    /// Xavier-uniform weight matrix.
    pub fn xavier(&mut self, name: &str, rows: usize, cols: usize, group: ParamGroup) -> ParamId {
        let a = (6.0 / (rows + cols) as f64).sqrt();
        let dist = Uniform::new_inclusive(-a, a);
        let data = (0..rows * cols).map(|_| dist.sample(&mut self.rng)).collect();
        self.store.add(name, Matrix::from_vec(rows, cols, data), group)
    }

    pub fn zeros(&mut self, name: &str, rows: usize, cols: usize, group: ParamGroup) -> ParamId {
        self.store.add(name, Matrix::zeros(rows, cols), group)
    }

    pub fn ones(&mut self, name: &str, rows: usize, cols: usize, group: ParamGroup) -> ParamId {
        let mut m = Matrix::zeros(rows, cols);
        m.fill(1.0);
        self.store.add(name, m, group)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new(init: &mut Init, name: &str, d_in: usize, d_out: usize, bias: bool, group: ParamGroup) -> Self {
        let w = init.xavier(&format!("{name}.w"), d_in, d_out, group);
        let b = bias.then(|| init.zeros(&format!("{name}.b"), 1, d_out, group));
        Linear { w, b }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let w = tape.param(self.w);
        let y = tape.matmul(x, w);
        match self.b {
            Some(b) => {
                let b = tape.param(b);
                tape.add_row(y, b)
            }
            None => y,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(init: &mut Init, name: &str, d: usize, group: ParamGroup) -> Self {
        LayerNorm {
            gain: init.ones(&format!("{name}.g"), 1, d, group),
            bias: init.zeros(&format!("{name}.b"), 1, d, group),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let g = tape.param(self.gain);
        let b = tape.param(self.bias);
        tape.layer_norm(x, g, b)
    }
}

/// Position-wise feed-forward network with GELU.
#[derive(Clone, Debug)]
pub struct Ffn {
    pub l1: Linear,
    pub l2: Linear,
}

impl Ffn {
    pub fn new(init: &mut Init, name: &str, d: usize, hidden: usize, group: ParamGroup) -> Self {
        Ffn {
            l1: Linear::new(init, &format!("{name}.1"), d, hidden, true, group),
            l2: Linear::new(init, &format!("{name}.2"), hidden, d, true, group),
        }
    }

    pub fn forward(&self, tape: &mut Tape, run: &mut Run, x: Var) -> Var {
        let h = self.l1.forward(tape, x);
        let h = tape.gelu(h);
        let y = self.l2.forward(tape, h);
        run.dropout(tape, y)
    }
}

/// Multi-head attention projections. No biases, so a query with no
/// admissible key yields an exact zero output.
#[derive(Clone, Debug)]
pub struct Mha {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub heads: usize,
}

impl Mha {
    pub fn new(init: &mut Init, name: &str, d: usize, heads: usize, group: ParamGroup) -> Self {
        Mha {
            wq: init.xavier(&format!("{name}.wq"), d, d, group),
            wk: init.xavier(&format!("{name}.wk"), d, d, group),
            wv: init.xavier(&format!("{name}.wv"), d, d, group),
            wo: init.xavier(&format!("{name}.wo"), d, d, group),
            heads,
        }
    }

    /// Scaled dot-product attention of `q_in [m,d]` over `kv_in [n,d]`.
    /// `allowed` is a row-major `m x n` mask.
    pub fn forward(
        &self,
        tape: &mut Tape,
        run: &mut Run,
        name: &'static str,
        q_in: Var,
        kv_in: Var,
        allowed: Option<&[bool]>,
    ) -> Var {
        let (wq, wk, wv, wo) = (
            tape.param(self.wq),
            tape.param(self.wk),
            tape.param(self.wv),
            tape.param(self.wo),
        );
        let q = tape.matmul(q_in, wq);
        let k = tape.matmul(kv_in, wk);
        let v = tape.matmul(kv_in, wv);
        let d = tape.shape(q).1;
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = tape.slice_cols(q, h * dh, dh);
            let kh = tape.slice_cols(k, h * dh, dh);
            let vh = tape.slice_cols(v, h * dh, dh);
            let kt = tape.transpose(kh);
            let s = tape.matmul(qh, kt);
            let s = tape.scale(s, scale);
            let a = tape.softmax(s, allowed);
            run.record(name, tape, a, allowed);
            let a = run.dropout(tape, a);
            outs.push(tape.matmul(a, vh));
        }
        let cat = tape.concat_cols(&outs);
        tape.matmul(cat, wo)
    }
}

/// Additive attention of queries over a small set of context vectors:
/// `score(q, c) = vᵀ tanh(q Wq + c Wc + b)`.
#[derive(Clone, Debug)]
pub struct ContextAttention {
    pub wq: ParamId,
    pub wc: ParamId,
    pub b: ParamId,
    pub v: ParamId,
}

impl ContextAttention {
    pub fn new(init: &mut Init, name: &str, d_q: usize, d_c: usize, hidden: usize, group: ParamGroup) -> Self {
        ContextAttention {
            wq: init.xavier(&format!("{name}.wq"), d_q, hidden, group),
            wc: init.xavier(&format!("{name}.wc"), d_c, hidden, group),
            b: init.zeros(&format!("{name}.b"), 1, hidden, group),
            v: init.xavier(&format!("{name}.v"), hidden, 1, group),
        }
    }

    /// Returns the context vectors `[m, d_c]` and the weights `[m, k]`.
    pub fn forward(&self, tape: &mut Tape, run: &mut Run, q: Var, ctx: Var) -> (Var, Var) {
        let m = tape.shape(q).0;
        let k = tape.shape(ctx).0;
        let (wq, wc, b, v) = (
            tape.param(self.wq),
            tape.param(self.wc),
            tape.param(self.b),
            tape.param(self.v),
        );
        let qp = tape.matmul(q, wq);
        let cp = tape.matmul(ctx, wc);
        let qi: Vec<usize> = (0..m * k).map(|i| i / k).collect();
        let ci: Vec<usize> = (0..m * k).map(|i| i % k).collect();
        let qg = tape.gather_rows(qp, qi);
        let cg = tape.gather_rows(cp, ci);
        let s = tape.add(qg, cg);
        let s = tape.add_row(s, b);
        let s = tape.tanh(s);
        let s = tape.matmul(s, v);
        let s = tape.reshape(s, m, k);
        let w = tape.softmax(s, None);
        run.record("context_attention", tape, w, None);
        (tape.matmul(w, ctx), w)
    }
}
