//! Attention blocks: the query/key-value mixer used by the scene encoder and
//! a masked multi-head self-attention for the causal backbone.
//!
//! The mixer deliberately has no value projection: the pre-residual output is
//! `softmax(Q·Wq·(KV·Wk)ᵀ/√d)·KV`, a convex combination of the *raw* key-value
//! rows. That makes two exact statements testable without tolerances: a single
//! key receives weight 1.0, and identical value rows pass through unchanged.

use std::sync::Arc;

use uwm_core::params::{Binding, Init, ParamId, ParamStore};
use uwm_core::tensor::{Mat, Tape, Var};

/// Query-to-key/value attention block with a post-mix residual MLP:
/// `h = Q + mix·Wo`, `out = h + MLP(LN(h))`.
pub struct CrossAttn {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wo: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    d: usize,
}

impl CrossAttn {
    pub fn register(store: &mut ParamStore, prefix: &str, d: usize, hidden: usize) -> Self {
        let p = |s: &str| format!("{prefix}/{s}");
        CrossAttn {
            wq: store.add(&p("wq"), d, d, Init::XavierUniform),
            wk: store.add(&p("wk"), d, d, Init::XavierUniform),
            wo: store.add(&p("wo"), d, d, Init::XavierUniform),
            w1: store.add(&p("w1"), d, hidden, Init::XavierUniform),
            b1: store.add(&p("b1"), 1, hidden, Init::Zeros),
            w2: store.add(&p("w2"), hidden, d, Init::XavierUniform),
            b2: store.add(&p("b2"), 1, d, Init::Zeros),
            d,
        }
    }

    /// Softmax attention weights, one row per query.
    pub fn weights(&self, tape: &Tape, bind: &Binding, q: Var, kv: Var) -> Var {
        let qp = tape.matmul(q, bind.var(tape, self.wq));
        let kp = tape.matmul(kv, bind.var(tape, self.wk));
        let scores = tape.scale(
            tape.matmul(qp, tape.transpose(kp)),
            1.0 / (self.d as f64).sqrt(),
        );
        tape.softmax_rows(scores)
    }

    /// Pre-residual output: convex combination of the raw `kv` rows.
    pub fn attention_mix(&self, tape: &Tape, bind: &Binding, q: Var, kv: Var) -> Var {
        tape.matmul(self.weights(tape, bind, q, kv), kv)
    }

    /// Full block output, same shape as `q`.
    pub fn attend(&self, tape: &Tape, bind: &Binding, q: Var, kv: Var) -> Var {
        let mix = self.attention_mix(tape, bind, q, kv);
        let h = tape.add(q, tape.matmul(mix, bind.var(tape, self.wo)));
        let ln = tape.layer_norm(h, 1e-5);
        let ff1 = tape.relu(tape.linear(ln, bind.var(tape, self.w1), bind.var(tape, self.b1)));
        let ff2 = tape.linear(ff1, bind.var(tape, self.w2), bind.var(tape, self.b2));
        tape.add(h, ff2)
    }
}

/// Multi-head self-attention with an additive score mask. Pre-residual: the
/// caller owns the `x + attn(LN(x))` wiring.
pub struct SelfAttn {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    /// Optional low-rank adapters on the query/value projections.
    pub lora: Option<LoraPair>,
    d: usize,
    n_heads: usize,
}

/// Low-rank update `W + A·B` applied to the query and value projections.
pub struct LoraPair {
    pub qa: ParamId,
    pub qb: ParamId,
    pub va: ParamId,
    pub vb: ParamId,
}

impl SelfAttn {
    pub fn register(store: &mut ParamStore, prefix: &str, d: usize, n_heads: usize) -> Self {
        assert!(d % n_heads == 0, "head count must divide width");
        let p = |s: &str| format!("{prefix}/{s}");
        SelfAttn {
            wq: store.add(&p("wq"), d, d, Init::XavierUniform),
            wk: store.add(&p("wk"), d, d, Init::XavierUniform),
            wv: store.add(&p("wv"), d, d, Init::XavierUniform),
            wo: store.add(&p("wo"), d, d, Init::XavierUniform),
            lora: None,
            d,
            n_heads,
        }
    }

    /// Attach rank-`r` adapters (A zero-initialized so the base function is
    /// unchanged at attach time).
    pub fn add_lora(&mut self, store: &mut ParamStore, prefix: &str, r: usize) {
        let p = |s: &str| format!("{prefix}/{s}");
        self.lora = Some(LoraPair {
            qa: store.add(&p("lora_qa"), self.d, r, Init::Zeros),
            qb: store.add(&p("lora_qb"), r, self.d, Init::Normal { std: 0.02 }),
            va: store.add(&p("lora_va"), self.d, r, Init::Zeros),
            vb: store.add(&p("lora_vb"), r, self.d, Init::Normal { std: 0.02 }),
        });
    }

    fn project(&self, tape: &Tape, bind: &Binding, x: Var, w: ParamId, ab: Option<(ParamId, ParamId)>) -> Var {
        let base = tape.matmul(x, bind.var(tape, w));
        match ab {
            Some((a, b)) => {
                let low = tape.matmul(tape.matmul(x, bind.var(tape, a)), bind.var(tape, b));
                tape.add(base, low)
            }
            None => base,
        }
    }

    /// `mask` is added to every head's score matrix (use 0 for visible and a
    /// large negative number for blocked key positions).
    pub fn forward(&self, tape: &Tape, bind: &Binding, x: Var, mask: Option<&Arc<Mat>>) -> Var {
        let (lq, lv) = match &self.lora {
            Some(l) => (Some((l.qa, l.qb)), Some((l.va, l.vb))),
            None => (None, None),
        };
        let q = self.project(tape, bind, x, self.wq, lq);
        let k = self.project(tape, bind, x, self.wk, None);
        let v = self.project(tape, bind, x, self.wv, lv);
        let dh = self.d / self.n_heads;
        let mut heads = Vec::with_capacity(self.n_heads);
        for h in 0..self.n_heads {
            let qh = tape.slice_cols(q, h * dh, dh);
            let kh = tape.slice_cols(k, h * dh, dh);
            let vh = tape.slice_cols(v, h * dh, dh);
            let mut scores = tape.scale(
                tape.matmul(qh, tape.transpose(kh)),
                1.0 / (dh as f64).sqrt(),
            );
            if let Some(m) = mask {
                scores = tape.add_const(scores, m.clone());
            }
            heads.push(tape.matmul(tape.softmax_rows(scores), vh));
        }
        let cat = tape.concat_cols(&heads);
        tape.matmul(cat, bind.var(tape, self.wo))
    }
}

/// Large-but-finite score penalty; softmax of a row containing both 0 and
/// this value puts zero weight (to double precision) on the penalized keys
/// without producing NaN when a whole row is blocked.
pub const MASK_NEG: f64 = -1e30;

/// Causal mask with optional padded key columns removed everywhere.
pub fn causal_mask(pads: &[bool]) -> Mat {
    let t = pads.len();
    let mut m = Mat::zeros((t, t));
    for i in 0..t {
        for j in 0..t {
            if j > i || pads[j] {
                m[(i, j)] = MASK_NEG;
            }
        }
    }
    m
}
