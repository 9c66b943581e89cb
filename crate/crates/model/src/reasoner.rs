//! Causal transformer backbone over the unified sequence: discrete tokens
//! (command, boundary specials, image codes) and continuous injections
//! (scene/history tokens, the plan slot, latent queries) share one stream.
//! Pre-norm blocks with learnable layer-norm affine, learned positions that
//! skip padding, and a single additive causal+pad mask shared by all layers.
//!
//! Two forward paths exist: the taped one for training, and a KV-cached
//! incremental decoder for sampling. Both compute position `t` from the same
//! row-wise operations, so their outputs agree to floating-point noise.

use std::sync::Arc;

use uwm_core::params::{Binding, Init, ParamId, ParamStore};
use uwm_core::tensor::{layer_norm_rows, softmax_rows, Mat, Tape, Var};

use crate::attention::{causal_mask, SelfAttn};
use crate::layout::{SegmentKind, SequenceLayout};
use crate::vocab::Vocab;
use crate::ModelError;

#[derive(Clone, Debug)]
pub struct ReasonerConfig {
    pub vocab: Vocab,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_len: usize,
    /// Planner latent width accepted by the plan-slot projection.
    pub d_z: usize,
    /// Sever generation→planner gradients at the plan slot.
    pub stop_plan_gradient: bool,
    /// Optional low-rank adapter rank on the attention q/v projections.
    pub lora_rank: Option<usize>,
}

impl Default for ReasonerConfig {
    fn default() -> Self {
        ReasonerConfig {
            vocab: Vocab::default(),
            d_model: 256,
            n_layers: 4,
            n_heads: 8,
            d_ff: 512,
            max_len: 128,
            d_z: 32,
            stop_plan_gradient: false,
            lora_rank: None,
        }
    }
}

/// Continuous rows for the injection segments of a layout. Lengths must
/// match the segments; `plan = None` falls back to the ⟨plan⟩ vocabulary
/// embedding (the first of the two planning phases).
#[derive(Default)]
pub struct Injections {
    pub scene: Option<Var>,
    pub history: Option<Var>,
    pub plan: Option<Var>,
    pub latent_query: Option<Var>,
}

#[derive(Debug)]
pub struct ForwardOut {
    /// `(T, d_model)` hidden states after the final layer norm.
    pub hidden: Var,
    /// `(T, |vocab|)` next-token logits.
    pub logits: Var,
}

struct Layer {
    ln1_g: ParamId,
    ln1_b: ParamId,
    attn: SelfAttn,
    ln2_g: ParamId,
    ln2_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

pub struct Reasoner {
    pub cfg: ReasonerConfig,
    tok_emb: ParamId,
    pos_emb: ParamId,
    layers: Vec<Layer>,
    lnf_g: ParamId,
    lnf_b: ParamId,
    head_w: ParamId,
    head_b: ParamId,
    plan_proj_w: ParamId,
    plan_proj_b: ParamId,
}

const LN_EPS: f64 = 1e-5;

impl Reasoner {
    pub fn register(store: &mut ParamStore, cfg: ReasonerConfig) -> Self {
        let d = cfg.d_model;
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for i in 0..cfg.n_layers {
            let p = |s: &str| format!("reasoner/l{i}/{s}");
            let mut attn = SelfAttn::register(store, &p("attn"), d, cfg.n_heads);
            if let Some(r) = cfg.lora_rank {
                attn.add_lora(store, &p("attn"), r);
            }
            layers.push(Layer {
                ln1_g: store.add(&p("ln1_g"), 1, d, Init::Const(1.0)),
                ln1_b: store.add(&p("ln1_b"), 1, d, Init::Zeros),
                attn,
                ln2_g: store.add(&p("ln2_g"), 1, d, Init::Const(1.0)),
                ln2_b: store.add(&p("ln2_b"), 1, d, Init::Zeros),
                w1: store.add(&p("w1"), d, cfg.d_ff, Init::XavierUniform),
                b1: store.add(&p("b1"), 1, cfg.d_ff, Init::Zeros),
                w2: store.add(&p("w2"), cfg.d_ff, d, Init::XavierUniform),
                b2: store.add(&p("b2"), 1, d, Init::Zeros),
            });
        }
        Reasoner {
            tok_emb: store.add("reasoner/tok_emb", cfg.vocab.size(), d, Init::Normal { std: 0.02 }),
            pos_emb: store.add("reasoner/pos_emb", cfg.max_len, d, Init::Normal { std: 0.02 }),
            layers,
            lnf_g: store.add("reasoner/lnf_g", 1, d, Init::Const(1.0)),
            lnf_b: store.add("reasoner/lnf_b", 1, d, Init::Zeros),
            head_w: store.add("reasoner/head_w", d, cfg.vocab.size(), Init::XavierUniform),
            head_b: store.add("reasoner/head_b", 1, cfg.vocab.size(), Init::Zeros),
            plan_proj_w: store.add("reasoner/plan_proj_w", cfg.d_z, d, Init::XavierUniform),
            plan_proj_b: store.add("reasoner/plan_proj_b", 1, d, Init::Zeros),
            cfg,
        }
    }

    /// Plan-slot row from the planner latent; honors `stop_plan_gradient`.
    pub fn plan_injection(&self, tape: &Tape, bind: &Binding, z: Var) -> Var {
        let proj = tape.linear(
            z,
            bind.var(tape, self.plan_proj_w),
            bind.var(tape, self.plan_proj_b),
        );
        if self.cfg.stop_plan_gradient {
            tape.detach(proj)
        } else {
            proj
        }
    }

    fn affine_ln(&self, tape: &Tape, bind: &Binding, x: Var, g: ParamId, b: ParamId) -> Var {
        tape.add_row(
            tape.mul_row(tape.layer_norm(x, LN_EPS), bind.var(tape, g)),
            bind.var(tape, b),
        )
    }

    /// Input embedding matrix for a layout: vocabulary rows for discrete
    /// positions, injected rows for continuous segments.
    pub fn assemble_embeddings(
        &self,
        tape: &Tape,
        bind: &Binding,
        layout: &SequenceLayout,
        inj: &Injections,
    ) -> Result<Var, ModelError> {
        let emb = bind.var(tape, self.tok_emb);
        let mut parts = Vec::with_capacity(layout.segments.len());
        let mut off = 0;
        for seg in &layout.segments {
            let part = match seg.kind {
                SegmentKind::Scene => inj
                    .scene
                    .ok_or_else(|| ModelError::Layout("SCENE injection missing".into()))?,
                SegmentKind::History => inj
                    .history
                    .ok_or_else(|| ModelError::Layout("HISTORY injection missing".into()))?,
                SegmentKind::LatentQuery => inj
                    .latent_query
                    .ok_or_else(|| ModelError::Layout("LATENT_QUERY injection missing".into()))?,
                SegmentKind::Plan if inj.plan.is_some() => inj.plan.unwrap(),
                _ => {
                    let ids: Vec<usize> = (off..off + seg.len)
                        .map(|p| {
                            layout.tokens[p].ok_or_else(|| {
                                ModelError::Layout(format!(
                                    "position {p} ({:?}) has no token id",
                                    seg.kind
                                ))
                            })
                        })
                        .collect::<Result<_, _>>()?;
                    for &id in &ids {
                        if id >= self.cfg.vocab.size() {
                            return Err(ModelError::Index { index: id, size: self.cfg.vocab.size() });
                        }
                    }
                    tape.gather_rows(emb, &ids)
                }
            };
            let (rows, cols) = tape.dim(part);
            if rows != seg.len || cols != self.cfg.d_model {
                return Err(ModelError::Shape(format!(
                    "{:?} rows are {rows}×{cols}, segment needs {}×{}",
                    seg.kind, seg.len, self.cfg.d_model
                )));
            }
            parts.push(part);
            off += seg.len;
        }
        Ok(tape.concat_rows(&parts))
    }

    /// Position ids that skip padding (pads share id 0; they are masked out
    /// of every attention row anyway).
    pub fn position_ids(layout: &SequenceLayout) -> Vec<usize> {
        let mut ids = Vec::with_capacity(layout.len());
        let mut next = 0;
        for pad in layout.pad_positions() {
            if pad {
                ids.push(0);
            } else {
                ids.push(next);
                next += 1;
            }
        }
        ids
    }

    pub fn forward(
        &self,
        tape: &Tape,
        bind: &Binding,
        layout: &SequenceLayout,
        inj: &Injections,
    ) -> Result<ForwardOut, ModelError> {
        if layout.len() > self.cfg.max_len {
            return Err(ModelError::Shape(format!(
                "sequence length {} exceeds max {}",
                layout.len(),
                self.cfg.max_len
            )));
        }
        let emb = self.assemble_embeddings(tape, bind, layout, inj)?;
        let pos_ids = Self::position_ids(layout);
        let pos = tape.gather_rows(bind.var(tape, self.pos_emb), &pos_ids);
        let mut x = tape.add(emb, pos);
        let mask = Arc::new(causal_mask(&layout.pad_positions()));
        for layer in &self.layers {
            let a = layer.attn.forward(
                tape,
                bind,
                self.affine_ln(tape, bind, x, layer.ln1_g, layer.ln1_b),
                Some(&mask),
            );
            x = tape.add(x, a);
            let m = self.affine_ln(tape, bind, x, layer.ln2_g, layer.ln2_b);
            let ff = tape.relu(tape.linear(m, bind.var(tape, layer.w1), bind.var(tape, layer.b1)));
            let ff = tape.linear(ff, bind.var(tape, layer.w2), bind.var(tape, layer.b2));
            x = tape.add(x, ff);
        }
        let hidden = self.affine_ln(tape, bind, x, self.lnf_g, self.lnf_b);
        let logits = tape.linear(
            hidden,
            bind.var(tape, self.head_w),
            bind.var(tape, self.head_b),
        );
        Ok(ForwardOut { hidden, logits })
    }

    /// Hidden row at the plan slot — the planning embedding the latent head
    /// consumes.
    pub fn h_vlm(&self, tape: &Tape, out: &ForwardOut, layout: &SequenceLayout) -> Result<Var, ModelError> {
        let pos = layout
            .plan_pos()
            .ok_or_else(|| ModelError::Layout("layout has no PLAN slot".into()))?;
        Ok(tape.row(out.hidden, pos))
    }

    /// Token embedding row (off-tape), for building decoder prefixes.
    pub fn token_embedding(&self, store: &ParamStore, id: usize) -> Mat {
        row_mat(store.value(self.tok_emb), id)
    }

    pub fn decoder<'a>(&'a self, store: &'a ParamStore) -> Decoder<'a> {
        Decoder::new(self, store)
    }
}

fn row_mat(m: &Mat, i: usize) -> Mat {
    let mut out = Mat::zeros((1, m.ncols()));
    for c in 0..m.ncols() {
        out[(0, c)] = m[(i, c)];
    }
    out
}

fn affine_ln_row(x: &Mat, g: &Mat, b: &Mat) -> Mat {
    let n = layer_norm_rows(x, LN_EPS).0;
    n * g + b
}

/// Incremental (KV-cached) evaluation of the backbone, one position at a
/// time. No padding support — decoding sequences are dense. Matches the
/// taped [`Reasoner::forward`] row-for-row up to floating-point accumulation
/// order.
pub struct Decoder<'a> {
    model: &'a Reasoner,
    store: &'a ParamStore,
    keys: Vec<Mat>,
    vals: Vec<Mat>,
    t: usize,
}

impl<'a> Decoder<'a> {
    pub fn new(model: &'a Reasoner, store: &'a ParamStore) -> Self {
        let d = model.cfg.d_model;
        Decoder {
            model,
            store,
            keys: (0..model.cfg.n_layers).map(|_| Mat::zeros((0, d))).collect(),
            vals: (0..model.cfg.n_layers).map(|_| Mat::zeros((0, d))).collect(),
            t: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.t
    }

    pub fn is_empty(&self) -> bool {
        self.t == 0
    }

    fn p(&self, id: ParamId) -> &Mat {
        self.store.value(id)
    }

    /// Feed one raw embedding row (pre-position), returning the final-norm
    /// hidden row and the logits row for the next-token distribution.
    pub fn push_embedding(&mut self, emb: &Mat) -> (Mat, Mat) {
        let m = self.model;
        let d = m.cfg.d_model;
        assert_eq!(emb.dim(), (1, d), "embedding row shape");
        assert!(self.t < m.cfg.max_len, "decoder exceeded max length");
        let mut x = emb + &row_mat(self.p(m.pos_emb), self.t);
        for (li, layer) in m.layers.iter().enumerate() {
            let xl = affine_ln_row(&x, self.p(layer.ln1_g), self.p(layer.ln1_b));
            let project = |w: ParamId, ab: Option<(ParamId, ParamId)>| -> Mat {
                let base = xl.dot(self.p(w));
                match ab {
                    Some((a, b)) => base + xl.dot(self.p(a)).dot(self.p(b)),
                    None => base,
                }
            };
            let (lq, lv) = match &layer.attn.lora {
                Some(l) => (Some((l.qa, l.qb)), Some((l.va, l.vb))),
                None => (None, None),
            };
            let q = project(layer.attn.wq, lq);
            let k = project(layer.attn.wk, None);
            let v = project(layer.attn.wv, lv);
            let keys = &mut self.keys[li];
            let vals = &mut self.vals[li];
            *keys = ndarray::concatenate(ndarray::Axis(0), &[keys.view(), k.view()]).unwrap();
            *vals = ndarray::concatenate(ndarray::Axis(0), &[vals.view(), v.view()]).unwrap();
            let n_heads = m.cfg.n_heads;
            let dh = d / n_heads;
            let mut attn_out = Mat::zeros((1, d));
            for h in 0..n_heads {
                let qh = q.slice(ndarray::s![.., h * dh..(h + 1) * dh]);
                let kh = keys.slice(ndarray::s![.., h * dh..(h + 1) * dh]);
                let vh = vals.slice(ndarray::s![.., h * dh..(h + 1) * dh]);
                let scores = qh.dot(&kh.t()).mapv(|s| s / (dh as f64).sqrt());
                let w = softmax_rows(&scores);
                let oh = w.dot(&vh);
                attn_out
                    .slice_mut(ndarray::s![.., h * dh..(h + 1) * dh])
                    .assign(&oh);
            }
            x = &x + &attn_out.dot(self.p(layer.attn.wo));
            let xm = affine_ln_row(&x, self.p(layer.ln2_g), self.p(layer.ln2_b));
            let ff = (xm.dot(self.p(layer.w1)) + self.p(layer.b1)).mapv(|v| v.max(0.0));
            x = &x + &(ff.dot(self.p(layer.w2)) + self.p(layer.b2));
        }
        let hidden = affine_ln_row(&x, self.p(m.lnf_g), self.p(m.lnf_b));
        let logits = hidden.dot(self.p(m.head_w)) + self.p(m.head_b);
        self.t += 1;
        (hidden, logits)
    }

    /// Feed one vocabulary token.
    pub fn push_token(&mut self, id: usize) -> (Mat, Mat) {
        let emb = self.model.token_embedding(self.store, id);
        self.push_embedding(&emb)
    }
}
