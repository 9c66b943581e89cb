//! Query-transformer scene encoder. Three learned query sets attend over
//! patch-embedded camera views; history queries additionally read a FIFO
//! memory bank of previous history summaries keyed by relative-age
//! embeddings. Scene and history queries are projected into the backbone's
//! embedding space; perception queries feed a box/class detection head
//! supervised through Hungarian matching with focal + ℓ1 terms.

use std::collections::VecDeque;
use std::sync::Arc;

use uwm_core::params::{Binding, Init, ParamId, ParamStore};
use uwm_core::tensor::{softmax_rows, Mat, Tape, Var};
use uwm_world::AgentBox;

use crate::attention::{CrossAttn, SelfAttn};
use crate::hungarian;
use crate::vq::patchify;
use crate::ModelError;

/// Continuous box regression targets per agent, in column order
/// `[cx, cy, length, width, yaw, vx, vy]`.
pub const BOX_PARAMS: usize = 7;

#[derive(Clone, Debug)]
pub struct QtConfig {
    /// Query width C_q.
    pub c_q: usize,
    pub n_scene: usize,
    pub n_perception: usize,
    pub n_history: usize,
    /// Memory bank capacity in frames.
    pub bank_frames: usize,
    pub views: usize,
    pub view_res: usize,
    /// Patch edge for the view embedder.
    pub patch: usize,
    /// Backbone embedding width the projections map into.
    pub d_model: usize,
    /// Foreground classes; the detection head adds one background slot.
    pub n_classes: usize,
    pub hidden: usize,
    pub heads: usize,
}

impl Default for QtConfig {
    fn default() -> Self {
        QtConfig {
            c_q: 64,
            n_scene: 32,
            n_perception: 24,
            n_history: 8,
            bank_frames: 8,
            views: 3,
            view_res: 64,
            patch: 8,
            d_model: 256,
            n_classes: 2,
            hidden: 128,
            heads: 4,
        }
    }
}

impl QtConfig {
    pub fn patches_per_view(&self) -> usize {
        (self.view_res / self.patch) * (self.view_res / self.patch)
    }

    pub fn patch_dim(&self) -> usize {
        3 * self.patch * self.patch
    }
}

/// FIFO store of per-frame history summaries (each `N_h×C_q`), oldest first.
/// Entries are plain values: gradients never flow into stored frames, so a
/// training step only differentiates through the current frame's update.
pub struct MemoryBank {
    groups: VecDeque<Arc<Mat>>,
    capacity: usize,
    n_h: usize,
    c_q: usize,
}

impl MemoryBank {
    pub fn new(capacity: usize, n_h: usize, c_q: usize) -> Self {
        MemoryBank {
            groups: VecDeque::with_capacity(capacity),
            capacity,
            n_h,
            c_q,
        }
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn groups(&self) -> impl Iterator<Item = &Arc<Mat>> {
        self.groups.iter()
    }

    pub fn push(&mut self, group: Arc<Mat>) {
        assert_eq!(group.dim(), (self.n_h, self.c_q), "bank group shape");
        if self.groups.len() == self.capacity {
            self.groups.pop_front();
        }
        self.groups.push_back(group);
    }

    /// Age per padded slot group, oldest first: unfilled capacity carries the
    /// sentinel age `capacity`; real frames count down to 0 (newest).
    pub fn group_ages(&self) -> Vec<usize> {
        let k = self.groups.len();
        let mut ages = vec![self.capacity; self.capacity - k];
        ages.extend((0..k).map(|i| k - 1 - i));
        ages
    }

    /// Bank rows padded to full capacity (`capacity·N_h × C_q`) plus the age
    /// of each row.
    fn padded_rows(&self, tape: &Tape) -> (Var, Vec<usize>) {
        let k = self.groups.len();
        let mut parts = Vec::with_capacity(self.capacity.saturating_sub(k).min(1) + k);
        if k < self.capacity {
            parts.push(tape.input(Mat::zeros(((self.capacity - k) * self.n_h, self.c_q))));
        }
        for g in &self.groups {
            parts.push(tape.input_arc(g.clone()));
        }
        let rows = tape.concat_rows(&parts);
        let mut row_ages = Vec::with_capacity(self.capacity * self.n_h);
        for age in self.group_ages() {
            row_ages.extend(std::iter::repeat(age).take(self.n_h));
        }
        (rows, row_ages)
    }
}

/// Detection outputs plus the supervision assembled around them.
pub struct PerceptionOutput {
    /// `(N_p, BOX_PARAMS)` box predictions.
    pub boxes: Var,
    /// `(N_p, n_classes+1)` class logits (last column is background).
    pub logits: Var,
    /// `assignment[g]` = prediction index matched to ground-truth `g`.
    pub assignment: Vec<usize>,
    pub loss: Var,
}

pub struct QtFormer {
    pub cfg: QtConfig,
    q_scene: ParamId,
    q_perception: ParamId,
    q_history: ParamId,
    patch_w: ParamId,
    patch_b: ParamId,
    view_pos: ParamId,
    patch_pos: ParamId,
    sa_queries: SelfAttn,
    ca_scene: CrossAttn,
    ca_memory: CrossAttn,
    ca_history: CrossAttn,
    p_t: ParamId,
    proj_h_w1: ParamId,
    proj_h_b1: ParamId,
    proj_h_w2: ParamId,
    proj_h_b2: ParamId,
    proj_s_w1: ParamId,
    proj_s_b1: ParamId,
    proj_s_w2: ParamId,
    proj_s_b2: ParamId,
    det_box_w1: ParamId,
    det_box_b1: ParamId,
    det_box_w2: ParamId,
    det_box_b2: ParamId,
    det_cls_w1: ParamId,
    det_cls_b1: ParamId,
    det_cls_w2: ParamId,
    det_cls_b2: ParamId,
}

impl QtFormer {
    pub fn register(store: &mut ParamStore, cfg: QtConfig) -> Self {
        let q = Init::Normal { std: 0.02 };
        let (c, h) = (cfg.c_q, cfg.hidden);
        QtFormer {
            q_scene: store.add("qt/q_scene", cfg.n_scene, c, q),
            q_perception: store.add("qt/q_perception", cfg.n_perception, c, q),
            q_history: store.add("qt/q_history", cfg.n_history, c, q),
            patch_w: store.add("qt/patch_w", cfg.patch_dim(), c, Init::XavierUniform),
            patch_b: store.add("qt/patch_b", 1, c, Init::Zeros),
            view_pos: store.add("qt/view_pos", cfg.views, c, q),
            patch_pos: store.add("qt/patch_pos", cfg.patches_per_view(), c, q),
            sa_queries: SelfAttn::register(store, "qt/sa_queries", c, cfg.heads),
            ca_scene: CrossAttn::register(store, "qt/ca_scene", c, h),
            ca_memory: CrossAttn::register(store, "qt/ca_memory", c, h),
            ca_history: CrossAttn::register(store, "qt/ca_history", c, h),
            p_t: store.add("qt/p_t", cfg.bank_frames + 1, c, q),
            proj_h_w1: store.add("qt/proj_h_w1", c, h, Init::XavierUniform),
            proj_h_b1: store.add("qt/proj_h_b1", 1, h, Init::Zeros),
            proj_h_w2: store.add("qt/proj_h_w2", h, cfg.d_model, Init::XavierUniform),
            proj_h_b2: store.add("qt/proj_h_b2", 1, cfg.d_model, Init::Zeros),
            proj_s_w1: store.add("qt/proj_s_w1", c, h, Init::XavierUniform),
            proj_s_b1: store.add("qt/proj_s_b1", 1, h, Init::Zeros),
            proj_s_w2: store.add("qt/proj_s_w2", h, cfg.d_model, Init::XavierUniform),
            proj_s_b2: store.add("qt/proj_s_b2", 1, cfg.d_model, Init::Zeros),
            det_box_w1: store.add("qt/det_box_w1", c, h, Init::XavierUniform),
            det_box_b1: store.add("qt/det_box_b1", 1, h, Init::Zeros),
            det_box_w2: store.add("qt/det_box_w2", h, BOX_PARAMS, Init::XavierUniform),
            det_box_b2: store.add("qt/det_box_b2", 1, BOX_PARAMS, Init::Zeros),
            det_cls_w1: store.add("qt/det_cls_w1", c, h, Init::XavierUniform),
            det_cls_b1: store.add("qt/det_cls_b1", 1, h, Init::Zeros),
            det_cls_w2: store.add("qt/det_cls_w2", h, cfg.n_classes + 1, Init::XavierUniform),
            det_cls_b2: store.add("qt/det_cls_b2", 1, cfg.n_classes + 1, Init::Zeros),
            cfg,
        }
    }

    pub fn new_bank(&self) -> MemoryBank {
        MemoryBank::new(self.cfg.bank_frames, self.cfg.n_history, self.cfg.c_q)
    }

    /// Patch-embed all camera views of one frame into `F_m`
    /// (`views·patches × C_q`) with per-view and per-patch position terms.
    pub fn embed_views(
        &self,
        tape: &Tape,
        bind: &Binding,
        views: &[f32],
    ) -> Result<Var, ModelError> {
        let cfg = &self.cfg;
        let per_view = 3 * cfg.view_res * cfg.view_res;
        if views.len() != cfg.views * per_view {
            return Err(ModelError::Shape(format!(
                "got {} view values, expected {} views of {per_view}",
                views.len(),
                cfg.views
            )));
        }
        let w = bind.var(tape, self.patch_w);
        let b = bind.var(tape, self.patch_b);
        let view_pos = bind.var(tape, self.view_pos);
        let patch_pos = bind.var(tape, self.patch_pos);
        let mut parts = Vec::with_capacity(cfg.views);
        for k in 0..cfg.views {
            let patches = patchify(
                &views[k * per_view..(k + 1) * per_view],
                3,
                cfg.view_res,
                cfg.view_res,
                cfg.patch,
            )?;
            let emb = tape.linear(tape.input(patches), w, b);
            let emb = tape.add_row(emb, tape.row(view_pos, k));
            parts.push(tape.add(emb, patch_pos));
        }
        Ok(tape.concat_rows(&parts))
    }

    /// Scene/perception query update for one frame: queries self-attend,
    /// then cross-attend to the view features.
    pub fn encode_scene(
        &self,
        tape: &Tape,
        bind: &Binding,
        views: &[f32],
    ) -> Result<(Var, Var, Var), ModelError> {
        let f_m = self.embed_views(tape, bind, views)?;
        let queries = tape.concat_rows(&[
            bind.var(tape, self.q_scene),
            bind.var(tape, self.q_perception),
        ]);
        let sa = self
            .sa_queries
            .forward(tape, bind, tape.layer_norm(queries, 1e-5), None);
        let u = tape.add(queries, sa);
        let attended = self.ca_scene.attend(tape, bind, u, f_m);
        let q_s = tape.slice_rows(attended, 0, self.cfg.n_scene);
        let q_p = tape.slice_rows(attended, self.cfg.n_scene, self.cfg.n_perception);
        Ok((q_s, q_p, f_m))
    }

    /// History update: learned history queries read the age-keyed memory
    /// bank, then the current scene queries; the result is both returned and
    /// pushed (as a plain value) into the bank.
    pub fn update_history(
        &self,
        tape: &Tape,
        bind: &Binding,
        bank: &mut MemoryBank,
        q_s: Var,
    ) -> Var {
        let (m_rows, row_ages) = bank.padded_rows(tape);
        let pt = tape.gather_rows(bind.var(tape, self.p_t), &row_ages);
        let keyed = tape.add(m_rows, pt);
        let q_h = bind.var(tape, self.q_history);
        let q_h = self.ca_memory.attend(tape, bind, q_h, keyed);
        let q_hat = self.ca_history.attend(tape, bind, q_h, q_s);
        bank.push(tape.value(q_hat));
        q_hat
    }

    /// Row-wise two-layer projections into the backbone space:
    /// `(N_h, d_model)` history tokens and `(N_s, d_model)` scene tokens.
    pub fn project_tokens(&self, tape: &Tape, bind: &Binding, q_hat_h: Var, q_s: Var) -> (Var, Var) {
        let mlp = |x: Var, w1, b1, w2, b2| {
            let h = tape.relu(tape.linear(x, bind.var(tape, w1), bind.var(tape, b1)));
            tape.linear(h, bind.var(tape, w2), bind.var(tape, b2))
        };
        let x_h = mlp(
            q_hat_h,
            self.proj_h_w1,
            self.proj_h_b1,
            self.proj_h_w2,
            self.proj_h_b2,
        );
        let x_s = mlp(
            q_s,
            self.proj_s_w1,
            self.proj_s_b1,
            self.proj_s_w2,
            self.proj_s_b2,
        );
        (x_h, x_s)
    }

    /// Detection head over perception queries: box parameters and class
    /// logits (background last).
    pub fn detect(&self, tape: &Tape, bind: &Binding, q_p: Var) -> (Var, Var) {
        let hb = tape.relu(tape.linear(
            q_p,
            bind.var(tape, self.det_box_w1),
            bind.var(tape, self.det_box_b1),
        ));
        let boxes = tape.linear(hb, bind.var(tape, self.det_box_w2), bind.var(tape, self.det_box_b2));
        let hc = tape.relu(tape.linear(
            q_p,
            bind.var(tape, self.det_cls_w1),
            bind.var(tape, self.det_cls_b1),
        ));
        let logits = tape.linear(hc, bind.var(tape, self.det_cls_w2), bind.var(tape, self.det_cls_b2));
        (boxes, logits)
    }

    /// Full detection supervision for one frame.
    pub fn perception_loss(
        &self,
        tape: &Tape,
        bind: &Binding,
        q_p: Var,
        gts: &[AgentBox],
    ) -> Result<PerceptionOutput, ModelError> {
        let (boxes, logits) = self.detect(tape, bind, q_p);
        let (loss, assignment) = detection_loss(tape, boxes, logits, gts, self.cfg.n_classes)?;
        Ok(PerceptionOutput { boxes, logits, assignment, loss })
    }
}

/// Regression target row for one agent.
pub fn box_targets(gts: &[AgentBox]) -> Mat {
    let mut t = Mat::zeros((gts.len(), BOX_PARAMS));
    for (g, b) in gts.iter().enumerate() {
        t[(g, 0)] = b.center[0] as f64;
        t[(g, 1)] = b.center[1] as f64;
        t[(g, 2)] = b.size[0] as f64;
        t[(g, 3)] = b.size[1] as f64;
        t[(g, 4)] = b.yaw as f64;
        t[(g, 5)] = b.velocity[0] as f64;
        t[(g, 6)] = b.velocity[1] as f64;
    }
    t
}

/// Set-prediction loss: Hungarian matching on `(1−p_class) + mean-ℓ1` costs
/// (off-tape), then focal classification over every prediction (α=0.25
/// foreground / 0.75 background, γ=2, averaged over predictions) plus
/// matched mean-ℓ1 regression averaged over ground truths. The regression
/// sum runs in prediction-index order, which makes the total independent of
/// how the ground truths were ordered.
pub fn detection_loss(
    tape: &Tape,
    boxes: Var,
    logits: Var,
    gts: &[AgentBox],
    n_classes: usize,
) -> Result<(Var, Vec<usize>), ModelError> {
    let (n_pred, bp) = tape.dim(boxes);
    if bp != BOX_PARAMS {
        return Err(ModelError::Shape(format!(
            "box predictions have {bp} parameters, expected {BOX_PARAMS}"
        )));
    }
    let background = n_classes;
    let targets = box_targets(gts);

    let assignment = if gts.is_empty() {
        Vec::new()
    } else {
        let probs = softmax_rows(&tape.value(logits));
        let box_vals = tape.value(boxes);
        let mut cost = Mat::zeros((n_pred, gts.len()));
        for p in 0..n_pred {
            for (g, b) in gts.iter().enumerate() {
                let l1: f64 = (0..BOX_PARAMS)
                    .map(|c| (box_vals[(p, c)] - targets[(g, c)]).abs())
                    .sum::<f64>()
                    / BOX_PARAMS as f64;
                cost[(p, g)] = (1.0 - probs[(p, b.class_id as usize)]) + l1;
            }
        }
        hungarian::assign(&cost)?
    };

    // Focal classification: matched predictions target the agent class,
    // everything else targets background.
    let mut cls_target = vec![background; n_pred];
    let mut alpha = Mat::zeros((n_pred, 1));
    for p in 0..n_pred {
        alpha[(p, 0)] = 0.75; // background weight 1−α
    }
    for (g, &p) in assignment.iter().enumerate() {
        cls_target[p] = gts[g].class_id as usize;
        alpha[(p, 0)] = 0.25;
    }
    let log_p = tape.pick_per_row(tape.log_softmax_rows(logits), &cls_target);
    let p_t = tape.pick_per_row(tape.softmax_rows(logits), &cls_target);
    let one_minus = tape.add_scalar_const(tape.neg(p_t), 1.0);
    let focal_rows = tape.mul(
        tape.input(alpha),
        tape.mul(tape.square(one_minus), tape.neg(log_p)),
    );
    let focal = tape.mean_all(focal_rows);

    if gts.is_empty() {
        return Ok((focal, assignment));
    }

    // Matched ℓ1, iterated by ascending prediction index.
    let mut pairs: Vec<(usize, usize)> = assignment
        .iter()
        .enumerate()
        .map(|(g, &p)| (p, g))
        .collect();
    pairs.sort_unstable();
    let pred_rows = tape.gather_rows(boxes, &pairs.iter().map(|&(p, _)| p).collect::<Vec<_>>());
    let mut gt_rows = Mat::zeros((pairs.len(), BOX_PARAMS));
    for (r, &(_, g)) in pairs.iter().enumerate() {
        for c in 0..BOX_PARAMS {
            gt_rows[(r, c)] = targets[(g, c)];
        }
    }
    let diff = tape.sub(pred_rows, tape.input(gt_rows));
    let abs = tape.add(tape.relu(diff), tape.relu(tape.neg(diff)));
    let l1 = tape.scale(
        tape.sum_all(abs),
        1.0 / (BOX_PARAMS as f64 * gts.len() as f64),
    );
    Ok((tape.add(focal, l1), assignment))
}

#[cfg(test)]
mod tests {
    use super::*;
    use uwm_core::fd::{finite_diff, max_rel_err};
    use uwm_core::rng::DetRng;

    fn small_cfg() -> QtConfig {
        QtConfig {
            c_q: 16,
            n_scene: 6,
            n_perception: 5,
            n_history: 3,
            bank_frames: 4,
            views: 2,
            view_res: 16,
            patch: 8,
            d_model: 24,
            n_classes: 2,
            hidden: 20,
            heads: 2,
        }
    }

    fn random_views(seed: u64, cfg: &QtConfig) -> Vec<f32> {
        let mut rng = DetRng::new(seed, "qt-views");
        (0..cfg.views * 3 * cfg.view_res * cfg.view_res)
            .map(|_| rng.uniform() as f32)
            .collect()
    }

    fn gt(cx: f64, cy: f64, class_id: u8) -> AgentBox {
        AgentBox {
            center: [cx as f32, cy as f32],
            size: [4.2, 1.8],
            yaw: 0.15,
            velocity: [3.0, 0.2],
            class_id,
        }
    }

    #[test]
    fn scene_encoding_shapes_and_determinism() {
        let cfg = small_cfg();
        let mut store = ParamStore::new(41);
        let qt = QtFormer::register(&mut store, cfg.clone());
        let views = random_views(1, &cfg);
        let run = || {
            let tape = Tape::new();
            let bind = Binding::new(&store);
            let (q_s, q_p, f_m) = qt.encode_scene(&tape, &bind, &views).unwrap();
            (
                tape.value(q_s).as_ref().clone(),
                tape.value(q_p).as_ref().clone(),
                tape.dim(f_m),
            )
        };
        let (q_s, q_p, fm_dim) = run();
        assert_eq!(q_s.dim(), (cfg.n_scene, cfg.c_q));
        assert_eq!(q_p.dim(), (cfg.n_perception, cfg.c_q));
        assert_eq!(fm_dim, (cfg.views * cfg.patches_per_view(), cfg.c_q));
        let (q_s2, q_p2, _) = run();
        assert_eq!(q_s, q_s2);
        assert_eq!(q_p, q_p2);
    }

    #[test]
    fn wrong_view_count_is_rejected() {
        let cfg = small_cfg();
        let mut store = ParamStore::new(42);
        let qt = QtFormer::register(&mut store, cfg.clone());
        let views = random_views(2, &cfg);
        match qt.encode_scene(&Tape::new(), &Binding::new(&store), &views[..views.len() - 5]) {
            Err(ModelError::Shape(_)) => {}
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn zero_views_and_zero_position_terms_give_constant_features() {
        let cfg = small_cfg();
        let mut store = ParamStore::new(43);
        let qt = QtFormer::register(&mut store, cfg.clone());
        store.set_value(qt.view_pos, Mat::zeros((cfg.views, cfg.c_q)));
        store.set_value(qt.patch_pos, Mat::zeros((cfg.patches_per_view(), cfg.c_q)));
        let views = vec![0.0f32; cfg.views * 3 * cfg.view_res * cfg.view_res];
        let tape = Tape::new();
        let bind = Binding::new(&store);
        let f_m = qt.embed_views(&tape, &bind, &views).unwrap();
        let fm = tape.value(f_m);
        for r in 0..fm.nrows() {
            for c in 0..fm.ncols() {
                assert_eq!(fm[(r, c)], fm[(0, c)], "row {r} differs");
            }
        }
        // Pre-residual cross-attention over constant rows returns that row.
        let mut rng = DetRng::new(5, "const-q");
        let q = Mat::from_shape_vec((3, cfg.c_q), rng.normal_vec(3 * cfg.c_q)).unwrap();
        let mix = qt
            .ca_scene
            .attention_mix(&tape, &bind, tape.input(q), f_m);
        let mv = tape.value(mix);
        for r in 0..3 {
            for c in 0..cfg.c_q {
                assert!((mv[(r, c)] - fm[(0, c)]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_mix_stays_in_value_hull_and_ignores_row_order() {
        let cfg = small_cfg();
        let mut store = ParamStore::new(44);
        let qt = QtFormer::register(&mut store, cfg.clone());
        for seed in 0..10u64 {
            let mut rng = DetRng::indexed(44, "hull", seed, 0);
            let q = Mat::from_shape_vec((4, cfg.c_q), rng.normal_vec(4 * cfg.c_q)).unwrap();
            let kv = Mat::from_shape_vec((6, cfg.c_q), rng.normal_vec(6 * cfg.c_q)).unwrap();
            let tape = Tape::new();
            let bind = Binding::new(&store);
            let mix = tape.value(qt.ca_scene.attention_mix(
                &tape,
                &bind,
                tape.input(q.clone()),
                tape.input(kv.clone()),
            ));
            for c in 0..cfg.c_q {
                let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
                for r in 0..6 {
                    lo = lo.min(kv[(r, c)]);
                    hi = hi.max(kv[(r, c)]);
                }
                for r in 0..4 {
                    assert!(mix[(r, c)] >= lo - 1e-9 && mix[(r, c)] <= hi + 1e-9);
                }
            }
            // Jointly permuting key/value rows must not change the output.
            let perm = rng.permutation(6);
            let mut kv_p = Mat::zeros((6, cfg.c_q));
            for (to, &from) in perm.iter().enumerate() {
                for c in 0..cfg.c_q {
                    kv_p[(to, c)] = kv[(from, c)];
                }
            }
            let mix_p = tape.value(qt.ca_scene.attention_mix(
                &tape,
                &bind,
                tape.input(q),
                tape.input(kv_p),
            ));
            for r in 0..4 {
                for c in 0..cfg.c_q {
                    assert!((mix[(r, c)] - mix_p[(r, c)]).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn memory_bank_is_fifo_with_decreasing_ages() {
        let mut bank = MemoryBank::new(4, 2, 3);
        assert_eq!(bank.group_ages(), vec![4, 4, 4, 4]);
        let frame = |v: f64| Arc::new(Mat::from_elem((2, 3), v));
        for i in 0..3 {
            bank.push(frame(i as f64));
        }
        assert_eq!(bank.len(), 3);
        assert_eq!(bank.group_ages(), vec![4, 2, 1, 0]);
        bank.push(frame(3.0));
        bank.push(frame(4.0)); // evicts frame 0
        assert_eq!(bank.len(), 4);
        assert_eq!(bank.group_ages(), vec![3, 2, 1, 0]);
        assert!(bank.groups().all(|g| g[(0, 0)] != 0.0), "frame 0 still present");
        let real_ages = bank.group_ages();
        assert!(real_ages.windows(2).all(|w| w[0] > w[1]));
    }

    #[test]
    fn history_update_is_reproducible_and_fills_bank() {
        let cfg = small_cfg();
        let mut store = ParamStore::new(45);
        let qt = QtFormer::register(&mut store, cfg.clone());
        let run = || {
            let mut bank = qt.new_bank();
            let mut outs = Vec::new();
            for t in 0..cfg.bank_frames + 2 {
                let views = random_views(100 + t as u64, &cfg);
                let tape = Tape::new();
                let bind = Binding::new(&store);
                let (q_s, _, _) = qt.encode_scene(&tape, &bind, &views).unwrap();
                let q_hat = qt.update_history(&tape, &bind, &mut bank, q_s);
                outs.push(tape.value(q_hat).as_ref().clone());
            }
            (outs, bank.len())
        };
        let (a, len_a) = run();
        let (b, len_b) = run();
        assert_eq!(a, b, "seeded history run must be bit-identical");
        assert_eq!(len_a, cfg.bank_frames);
        assert_eq!(len_b, cfg.bank_frames);
        assert_eq!(a[0].dim(), (cfg.n_history, cfg.c_q));
    }

    #[test]
    fn projections_are_row_wise_and_zero_preserving() {
        let cfg = small_cfg();
        let mut store = ParamStore::new(46);
        let qt = QtFormer::register(&mut store, cfg.clone());
        let tape = Tape::new();
        let bind = Binding::new(&store);
        let zeros_h = tape.input(Mat::zeros((cfg.n_history, cfg.c_q)));
        let zeros_s = tape.input(Mat::zeros((cfg.n_scene, cfg.c_q)));
        let (x_h, x_s) = qt.project_tokens(&tape, &bind, zeros_h, zeros_s);
        assert_eq!(tape.dim(x_h), (cfg.n_history, cfg.d_model));
        assert_eq!(tape.dim(x_s), (cfg.n_scene, cfg.d_model));
        assert!(tape.value(x_h).iter().all(|&v| v == 0.0));
        assert!(tape.value(x_s).iter().all(|&v| v == 0.0));

        let mut rng = DetRng::new(6, "rowwise");
        let base = Mat::from_shape_vec((cfg.n_scene, cfg.c_q), rng.normal_vec(cfg.n_scene * cfg.c_q))
            .unwrap();
        let mut poked = base.clone();
        for c in 0..cfg.c_q {
            poked[(2, c)] += 1.0;
        }
        let project = |m: Mat| {
            let t = Tape::new();
            let b = Binding::new(&store);
            let dummy = t.input(Mat::zeros((cfg.n_history, cfg.c_q)));
            let (_, x_s) = qt.project_tokens(&t, &b, dummy, t.input(m));
            t.value(x_s).as_ref().clone()
        };
        let ya = project(base);
        let yb = project(poked);
        for r in 0..cfg.n_scene {
            let changed = (0..cfg.d_model).any(|c| ya[(r, c)] != yb[(r, c)]);
            assert_eq!(changed, r == 2, "row {r} locality violated");
        }
    }

    #[test]
    fn confident_perfect_predictions_cost_nearly_nothing() {
        let gts = vec![gt(10.0, -1.5, 0), gt(24.0, 1.8, 1)];
        let n_pred = 5;
        let mut boxes = Mat::zeros((n_pred, BOX_PARAMS));
        let targets = box_targets(&gts);
        // Predictions 1 and 3 reproduce the two agents exactly.
        for c in 0..BOX_PARAMS {
            boxes[(1, c)] = targets[(0, c)];
            boxes[(3, c)] = targets[(1, c)];
        }
        for p in [0usize, 2, 4] {
            boxes[(p, 0)] = 60.0 + p as f64; // far from both agents
        }
        let mut logits = Mat::from_elem((n_pred, 3), -10.0);
        logits[(1, 0)] = 10.0;
        logits[(3, 1)] = 10.0;
        logits[(0, 2)] = 10.0;
        logits[(2, 2)] = 10.0;
        logits[(4, 2)] = 10.0;
        let tape = Tape::new();
        let (loss, assignment) =
            detection_loss(&tape, tape.input(boxes), tape.input(logits), &gts, 2).unwrap();
        assert_eq!(assignment, vec![1, 3]);
        assert!(tape.scalar_value(loss) < 1e-3);
    }

    #[test]
    fn empty_scene_reduces_to_background_focal() {
        let n_pred = 4;
        let mut rng = DetRng::new(7, "bg-focal");
        let logits = Mat::from_shape_vec((n_pred, 3), rng.normal_vec(n_pred * 3)).unwrap();
        let boxes = Mat::from_shape_vec((n_pred, BOX_PARAMS), rng.normal_vec(n_pred * BOX_PARAMS))
            .unwrap();
        let tape = Tape::new();
        let (loss, assignment) = detection_loss(
            &tape,
            tape.input(boxes),
            tape.input(logits.clone()),
            &[],
            2,
        )
        .unwrap();
        assert!(assignment.is_empty());
        // Closed-form background focal term.
        let mut want = 0.0;
        for p in 0..n_pred {
            let mx = (0..3).map(|c| logits[(p, c)]).fold(f64::MIN, f64::max);
            let z: f64 = (0..3).map(|c| (logits[(p, c)] - mx).exp()).sum();
            let pb = (logits[(p, 2)] - mx).exp() / z;
            want += 0.75 * (1.0 - pb).powi(2) * (-pb.ln());
        }
        want /= n_pred as f64;
        assert!((tape.scalar_value(loss) - want).abs() < 1e-12);
    }

    #[test]
    fn detection_loss_ignores_ground_truth_ordering() {
        let gts = vec![gt(8.0, -1.0, 0), gt(20.0, 1.5, 1), gt(33.0, -2.0, 0)];
        let mut rng = DetRng::new(8, "perm");
        let n_pred = 6;
        let boxes = Mat::from_shape_vec(
            (n_pred, BOX_PARAMS),
            (0..n_pred * BOX_PARAMS).map(|_| rng.range(-2.0, 30.0)).collect::<Vec<_>>(),
        )
        .unwrap();
        let logits = Mat::from_shape_vec((n_pred, 3), rng.normal_vec(n_pred * 3)).unwrap();
        let eval = |order: &[usize]| {
            let shuffled: Vec<AgentBox> = order.iter().map(|&i| gts[i].clone()).collect();
            let tape = Tape::new();
            let (loss, _) = detection_loss(
                &tape,
                tape.input(boxes.clone()),
                tape.input(logits.clone()),
                &shuffled,
                2,
            )
            .unwrap();
            tape.scalar_value(loss)
        };
        let base = eval(&[0, 1, 2]);
        for order in [[1, 0, 2], [2, 1, 0], [2, 0, 1]] {
            let v = eval(&order);
            assert_eq!(v.to_bits(), base.to_bits(), "order {order:?}");
        }
    }

    #[test]
    fn detection_box_gradients_match_finite_differences() {
        let gts = vec![gt(10.0, -1.5, 0), gt(22.0, 2.0, 1)];
        let mut rng = DetRng::new(9, "det-fd");
        let n_pred = 4;
        let boxes0 = Mat::from_shape_vec(
            (n_pred, BOX_PARAMS),
            (0..n_pred * BOX_PARAMS).map(|_| rng.range(1.0, 25.0)).collect::<Vec<_>>(),
        )
        .unwrap();
        let logits0 = Mat::from_shape_vec((n_pred, 3), rng.normal_vec(n_pred * 3)).unwrap();

        let mut f = |inputs: &[Mat]| {
            let tape = Tape::new();
            let (loss, _) = detection_loss(
                &tape,
                tape.input(inputs[0].clone()),
                tape.input(inputs[1].clone()),
                &gts,
                2,
            )
            .unwrap();
            tape.scalar_value(loss)
        };
        let numeric = finite_diff(&mut f, &[boxes0.clone(), logits0.clone()], 1e-6);

        let tape = Tape::new();
        let bv = tape.input(boxes0);
        let lv = tape.input(logits0);
        let (loss, _) = detection_loss(&tape, bv, lv, &gts, 2).unwrap();
        let grads = tape.backward(loss);
        assert!(max_rel_err(grads.get(bv).unwrap(), &numeric[0]) < 1e-4);
        assert!(max_rel_err(grads.get(lv).unwrap(), &numeric[1]) < 1e-4);
    }

    #[test]
    fn detection_head_output_shapes() {
        let cfg = small_cfg();
        let mut store = ParamStore::new(47);
        let qt = QtFormer::register(&mut store, cfg.clone());
        let tape = Tape::new();
        let bind = Binding::new(&store);
        let q_p = tape.input(Mat::zeros((cfg.n_perception, cfg.c_q)));
        let out = qt
            .perception_loss(&tape, &bind, q_p, &[gt(12.0, 0.5, 1)])
            .unwrap();
        assert_eq!(tape.dim(out.boxes), (cfg.n_perception, BOX_PARAMS));
        assert_eq!(tape.dim(out.logits), (cfg.n_perception, 3));
        assert_eq!(out.assignment.len(), 1);
        assert!(tape.scalar_value(out.loss).is_finite());
    }
}
