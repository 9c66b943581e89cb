//! Continuous future-frame head: a velocity network trained by flow matching
//! on semantic-embedding targets, a deterministic Euler integrator, a pixel
//! decoder, and the frozen-encoder cosine alignment loss.

use std::sync::Arc;

use uwm_core::params::{Binding, Init, ParamId, ParamStore};
use uwm_core::rng::DetRng;
use uwm_core::tensor::{CustomGrad, Mat, Tape, Var};

use crate::layout::{SegmentKind, SequenceLayout};
use crate::vq::{patchify, unpatchify};
use crate::ModelError;

/// How the integrator seeds its start point.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FmInit {
    Seeded,
    Zeros,
}

#[derive(Clone, Debug)]
pub struct FmConfig {
    pub d_model: usize,
    pub n_q: usize,
    pub d_time: usize,
    pub v_hidden: usize,
    pub e_hidden: usize,
    pub e_mixed: usize,
    pub p_hidden: usize,
    pub channels: usize,
    pub frame_h: usize,
    pub frame_w: usize,
    pub f: usize,
    pub n_steps: usize,
    pub init: FmInit,
    /// When set, the alignment loss backpropagates through the whole Euler
    /// path into the velocity net instead of only training the pixel decoder
    /// on a detached one-step latent estimate.
    pub clip_full_path: bool,
}

impl Default for FmConfig {
    fn default() -> Self {
        Self {
            d_model: 256,
            n_q: 16,
            d_time: 32,
            v_hidden: 256,
            e_hidden: 64,
            e_mixed: 128,
            p_hidden: 256,
            channels: 3,
            frame_h: 64,
            frame_w: 64,
            f: 8,
            n_steps: 10,
            init: FmInit::Seeded,
            clip_full_path: false,
        }
    }
}

impl FmConfig {
    pub fn patch_dim(&self) -> usize {
        self.channels * self.f * self.f
    }
    pub fn n_patches(&self) -> usize {
        (self.frame_h / self.f) * (self.frame_w / self.f)
    }
}

/// One supervised point on the straight interpolation path between a noise
/// draw and a target embedding.
#[derive(Clone, Debug)]
pub struct FlowSample {
    pub x0: Vec<f64>,
    pub x1: Vec<f64>,
    pub t: f64,
    pub xt: Vec<f64>,
    pub vt: Vec<f64>,
}

impl FlowSample {
    pub fn from_parts(t: f64, x0: Vec<f64>, x1: Vec<f64>) -> Self {
        assert_eq!(x0.len(), x1.len());
        let xt = x0
            .iter()
            .zip(&x1)
            .map(|(&a, &b)| t * b + (1.0 - t) * a)
            .collect();
        let vt = x0.iter().zip(&x1).map(|(&a, &b)| b - a).collect();
        Self { x0, x1, t, xt, vt }
    }
}

/// Draw a uniform timestep and a standard-normal start, then interpolate.
pub fn sample_flow_point(rng: &mut DetRng, x1: &[f64]) -> FlowSample {
    let t = rng.uniform();
    let x0 = rng.normal_vec(x1.len());
    FlowSample::from_parts(t, x0, x1.to_vec())
}

/// Sinusoidal embedding of timesteps; one row per entry of `ts`.
pub fn time_embedding(ts: &[f64], dim: usize) -> Mat {
    assert!(dim % 2 == 0, "time embedding dimension must be even");
    let half = dim / 2;
    let mut m = Mat::zeros((ts.len(), dim));
    for (r, &t) in ts.iter().enumerate() {
        for i in 0..half {
            let omega = 10000f64.powf(-(i as f64) / half as f64);
            m[(r, i)] = (omega * t).sin();
            m[(r, half + i)] = (omega * t).cos();
        }
    }
    m
}

/// Learnable rows injected at the LATENT_QUERY positions.
pub struct LatentQueryBank {
    pub queries: ParamId,
}

impl LatentQueryBank {
    pub fn register(store: &mut ParamStore, n_q: usize, d_model: usize) -> Self {
        Self {
            queries: store.add("fm/queries", n_q, d_model, Init::Normal { std: 0.02 }),
        }
    }

    pub fn rows(&self, tape: &Tape, bind: &Binding) -> Var {
        bind.var(tape, self.queries)
    }
}

/// Hidden states at the LATENT_QUERY segment of a processed sequence.
pub fn latent_query_states(
    tape: &Tape,
    layout: &SequenceLayout,
    hidden: Var,
) -> Result<Var, ModelError> {
    let (off, len) = layout
        .segment(SegmentKind::LatentQuery)
        .ok_or_else(|| ModelError::Layout("layout has no LATENT_QUERY segment".into()))?;
    Ok(tape.slice_rows(hidden, off, len))
}

/// Mean-pool per-example query states into a single conditioning row.
pub fn pool_queries(tape: &Tape, q_star: Var) -> Var {
    tape.mean_rows(q_star)
}

/// Small embedding network mapping a frame (as patch rows) to one vector.
/// Patch rows mix locally (2×2 neighborhoods) before global mean pooling, so
/// the same weights accept any frame whose patch grid has even sides.
pub struct SemanticEncoder {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    w3: ParamId,
    b3: ParamId,
    pub f: usize,
    pub channels: usize,
}

impl SemanticEncoder {
    pub fn register(store: &mut ParamStore, cfg: &FmConfig) -> Self {
        let pd = cfg.patch_dim();
        Self {
            w1: store.add("fm/enc_w1", pd, cfg.e_hidden, Init::XavierUniform),
            b1: store.add("fm/enc_b1", 1, cfg.e_hidden, Init::Zeros),
            w2: store.add("fm/enc_w2", 4 * cfg.e_hidden, cfg.e_mixed, Init::XavierUniform),
            b2: store.add("fm/enc_b2", 1, cfg.e_mixed, Init::Zeros),
            w3: store.add("fm/enc_w3", cfg.e_mixed, cfg.d_model, Init::XavierUniform),
            b3: store.add("fm/enc_b3", 1, cfg.d_model, Init::Zeros),
            f: cfg.f,
            channels: cfg.channels,
        }
    }

    /// Row order that groups each 2×2 patch neighborhood contiguously.
    fn regroup_indices(grid_h: usize, grid_w: usize) -> Vec<usize> {
        let mut idx = Vec::with_capacity(grid_h * grid_w);
        for by in 0..grid_h / 2 {
            for bx in 0..grid_w / 2 {
                let r0 = 2 * by * grid_w + 2 * bx;
                idx.extend_from_slice(&[r0, r0 + 1, r0 + grid_w, r0 + grid_w + 1]);
            }
        }
        idx
    }

    /// Embed a frame given as patch rows (`grid_h·grid_w × patch_dim`).
    pub fn embed_patches(
        &self,
        tape: &Tape,
        bind: &Binding,
        patches: Var,
        grid_h: usize,
        grid_w: usize,
    ) -> Result<Var, ModelError> {
        let (rows, cols) = tape.dim(patches);
        if rows != grid_h * grid_w || cols != self.channels * self.f * self.f {
            return Err(ModelError::Shape(format!(
                "patch rows {rows}x{cols} do not match a {grid_h}x{grid_w} grid"
            )));
        }
        if grid_h % 2 != 0 || grid_w % 2 != 0 {
            return Err(ModelError::Shape(format!(
                "patch grid {grid_h}x{grid_w} must have even sides"
            )));
        }
        let h1 = tape.relu(tape.linear(
            patches,
            bind.var(tape, self.w1),
            bind.var(tape, self.b1),
        ));
        let regrouped = tape.gather_rows(h1, &Self::regroup_indices(grid_h, grid_w));
        let (n, c) = tape.dim(regrouped);
        let mixed_in = tape.reshape(regrouped, n / 4, 4 * c);
        let h2 = tape.relu(tape.linear(
            mixed_in,
            bind.var(tape, self.w2),
            bind.var(tape, self.b2),
        ));
        let pooled = tape.mean_rows(h2);
        Ok(tape.linear(pooled, bind.var(tape, self.w3), bind.var(tape, self.b3)))
    }

    /// Embed a raster in [0,1]; any resolution divisible by `2f` works.
    pub fn embed_frame(
        &self,
        tape: &Tape,
        bind: &Binding,
        pixels: &[f32],
        h: usize,
        w: usize,
    ) -> Result<Var, ModelError> {
        let patches = patchify(pixels, self.channels, h, w, self.f)?;
        let v = tape.input(patches);
        self.embed_patches(tape, bind, v, h / self.f, w / self.f)
    }

    /// Off-tape embedding of a frame, as plain numbers.
    pub fn embed_value(
        &self,
        store: &ParamStore,
        pixels: &[f32],
        h: usize,
        w: usize,
    ) -> Result<Vec<f64>, ModelError> {
        let tape = Tape::new();
        let bind = Binding::new(store);
        let e = self.embed_frame(&tape, &bind, pixels, h, w)?;
        Ok(tape.value(e).iter().copied().collect())
    }
}

/// Decoder from one latent row back to patch rows of a fixed-size frame.
pub struct PixelDecoder {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    pub channels: usize,
    pub frame_h: usize,
    pub frame_w: usize,
    pub f: usize,
}

impl PixelDecoder {
    pub fn register(store: &mut ParamStore, cfg: &FmConfig) -> Self {
        let out = cfg.n_patches() * cfg.patch_dim();
        Self {
            w1: store.add("fm/dec_w1", cfg.d_model, cfg.p_hidden, Init::XavierUniform),
            b1: store.add("fm/dec_b1", 1, cfg.p_hidden, Init::Zeros),
            w2: store.add("fm/dec_w2", cfg.p_hidden, out, Init::XavierUniform),
            b2: store.add("fm/dec_b2", 1, out, Init::Zeros),
            channels: cfg.channels,
            frame_h: cfg.frame_h,
            frame_w: cfg.frame_w,
            f: cfg.f,
        }
    }

    /// Latent row (1×d) → patch rows (n_patches × patch_dim), values in (0,1).
    pub fn decode_patches(&self, tape: &Tape, bind: &Binding, latent: Var) -> Var {
        let h = tape.silu(tape.linear(
            latent,
            bind.var(tape, self.w1),
            bind.var(tape, self.b1),
        ));
        let flat = tape.sigmoid(tape.linear(h, bind.var(tape, self.w2), bind.var(tape, self.b2)));
        let n = (self.frame_h / self.f) * (self.frame_w / self.f);
        tape.reshape(flat, n, self.channels * self.f * self.f)
    }

    /// Latent row → raster in [0,1] at the decoder's fixed resolution.
    pub fn decode_pixels(&self, store: &ParamStore, latent: &Mat) -> Vec<f32> {
        let tape = Tape::new();
        let bind = Binding::new(store);
        let patches = self.decode_patches(&tape, &bind, tape.input(latent.clone()));
        unpatchify(
            tape.value(patches).as_ref(),
            self.channels,
            self.frame_h,
            self.frame_w,
            self.f,
        )
    }
}

/// V(x_t, Q*, t): a two-layer net over the concatenated state, pooled
/// condition, and sinusoidal time embedding.
pub struct VelocityNet {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    pub d_model: usize,
    pub d_time: usize,
}

impl VelocityNet {
    pub fn register(store: &mut ParamStore, cfg: &FmConfig) -> Self {
        let d_in = 2 * cfg.d_model + cfg.d_time;
        Self {
            w1: store.add("fm/vel_w1", d_in, cfg.v_hidden, Init::XavierUniform),
            b1: store.add("fm/vel_b1", 1, cfg.v_hidden, Init::Zeros),
            w2: store.add("fm/vel_w2", cfg.v_hidden, cfg.d_model, Init::XavierUniform),
            b2: store.add("fm/vel_b2", 1, cfg.d_model, Init::Zeros),
            d_model: cfg.d_model,
            d_time: cfg.d_time,
        }
    }

    /// `xt` and `cond` are (B×d); `ts` supplies one timestep per row.
    pub fn forward(&self, tape: &Tape, bind: &Binding, xt: Var, cond: Var, ts: &[f64]) -> Var {
        let temb = tape.input(time_embedding(ts, self.d_time));
        let joint = tape.concat_cols(&[xt, cond, temb]);
        let h = tape.relu(tape.linear(joint, bind.var(tape, self.w1), bind.var(tape, self.b1)));
        tape.linear(h, bind.var(tape, self.w2), bind.var(tape, self.b2))
    }
}

/// Squared-error-per-dimension between a velocity prediction and its target,
/// averaged over the batch.
pub fn fm_loss_from_prediction(tape: &Tape, vhat: Var, vt: &Mat) -> Var {
    let target = tape.input(vt.clone());
    tape.mean_all(tape.square(tape.sub(vhat, target)))
}

/// Flow-matching loss of a batch of samples under per-sample conditioning
/// rows (B×d).
pub fn fm_loss(
    tape: &Tape,
    bind: &Binding,
    net: &VelocityNet,
    samples: &[FlowSample],
    cond: Var,
) -> Result<Var, ModelError> {
    if samples.is_empty() {
        return Err(ModelError::Shape("empty flow batch".into()));
    }
    let d = samples[0].xt.len();
    let (rows, cols) = tape.dim(cond);
    if rows != samples.len() || cols != d {
        return Err(ModelError::Shape(format!(
            "conditioning {rows}x{cols} does not match {} samples of dim {d}",
            samples.len()
        )));
    }
    let mut xt = Mat::zeros((samples.len(), d));
    let mut vt = Mat::zeros((samples.len(), d));
    let mut ts = Vec::with_capacity(samples.len());
    for (r, s) in samples.iter().enumerate() {
        for c in 0..d {
            xt[(r, c)] = s.xt[c];
            vt[(r, c)] = s.vt[c];
        }
        ts.push(s.t);
    }
    let vhat = net.forward(tape, bind, tape.input(xt), cond, &ts);
    Ok(fm_loss_from_prediction(tape, vhat, &vt))
}

/// Start point for deterministic integration.
pub fn initial_latent(init: FmInit, seed: u64, d: usize) -> Mat {
    match init {
        FmInit::Seeded => {
            let mut rng = DetRng::new(seed, "fm-init");
            Mat::from_shape_vec((1, d), rng.normal_vec(d)).unwrap()
        }
        FmInit::Zeros => Mat::zeros((1, d)),
    }
}

/// Explicit Euler along the learned field, on an existing tape so the result
/// can feed further losses. `cond` is one pooled conditioning row.
pub fn integrate_on_tape(
    tape: &Tape,
    bind: &Binding,
    net: &VelocityNet,
    cond: Var,
    x_init: Var,
    n_steps: usize,
) -> Result<Var, ModelError> {
    assert!(n_steps > 0, "integration needs at least one step");
    let mut x = x_init;
    for k in 0..n_steps {
        let t = k as f64 / n_steps as f64;
        let v = net.forward(tape, bind, x, cond, &[t]);
        x = tape.add(x, tape.scale(v, 1.0 / n_steps as f64));
        if tape.value(x).iter().any(|e| !e.is_finite()) {
            return Err(ModelError::IntegrationDiverged { step: k });
        }
    }
    Ok(x)
}

/// Off-tape deterministic reconstruction of a latent from a start point.
pub fn integrate(
    store: &ParamStore,
    net: &VelocityNet,
    cond: &Mat,
    x_init: &Mat,
    n_steps: usize,
) -> Result<Mat, ModelError> {
    let tape = Tape::new();
    let bind = Binding::new(store);
    let x = integrate_on_tape(
        &tape,
        &bind,
        net,
        tape.input(cond.clone()),
        tape.input(x_init.clone()),
        n_steps,
    )?;
    Ok(tape.value(x).as_ref().clone())
}

/// One-step latent estimate x̂₁ = x_t + (1−t)·V̂ with the velocity detached,
/// so downstream losses train only the pixel decoder.
pub fn one_step_latent(tape: &Tape, sample: &FlowSample, vhat: Var) -> Var {
    let xt = tape.input(Mat::from_shape_vec((1, sample.xt.len()), sample.xt.clone()).unwrap());
    tape.add(xt, tape.scale(tape.detach(vhat), 1.0 - sample.t))
}

struct SqrtGrad;

impl CustomGrad for SqrtGrad {
    fn backward(&self, grad: &Mat, _inputs: &[&Mat], output: &Mat) -> Vec<Option<Mat>> {
        vec![Some(grad * &output.mapv(|y| 0.5 / y))]
    }
}

/// Cosine similarity between two embedding rows, as a (1,1) value. The
/// denominator is √(‖a‖²·‖b‖²) with a true square root, so identical inputs
/// score exactly 1 and negated inputs exactly −1.
pub fn cosine_alignment(tape: &Tape, ea: Var, eb: Var) -> Result<Var, ModelError> {
    let na = tape.value(ea).iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = tape.value(eb).iter().map(|v| v * v).sum::<f64>().sqrt();
    if na < 1e-12 || nb < 1e-12 {
        return Err(ModelError::ZeroEmbedding);
    }
    let dot = tape.sum_all(tape.mul(ea, eb));
    let prod = tape.mul(tape.sum_all(tape.square(ea)), tape.sum_all(tape.square(eb)));
    let denom_val = tape.scalar_value(prod).sqrt();
    let denom = tape.custom(
        &[prod],
        Mat::from_elem((1, 1), denom_val),
        Arc::new(SqrtGrad),
    );
    Ok(tape.mul(dot, tape.powf(denom, -1.0)))
}

/// 1 − cosine between the frozen-encoder embeddings of a predicted frame
/// (patch rows on the tape) and a ground-truth raster.
pub fn semantic_align_loss(
    tape: &Tape,
    bind: &Binding,
    enc: &SemanticEncoder,
    pred_patches: Var,
    gt_pixels: &[f32],
    h: usize,
    w: usize,
) -> Result<Var, ModelError> {
    let e_pred = enc.embed_patches(tape, bind, pred_patches, h / enc.f, w / enc.f)?;
    let e_gt = enc.embed_frame(tape, bind, gt_pixels, h, w)?;
    let cos = cosine_alignment(tape, e_pred, e_gt)?;
    Ok(tape.add_scalar_const(tape.neg(cos), 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use uwm_core::fd::{finite_diff, max_rel_err};
    use uwm_core::optim::{AdamW, AdamWConfig};
    use uwm_core::params::GradStore;

    fn tiny_cfg() -> FmConfig {
        FmConfig {
            d_model: 6,
            n_q: 3,
            d_time: 4,
            v_hidden: 8,
            e_hidden: 5,
            e_mixed: 7,
            p_hidden: 9,
            channels: 1,
            frame_h: 8,
            frame_w: 8,
            f: 2,
            n_steps: 4,
            init: FmInit::Seeded,
            clip_full_path: false,
        }
    }

    #[test]
    fn interpolation_endpoints_are_exact() {
        let mut rng = DetRng::new(5, "interp");
        let x0 = rng.normal_vec(17);
        let x1 = rng.normal_vec(17);
        let s0 = FlowSample::from_parts(0.0, x0.clone(), x1.clone());
        assert_eq!(s0.xt, x0);
        let s1 = FlowSample::from_parts(1.0, x0.clone(), x1.clone());
        assert_eq!(s1.xt, x1);
        let sa = FlowSample::from_parts(0.3, x0.clone(), x1.clone());
        assert_eq!(s0.vt, sa.vt);
        assert_eq!(s1.vt, sa.vt);
    }

    #[test]
    fn sampled_points_follow_the_interpolation_formula() {
        let mut rng = DetRng::new(6, "sample");
        let x1: Vec<f64> = (0..9).map(|i| i as f64 / 3.0).collect();
        let s = sample_flow_point(&mut rng, &x1);
        assert!((0.0..1.0).contains(&s.t));
        for c in 0..9 {
            assert_eq!(s.xt[c], s.t * s.x1[c] + (1.0 - s.t) * s.x0[c]);
            assert_eq!(s.vt[c], s.x1[c] - s.x0[c]);
        }
    }

    #[test]
    fn oracle_velocity_scores_exactly_zero() {
        let tape = Tape::new();
        let mut rng = DetRng::new(7, "oracle");
        let vt = Mat::from_shape_vec((3, 5), rng.normal_vec(15)).unwrap();
        let vhat = tape.input(vt.clone());
        let loss = fm_loss_from_prediction(&tape, vhat, &vt);
        assert_eq!(tape.scalar_value(loss), 0.0);
    }

    #[test]
    fn zeroed_network_scores_the_mean_squared_target_velocity() {
        let cfg = tiny_cfg();
        let mut store = ParamStore::new(8);
        let net = VelocityNet::register(&mut store, &cfg);
        for id in ["fm/vel_w2", "fm/vel_b2"] {
            let pid = store.id(id).unwrap();
            let zero = Mat::zeros(store.value(pid).dim());
            store.set_value(pid, zero);
        }
        let mut rng = DetRng::new(8, "zero-net");
        let samples: Vec<FlowSample> = (0..4)
            .map(|_| {
                let x1 = rng.normal_vec(cfg.d_model);
                sample_flow_point(&mut rng, &x1)
            })
            .collect();
        let tape = Tape::new();
        let bind = Binding::new(&store);
        let cond = tape.input(Mat::zeros((4, cfg.d_model)));
        let loss = fm_loss(&tape, &bind, &net, &samples, cond).unwrap();
        let oracle = samples
            .iter()
            .map(|s| s.vt.iter().map(|v| v * v).sum::<f64>() / cfg.d_model as f64)
            .sum::<f64>()
            / samples.len() as f64;
        assert!((tape.scalar_value(loss) - oracle).abs() < 1e-12);
    }

    #[test]
    fn velocity_net_gradients_match_finite_differences() {
        let cfg = tiny_cfg();
        let mut store = ParamStore::new(9);
        let net = VelocityNet::register(&mut store, &cfg);
        let mut rng = DetRng::new(9, "fd");
        let samples: Vec<FlowSample> = (0..3)
            .map(|_| {
                let x1 = rng.normal_vec(cfg.d_model);
                sample_flow_point(&mut rng, &x1)
            })
            .collect();
        let cond_mat = Mat::from_shape_vec((3, cfg.d_model), rng.normal_vec(3 * cfg.d_model)).unwrap();

        let ids: Vec<_> = store.ids_with_prefix("fm/vel_").collect();
        let base: Vec<Mat> = ids.iter().map(|&id| store.value(id).as_ref().clone()).collect();
        let mut eval = |mats: &[Mat]| -> f64 {
            let mut s = ParamStore::new(9);
            let n = VelocityNet::register(&mut s, &cfg);
            for (&id, m) in ids.iter().zip(mats) {
                let local = s.id(s.name(id)).unwrap();
                s.set_value(local, m.clone());
            }
            let tape = Tape::new();
            let bind = Binding::new(&s);
            let cond = tape.input(cond_mat.clone());
            let loss = fm_loss(&tape, &bind, &n, &samples, cond).unwrap();
            tape.scalar_value(loss)
        };
        let fd = finite_diff(&mut eval, &base, 1e-5);

        let tape = Tape::new();
        let bind = Binding::new(&store);
        let cond = tape.input(cond_mat.clone());
        let loss = fm_loss(&tape, &bind, &net, &samples, cond).unwrap();
        let grads = tape.backward(loss);
        let mut gs = GradStore::new(&store);
        bind.collect(&grads, &mut gs);
        for (k, &id) in ids.iter().enumerate() {
            let g = gs.get(id).expect("gradient present");
            assert!(
                max_rel_err(g, &fd[k]) < 1e-4,
                "{} deviates from finite differences",
                store.name(id)
            );
        }
    }

    fn constant_field_store(cfg: &FmConfig, c: &[f64]) -> (ParamStore, VelocityNet) {
        let mut store = ParamStore::new(11);
        let net = VelocityNet::register(&mut store, cfg);
        for id in ["fm/vel_w1", "fm/vel_b1", "fm/vel_w2"] {
            let pid = store.id(id).unwrap();
            let zero = Mat::zeros(store.value(pid).dim());
            store.set_value(pid, zero);
        }
        let pid = store.id("fm/vel_b2").unwrap();
        store.set_value(pid, Mat::from_shape_vec((1, c.len()), c.to_vec()).unwrap());
        (store, net)
    }

    #[test]
    fn constant_field_euler_is_exact_for_any_step_count() {
        let cfg = tiny_cfg();
        let c: Vec<f64> = vec![1.0, -2.0, 0.5, 0.25, -4.0, 8.0];
        let (store, net) = constant_field_store(&cfg, &c);
        let cond = Mat::zeros((1, cfg.d_model));
        let mut rng = DetRng::new(11, "euler");
        let x_init = Mat::from_shape_vec((1, cfg.d_model), rng.normal_vec(cfg.d_model)).unwrap();
        for n in [1usize, 2, 4, 7, 10, 100] {
            let out = integrate(&store, &net, &cond, &x_init, n).unwrap();
            for k in 0..cfg.d_model {
                let expect = x_init[(0, k)] + c[k];
                // Equal increments accumulate at most n half-ulp roundings.
                let tol = 1e-15 * n as f64 * (1.0 + expect.abs());
                assert!(
                    (out[(0, k)] - expect).abs() <= tol,
                    "n={n}: component {k} drifted beyond the rounding bound"
                );
            }
        }
        let one = integrate(&store, &net, &cond, &x_init, 1).unwrap();
        for k in 0..cfg.d_model {
            assert_eq!(one[(0, k)].to_bits(), (x_init[(0, k)] + c[k]).to_bits());
        }
    }

    #[test]
    fn true_linear_field_lands_on_the_target_for_one_and_many_steps() {
        let cfg = tiny_cfg();
        let x0: Vec<f64> = vec![1.0, -0.5, 2.0, 0.0, 4.0, -8.0];
        let x1: Vec<f64> = vec![3.0, 0.5, -2.0, 1.0, 0.0, 8.0];
        let c: Vec<f64> = x0.iter().zip(&x1).map(|(&a, &b)| b - a).collect();
        let (store, net) = constant_field_store(&cfg, &c);
        let cond = Mat::zeros((1, cfg.d_model));
        let start = Mat::from_shape_vec((1, cfg.d_model), x0).unwrap();
        let a = integrate(&store, &net, &cond, &start, 1).unwrap();
        let b = integrate(&store, &net, &cond, &start, 1024).unwrap();
        for k in 0..cfg.d_model {
            assert_eq!(a[(0, k)].to_bits(), x1[k].to_bits());
            assert_eq!(b[(0, k)].to_bits(), x1[k].to_bits());
        }
    }

    #[test]
    fn non_finite_intermediate_reports_the_step() {
        let cfg = tiny_cfg();
        let mut store = ParamStore::new(12);
        let net = VelocityNet::register(&mut store, &cfg);
        let b1 = store.id("fm/vel_b1").unwrap();
        store.set_value(b1, Mat::from_elem((1, cfg.v_hidden), 1e200));
        let w2 = store.id("fm/vel_w2").unwrap();
        store.set_value(w2, Mat::from_elem((cfg.v_hidden, cfg.d_model), 1e200));
        let cond = Mat::zeros((1, cfg.d_model));
        let x_init = Mat::zeros((1, cfg.d_model));
        match integrate(&store, &net, &cond, &x_init, 4) {
            Err(ModelError::IntegrationDiverged { step }) => assert_eq!(step, 0),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn integration_is_deterministic_and_converges_with_more_steps() {
        let cfg = tiny_cfg();
        let mut store = ParamStore::new(13);
        let net = VelocityNet::register(&mut store, &cfg);
        let mut rng = DetRng::new(13, "train-toy");
        let x1 = rng.normal_vec(cfg.d_model);
        let cond_mat = Mat::from_shape_vec((1, cfg.d_model), rng.normal_vec(cfg.d_model)).unwrap();
        let mut opt = AdamW::new(&store, AdamWConfig::default());
        for _ in 0..400 {
            let batch: Vec<FlowSample> =
                (0..8).map(|_| sample_flow_point(&mut rng, &x1)).collect();
            let tape = Tape::new();
            let bind = Binding::new(&store);
            let rows: Vec<Var> = (0..8).map(|_| tape.input(cond_mat.clone())).collect();
            let cond = tape.concat_rows(&rows);
            let loss = fm_loss(&tape, &bind, &net, &batch, cond).unwrap();
            let grads = tape.backward(loss);
            let mut gs = GradStore::new(&store);
            bind.collect(&grads, &mut gs);
            opt.step(&mut store, &gs, 3e-3);
        }
        let x_init = initial_latent(FmInit::Seeded, 13, cfg.d_model);
        let again = initial_latent(FmInit::Seeded, 13, cfg.d_model);
        assert_eq!(x_init, again);

        let run = |n: usize| integrate(&store, &net, &cond_mat, &x_init, n).unwrap();
        assert_eq!(run(10), run(10));

        let dist = |a: &Mat, b: &Mat| -> f64 {
            a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
        };
        let mut gaps = Vec::new();
        for n in [5usize, 10, 20, 40] {
            gaps.push(dist(&run(2 * n), &run(n)));
        }
        for w in gaps.windows(2) {
            assert!(w[1] < w[0], "halving the step size should shrink the update gap: {gaps:?}");
        }
    }

    #[test]
    fn target_velocity_second_moment_matches_theory() {
        let d = 16usize;
        let mut rng = DetRng::new(14, "moment");
        let x1: Vec<f64> = (0..d).map(|i| 0.1 * i as f64 - 0.6).collect();
        let n = 10_000usize;
        let mut mean = 0.0;
        for _ in 0..n {
            let s = sample_flow_point(&mut rng, &x1);
            mean += s.vt.iter().map(|v| v * v).sum::<f64>() / d as f64;
        }
        mean /= n as f64;
        let x1_sq = x1.iter().map(|v| v * v).sum::<f64>();
        let expected = 1.0 + x1_sq / d as f64;
        // Var(‖vt‖²/d) = Σ(2 + 4·x1ᵢ²)/d² for x0 ~ N(0, I).
        let var = x1.iter().map(|v| 2.0 + 4.0 * v * v).sum::<f64>() / (d * d) as f64;
        let sigma = (var / n as f64).sqrt();
        assert!(
            (mean - expected).abs() < 3.0 * sigma,
            "second moment {mean} outside 3σ of {expected}"
        );
    }

    #[test]
    fn identical_frames_align_exactly() {
        let cfg = tiny_cfg();
        let mut store = ParamStore::new(15);
        let enc = SemanticEncoder::register(&mut store, &cfg);
        let mut rng = DetRng::new(15, "frames");
        let frame: Vec<f32> = (0..cfg.channels * cfg.frame_h * cfg.frame_w)
            .map(|_| rng.uniform() as f32)
            .collect();
        let tape = Tape::new();
        let bind = Binding::new(&store);
        let pred = tape.input(patchify(&frame, cfg.channels, cfg.frame_h, cfg.frame_w, cfg.f).unwrap());
        let loss =
            semantic_align_loss(&tape, &bind, &enc, pred, &frame, cfg.frame_h, cfg.frame_w)
                .unwrap();
        assert_eq!(tape.scalar_value(loss), 0.0);
    }

    #[test]
    fn orthogonal_and_negated_embeddings_hit_the_range_ends() {
        let tape = Tape::new();
        let ea = tape.input(Mat::from_shape_vec((1, 4), vec![1.0, 0.0, 2.0, 0.0]).unwrap());
        let eb = tape.input(Mat::from_shape_vec((1, 4), vec![0.0, 3.0, 0.0, -0.5]).unwrap());
        let cos_orth = cosine_alignment(&tape, ea, eb).unwrap();
        assert_eq!(tape.scalar_value(cos_orth), 0.0);

        let ec = tape.neg(ea);
        let cos_neg = cosine_alignment(&tape, ea, ec).unwrap();
        assert_eq!(tape.scalar_value(cos_neg), -1.0);
        let self_cos = cosine_alignment(&tape, ea, ea).unwrap();
        assert_eq!(tape.scalar_value(self_cos), 1.0);
    }

    #[test]
    fn zero_norm_embedding_is_rejected() {
        let tape = Tape::new();
        let ea = tape.input(Mat::zeros((1, 4)));
        let eb = tape.input(Mat::from_elem((1, 4), 0.5));
        assert!(matches!(
            cosine_alignment(&tape, ea, eb),
            Err(ModelError::ZeroEmbedding)
        ));
    }

    #[test]
    fn alignment_gradients_match_finite_differences() {
        let cfg = tiny_cfg();
        let mut rng = DetRng::new(16, "align-fd");
        let gt: Vec<f32> = (0..cfg.channels * cfg.frame_h * cfg.frame_w)
            .map(|_| rng.uniform() as f32)
            .collect();
        let latent = Mat::from_shape_vec((1, cfg.d_model), rng.normal_vec(cfg.d_model)).unwrap();

        let build = |seed: u64| {
            let mut store = ParamStore::new(seed);
            let enc = SemanticEncoder::register(&mut store, &cfg);
            let dec = PixelDecoder::register(&mut store, &cfg);
            (store, enc, dec)
        };
        let (store, enc, dec) = build(16);
        let ids: Vec<_> = store.ids_with_prefix("fm/dec_").collect();
        let base: Vec<Mat> = ids.iter().map(|&id| store.value(id).as_ref().clone()).collect();
        let mut eval = |mats: &[Mat]| -> f64 {
            let (mut s, e2, d2) = build(16);
            for (&id, m) in ids.iter().zip(mats) {
                let local = s.id(s.name(id)).unwrap();
                s.set_value(local, m.clone());
            }
            let tape = Tape::new();
            let bind = Binding::new(&s);
            let patches = d2.decode_patches(&tape, &bind, tape.input(latent.clone()));
            let loss =
                semantic_align_loss(&tape, &bind, &e2, patches, &gt, cfg.frame_h, cfg.frame_w)
                    .unwrap();
            tape.scalar_value(loss)
        };
        let fd = finite_diff(&mut eval, &base, 1e-5);

        let tape = Tape::new();
        let bind = Binding::new(&store);
        let patches = dec.decode_patches(&tape, &bind, tape.input(latent.clone()));
        let loss =
            semantic_align_loss(&tape, &bind, &enc, patches, &gt, cfg.frame_h, cfg.frame_w)
                .unwrap();
        let grads = tape.backward(loss);
        let mut gs = GradStore::new(&store);
        bind.collect(&grads, &mut gs);
        for (k, &id) in ids.iter().enumerate() {
            let g = gs.get(id).expect("gradient present");
            assert!(
                max_rel_err(g, &fd[k]) < 1e-4,
                "{} deviates from finite differences",
                store.name(id)
            );
        }
    }

    #[test]
    fn one_step_latent_trains_only_the_decoder_side() {
        let cfg = tiny_cfg();
        let mut store = ParamStore::new(17);
        let net = VelocityNet::register(&mut store, &cfg);
        let mut rng = DetRng::new(17, "one-step");
        let x1 = rng.normal_vec(cfg.d_model);
        let s = sample_flow_point(&mut rng, &x1);
        let tape = Tape::new();
        let bind = Binding::new(&store);
        let xt = tape.input(Mat::from_shape_vec((1, cfg.d_model), s.xt.clone()).unwrap());
        let cond = tape.input(Mat::zeros((1, cfg.d_model)));
        let vhat = net.forward(&tape, &bind, xt, cond, &[s.t]);
        let latent = one_step_latent(&tape, &s, vhat);
        let vhat_val = tape.value(vhat);
        for c in 0..cfg.d_model {
            let expect = s.xt[c] + (1.0 - s.t) * vhat_val[(0, c)];
            assert!((tape.value(latent)[(0, c)] - expect).abs() < 1e-15);
        }
        let loss = tape.mean_all(tape.square(latent));
        let grads = tape.backward(loss);
        let mut gs = GradStore::new(&store);
        bind.collect(&grads, &mut gs);
        for id in store.ids_with_prefix("fm/vel_") {
            assert!(gs.get(id).is_none(), "velocity params must stay detached");
        }
    }

    #[test]
    fn encoder_accepts_any_even_patch_grid_and_rejects_odd_ones() {
        let cfg = tiny_cfg();
        let mut store = ParamStore::new(18);
        let enc = SemanticEncoder::register(&mut store, &cfg);
        let tape = Tape::new();
        let bind = Binding::new(&store);
        // 12×8 raster with f = 2 → 6×4 grid: even sides, different from the
        // decoder resolution.
        let frame = vec![0.25f32; cfg.channels * 12 * 8];
        let e = enc.embed_frame(&tape, &bind, &frame, 12, 8).unwrap();
        assert_eq!(tape.dim(e), (1, cfg.d_model));
        // 6×8 raster → 3×4 grid: odd rows.
        let odd = vec![0.25f32; cfg.channels * 6 * 8];
        assert!(matches!(
            enc.embed_frame(&tape, &bind, &odd, 6, 8),
            Err(ModelError::Shape(_))
        ));
    }

    #[test]
    fn decoded_pixels_are_deterministic_and_in_range() {
        let cfg = tiny_cfg();
        let mut store = ParamStore::new(19);
        let dec = PixelDecoder::register(&mut store, &cfg);
        let mut rng = DetRng::new(19, "decode");
        let latent = Mat::from_shape_vec((1, cfg.d_model), rng.normal_vec(cfg.d_model)).unwrap();
        let px = dec.decode_pixels(&store, &latent);
        assert_eq!(px.len(), cfg.channels * cfg.frame_h * cfg.frame_w);
        assert!(px.iter().all(|&p| (0.0..=1.0).contains(&p)));
        assert_eq!(px, dec.decode_pixels(&store, &latent));
    }

    #[test]
    fn full_path_integration_reaches_velocity_parameters() {
        let cfg = tiny_cfg();
        let mut store = ParamStore::new(20);
        let net = VelocityNet::register(&mut store, &cfg);
        let tape = Tape::new();
        let bind = Binding::new(&store);
        let mut rng = DetRng::new(20, "full-path");
        let cond = tape.input(Mat::from_shape_vec((1, cfg.d_model), rng.normal_vec(cfg.d_model)).unwrap());
        let x_init = tape.input(Mat::from_shape_vec((1, cfg.d_model), rng.normal_vec(cfg.d_model)).unwrap());
        let x_hat = integrate_on_tape(&tape, &bind, &net, cond, x_init, 3).unwrap();
        let loss = tape.mean_all(tape.square(x_hat));
        let grads = tape.backward(loss);
        let mut gs = GradStore::new(&store);
        bind.collect(&grads, &mut gs);
        assert!(store
            .ids_with_prefix("fm/vel_")
            .any(|id| gs.get(id).is_some()));
    }
}
