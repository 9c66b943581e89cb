//! Staged optimization of the full driving world model: codec pretraining,
//! perception pretraining, then the joint objective with frozen auxiliary
//! heads, deterministic batching, integrity-checked checkpoints, and JSONL
//! step logs.
//!
//! Every random draw is a pure function of `(seed, label, step, slot)`, so a
//! resumed run replays the exact batch order, latent noise, and flow-matching
//! timesteps of the original — checkpoints need no RNG state.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use thiserror::Error;

use uwm_core::container::{encode_tensors, find, read_tensors, write_tensors, TensorData};
use uwm_core::optim::{AdamW, AdamWConfig, LrSchedule};
use uwm_core::params::{Binding, GradStore, ParamStore};
use uwm_core::parallel::pmap;
use uwm_core::rng::DetRng;
use uwm_core::tensor::{Mat, Tape, Var};
use uwm_model::ModelError;
use uwm_model::gen_ar;
use uwm_model::gen_fm::{self, LatentQueryBank, PixelDecoder, SemanticEncoder, VelocityNet};
use uwm_model::layout::{
    build_sequence, HeadOrder, LayoutSpec, Mode, Segment, SegmentKind, SequenceLayout,
};
use uwm_model::planner::Planner;
use uwm_model::qt::QtFormer;
use uwm_model::reasoner::{Injections, Reasoner};
use uwm_model::vocab::Vocab;
use uwm_model::vq::{patchify, VqTokenizer};
use uwm_world::Episode;

use crate::batch::{self, ExampleRef, Scheduler};
use crate::config::{ConfigError, RunConfig};

/// Parameter groups that stay fixed during the joint stages: the detection
/// head trained in perception pretraining and the semantic encoder that
/// defines the alignment target space.
pub const FROZEN_PREFIXES: &[&str] = &["qt/det_", "fm/enc_"];

fn is_frozen(name: &str) -> bool {
    FROZEN_PREFIXES.iter().any(|p| name.starts_with(p))
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training diverged at step {step}: term {term:?} is not finite")]
    Diverged { term: String, step: u64 },
    #[error("stage {stage:?} requires a completed {missing:?} stage; run it first")]
    StageOrder { stage: String, missing: String },
    #[error("checkpoint {path} is corrupt: {reason}")]
    CorruptCheckpoint { path: String, reason: String },
    #[error("checkpoint config hash {found} does not match the active config {expected}")]
    ConfigMismatch { expected: String, found: String },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// The four training stages, in dependency order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    PretrainTokenizer,
    PretrainPerception,
    Stage1,
    Stage2,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::PretrainTokenizer => "pretrain_tokenizer",
            Stage::PretrainPerception => "pretrain_perception",
            Stage::Stage1 => "stage1",
            Stage::Stage2 => "stage2",
        }
    }

    pub fn artifact(self) -> &'static str {
        match self {
            Stage::PretrainTokenizer => "tokenizer.uwm",
            Stage::PretrainPerception => "perception.uwm",
            Stage::Stage1 => "stage1.uwm",
            Stage::Stage2 => "stage2.uwm",
        }
    }

    fn code(self) -> u8 {
        match self {
            Stage::PretrainTokenizer => 0,
            Stage::PretrainPerception => 1,
            Stage::Stage1 => 2,
            Stage::Stage2 => 3,
        }
    }

    fn from_code(code: u8) -> Option<Stage> {
        Some(match code {
            0 => Stage::PretrainTokenizer,
            1 => Stage::PretrainPerception,
            2 => Stage::Stage1,
            3 => Stage::Stage2,
            _ => return None,
        })
    }

    /// Checkpoint the stage continues from, honoring disabled heads.
    fn predecessor(self, cfg: &RunConfig) -> Option<Stage> {
        match self {
            Stage::PretrainTokenizer => None,
            Stage::PretrainPerception => Some(Stage::PretrainTokenizer),
            Stage::Stage1 => Some(if cfg.train.use_detection {
                Stage::PretrainPerception
            } else {
                Stage::PretrainTokenizer
            }),
            Stage::Stage2 => Some(Stage::Stage1),
        }
    }

    /// Total optimization steps this stage runs under `cfg`.
    pub fn budget(self, cfg: &RunConfig) -> u64 {
        match self {
            Stage::PretrainTokenizer => (cfg.tokenizer.steps + cfg.tokenizer.semantic_steps) as u64,
            Stage::PretrainPerception => cfg.train.perception_steps as u64,
            Stage::Stage1 | Stage::Stage2 => cfg.train.steps as u64,
        }
    }
}

/// Per-stage JSONL logger; keeps the emitted lines in memory so tests and
/// callers can inspect them without re-reading the file.
pub struct StepLog {
    file: Option<fs::File>,
    pub lines: Vec<String>,
}

impl StepLog {
    pub fn memory() -> StepLog {
        StepLog { file: None, lines: Vec::new() }
    }

    pub fn file(path: &Path) -> std::io::Result<StepLog> {
        let file = fs::OpenOptions::new().create(true).append(true).open(path)?;
        Ok(StepLog { file: Some(file), lines: Vec::new() })
    }

    pub fn log(&mut self, value: &serde_json::Value) -> std::io::Result<()> {
        let line = serde_json::to_string(value).expect("json value serializes");
        if let Some(f) = &mut self.file {
            writeln!(f, "{line}")?;
        }
        self.lines.push(line);
        Ok(())
    }
}

/// Scalar loss terms of one step, keyed by name.
pub type Terms = BTreeMap<&'static str, f64>;

/// Every registered module, in a fixed registration order so two stores
/// built from the same config are parameter-for-parameter identical.
pub struct Models {
    pub vocab: Vocab,
    pub vq: VqTokenizer,
    pub qt: QtFormer,
    pub reasoner: Reasoner,
    pub planner: Planner,
    pub queries: LatentQueryBank,
    pub enc: SemanticEncoder,
    pub dec: PixelDecoder,
    pub vnet: VelocityNet,
}

impl Models {
    pub fn register(store: &mut ParamStore, cfg: &RunConfig) -> Models {
        let vocab = Vocab::new(16, cfg.tokenizer.n_codes);
        let vq = VqTokenizer::register(store, cfg.vq_config());
        let qt = QtFormer::register(store, cfg.qt_config());
        let reasoner = Reasoner::register(store, cfg.reasoner_config());
        let planner = Planner::register(store, cfg.planner_config());
        let fm = cfg.fm_config();
        let queries = LatentQueryBank::register(store, fm.n_q, fm.d_model);
        let enc = SemanticEncoder::register(store, &fm);
        let dec = PixelDecoder::register(store, &fm);
        let vnet = VelocityNet::register(store, &fm);
        Models { vocab, vq, qt, reasoner, planner, queries, enc, dec, vnet }
    }
}

/// Command-prediction layout: the model reads the scene and recent motion,
/// and the plan-slot logits score which driving command was issued.
pub fn text_layout(vocab: &Vocab, spec: &LayoutSpec, command_token: usize) -> SequenceLayout {
    let segments = vec![
        Segment { kind: SegmentKind::Bos, len: 1 },
        Segment { kind: SegmentKind::Scene, len: spec.n_scene },
        Segment { kind: SegmentKind::History, len: spec.n_history },
        Segment { kind: SegmentKind::Plan, len: 1 },
        Segment { kind: SegmentKind::Command, len: 1 },
    ];
    let mut tokens = vec![Some(vocab.bos())];
    tokens.extend(std::iter::repeat(None).take(spec.n_scene + spec.n_history));
    tokens.push(Some(vocab.plan()));
    tokens.push(Some(command_token));
    SequenceLayout { mode: Mode::Ar, order: HeadOrder::PlanFirst, segments, tokens }
}

/// Layout for runs with the generation head disabled: conditioning plus the
/// plan slot, no image block.
pub fn plan_only_layout(vocab: &Vocab, spec: &LayoutSpec, command_token: usize) -> SequenceLayout {
    let segments = vec![
        Segment { kind: SegmentKind::Bos, len: 1 },
        Segment { kind: SegmentKind::Command, len: 1 },
        Segment { kind: SegmentKind::Scene, len: spec.n_scene },
        Segment { kind: SegmentKind::History, len: spec.n_history },
        Segment { kind: SegmentKind::Plan, len: 1 },
    ];
    let mut tokens = vec![Some(vocab.bos()), Some(command_token)];
    tokens.extend(std::iter::repeat(None).take(spec.n_scene + spec.n_history));
    tokens.push(Some(vocab.plan()));
    SequenceLayout { mode: Mode::Ar, order: HeadOrder::PlanFirst, segments, tokens }
}

fn add_term(tape: &Tape, total: &mut Option<Var>, terms: &mut Terms, name: &'static str, v: Var) {
    terms.insert(name, tape.value(v)[(0, 0)]);
    *total = Some(match *total {
        Some(t) => tape.add(t, v),
        None => v,
    });
}

/// Open-loop products of one frame: the decoded waypoints (absent when
/// planning is disabled) and the predicted future front view as flat
/// `(3,h,w)` pixels (absent when generation is disabled).
pub struct Rollout {
    pub traj: Option<Mat>,
    pub frame: Option<(Vec<f32>, usize, usize)>,
}

/// The training state: one parameter store shared by every module, one
/// optimizer, and the position in the stage schedule.
pub struct Pipeline {
    pub cfg: RunConfig,
    pub seed: u64,
    pub store: ParamStore,
    pub models: Models,
    pub opt: AdamW,
    pub stage: Stage,
    pub step: u64,
    pub completed: Vec<Stage>,
}

const INTEGRITY: &str = "integrity/sha256";

fn pack_bytes(bytes: &[u8]) -> TensorData {
    TensorData::I32 {
        dims: vec![bytes.len()],
        data: bytes.iter().map(|&b| b as i32).collect(),
    }
}

fn unpack_bytes(td: &TensorData) -> Option<Vec<u8>> {
    td.as_i32()?.iter().map(|&w| u8::try_from(w).ok()).collect()
}

fn pack_u64(v: u64) -> TensorData {
    TensorData::I32 {
        dims: vec![2],
        data: vec![(v & 0xffff_ffff) as u32 as i32, (v >> 32) as u32 as i32],
    }
}

fn unpack_u64(td: &TensorData) -> Option<u64> {
    let d = td.as_i32()?;
    if d.len() != 2 {
        return None;
    }
    Some((d[0] as u32 as u64) | ((d[1] as u32 as u64) << 32))
}

fn meta_scalar(entries: &[(String, TensorData)], name: &str) -> Option<f64> {
    find(entries, name)?.to_f64_exact().map(|(_, _, v)| v[0])
}

impl Pipeline {
    pub fn new(cfg: &RunConfig, seed: u64) -> Pipeline {
        let mut store = ParamStore::new(seed);
        let models = Models::register(&mut store, cfg);
        let opt = AdamW::new(
            &store,
            AdamWConfig { weight_decay: cfg.train.weight_decay, ..AdamWConfig::default() },
        );
        Pipeline {
            cfg: cfg.clone(),
            seed,
            store,
            models,
            opt,
            stage: Stage::PretrainTokenizer,
            step: 0,
            completed: Vec::new(),
        }
    }

    fn stage_done(&self, stage: Stage) -> bool {
        self.completed.contains(&stage)
    }

    // ------------------------------------------------------------------
    // Joint stages
    // ------------------------------------------------------------------

    /// Scene and history conditioning of frame `t`: returns the projected
    /// history and scene token blocks `(x_h, x_s)`.
    fn context_on_tape(
        &self,
        tape: &Tape,
        bind: &Binding,
        ep: &Episode,
        t: usize,
    ) -> Result<(Var, Var), ModelError> {
        let m = &self.models;
        let mut bank = m.qt.new_bank();
        for views in batch::history_views(ep, t, self.cfg.model.bank_frames) {
            let (qs, _, _) = m.qt.encode_scene(tape, bind, &views)?;
            m.qt.update_history(tape, bind, &mut bank, qs);
        }
        let (q_s, _q_p, _f) = m.qt.encode_scene(tape, bind, &batch::scene_views(ep, t))?;
        let q_hat = m.qt.update_history(tape, bind, &mut bank, q_s);
        Ok(m.qt.project_tokens(tape, bind, q_hat, q_s))
    }

    /// Loss and gradients of one example. `slot` is the position in the
    /// batch; together with `step` it seeds the example's noise draws.
    pub fn joint_example(
        &self,
        episodes: &[Episode],
        ex: ExampleRef,
        step: u64,
        slot: usize,
    ) -> Result<(GradStore, Terms), TrainError> {
        let m = &self.models;
        let cfg = &self.cfg;
        let tr = &cfg.train;
        let (ei, t) = batch::locate(ex.index, episodes[0].usable);
        let ep = &episodes[ei];
        let g = step * tr.batch_size as u64 + slot as u64;

        let tape = Tape::new();
        let bind = Binding::new(&self.store);
        let (x_h, x_s) = self.context_on_tape(&tape, &bind, ep, t)?;

        let spec = cfg.layout_spec();
        let cmd_tok = m.vocab.command_token(ep.command);
        let layout = if ex.text {
            text_layout(&m.vocab, &spec, cmd_tok)
        } else if !tr.use_generation {
            plan_only_layout(&m.vocab, &spec, cmd_tok)
        } else {
            match tr.mode {
                Mode::Ar => {
                    let lo = cfg.world.lo_resolution;
                    let future = batch::front_lo_pixels(ep, t + cfg.world.future_offset);
                    let grid = m.vq.encode(&self.store, &future, lo, lo)?;
                    let teacher: Vec<usize> =
                        grid.indices.iter().map(|&c| m.vocab.image_token(c)).collect();
                    build_sequence(&m.vocab, &spec, cmd_tok, Mode::Ar, tr.order, Some(&teacher))?
                }
                Mode::Fm => build_sequence(&m.vocab, &spec, cmd_tok, Mode::Fm, tr.order, None)?,
            }
        };

        let latent_query = if !ex.text && tr.use_generation && tr.mode == Mode::Fm {
            Some(m.queries.rows(&tape, &bind))
        } else {
            None
        };
        let mut inj = Injections { scene: Some(x_s), history: Some(x_h), plan: None, latent_query };

        // Phase A reads the plan slot as a plain token; its hidden state
        // parameterizes the latent, whose injection drives phase B.
        let out_a = m.reasoner.forward(&tape, &bind, &layout, &inj)?;
        let mut lat_h = None;
        let out = if tr.use_planning {
            let h_a = m.reasoner.h_vlm(&tape, &out_a, &layout)?;
            let mut rng = DetRng::indexed(self.seed, "plan-eps", g, 0);
            let eps_mat = Mat::from_shape_vec((1, cfg.model.d_z), rng.normal_vec(cfg.model.d_z))
                .expect("eps shape");
            let lat = m.planner.encode_latent(&tape, &bind, h_a, tape.input(eps_mat));
            inj.plan = Some(m.reasoner.plan_injection(&tape, &bind, lat.z));
            let out_b = m.reasoner.forward(&tape, &bind, &layout, &inj)?;
            lat_h = Some((lat, h_a));
            out_b
        } else {
            out_a
        };

        let mut terms = Terms::new();
        let mut total: Option<Var> = None;

        if ex.text {
            let p = layout.plan_pos().expect("text layout has a plan slot");
            let row = tape.log_softmax_rows(tape.row(out.logits, p));
            let ce = tape.neg(tape.mean_all(tape.pick_per_row(row, &[cmd_tok])));
            add_term(&tape, &mut total, &mut terms, "text_ce", ce);
        } else if tr.use_generation {
            match tr.mode {
                Mode::Ar => {
                    let ce = gen_ar::ar_ce_loss(&tape, &m.vocab, &layout, out.logits)?;
                    add_term(&tape, &mut total, &mut terms, "ce", ce);
                }
                Mode::Fm => {
                    let q_star = gen_fm::latent_query_states(&tape, &layout, out.hidden)?;
                    let cond = gen_fm::pool_queries(&tape, q_star);
                    let res = cfg.world.view.resolution;
                    let future = batch::front_hi_pixels(ep, t + cfg.world.future_offset);
                    let x1 = m.enc.embed_value(&self.store, &future, res, res)?;
                    let mut rng = DetRng::indexed(self.seed, "flow", g, 0);
                    let sample = gen_fm::sample_flow_point(&mut rng, &x1);
                    let xt = tape.input(
                        Mat::from_shape_vec((1, sample.xt.len()), sample.xt.clone())
                            .expect("xt shape"),
                    );
                    let vhat = m.vnet.forward(&tape, &bind, xt, cond, &[sample.t]);
                    let vt = Mat::from_shape_vec((1, sample.vt.len()), sample.vt.clone())
                        .expect("vt shape");
                    let fm = gen_fm::fm_loss_from_prediction(&tape, vhat, &vt);
                    add_term(&tape, &mut total, &mut terms, "fm", fm);
                    let latent = if cfg.fm.clip_full_path {
                        let x0 = gen_fm::initial_latent(
                            cfg.fm.init,
                            self.seed ^ g,
                            cfg.model.d_model,
                        );
                        gen_fm::integrate_on_tape(
                            &tape,
                            &bind,
                            &m.vnet,
                            cond,
                            tape.input(x0),
                            cfg.fm.n_steps,
                        )?
                    } else {
                        gen_fm::one_step_latent(&tape, &sample, vhat)
                    };
                    let pred = m.dec.decode_patches(&tape, &bind, latent);
                    let clip =
                        gen_fm::semantic_align_loss(&tape, &bind, &m.enc, pred, &future, res, res)?;
                    add_term(&tape, &mut total, &mut terms, "clip", clip);
                }
            }
        }

        if let Some((lat, h_a)) = lat_h {
            let traj = m.planner.decode_waypoints(&tape, &bind, lat.z, h_a);
            let expert = tape.input(batch::expert_mat(ep, t));
            let future_agents = batch::future_agents_ego(ep, t, cfg.world.horizon);
            let map = batch::map_ego(ep, t);
            let pl = m.planner.plan_loss(&tape, traj, expert, &future_agents, &map);
            add_term(&tape, &mut total, &mut terms, "plan", pl.total);
            terms.insert("collision", tape.value(pl.collision)[(0, 0)]);
            terms.insert("boundary", tape.value(pl.boundary)[(0, 0)]);
            terms.insert("mse", tape.value(pl.mse)[(0, 0)]);
        }

        let total = total.expect("every example contributes a loss");
        terms.insert("total", tape.value(total)[(0, 0)]);
        for (k, v) in &terms {
            if !v.is_finite() {
                return Err(TrainError::Diverged { term: k.to_string(), step });
            }
        }

        let grads = tape.backward(total);
        let mut gs = GradStore::new(&self.store);
        bind.collect(&grads, &mut gs);
        Ok((gs, terms))
    }

    /// Run `steps` optimization steps of a joint stage, logging each step.
    pub fn joint_steps(
        &mut self,
        stage: Stage,
        episodes: &[Episode],
        steps: u64,
        log: &mut StepLog,
    ) -> Result<(), TrainError> {
        assert!(!episodes.is_empty(), "empty dataset");
        let usable = episodes[0].usable;
        debug_assert!(episodes.iter().all(|e| e.usable == usable));
        let tr = &self.cfg.train;
        let sched = Scheduler {
            seed: self.seed,
            n_examples: episodes.len() * usable,
            batch_size: tr.batch_size,
            text_ratio: tr.text_ratio,
            mix_text: stage == Stage::Stage2,
        };
        let lr_sched = LrSchedule {
            base: tr.lr,
            warmup_steps: tr.warmup as u64,
            total_steps: tr.steps as u64,
            min_frac: 0.0,
        };
        let batch_size = tr.batch_size;
        let grad_clip = tr.grad_clip;
        let log_every = tr.log_every.max(1) as u64;
        for _ in 0..steps {
            let step = self.step;
            let indexed: Vec<(usize, ExampleRef)> =
                sched.batch(step).into_iter().enumerate().collect();
            let outs = pmap(indexed, |(slot, ex)| self.joint_example(episodes, ex, step, slot));

            let mut master = GradStore::new(&self.store);
            let mut sums: BTreeMap<&'static str, f64> = BTreeMap::new();
            for out in outs {
                let (gs, terms) = out?;
                for id in self.store.ids() {
                    if is_frozen(self.store.name(id)) {
                        continue;
                    }
                    if let Some(gm) = gs.get(id) {
                        master.accumulate(id, gm);
                    }
                }
                for (k, v) in terms {
                    *sums.entry(k).or_insert(0.0) += v;
                }
            }
            let inv = 1.0 / batch_size as f64;
            master.scale(inv);
            for v in sums.values_mut() {
                *v *= inv;
            }
            for (k, v) in &sums {
                if !v.is_finite() {
                    return Err(TrainError::Diverged { term: k.to_string(), step });
                }
            }
            let grad_norm = master.clip_global_norm(grad_clip);
            let lr = lr_sched.lr(step);
            self.opt.step(&mut self.store, &master, lr);
            self.step = step + 1;

            if step % log_every == 0 {
                let mut obj = serde_json::Map::new();
                obj.insert("step".into(), serde_json::json!(step));
                obj.insert("stage".into(), serde_json::json!(stage.name()));
                obj.insert("lr".into(), serde_json::json!(lr));
                obj.insert("grad_norm".into(), serde_json::json!(grad_norm));
                for (k, v) in &sums {
                    obj.insert((*k).into(), serde_json::json!(v));
                }
                log.log(&serde_json::Value::Object(obj))?;
            }
        }
        Ok(())
    }

    // ------------------------------------------------------------------
    // Pretraining stages
    // ------------------------------------------------------------------

    /// Discrete codec training followed by the semantic autoencoder (the
    /// alignment encoder and pixel decoder trained to reconstruct frames).
    pub fn pretrain_tokenizer(
        &mut self,
        episodes: &[Episode],
        log: &mut StepLog,
    ) -> Result<(), TrainError> {
        let tk = self.cfg.tokenizer.clone();
        let lo = self.cfg.world.lo_resolution;
        let pool: Vec<(usize, usize)> = episodes
            .iter()
            .enumerate()
            .flat_map(|(e, ep)| (0..ep.frames.len()).map(move |t| (e, t)))
            .collect();
        assert!(!pool.is_empty(), "empty dataset");

        for _ in 0..tk.steps {
            let step = self.step;
            let picks: Vec<(usize, usize)> = (0..tk.batch as u64)
                .map(|s| pool[DetRng::indexed(self.seed, "vq-batch", step, s).below(pool.len())])
                .collect();
            let outs = pmap(picks.clone(), |(e, t)| -> Result<_, TrainError> {
                let tape = Tape::new();
                let bind = Binding::new(&self.store);
                let pixels = batch::front_lo_pixels(&episodes[e], t);
                let patches = tape.input(patchify(&pixels, 3, lo, lo, tk.f)?);
                let loss = self.models.vq.train_loss(&tape, &bind, patches, patches);
                let terms: Terms = [
                    ("vq", tape.value(loss.total)[(0, 0)]),
                    ("recon", tape.value(loss.recon)[(0, 0)]),
                    ("codebook", tape.value(loss.codebook)[(0, 0)]),
                    ("commitment", tape.value(loss.commitment)[(0, 0)]),
                ]
                .into_iter()
                .collect();
                let grads = tape.backward(loss.total);
                let mut gs = GradStore::new(&self.store);
                bind.collect(&grads, &mut gs);
                Ok((gs, terms, loss.indices))
            });
            let mut all_indices = Vec::new();
            let sums = self.reduce_and_step(outs, tk.batch, tk.lr, step, Some(&mut all_indices))?;
            self.models.vq.record_usage(&all_indices);
            if (step + 1) % 100 == 0 {
                let (e, t) = picks[0];
                let pixels = batch::front_lo_pixels(&episodes[e], t);
                let tape = Tape::new();
                let bind = Binding::new(&self.store);
                let z = self.models.vq.encode_latents(
                    &tape,
                    &bind,
                    tape.input(patchify(&pixels, 3, lo, lo, tk.f)?),
                );
                let latents = tape.value(z).as_ref().clone();
                let mut rng = DetRng::indexed(self.seed, "vq-restart", step, 0);
                self.models.vq.restart_dead(&mut self.store, &latents, &mut rng);
            }
            self.step = step + 1;
            self.log_step(log, Stage::PretrainTokenizer, step, tk.lr, &sums)?;
        }

        let res = self.cfg.world.view.resolution;
        let f = self.cfg.fm.f;
        for _ in 0..tk.semantic_steps {
            let step = self.step;
            let picks: Vec<(usize, usize)> = (0..tk.batch as u64)
                .map(|s| pool[DetRng::indexed(self.seed, "sem-batch", step, s).below(pool.len())])
                .collect();
            let outs = pmap(picks, |(e, t)| -> Result<_, TrainError> {
                let tape = Tape::new();
                let bind = Binding::new(&self.store);
                let pixels = batch::front_hi_pixels(&episodes[e], t);
                let emb = self.models.enc.embed_frame(&tape, &bind, &pixels, res, res)?;
                let pred = self.models.dec.decode_patches(&tape, &bind, emb);
                let targets = tape.input(patchify(&pixels, 3, res, res, f)?);
                let loss = tape.mse(pred, targets);
                let terms: Terms =
                    [("sem_mse", tape.value(loss)[(0, 0)])].into_iter().collect();
                let grads = tape.backward(loss);
                let mut gs = GradStore::new(&self.store);
                bind.collect(&grads, &mut gs);
                Ok((gs, terms, Vec::new()))
            });
            let sums = self.reduce_and_step(outs, tk.batch, tk.semantic_lr, step, None)?;
            self.step = step + 1;
            self.log_step(log, Stage::PretrainTokenizer, step, tk.semantic_lr, &sums)?;
        }
        Ok(())
    }

    /// Detection pretraining: scene queries through the detection head
    /// against the frame's agent boxes.
    pub fn pretrain_perception(
        &mut self,
        episodes: &[Episode],
        log: &mut StepLog,
    ) -> Result<(), TrainError> {
        let steps = self.cfg.train.perception_steps;
        let lr = self.cfg.train.perception_lr;
        let batch_size = self.cfg.train.batch_size;
        let pool: Vec<(usize, usize)> = episodes
            .iter()
            .enumerate()
            .flat_map(|(e, ep)| (0..ep.frames.len()).map(move |t| (e, t)))
            .collect();
        assert!(!pool.is_empty(), "empty dataset");
        for _ in 0..steps {
            let step = self.step;
            let picks: Vec<(usize, usize)> = (0..batch_size as u64)
                .map(|s| pool[DetRng::indexed(self.seed, "det-batch", step, s).below(pool.len())])
                .collect();
            let outs = pmap(picks, |(e, t)| -> Result<_, TrainError> {
                let tape = Tape::new();
                let bind = Binding::new(&self.store);
                let ep = &episodes[e];
                let (_qs, q_p, _f) =
                    self.models.qt.encode_scene(&tape, &bind, &batch::scene_views(ep, t))?;
                let gts = batch::agents_ego(ep, t);
                let out = self.models.qt.perception_loss(&tape, &bind, q_p, &gts)?;
                let terms: Terms =
                    [("perception", tape.value(out.loss)[(0, 0)])].into_iter().collect();
                let grads = tape.backward(out.loss);
                let mut gs = GradStore::new(&self.store);
                bind.collect(&grads, &mut gs);
                Ok((gs, terms, Vec::new()))
            });
            let sums = self.reduce_and_step(outs, batch_size, lr, step, None)?;
            self.step = step + 1;
            self.log_step(log, Stage::PretrainPerception, step, lr, &sums)?;
        }
        Ok(())
    }

    /// Average per-example gradients, check finiteness, clip, and step.
    /// Returns the per-term batch means. Pretraining applies no freezing.
    #[allow(clippy::type_complexity)]
    fn reduce_and_step(
        &mut self,
        outs: Vec<Result<(GradStore, Terms, Vec<usize>), TrainError>>,
        batch_size: usize,
        lr: f64,
        step: u64,
        mut indices_out: Option<&mut Vec<usize>>,
    ) -> Result<BTreeMap<&'static str, f64>, TrainError> {
        let mut master = GradStore::new(&self.store);
        let mut sums: BTreeMap<&'static str, f64> = BTreeMap::new();
        for out in outs {
            let (gs, terms, indices) = out?;
            for id in self.store.ids() {
                if let Some(gm) = gs.get(id) {
                    master.accumulate(id, gm);
                }
            }
            for (k, v) in terms {
                *sums.entry(k).or_insert(0.0) += v;
            }
            if let Some(sink) = indices_out.as_deref_mut() {
                sink.extend(indices);
            }
        }
        let inv = 1.0 / batch_size as f64;
        master.scale(inv);
        for v in sums.values_mut() {
            *v *= inv;
        }
        for (k, v) in &sums {
            if !v.is_finite() {
                return Err(TrainError::Diverged { term: k.to_string(), step });
            }
        }
        master.clip_global_norm(self.cfg.train.grad_clip);
        self.opt.step(&mut self.store, &master, lr);
        Ok(sums)
    }

    fn log_step(
        &self,
        log: &mut StepLog,
        stage: Stage,
        step: u64,
        lr: f64,
        sums: &BTreeMap<&'static str, f64>,
    ) -> std::io::Result<()> {
        if step % self.cfg.train.log_every.max(1) as u64 != 0 {
            return Ok(());
        }
        let mut obj = serde_json::Map::new();
        obj.insert("step".into(), serde_json::json!(step));
        obj.insert("stage".into(), serde_json::json!(stage.name()));
        obj.insert("lr".into(), serde_json::json!(lr));
        for (k, v) in sums {
            obj.insert((*k).into(), serde_json::json!(v));
        }
        log.log(&serde_json::Value::Object(obj))
    }

    // ------------------------------------------------------------------
    // Checkpoints
    // ------------------------------------------------------------------

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        let cfg_json = serde_json::to_string(&self.cfg).expect("config serializes");
        let mask: u64 = self.completed.iter().map(|s| 1u64 << s.code()).sum();
        let mut entries: Vec<(String, TensorData)> = vec![
            ("meta/step".into(), TensorData::from_f64_exact(1, 1, &[self.step as f64])),
            ("meta/stage".into(), TensorData::from_f64_exact(1, 1, &[self.stage.code() as f64])),
            ("meta/seed".into(), pack_u64(self.seed)),
            ("meta/completed".into(), pack_u64(mask)),
            ("meta/config".into(), pack_bytes(cfg_json.as_bytes())),
        ];
        entries.extend(self.store.to_tensors("param/"));
        entries.extend(self.opt.to_tensors(&self.store, "opt/"));
        let digest = Sha256::digest(encode_tensors(&entries));
        entries.push((INTEGRITY.into(), pack_bytes(&digest)));
        write_tensors(path, &entries).map_err(|e| TrainError::Checkpoint(e.to_string()))
    }

    /// Load a checkpoint. With `weights_only` the optimizer starts fresh
    /// (no moments, step 0); otherwise training state resumes exactly.
    pub fn load(path: &Path, weights_only: bool) -> Result<Pipeline, TrainError> {
        let corrupt = |reason: String| TrainError::CorruptCheckpoint {
            path: path.display().to_string(),
            reason,
        };
        let entries = read_tensors(path).map_err(|e| corrupt(e.to_string()))?;
        let Some(((last_name, last), body)) = entries.split_last() else {
            return Err(corrupt("no records".into()));
        };
        if last_name != INTEGRITY {
            return Err(corrupt("integrity record missing".into()));
        }
        let stored = unpack_bytes(last).ok_or_else(|| corrupt("integrity record malformed".into()))?;
        let digest = Sha256::digest(encode_tensors(body));
        if stored != digest.as_slice() {
            return Err(corrupt("content hash mismatch".into()));
        }
        let cfg_bytes = find(body, "meta/config")
            .and_then(unpack_bytes)
            .ok_or_else(|| corrupt("config record missing".into()))?;
        let cfg_value: serde_json::Value =
            serde_json::from_slice(&cfg_bytes).map_err(|e| corrupt(e.to_string()))?;
        let cfg = RunConfig::from_value(cfg_value)?;
        let seed = find(body, "meta/seed")
            .and_then(unpack_u64)
            .ok_or_else(|| corrupt("seed record missing".into()))?;
        let mut pipe = Pipeline::new(&cfg, seed);
        pipe.store
            .apply_tensors(body, "param/")
            .map_err(TrainError::Checkpoint)?;
        pipe.step = meta_scalar(body, "meta/step")
            .ok_or_else(|| corrupt("step record missing".into()))? as u64;
        let stage_code = meta_scalar(body, "meta/stage")
            .ok_or_else(|| corrupt("stage record missing".into()))? as u8;
        pipe.stage = Stage::from_code(stage_code)
            .ok_or_else(|| corrupt(format!("unknown stage code {stage_code}")))?;
        let mask = find(body, "meta/completed")
            .and_then(unpack_u64)
            .ok_or_else(|| corrupt("completed record missing".into()))?;
        pipe.completed = (0..4)
            .filter(|c| mask & (1 << c) != 0)
            .filter_map(Stage::from_code)
            .collect();
        if !weights_only {
            pipe.opt
                .apply_tensors(&pipe.store, body, "opt/")
                .map_err(TrainError::Checkpoint)?;
        }
        Ok(pipe)
    }

    // ------------------------------------------------------------------
    // Inference
    // ------------------------------------------------------------------

    /// Open-loop products of frame `t`: decoded waypoints with the latent at
    /// its mean, and the predicted future front view. `gen_seed` drives the
    /// continuous decoder's initial latent; the discrete decoder is greedy.
    pub fn rollout(&self, ep: &Episode, t: usize, gen_seed: u64) -> Result<Rollout, TrainError> {
        let m = &self.models;
        let cfg = &self.cfg;
        let tr = &cfg.train;
        let spec = cfg.layout_spec();
        let cmd_tok = m.vocab.command_token(ep.command);
        let tape = Tape::new();
        let bind = Binding::new(&self.store);
        let (x_h, x_s) = self.context_on_tape(&tape, &bind, ep, t)?;

        if !tr.use_generation {
            let layout = plan_only_layout(&m.vocab, &spec, cmd_tok);
            let inj = Injections {
                scene: Some(x_s),
                history: Some(x_h),
                plan: None,
                latent_query: None,
            };
            let out = m.reasoner.forward(&tape, &bind, &layout, &inj)?;
            let traj = if tr.use_planning {
                let h = m.reasoner.h_vlm(&tape, &out, &layout)?;
                Some(self.mean_plan(&tape, &bind, h))
            } else {
                None
            };
            return Ok(Rollout { traj, frame: None });
        }

        match tr.mode {
            Mode::Ar => {
                let layout = build_sequence(&m.vocab, &spec, cmd_tok, Mode::Ar, tr.order, None)?;
                let mut inj = Injections {
                    scene: Some(x_s),
                    history: Some(x_h),
                    plan: None,
                    latent_query: None,
                };
                let lo = cfg.world.lo_resolution;
                let side = lo / cfg.tokenizer.f;
                match tr.order {
                    HeadOrder::PlanFirst => {
                        let out_a = m.reasoner.forward(&tape, &bind, &layout, &inj)?;
                        let (traj, prefix) = if tr.use_planning {
                            let h = m.reasoner.h_vlm(&tape, &out_a, &layout)?;
                            let (traj, z) = self.mean_plan_z(&tape, &bind, h);
                            inj.plan = Some(m.reasoner.plan_injection(&tape, &bind, z));
                            let emb = m.reasoner.assemble_embeddings(&tape, &bind, &layout, &inj)?;
                            (Some(traj), tape.value(emb).as_ref().clone())
                        } else {
                            let emb = m.reasoner.assemble_embeddings(&tape, &bind, &layout, &inj)?;
                            (None, tape.value(emb).as_ref().clone())
                        };
                        let mut dec = m.reasoner.decoder(&self.store);
                        let cond = gen_ar::feed_prefix(&mut dec, &prefix);
                        let sample = gen_ar::sample_future_tokens(
                            &mut dec,
                            cond,
                            &m.vocab,
                            side,
                            side,
                            (lo, lo),
                            gen_ar::Policy::Greedy,
                            None,
                        );
                        let frame = m.vq.decode(&self.store, &sample.grid)?;
                        Ok(Rollout { traj, frame: Some((frame, lo, lo)) })
                    }
                    HeadOrder::GenerationFirst => {
                        let emb = m.reasoner.assemble_embeddings(&tape, &bind, &layout, &inj)?;
                        let prefix = tape.value(emb).as_ref().clone();
                        let mut dec = m.reasoner.decoder(&self.store);
                        let cond = gen_ar::feed_prefix(&mut dec, &prefix);
                        let sample = gen_ar::sample_future_tokens(
                            &mut dec,
                            cond,
                            &m.vocab,
                            side,
                            side,
                            (lo, lo),
                            gen_ar::Policy::Greedy,
                            None,
                        );
                        let traj = if tr.use_planning {
                            // The plan slot follows the decoded image block.
                            let (h_row, _) = dec.push_token(m.vocab.plan());
                            let t2 = Tape::new();
                            let b2 = Binding::new(&self.store);
                            let h = t2.input(h_row);
                            Some(self.mean_plan(&t2, &b2, h))
                        } else {
                            None
                        };
                        let frame = m.vq.decode(&self.store, &sample.grid)?;
                        Ok(Rollout { traj, frame: Some((frame, lo, lo)) })
                    }
                }
            }
            Mode::Fm => {
                let layout = build_sequence(&m.vocab, &spec, cmd_tok, Mode::Fm, tr.order, None)?;
                let mut inj = Injections {
                    scene: Some(x_s),
                    history: Some(x_h),
                    plan: None,
                    latent_query: Some(m.queries.rows(&tape, &bind)),
                };
                let out_a = m.reasoner.forward(&tape, &bind, &layout, &inj)?;
                let (out, traj) = if tr.use_planning {
                    let h = m.reasoner.h_vlm(&tape, &out_a, &layout)?;
                    let (traj, z) = self.mean_plan_z(&tape, &bind, h);
                    inj.plan = Some(m.reasoner.plan_injection(&tape, &bind, z));
                    (m.reasoner.forward(&tape, &bind, &layout, &inj)?, Some(traj))
                } else {
                    (out_a, None)
                };
                let q_star = gen_fm::latent_query_states(&tape, &layout, out.hidden)?;
                let cond = tape.value(gen_fm::pool_queries(&tape, q_star)).as_ref().clone();
                let x0 = gen_fm::initial_latent(cfg.fm.init, gen_seed, cfg.model.d_model);
                let xf = gen_fm::integrate(&self.store, &m.vnet, &cond, &x0, cfg.fm.n_steps)?;
                let frame = m.dec.decode_pixels(&self.store, &xf);
                let res = cfg.world.view.resolution;
                Ok(Rollout { traj, frame: Some((frame, res, res)) })
            }
        }
    }

    /// Waypoints with the latent fixed at its mean (zero noise).
    fn mean_plan(&self, tape: &Tape, bind: &Binding, h: Var) -> Mat {
        self.mean_plan_z(tape, bind, h).0
    }

    fn mean_plan_z(&self, tape: &Tape, bind: &Binding, h: Var) -> (Mat, Var) {
        let d_z = self.cfg.model.d_z;
        let eps = tape.input(Mat::zeros((1, d_z)));
        let lat = self.models.planner.encode_latent(tape, bind, h, eps);
        let traj = self.models.planner.decode_waypoints(tape, bind, lat.z, h);
        (tape.value(traj).as_ref().clone(), lat.z)
    }
}

// ----------------------------------------------------------------------
// Stage orchestration
// ----------------------------------------------------------------------

/// Run one stage to its configured budget, reading the predecessor artifact
/// from `out_dir` and writing this stage's artifact there. Returns the
/// artifact path.
pub fn run_stage(
    stage: Stage,
    cfg: &RunConfig,
    episodes: &[Episode],
    out_dir: &Path,
    seed: u64,
) -> Result<PathBuf, TrainError> {
    fs::create_dir_all(out_dir)?;
    let mut pipe = match stage.predecessor(cfg) {
        None => Pipeline::new(cfg, seed),
        Some(prev) => {
            let prev_path = out_dir.join(prev.artifact());
            if !prev_path.exists() {
                return Err(TrainError::StageOrder {
                    stage: stage.name().into(),
                    missing: prev.name().into(),
                });
            }
            let pipe = Pipeline::load(&prev_path, false)?;
            if pipe.cfg.hash() != cfg.hash() {
                return Err(TrainError::ConfigMismatch {
                    expected: cfg.hash(),
                    found: pipe.cfg.hash(),
                });
            }
            if !pipe.stage_done(prev) {
                return Err(TrainError::StageOrder {
                    stage: stage.name().into(),
                    missing: prev.name().into(),
                });
            }
            pipe
        }
    };
    pipe.stage = stage;
    pipe.step = 0;
    let mut log = StepLog::file(&out_dir.join("train.jsonl"))?;
    match stage {
        Stage::PretrainTokenizer => pipe.pretrain_tokenizer(episodes, &mut log)?,
        Stage::PretrainPerception => pipe.pretrain_perception(episodes, &mut log)?,
        Stage::Stage1 | Stage::Stage2 => {
            let steps = stage.budget(cfg);
            pipe.joint_steps(stage, episodes, steps, &mut log)?;
        }
    }
    if !pipe.completed.contains(&stage) {
        pipe.completed.push(stage);
        pipe.completed.sort();
    }
    let out = out_dir.join(stage.artifact());
    pipe.save(&out)?;
    Ok(out)
}

/// Continue an interrupted joint stage from `ckpt` to its configured step
/// budget, then write the stage artifact.
pub fn resume_training(
    ckpt: &Path,
    episodes: &[Episode],
    out_dir: &Path,
) -> Result<PathBuf, TrainError> {
    fs::create_dir_all(out_dir)?;
    let mut pipe = Pipeline::load(ckpt, false)?;
    let stage = pipe.stage;
    if !matches!(stage, Stage::Stage1 | Stage::Stage2) {
        return Err(TrainError::Checkpoint(format!(
            "resume supports the joint stages, checkpoint is at {:?}",
            stage.name()
        )));
    }
    let remaining = stage.budget(&pipe.cfg).saturating_sub(pipe.step);
    let mut log = StepLog::file(&out_dir.join("train.jsonl"))?;
    pipe.joint_steps(stage, episodes, remaining, &mut log)?;
    if !pipe.completed.contains(&stage) {
        pipe.completed.push(stage);
        pipe.completed.sort();
    }
    let out = out_dir.join(stage.artifact());
    pipe.save(&out)?;
    Ok(out)
}
