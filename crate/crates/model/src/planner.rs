//! Latent-variable trajectory head. The backbone's planning-slot hidden
//! state parameterizes a diagonal Gaussian; a sampled latent seeds a small
//! recurrent decoder that emits m ego-frame waypoints. Supervision combines
//! waypoint regression with analytic collision and drivable-area penalties
//! (no KL term — the latent is regularized only by the sampling noise).

use std::sync::Arc;

use uwm_core::params::{Binding, Init, ParamId, ParamStore};
use uwm_core::tensor::{CustomGrad, Mat, Tape, Var};
use uwm_world::geometry::{obb_sdf_grad, polygon_sdf_grad, Obb, Vec2};
use uwm_world::{AgentBox, LaneMap};

#[derive(Clone, Copy, Debug)]
pub struct PlannerConfig {
    /// Latent width d_z.
    pub d_z: usize,
    /// Recurrent hidden width.
    pub d_h: usize,
    /// Waypoints per trajectory.
    pub m: usize,
    /// Hidden width of the μ / log σ heads.
    pub hidden: usize,
    /// Backbone embedding width feeding the heads.
    pub d_model: usize,
    pub collision_margin: f64,
    pub boundary_margin: f64,
    pub w_collision: f64,
    pub w_boundary: f64,
    pub w_mse: f64,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        PlannerConfig {
            d_z: 32,
            d_h: 64,
            m: 6,
            hidden: 64,
            d_model: 256,
            collision_margin: 0.5,
            boundary_margin: 0.0,
            w_collision: 1.0,
            w_boundary: 1.0,
            w_mse: 1.0,
        }
    }
}

/// Gaussian plan latent with the noise that produced it.
pub struct LatentPlan {
    pub mu: Var,
    pub log_sigma: Var,
    pub z: Var,
}

pub struct PlanLoss {
    pub total: Var,
    pub collision: Var,
    pub boundary: Var,
    pub mse: Var,
}

pub struct Planner {
    pub cfg: PlannerConfig,
    mu_w1: ParamId,
    mu_b1: ParamId,
    mu_w2: ParamId,
    mu_b2: ParamId,
    ls_w1: ParamId,
    ls_b1: ParamId,
    ls_w2: ParamId,
    ls_b2: ParamId,
    init_w: ParamId,
    init_b: ParamId,
    rnn_wh: ParamId,
    rnn_ww: ParamId,
    rnn_b: ParamId,
    out_w: ParamId,
    out_b: ParamId,
}

/// `z = μ + exp(log σ)⊙ε` on tape. Gradients are the textbook identities:
/// ∂z/∂μ = I and, with σ as a direct input, ∂z/∂σ = diag(ε).
pub fn reparameterize(tape: &Tape, mu: Var, log_sigma: Var, eps: Var) -> Var {
    tape.add(mu, tape.mul(tape.exp(log_sigma), eps))
}

/// Clamp to `[lo, hi]` built from relu so it stays on-tape differentiable
/// (slope 1 inside the interval, 0 outside).
/// `x + relu(lo−x) − relu(x−hi)`: values inside `[lo, hi]` pass through
/// without any rounding.
pub fn clamp_on_tape(tape: &Tape, x: Var, lo: f64, hi: f64) -> Var {
    let below = tape.relu(tape.add_scalar_const(tape.neg(x), lo));
    let above = tape.relu(tape.add_scalar_const(x, -hi));
    tape.sub(tape.add(x, below), above)
}

impl Planner {
    pub fn register(store: &mut ParamStore, cfg: PlannerConfig) -> Self {
        let (dm, h, dz, dh) = (cfg.d_model, cfg.hidden, cfg.d_z, cfg.d_h);
        Planner {
            cfg,
            mu_w1: store.add("plan/mu_w1", dm, h, Init::XavierUniform),
            mu_b1: store.add("plan/mu_b1", 1, h, Init::Zeros),
            mu_w2: store.add("plan/mu_w2", h, dz, Init::XavierUniform),
            mu_b2: store.add("plan/mu_b2", 1, dz, Init::Zeros),
            ls_w1: store.add("plan/ls_w1", dm, h, Init::XavierUniform),
            ls_b1: store.add("plan/ls_b1", 1, h, Init::Zeros),
            ls_w2: store.add("plan/ls_w2", h, dz, Init::XavierUniform),
            ls_b2: store.add("plan/ls_b2", 1, dz, Init::Zeros),
            init_w: store.add("plan/init_w", dz + dm, dh, Init::XavierUniform),
            init_b: store.add("plan/init_b", 1, dh, Init::Zeros),
            rnn_wh: store.add("plan/rnn_wh", dh, dh, Init::XavierUniform),
            rnn_ww: store.add("plan/rnn_ww", 2, dh, Init::XavierUniform),
            rnn_b: store.add("plan/rnn_b", 1, dh, Init::Zeros),
            out_w: store.add("plan/out_w", dh, 2, Init::XavierUniform),
            out_b: store.add("plan/out_b", 1, 2, Init::Zeros),
        }
    }

    /// Gaussian parameters from the backbone hidden state; `eps` is supplied
    /// by the caller so sampling stays reproducible. The log-σ head output
    /// is clamped to [−10, 4] before exponentiation.
    pub fn encode_latent(&self, tape: &Tape, bind: &Binding, h_vlm: Var, eps: Var) -> LatentPlan {
        let mlp = |w1, b1, w2, b2| {
            let h = tape.relu(tape.linear(h_vlm, bind.var(tape, w1), bind.var(tape, b1)));
            tape.linear(h, bind.var(tape, w2), bind.var(tape, b2))
        };
        let mu = mlp(self.mu_w1, self.mu_b1, self.mu_w2, self.mu_b2);
        let raw = mlp(self.ls_w1, self.ls_b1, self.ls_w2, self.ls_b2);
        let log_sigma = clamp_on_tape(tape, raw, -10.0, 4.0);
        let z = reparameterize(tape, mu, log_sigma, eps);
        LatentPlan { mu, log_sigma, z }
    }

    /// Recurrent waypoint decoder: hidden state seeded from `[z; h_VLM]`,
    /// each step consumes the previous hidden state and waypoint. Returns the
    /// `(m, 2)` trajectory.
    pub fn decode_waypoints(&self, tape: &Tape, bind: &Binding, z: Var, h_vlm: Var) -> Var {
        self.decode_waypoints_perturbed(tape, bind, z, h_vlm, None)
    }

    /// Decoder with an optional additive hidden-state perturbation at one
    /// step (recurrence-causality checks).
    pub fn decode_waypoints_perturbed(
        &self,
        tape: &Tape,
        bind: &Binding,
        z: Var,
        h_vlm: Var,
        perturb: Option<(usize, Var)>,
    ) -> Var {
        let seed = tape.concat_cols(&[z, h_vlm]);
        let mut h = tape.tanh(tape.linear(
            seed,
            bind.var(tape, self.init_w),
            bind.var(tape, self.init_b),
        ));
        let out_w = bind.var(tape, self.out_w);
        let out_b = bind.var(tape, self.out_b);
        let mut waypoints = Vec::with_capacity(self.cfg.m);
        for i in 0..self.cfg.m {
            if let Some((step, delta)) = perturb {
                if step == i {
                    h = tape.add(h, delta);
                }
            }
            let w = tape.linear(h, out_w, out_b);
            waypoints.push(w);
            if i + 1 < self.cfg.m {
                let hh = tape.linear(h, bind.var(tape, self.rnn_wh), bind.var(tape, self.rnn_b));
                let hw = tape.matmul(w, bind.var(tape, self.rnn_ww));
                h = tape.tanh(tape.add(hh, hw));
            }
        }
        tape.concat_rows(&waypoints)
    }

    /// Composite supervision: `w_col·L_col + w_bd·L_bd + w_mse·L_mse`.
    pub fn plan_loss(
        &self,
        tape: &Tape,
        traj: Var,
        expert: Var,
        future_agents: &[Vec<AgentBox>],
        map: &LaneMap,
    ) -> PlanLoss {
        let collision = collision_loss(tape, traj, future_agents, self.cfg.collision_margin);
        let boundary = boundary_loss(tape, traj, map, self.cfg.boundary_margin);
        let mse = waypoint_mse(tape, traj, expert);
        let total = tape.add(
            tape.add(
                tape.scale(collision, self.cfg.w_collision),
                tape.scale(boundary, self.cfg.w_boundary),
            ),
            tape.scale(mse, self.cfg.w_mse),
        );
        PlanLoss { total, collision, boundary, mse }
    }
}

/// Mean over waypoints of squared Euclidean deviation.
pub fn waypoint_mse(tape: &Tape, traj: Var, expert: Var) -> Var {
    let d = tape.sub(traj, expert);
    tape.mean_all(tape.sum_cols(tape.square(d)))
}

/// Signed distance from each waypoint to the nearest agent footprint at the
/// matching future index (negative inside a footprint). Steps with no agents
/// report `EMPTY_CLEARANCE`. Gradients follow the argmin box.
struct NearestFootprint {
    per_step: Vec<Vec<Obb>>,
}

const EMPTY_CLEARANCE: f64 = 1e6;

impl NearestFootprint {
    fn eval(&self, traj: &Mat) -> Mat {
        let mut d = Mat::zeros((traj.nrows(), 1));
        for i in 0..traj.nrows() {
            let p = Vec2::new(traj[(i, 0)], traj[(i, 1)]);
            d[(i, 0)] = self.per_step[i]
                .iter()
                .map(|b| obb_sdf_grad(p, b).0)
                .fold(EMPTY_CLEARANCE, f64::min);
        }
        d
    }
}

impl CustomGrad for NearestFootprint {
    fn backward(&self, grad: &Mat, inputs: &[&Mat], _output: &Mat) -> Vec<Option<Mat>> {
        let traj = inputs[0];
        let mut g = Mat::zeros(traj.dim());
        for i in 0..traj.nrows() {
            let p = Vec2::new(traj[(i, 0)], traj[(i, 1)]);
            let mut best: Option<(f64, Vec2)> = None;
            for b in &self.per_step[i] {
                let (d, gr) = obb_sdf_grad(p, b);
                if best.as_ref().is_none_or(|(bd, _)| d < *bd) {
                    best = Some((d, gr));
                }
            }
            if let Some((_, gr)) = best {
                g[(i, 0)] = grad[(i, 0)] * gr.x;
                g[(i, 1)] = grad[(i, 0)] * gr.y;
            }
        }
        vec![Some(g)]
    }
}

/// `Σ_i relu(margin − d_i)` over the trajectory, `d_i` the clearance to the
/// nearest footprint at step `i`.
pub fn collision_loss(tape: &Tape, traj: Var, future_agents: &[Vec<AgentBox>], margin: f64) -> Var {
    let (m, _) = tape.dim(traj);
    assert_eq!(future_agents.len(), m, "one agent set per waypoint");
    let op = NearestFootprint {
        per_step: future_agents
            .iter()
            .map(|step| step.iter().map(AgentBox::obb).collect())
            .collect(),
    };
    let d_vals = op.eval(&tape.value(traj));
    let d = tape.custom(&[traj], d_vals, Arc::new(op));
    tape.sum_all(tape.relu(tape.add_scalar_const(tape.neg(d), margin)))
}

/// Signed distance from each waypoint to the drivable-area boundary,
/// positive inside.
struct DrivableSdf {
    poly: Vec<Vec2>,
}

impl DrivableSdf {
    fn eval(&self, traj: &Mat) -> Mat {
        let mut d = Mat::zeros((traj.nrows(), 1));
        for i in 0..traj.nrows() {
            let p = Vec2::new(traj[(i, 0)], traj[(i, 1)]);
            d[(i, 0)] = polygon_sdf_grad(p, &self.poly).0;
        }
        d
    }
}

impl CustomGrad for DrivableSdf {
    fn backward(&self, grad: &Mat, inputs: &[&Mat], _output: &Mat) -> Vec<Option<Mat>> {
        let traj = inputs[0];
        let mut g = Mat::zeros(traj.dim());
        for i in 0..traj.nrows() {
            let p = Vec2::new(traj[(i, 0)], traj[(i, 1)]);
            let (_, gr) = polygon_sdf_grad(p, &self.poly);
            g[(i, 0)] = grad[(i, 0)] * gr.x;
            g[(i, 1)] = grad[(i, 0)] * gr.y;
        }
        vec![Some(g)]
    }
}

/// `Σ_i relu(margin − d_i)` with `d_i` positive inside the drivable region:
/// zero exactly when every waypoint sits at least `margin` inside.
pub fn boundary_loss(tape: &Tape, traj: Var, map: &LaneMap, margin: f64) -> Var {
    let op = DrivableSdf { poly: map.drivable_f64() };
    let d_vals = op.eval(&tape.value(traj));
    let d = tape.custom(&[traj], d_vals, Arc::new(op));
    tape.sum_all(tape.relu(tape.add_scalar_const(tape.neg(d), margin)))
}
