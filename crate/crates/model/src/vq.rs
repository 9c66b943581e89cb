//! Vector-quantized image tokenizer. Frames are cut into f×f patches, each
//! patch is embedded by a small MLP, snapped to its nearest codebook entry,
//! and decoded back to pixels by a mirrored MLP. The quantization boundary
//! uses the straight-through estimator: `z_q = z + stopgrad(e − z)`, so the
//! decoder's gradient reaches the encoder output unchanged.

use uwm_core::params::{Binding, Init, ParamId, ParamStore};
use uwm_core::rng::DetRng;
use uwm_core::tensor::{Mat, Tape, Var};

use crate::ModelError;

/// Quantized image: `h×w` codebook indices plus the pixel resolution they
/// came from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenGrid {
    pub h: usize,
    pub w: usize,
    pub indices: Vec<usize>,
    pub source: (usize, usize),
}

impl TokenGrid {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Cut a `c×h×w` raster (channel-major, row-major within a channel) into
/// f×f patches, one row per patch. Patches are ordered row-major over the
/// patch grid; within a patch, features are `[channel][py][px]`.
pub fn patchify(pixels: &[f32], c: usize, h: usize, w: usize, f: usize) -> Result<Mat, ModelError> {
    if h % f != 0 || w % f != 0 {
        return Err(ModelError::Shape(format!(
            "{h}×{w} raster not divisible by patch size {f}"
        )));
    }
    if pixels.len() != c * h * w {
        return Err(ModelError::Shape(format!(
            "raster length {} ≠ {c}·{h}·{w}",
            pixels.len()
        )));
    }
    let (gh, gw) = (h / f, w / f);
    let mut out = Mat::zeros((gh * gw, c * f * f));
    for gy in 0..gh {
        for gx in 0..gw {
            let p = gy * gw + gx;
            let mut col = 0;
            for ch in 0..c {
                for py in 0..f {
                    for px in 0..f {
                        let (y, x) = (gy * f + py, gx * f + px);
                        out[(p, col)] = pixels[ch * h * w + y * w + x] as f64;
                        col += 1;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Inverse of [`patchify`]; values are clamped to [0,1].
pub fn unpatchify(patches: &Mat, c: usize, h: usize, w: usize, f: usize) -> Vec<f32> {
    let (gh, gw) = (h / f, w / f);
    assert_eq!(patches.dim(), (gh * gw, c * f * f), "patch matrix shape");
    let mut out = vec![0.0f32; c * h * w];
    for gy in 0..gh {
        for gx in 0..gw {
            let p = gy * gw + gx;
            let mut col = 0;
            for ch in 0..c {
                for py in 0..f {
                    for px in 0..f {
                        let (y, x) = (gy * f + py, gx * f + px);
                        out[ch * h * w + y * w + x] = patches[(p, col)].clamp(0.0, 1.0) as f32;
                        col += 1;
                    }
                }
            }
        }
    }
    out
}

/// Exact nearest codebook entry per latent row (Euclidean; ties go to the
/// lowest index).
pub fn nearest_indices(codebook: &Mat, z: &Mat) -> Vec<usize> {
    assert_eq!(codebook.ncols(), z.ncols(), "latent width");
    let mut out = Vec::with_capacity(z.nrows());
    for r in 0..z.nrows() {
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for e in 0..codebook.nrows() {
            let mut d = 0.0;
            for c in 0..z.ncols() {
                let diff = z[(r, c)] - codebook[(e, c)];
                d += diff * diff;
            }
            if d < best_d {
                best_d = d;
                best = e;
            }
        }
        out.push(best);
    }
    out
}

#[derive(Clone, Copy, Debug)]
pub struct VqConfig {
    pub channels: usize,
    /// Patch edge (downsample factor).
    pub f: usize,
    pub hidden: usize,
    pub d_code: usize,
    pub n_codes: usize,
    /// Commitment weight β.
    pub beta: f64,
}

impl Default for VqConfig {
    fn default() -> Self {
        VqConfig {
            channels: 3,
            f: 4,
            hidden: 64,
            d_code: 64,
            n_codes: 256,
            beta: 0.25,
        }
    }
}

/// Loss pieces from one quantization pass (all tape scalars except `indices`).
pub struct VqLoss {
    pub total: Var,
    pub recon: Var,
    pub codebook: Var,
    pub commitment: Var,
    pub indices: Vec<usize>,
}

pub struct VqTokenizer {
    pub cfg: VqConfig,
    enc_w1: ParamId,
    enc_b1: ParamId,
    enc_w2: ParamId,
    enc_b2: ParamId,
    pub codebook: ParamId,
    dec_w1: ParamId,
    dec_b1: ParamId,
    dec_w2: ParamId,
    dec_b2: ParamId,
    usage: Vec<u64>,
}

impl VqTokenizer {
    pub fn register(store: &mut ParamStore, cfg: VqConfig) -> Self {
        let pd = cfg.channels * cfg.f * cfg.f;
        VqTokenizer {
            cfg,
            enc_w1: store.add("vq/enc_w1", pd, cfg.hidden, Init::XavierUniform),
            enc_b1: store.add("vq/enc_b1", 1, cfg.hidden, Init::Zeros),
            enc_w2: store.add("vq/enc_w2", cfg.hidden, cfg.d_code, Init::XavierUniform),
            enc_b2: store.add("vq/enc_b2", 1, cfg.d_code, Init::Zeros),
            codebook: store.add("vq/codebook", cfg.n_codes, cfg.d_code, Init::Normal { std: 0.5 }),
            dec_w1: store.add("vq/dec_w1", cfg.d_code, cfg.hidden, Init::XavierUniform),
            dec_b1: store.add("vq/dec_b1", 1, cfg.hidden, Init::Zeros),
            dec_w2: store.add("vq/dec_w2", cfg.hidden, pd, Init::XavierUniform),
            dec_b2: store.add("vq/dec_b2", 1, pd, Init::Zeros),
            usage: vec![0; cfg.n_codes],
        }
    }

    /// Encoder MLP on tape: one latent row per patch row.
    pub fn encode_latents(&self, tape: &Tape, bind: &Binding, patches: Var) -> Var {
        let h = tape.relu(tape.linear(
            patches,
            bind.var(tape, self.enc_w1),
            bind.var(tape, self.enc_b1),
        ));
        tape.linear(h, bind.var(tape, self.enc_w2), bind.var(tape, self.enc_b2))
    }

    /// Decoder MLP on tape: latent rows back to pixel patches in (0,1).
    pub fn decode_latents(&self, tape: &Tape, bind: &Binding, z: Var) -> Var {
        let h = tape.relu(tape.linear(
            z,
            bind.var(tape, self.dec_w1),
            bind.var(tape, self.dec_b1),
        ));
        tape.sigmoid(tape.linear(h, bind.var(tape, self.dec_w2), bind.var(tape, self.dec_b2)))
    }

    /// Straight-through quantization of on-tape latents: the output carries
    /// the selected codebook rows forward but routes gradients straight back
    /// to `z`.
    pub fn quantize(&self, tape: &Tape, bind: &Binding, z: Var) -> (Var, Var, Vec<usize>) {
        let cb = bind.var(tape, self.codebook);
        let indices = nearest_indices(&tape.value(cb), &tape.value(z));
        let e_sel = tape.gather_rows(cb, &indices);
        let z_q = tape.add(z, tape.detach(tape.sub(e_sel, z)));
        (z_q, e_sel, indices)
    }

    /// Quantize one raster into a token grid.
    pub fn encode(
        &self,
        store: &ParamStore,
        pixels: &[f32],
        h: usize,
        w: usize,
    ) -> Result<TokenGrid, ModelError> {
        let patches = patchify(pixels, self.cfg.channels, h, w, self.cfg.f)?;
        let tape = Tape::new();
        let bind = Binding::new(store);
        let z = self.encode_latents(&tape, &bind, tape.input(patches));
        let indices = nearest_indices(store.value(self.codebook), &tape.value(z));
        Ok(TokenGrid {
            h: h / self.cfg.f,
            w: w / self.cfg.f,
            indices,
            source: (h, w),
        })
    }

    /// Decode a token grid back to a `c×H×W` raster in [0,1].
    pub fn decode(&self, store: &ParamStore, grid: &TokenGrid) -> Result<Vec<f32>, ModelError> {
        if grid.indices.len() != grid.h * grid.w {
            return Err(ModelError::Shape(format!(
                "grid has {} indices for {}×{}",
                grid.indices.len(),
                grid.h,
                grid.w
            )));
        }
        for &i in &grid.indices {
            if i >= self.cfg.n_codes {
                return Err(ModelError::Index { index: i, size: self.cfg.n_codes });
            }
        }
        let tape = Tape::new();
        let bind = Binding::new(store);
        let cb = bind.var(&tape, self.codebook);
        let z = tape.gather_rows(cb, &grid.indices);
        let patches = tape.value(self.decode_latents(&tape, &bind, z));
        let (sh, sw) = grid.source;
        Ok(unpatchify(&patches, self.cfg.channels, sh, sw, self.cfg.f))
    }

    /// Reconstruction + codebook + β·commitment loss for a batch of patch
    /// rows. `targets` is usually the same patch matrix fed in.
    pub fn train_loss(&self, tape: &Tape, bind: &Binding, patches: Var, targets: Var) -> VqLoss {
        let z = self.encode_latents(tape, bind, patches);
        let (z_q, e_sel, indices) = self.quantize(tape, bind, z);
        let recon = tape.mse(self.decode_latents(tape, bind, z_q), targets);
        let codebook = tape.mse(e_sel, tape.detach(z));
        let commitment = tape.mse(z, tape.detach(e_sel));
        let total = tape.add(
            recon,
            tape.add(codebook, tape.scale(commitment, self.cfg.beta)),
        );
        VqLoss { total, recon, codebook, commitment, indices }
    }

    pub fn record_usage(&mut self, indices: &[usize]) {
        for &i in indices {
            self.usage[i] += 1;
        }
    }

    pub fn usage(&self) -> &[u64] {
        &self.usage
    }

    /// Re-seed every entry unused since the last restart window to a random
    /// encoder output from `latents`, then reset the window. Assignments can
    /// only move to a strictly closer entry, so total quantization error on
    /// the donor batch never increases.
    pub fn restart_dead(
        &mut self,
        store: &mut ParamStore,
        latents: &Mat,
        rng: &mut DetRng,
    ) -> usize {
        let mut restarted = 0;
        let cb = store.value_mut(self.codebook);
        for e in 0..self.usage.len() {
            if self.usage[e] == 0 {
                let r = rng.below(latents.nrows());
                for c in 0..cb.ncols() {
                    cb[(e, c)] = latents[(r, c)];
                }
                restarted += 1;
            }
        }
        self.usage.iter_mut().for_each(|u| *u = 0);
        restarted
    }
}
