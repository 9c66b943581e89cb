//! Discrete autoregressive future-frame head: teacher-forced cross-entropy
//! restricted to the image segment, masked sequential decoding with recorded
//! per-step logits, and detokenization back to pixels.

use uwm_core::rng::DetRng;
use uwm_core::tensor::{Mat, Tape, Var};

use crate::layout::{SegmentKind, SequenceLayout};
use crate::reasoner::Decoder;
use crate::vocab::Vocab;
use crate::vq::{TokenGrid, VqTokenizer};
use crate::ModelError;
use uwm_core::params::ParamStore;

/// Mean cross-entropy over exactly the IMAGE positions of a teacher-forced
/// layout, with the distribution renormalized over the image-token columns
/// (logits row `p−1` scores the token at position `p`).
pub fn ar_ce_loss(
    tape: &Tape,
    vocab: &Vocab,
    layout: &SequenceLayout,
    logits: Var,
) -> Result<Var, ModelError> {
    let (img_off, img_len) = layout
        .segment(SegmentKind::Image)
        .ok_or_else(|| ModelError::Layout("layout has no IMAGE segment".into()))?;
    let codes: Vec<usize> = (img_off..img_off + img_len)
        .map(|p| {
            layout.tokens[p]
                .and_then(|id| vocab.code_of(id))
                .ok_or_else(|| ModelError::Layout(format!("position {p} lacks a teacher image token")))
        })
        .collect::<Result<_, _>>()?;
    let rows = tape.slice_rows(logits, img_off - 1, img_len);
    let image_cols = tape.slice_cols(rows, vocab.image_base(), vocab.n_img);
    let logp = tape.pick_per_row(tape.log_softmax_rows(image_cols), &codes);
    Ok(tape.neg(tape.mean_all(logp)))
}

/// Mean of per-example losses.
pub fn ar_ce_loss_batch(
    tape: &Tape,
    vocab: &Vocab,
    examples: &[(&SequenceLayout, Var)],
) -> Result<Var, ModelError> {
    assert!(!examples.is_empty(), "empty batch");
    let mut acc: Option<Var> = None;
    for (layout, logits) in examples {
        let l = ar_ce_loss(tape, vocab, layout, *logits)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, l),
            None => l,
        });
    }
    Ok(tape.scale(acc.unwrap(), 1.0 / examples.len() as f64))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Policy {
    Greedy,
    Temperature { tau: f64 },
}

/// One decoded future frame in token space.
pub struct ArSample {
    pub grid: TokenGrid,
    /// Per-step logits over the image-token columns, recorded before each
    /// choice (the conditional distributions of the decode).
    pub step_logits: Vec<Vec<f64>>,
    /// Joint log-probability of the emitted codes under those conditionals.
    pub log_prob: f64,
}

/// Push prefix embedding rows into a decoder, returning the last logits row.
pub fn feed_prefix(dec: &mut Decoder, rows: &Mat) -> Mat {
    assert!(rows.nrows() > 0, "empty prefix");
    let mut logits = None;
    for r in 0..rows.nrows() {
        let mut row = Mat::zeros((1, rows.ncols()));
        for c in 0..rows.ncols() {
            row[(0, c)] = rows[(r, c)];
        }
        logits = Some(dec.push_embedding(&row).1);
    }
    logits.unwrap()
}

/// Decode exactly `h·w` image tokens after an ⟨image_start⟩ whose logits row
/// is `cond`, then force ⟨image_end⟩. Non-image vocabulary entries are
/// masked out, so every emitted id is a valid code. Greedy ties break toward
/// the lowest code; temperature sampling draws from the renormalized
/// distribution using the supplied generator.
pub fn sample_future_tokens(
    dec: &mut Decoder,
    cond: Mat,
    vocab: &Vocab,
    grid_h: usize,
    grid_w: usize,
    source: (usize, usize),
    policy: Policy,
    mut rng: Option<&mut DetRng>,
) -> ArSample {
    let n = grid_h * grid_w;
    let mut codes = Vec::with_capacity(n);
    let mut step_logits = Vec::with_capacity(n);
    let mut log_prob = 0.0;
    let mut cond = cond;
    for _ in 0..n {
        let image_logits: Vec<f64> = (0..vocab.n_img)
            .map(|c| cond[(0, vocab.image_base() + c)])
            .collect();
        let code = match policy {
            Policy::Greedy => {
                let mut best = 0;
                for (c, &v) in image_logits.iter().enumerate() {
                    if v > image_logits[best] {
                        best = c;
                    }
                }
                best
            }
            Policy::Temperature { tau } => {
                let rng = rng
                    .as_deref_mut()
                    .expect("temperature sampling needs a generator");
                let mx = image_logits.iter().copied().fold(f64::MIN, f64::max);
                let weights: Vec<f64> =
                    image_logits.iter().map(|&v| ((v - mx) / tau).exp()).collect();
                let total: f64 = weights.iter().sum();
                let mut u = rng.uniform() * total;
                let mut pick = vocab.n_img - 1;
                for (c, &w) in weights.iter().enumerate() {
                    if u < w {
                        pick = c;
                        break;
                    }
                    u -= w;
                }
                pick
            }
        };
        // log softmax over the image columns at the chosen code.
        let mx = image_logits.iter().copied().fold(f64::MIN, f64::max);
        let lse = mx
            + image_logits
                .iter()
                .map(|&v| (v - mx).exp())
                .sum::<f64>()
                .ln();
        log_prob += image_logits[code] - lse;
        step_logits.push(image_logits);
        codes.push(code);
        cond = dec.push_token(vocab.image_token(code)).1;
    }
    dec.push_token(vocab.img_end());
    ArSample {
        grid: TokenGrid {
            h: grid_h,
            w: grid_w,
            indices: codes,
            source,
        },
        step_logits,
        log_prob,
    }
}

/// Detokenize a sampled grid to a raster in [0,1].
pub fn predict_future_frame(
    vq: &VqTokenizer,
    store: &ParamStore,
    grid: &TokenGrid,
) -> Result<Vec<f32>, ModelError> {
    vq.decode(store, grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::{build_sequence, HeadOrder, LayoutSpec, Mode};
    use crate::reasoner::{Injections, Reasoner, ReasonerConfig};
    use crate::vq::VqConfig;
    use uwm_core::params::Binding;

    fn spec() -> LayoutSpec {
        LayoutSpec {
            n_scene: 3,
            n_history: 2,
            image_len: 4,
            n_latent_query: 2,
        }
    }

    fn teacher(v: &Vocab) -> Vec<usize> {
        vec![v.image_token(3), v.image_token(250), v.image_token(0), v.image_token(77)]
    }

    #[test]
    fn uniform_logits_score_at_log_vocab() {
        let v = Vocab::default();
        let layout =
            build_sequence(&v, &spec(), 0, Mode::Ar, HeadOrder::PlanFirst, Some(&teacher(&v)))
                .unwrap();
        let tape = Tape::new();
        let logits = tape.input(Mat::from_elem((layout.len(), v.size()), 0.7));
        let loss = ar_ce_loss(&tape, &v, &layout, logits).unwrap();
        assert!((tape.scalar_value(loss) - 256f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_correct_logits_score_near_zero() {
        let v = Vocab::default();
        let layout =
            build_sequence(&v, &spec(), 0, Mode::Ar, HeadOrder::PlanFirst, Some(&teacher(&v)))
                .unwrap();
        let tape = Tape::new();
        let (img_off, img_len) = layout.segment(SegmentKind::Image).unwrap();
        let mut logits = Mat::zeros((layout.len(), v.size()));
        for i in 0..img_len {
            let tok = layout.tokens[img_off + i].unwrap();
            logits[(img_off + i - 1, tok)] = 20.0;
        }
        let loss = ar_ce_loss(&tape, &v, &layout, tape.input(logits)).unwrap();
        assert!(tape.scalar_value(loss) < 1e-6);
    }

    #[test]
    fn batch_loss_is_the_mean_of_examples() {
        let v = Vocab::default();
        let l1 =
            build_sequence(&v, &spec(), 0, Mode::Ar, HeadOrder::PlanFirst, Some(&teacher(&v)))
                .unwrap();
        let t2: Vec<usize> = (0..4).map(|i| v.image_token(10 + i)).collect();
        let l2 = build_sequence(&v, &spec(), 1, Mode::Ar, HeadOrder::PlanFirst, Some(&t2)).unwrap();
        let tape = Tape::new();
        let mut rng = DetRng::new(1, "batch");
        let g1 = tape.input(Mat::from_shape_vec((l1.len(), v.size()), rng.normal_vec(l1.len() * v.size())).unwrap());
        let g2 = tape.input(Mat::from_shape_vec((l2.len(), v.size()), rng.normal_vec(l2.len() * v.size())).unwrap());
        let a = tape.scalar_value(ar_ce_loss(&tape, &v, &l1, g1).unwrap());
        let b = tape.scalar_value(ar_ce_loss(&tape, &v, &l2, g2).unwrap());
        let batch = ar_ce_loss_batch(&tape, &v, &[(&l1, g1), (&l2, g2)]).unwrap();
        assert!((tape.scalar_value(batch) - (a + b) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn loss_ignores_rows_after_the_image_segment() {
        let v = Vocab::default();
        let layout = build_sequence(
            &v,
            &spec(),
            0,
            Mode::Ar,
            HeadOrder::GenerationFirst,
            Some(&teacher(&v)),
        )
        .unwrap();
        let tape = Tape::new();
        let mut rng = DetRng::new(2, "tail");
        let base =
            Mat::from_shape_vec((layout.len(), v.size()), rng.normal_vec(layout.len() * v.size()))
                .unwrap();
        let mut tail = base.clone();
        let (img_off, img_len) = layout.segment(SegmentKind::Image).unwrap();
        for r in img_off + img_len..layout.len() {
            for c in 0..v.size() {
                tail[(r, c)] += 5.0;
            }
        }
        let la = ar_ce_loss(&tape, &v, &layout, tape.input(base)).unwrap();
        let lb = ar_ce_loss(&tape, &v, &layout, tape.input(tail)).unwrap();
        assert_eq!(tape.scalar_value(la).to_bits(), tape.scalar_value(lb).to_bits());
    }

    #[test]
    fn missing_teacher_tokens_is_a_layout_error() {
        let v = Vocab::default();
        let layout = build_sequence(&v, &spec(), 0, Mode::Ar, HeadOrder::PlanFirst, None).unwrap();
        let tape = Tape::new();
        let logits = tape.input(Mat::zeros((layout.len(), v.size())));
        assert!(matches!(
            ar_ce_loss(&tape, &v, &layout, logits),
            Err(ModelError::Layout(_))
        ));
    }

    struct DecodeFixture {
        store: ParamStore,
        model: Reasoner,
        vocab: Vocab,
        prefix: Mat,
    }

    fn decode_fixture(seed: u64) -> DecodeFixture {
        let mut store = ParamStore::new(seed);
        let cfg = ReasonerConfig {
            d_model: 24,
            n_layers: 2,
            n_heads: 2,
            d_ff: 32,
            max_len: 64,
            d_z: 4,
            ..ReasonerConfig::default()
        };
        let vocab = cfg.vocab;
        let model = Reasoner::register(&mut store, cfg);
        let layout = build_sequence(&vocab, &spec(), 2, Mode::Ar, HeadOrder::PlanFirst, None).unwrap();
        let tape = Tape::new();
        let bind = Binding::new(&store);
        let mut rng = DetRng::new(seed, "prefix-inj");
        let inj = Injections {
            scene: Some(tape.input(Mat::from_shape_vec((3, 24), rng.normal_vec(3 * 24)).unwrap())),
            history: Some(tape.input(Mat::from_shape_vec((2, 24), rng.normal_vec(2 * 24)).unwrap())),
            plan: None,
            latent_query: None,
        };
        let rows = model.assemble_embeddings(&tape, &bind, &layout, &inj).unwrap();
        let prefix = tape.value(rows).as_ref().clone();
        DecodeFixture { store, model, vocab, prefix }
    }

    #[test]
    fn greedy_decode_is_deterministic_and_well_formed() {
        let f = decode_fixture(91);
        let run = || {
            let mut dec = f.model.decoder(&f.store);
            let cond = feed_prefix(&mut dec, &f.prefix);
            let s = sample_future_tokens(
                &mut dec,
                cond,
                &f.vocab,
                2,
                2,
                (16, 16),
                Policy::Greedy,
                None,
            );
            (s, dec.len())
        };
        let (a, len_a) = run();
        let (b, _) = run();
        assert_eq!(a.grid, b.grid);
        assert_eq!(a.grid.len(), 4);
        assert!(a.grid.indices.iter().all(|&c| c < f.vocab.n_img));
        // Prefix + 4 image tokens + forced ⟨image_end⟩.
        assert_eq!(len_a, f.prefix.nrows() + 5);
        assert_eq!(a.step_logits.len(), 4);

        // Greedy picks the argmax of every recorded conditional, so no
        // single-token swap can raise that step's conditional probability.
        for (k, logits) in a.step_logits.iter().enumerate() {
            let chosen = a.grid.indices[k];
            for (c, &v) in logits.iter().enumerate() {
                assert!(
                    logits[chosen] >= v,
                    "step {k}: code {c} beats the greedy choice"
                );
            }
        }
        assert!(a.log_prob <= 0.0);
    }

    #[test]
    fn temperature_sampling_is_seed_deterministic() {
        let f = decode_fixture(92);
        let run = |seed: u64| {
            let mut dec = f.model.decoder(&f.store);
            let cond = feed_prefix(&mut dec, &f.prefix);
            let mut rng = DetRng::new(seed, "ar-sample");
            sample_future_tokens(
                &mut dec,
                cond,
                &f.vocab,
                2,
                2,
                (16, 16),
                Policy::Temperature { tau: 1.0 },
                Some(&mut rng),
            )
            .grid
        };
        assert_eq!(run(7), run(7));
        // High-temperature draws from a different seed usually differ; with a
        // fixed fixture this is a deterministic regression check.
        let hot = |seed: u64| {
            let mut dec = f.model.decoder(&f.store);
            let cond = feed_prefix(&mut dec, &f.prefix);
            let mut rng = DetRng::new(seed, "ar-sample");
            sample_future_tokens(
                &mut dec,
                cond,
                &f.vocab,
                2,
                2,
                (16, 16),
                Policy::Temperature { tau: 50.0 },
                Some(&mut rng),
            )
            .grid
        };
        assert_ne!(hot(1).indices, hot(2).indices);
    }

    #[test]
    fn predicted_frame_matches_tokenizer_resolution_and_range() {
        let mut store = ParamStore::new(93);
        let vq = VqTokenizer::register(
            &mut store,
            VqConfig {
                channels: 3,
                f: 4,
                hidden: 12,
                d_code: 6,
                n_codes: 16,
                beta: 0.25,
            },
        );
        let grid = TokenGrid {
            h: 4,
            w: 4,
            indices: (0..16).collect(),
            source: (16, 16),
        };
        let px = predict_future_frame(&vq, &store, &grid).unwrap();
        assert_eq!(px.len(), 3 * 16 * 16);
        assert!(px.iter().all(|&p| (0.0..=1.0).contains(&p)));
        assert_eq!(px, predict_future_frame(&vq, &store, &grid).unwrap());
    }
}
