//! Sequence layouts for the causal backbone. A layout is an ordered list of
//! typed segments plus, per position, either a discrete token id (embedding
//! table lookup) or a marker that the embedding is injected as a continuous
//! vector (scene/history/latent-query rows, or the plan projection).

use crate::vocab::Vocab;
use crate::ModelError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SegmentKind {
    Bos,
    Command,
    Scene,
    History,
    Plan,
    ImgStart,
    Image,
    ImgEnd,
    LatentQuery,
    Pad,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Ar,
    Fm,
}

/// Where the planning slot sits relative to the generation tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadOrder {
    #[default]
    PlanFirst,
    GenerationFirst,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segment {
    pub kind: SegmentKind,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceLayout {
    pub mode: Mode,
    pub order: HeadOrder,
    pub segments: Vec<Segment>,
    /// Per-position token id; `None` marks a continuous injection slot.
    pub tokens: Vec<Option<usize>>,
}

pub struct LayoutSpec {
    pub n_scene: usize,
    pub n_history: usize,
    /// IMAGE segment length (h·w of the tokenizer grid).
    pub image_len: usize,
    /// LATENT_QUERY segment length (FM path).
    pub n_latent_query: usize,
}

impl SequenceLayout {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Start offset and length of the first segment of `kind`.
    pub fn segment(&self, kind: SegmentKind) -> Option<(usize, usize)> {
        let mut off = 0;
        for seg in &self.segments {
            if seg.kind == kind {
                return Some((off, seg.len));
            }
            off += seg.len;
        }
        None
    }

    pub fn plan_pos(&self) -> Option<usize> {
        self.segment(SegmentKind::Plan).map(|(off, _)| off)
    }

    /// Kind covering position `i`.
    pub fn kind_at(&self, i: usize) -> SegmentKind {
        let mut off = 0;
        for seg in &self.segments {
            if i < off + seg.len {
                return seg.kind;
            }
            off += seg.len;
        }
        panic!("position {i} out of range");
    }

    /// Positions that are padding (masked out of attention).
    pub fn pad_positions(&self) -> Vec<bool> {
        let mut out = Vec::with_capacity(self.len());
        for seg in &self.segments {
            for _ in 0..seg.len {
                out.push(seg.kind == SegmentKind::Pad);
            }
        }
        out
    }

    /// Insert a PAD segment at segment index `at` (for mask/stability tests;
    /// the training layouts are unpadded).
    pub fn with_pad(&self, at: usize, len: usize, vocab: &Vocab) -> SequenceLayout {
        let mut segments = self.segments.clone();
        segments.insert(at, Segment { kind: SegmentKind::Pad, len });
        let mut tokens = Vec::with_capacity(self.len() + len);
        let mut src = self.tokens.iter();
        for (si, seg) in segments.iter().enumerate() {
            if si == at {
                tokens.extend(std::iter::repeat(Some(vocab.pad())).take(len));
            } else {
                for _ in 0..seg.len {
                    tokens.push(*src.next().unwrap());
                }
            }
        }
        SequenceLayout {
            mode: self.mode,
            order: self.order,
            segments,
            tokens,
        }
    }

    /// Structural invariants: segment lengths match the token vector, the
    /// planning slot and generation block are ordered per `order`, and the
    /// FM latent queries follow the plan slot (or precede it under the
    /// generation-first ablation).
    pub fn validate(&self, spec: &LayoutSpec) -> Result<(), ModelError> {
        let total: usize = self.segments.iter().map(|s| s.len).sum();
        if total != self.tokens.len() {
            return Err(ModelError::Layout(format!(
                "segment lengths sum to {total} but {} tokens recorded",
                self.tokens.len()
            )));
        }
        let pos = |k: SegmentKind| self.segment(k).map(|(off, _)| off);
        match self.mode {
            Mode::Ar => {
                let (img_off, img_len) = self
                    .segment(SegmentKind::Image)
                    .ok_or_else(|| ModelError::Layout("missing IMAGE segment".into()))?;
                if img_len != spec.image_len {
                    return Err(ModelError::Layout(format!(
                        "IMAGE segment length {img_len}, expected {}",
                        spec.image_len
                    )));
                }
                let start = pos(SegmentKind::ImgStart)
                    .ok_or_else(|| ModelError::Layout("missing IMG_START".into()))?;
                let end = pos(SegmentKind::ImgEnd)
                    .ok_or_else(|| ModelError::Layout("missing IMG_END".into()))?;
                let plan = self
                    .plan_pos()
                    .ok_or_else(|| ModelError::Layout("missing PLAN".into()))?;
                if !(start < img_off && img_off + img_len <= end) {
                    return Err(ModelError::Layout(
                        "image block must be IMG_START < IMAGE < IMG_END".into(),
                    ));
                }
                let ordered = match self.order {
                    HeadOrder::PlanFirst => plan < start,
                    HeadOrder::GenerationFirst => plan > end,
                };
                if !ordered {
                    return Err(ModelError::Layout(format!(
                        "PLAN at {plan} inconsistent with {:?}",
                        self.order
                    )));
                }
            }
            Mode::Fm => {
                let (q_off, q_len) = self
                    .segment(SegmentKind::LatentQuery)
                    .ok_or_else(|| ModelError::Layout("missing LATENT_QUERY".into()))?;
                if q_len != spec.n_latent_query {
                    return Err(ModelError::Layout(format!(
                        "LATENT_QUERY length {q_len}, expected {}",
                        spec.n_latent_query
                    )));
                }
                let plan = self
                    .plan_pos()
                    .ok_or_else(|| ModelError::Layout("missing PLAN".into()))?;
                let ordered = match self.order {
                    HeadOrder::PlanFirst => plan < q_off,
                    HeadOrder::GenerationFirst => plan > q_off + q_len - 1,
                };
                if !ordered {
                    return Err(ModelError::Layout(format!(
                        "PLAN at {plan} inconsistent with {:?}",
                        self.order
                    )));
                }
            }
        }
        for k in [SegmentKind::Scene, SegmentKind::History] {
            let (off, len) = self
                .segment(k)
                .ok_or_else(|| ModelError::Layout(format!("missing {k:?}")))?;
            let expect = if k == SegmentKind::Scene {
                spec.n_scene
            } else {
                spec.n_history
            };
            if len != expect {
                return Err(ModelError::Layout(format!(
                    "{k:?} length {len}, expected {expect}"
                )));
            }
            if self.tokens[off..off + len].iter().any(Option::is_some) {
                return Err(ModelError::Layout(format!(
                    "{k:?} positions must be continuous injections"
                )));
            }
        }
        Ok(())
    }
}

/// Build the training/inference layout for one example.
///
/// AR with teacher tokens interleaves the ground-truth image codes for
/// teacher forcing; AR without them stops after IMG_START so a decoder can
/// continue the sequence. FM appends latent query slots instead of an image
/// block. `order` selects the planning-slot placement ablation.
pub fn build_sequence(
    vocab: &Vocab,
    spec: &LayoutSpec,
    command_token: usize,
    mode: Mode,
    order: HeadOrder,
    teacher_image_tokens: Option<&[usize]>,
) -> Result<SequenceLayout, ModelError> {
    let mut segments = vec![
        Segment { kind: SegmentKind::Bos, len: 1 },
        Segment { kind: SegmentKind::Command, len: 1 },
        Segment { kind: SegmentKind::Scene, len: spec.n_scene },
        Segment { kind: SegmentKind::History, len: spec.n_history },
    ];
    let plan = Segment { kind: SegmentKind::Plan, len: 1 };
    match (mode, teacher_image_tokens) {
        (Mode::Ar, Some(teacher)) => {
            if teacher.len() != spec.image_len {
                return Err(ModelError::Layout(format!(
                    "got {} teacher image tokens, grid needs {}",
                    teacher.len(),
                    spec.image_len
                )));
            }
            let block = [
                Segment { kind: SegmentKind::ImgStart, len: 1 },
                Segment { kind: SegmentKind::Image, len: spec.image_len },
                Segment { kind: SegmentKind::ImgEnd, len: 1 },
            ];
            match order {
                HeadOrder::PlanFirst => {
                    segments.push(plan);
                    segments.extend(block);
                }
                HeadOrder::GenerationFirst => {
                    segments.extend(block);
                    segments.push(plan);
                }
            }
        }
        (Mode::Ar, None) => {
            if order == HeadOrder::PlanFirst {
                segments.push(plan);
            }
            segments.push(Segment { kind: SegmentKind::ImgStart, len: 1 });
            // Decoding continues the sequence from here; under
            // generation-first the caller appends the plan slot after the
            // decoded image block.
        }
        (Mode::Fm, _) => {
            let queries = Segment {
                kind: SegmentKind::LatentQuery,
                len: spec.n_latent_query,
            };
            match order {
                HeadOrder::PlanFirst => {
                    segments.push(plan);
                    segments.push(queries);
                }
                HeadOrder::GenerationFirst => {
                    segments.push(queries);
                    segments.push(plan);
                }
            }
        }
    }

    let mut tokens = Vec::new();
    for seg in &segments {
        match seg.kind {
            SegmentKind::Bos => tokens.push(Some(vocab.bos())),
            SegmentKind::Command => {
                if command_token >= vocab.n_text {
                    return Err(ModelError::Layout(format!(
                        "command token {command_token} outside text range"
                    )));
                }
                tokens.push(Some(command_token));
            }
            SegmentKind::Scene | SegmentKind::History | SegmentKind::LatentQuery => {
                tokens.extend(std::iter::repeat(None).take(seg.len));
            }
            SegmentKind::Plan => tokens.push(Some(vocab.plan())),
            SegmentKind::ImgStart => tokens.push(Some(vocab.img_start())),
            SegmentKind::Image => {
                let teacher = teacher_image_tokens.expect("teacher tokens checked above");
                for &code_tok in teacher {
                    if vocab.code_of(code_tok).is_none() {
                        return Err(ModelError::Layout(format!(
                            "teacher token {code_tok} is not an image token"
                        )));
                    }
                    tokens.push(Some(code_tok));
                }
            }
            SegmentKind::ImgEnd => tokens.push(Some(vocab.img_end())),
            SegmentKind::Pad => tokens.push(Some(vocab.pad())),
        }
    }

    Ok(SequenceLayout {
        mode,
        order,
        segments,
        tokens,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> LayoutSpec {
        LayoutSpec {
            n_scene: 32,
            n_history: 8,
            image_len: 64,
            n_latent_query: 16,
        }
    }

    fn teacher(vocab: &Vocab) -> Vec<usize> {
        (0..64).map(|i| vocab.image_token(i % 7)).collect()
    }

    #[test]
    fn ar_plan_first_structure() {
        let v = Vocab::default();
        let t = teacher(&v);
        let l = build_sequence(&v, &spec(), 2, Mode::Ar, HeadOrder::PlanFirst, Some(&t)).unwrap();
        l.validate(&spec()).unwrap();
        assert_eq!(l.len(), 1 + 1 + 32 + 8 + 1 + 1 + 64 + 1);
        let plan = l.plan_pos().unwrap();
        let (start, _) = l.segment(SegmentKind::ImgStart).unwrap();
        let (img, len) = l.segment(SegmentKind::Image).unwrap();
        let (end, _) = l.segment(SegmentKind::ImgEnd).unwrap();
        assert!(plan < start && start < img && img + len == end);
        assert_eq!(l.tokens[0], Some(v.bos()));
        assert_eq!(l.tokens[1], Some(2));
    }

    #[test]
    fn generation_first_moves_plan_after_img_end() {
        let v = Vocab::default();
        let t = teacher(&v);
        let l = build_sequence(&v, &spec(), 0, Mode::Ar, HeadOrder::GenerationFirst, Some(&t))
            .unwrap();
        l.validate(&spec()).unwrap();
        let plan = l.plan_pos().unwrap();
        let (end, _) = l.segment(SegmentKind::ImgEnd).unwrap();
        assert!(plan > end);
        assert_eq!(plan, l.len() - 1);
    }

    #[test]
    fn fm_latent_queries_follow_plan() {
        let v = Vocab::default();
        let l = build_sequence(&v, &spec(), 1, Mode::Fm, HeadOrder::PlanFirst, None).unwrap();
        l.validate(&spec()).unwrap();
        let plan = l.plan_pos().unwrap();
        let (q, qlen) = l.segment(SegmentKind::LatentQuery).unwrap();
        assert_eq!(qlen, 16);
        assert_eq!(q, plan + 1);
        assert!(l.tokens[q..q + qlen].iter().all(Option::is_none));
    }

    #[test]
    fn wrong_teacher_count_is_layout_error() {
        let v = Vocab::default();
        let t: Vec<usize> = (0..63).map(|_| v.image_token(0)).collect();
        match build_sequence(&v, &spec(), 0, Mode::Ar, HeadOrder::PlanFirst, Some(&t)) {
            Err(ModelError::Layout(msg)) => assert!(msg.contains("63")),
            other => panic!("expected layout error, got {other:?}"),
        }
    }

    #[test]
    fn non_image_teacher_token_rejected() {
        let v = Vocab::default();
        let mut t = teacher(&v);
        t[10] = v.bos();
        assert!(build_sequence(&v, &spec(), 0, Mode::Ar, HeadOrder::PlanFirst, Some(&t)).is_err());
    }

    #[test]
    fn inference_prefix_ends_at_img_start() {
        let v = Vocab::default();
        let l = build_sequence(&v, &spec(), 3, Mode::Ar, HeadOrder::PlanFirst, None).unwrap();
        assert_eq!(l.segments.last().unwrap().kind, SegmentKind::ImgStart);
        assert_eq!(l.tokens.last().unwrap(), &Some(v.img_start()));
    }

    #[test]
    fn pad_insertion_keeps_other_positions() {
        let v = Vocab::default();
        let t = teacher(&v);
        let l = build_sequence(&v, &spec(), 2, Mode::Ar, HeadOrder::PlanFirst, Some(&t)).unwrap();
        let padded = l.with_pad(2, 3, &v);
        assert_eq!(padded.len(), l.len() + 3);
        assert_eq!(padded.pad_positions().iter().filter(|&&p| p).count(), 3);
        // Command token still present exactly once, after BOS.
        assert_eq!(padded.tokens[1], Some(2));
        assert_eq!(padded.kind_at(2), SegmentKind::Pad);
        assert_eq!(padded.plan_pos().unwrap(), l.plan_pos().unwrap() + 3);
    }

    #[test]
    fn validate_rejects_wrong_plan_order() {
        let v = Vocab::default();
        let t = teacher(&v);
        let mut l =
            build_sequence(&v, &spec(), 2, Mode::Ar, HeadOrder::PlanFirst, Some(&t)).unwrap();
        // Claim generation-first without moving the plan slot.
        l.order = HeadOrder::GenerationFirst;
        assert!(l.validate(&spec()).is_err());
    }
}
