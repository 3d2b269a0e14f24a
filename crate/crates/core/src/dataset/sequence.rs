use serde::{Deserialize, Serialize};

use super::{CorrectionTuple, DatasetError, DetectionSample};
use crate::toyworld::{detection_prompt, repair_prompt, GridConfig, TokenId, ToyImage};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Modality {
    Text,
    ImgCond,
    ImgGen,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskTag {
    Detect,
    S1Correct,
    VcotInitial,
    VcotIntermediate,
    VcotTerminate,
}

impl TaskTag {
    pub const ALL: [TaskTag; 5] = [
        TaskTag::Detect,
        TaskTag::S1Correct,
        TaskTag::VcotInitial,
        TaskTag::VcotIntermediate,
        TaskTag::VcotTerminate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TaskTag::Detect => "detect",
            TaskTag::S1Correct => "s1_correct",
            TaskTag::VcotInitial => "vcot_initial",
            TaskTag::VcotIntermediate => "vcot_intermediate",
            TaskTag::VcotTerminate => "vcot_terminate",
        }
    }

    pub fn parse(name: &str) -> Result<Self, DatasetError> {
        Self::ALL
            .into_iter()
            .find(|t| t.name() == name)
            .ok_or_else(|| DatasetError::UnknownState(name.to_string()))
    }

    pub fn uses_correction_data(self) -> bool {
        self != TaskTag::Detect
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenValue {
    Text(TokenId),
    /// Spatial site `i·W + j` of the segment's image.
    Site(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeqToken {
    pub modality: Modality,
    pub value: TokenValue,
    pub segment: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub kind: Modality,
    pub start: usize,
    pub len: usize,
    /// Pixel content of an `ImgCond` segment.
    pub image: Option<ToyImage>,
}

impl Segment {
    pub fn end(&self) -> usize {
        self.start + self.len
    }
}

/// Interleaved text/image token sequence with per-token loss masks.
///
/// `ar_loss_mask[j]` marks text tokens that are generation targets (their
/// logits come from position `j - 1`); `fm_loss_mask` marks `ImgGen` tokens
/// that carry velocity supervision.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MultimodalSequence {
    pub tokens: Vec<SeqToken>,
    pub segments: Vec<Segment>,
    pub ar_loss_mask: Vec<bool>,
    pub fm_loss_mask: Vec<bool>,
    pub l_con: usize,
}

impl MultimodalSequence {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    fn open_segment(&mut self, kind: Modality, image: Option<ToyImage>) -> usize {
        self.segments.push(Segment {
            kind,
            start: self.tokens.len(),
            len: 0,
            image,
        });
        self.segments.len() - 1
    }

    fn push_token(&mut self, modality: Modality, value: TokenValue, ar: bool, fm: bool) {
        let segment = self.segments.len() - 1;
        self.tokens.push(SeqToken {
            modality,
            value,
            segment,
        });
        self.ar_loss_mask.push(ar);
        self.fm_loss_mask.push(fm);
        self.segments[segment].len += 1;
        self.refresh_l_con();
    }

    fn refresh_l_con(&mut self) {
        self.l_con = (0..self.tokens.len())
            .find(|&i| self.ar_loss_mask[i] || self.fm_loss_mask[i])
            .unwrap_or(self.tokens.len());
    }

    pub fn push_text(&mut self, ids: &[TokenId], supervised: bool) -> &mut Self {
        self.open_segment(Modality::Text, None);
        for &id in ids {
            self.push_token(Modality::Text, TokenValue::Text(id), supervised, false);
        }
        self
    }

    /// Append tokens to the trailing text segment (used by decoding).
    pub fn extend_text(&mut self, ids: &[TokenId]) -> &mut Self {
        if self.segments.last().map(|s| s.kind) != Some(Modality::Text) {
            self.open_segment(Modality::Text, None);
        }
        for &id in ids {
            self.push_token(Modality::Text, TokenValue::Text(id), false, false);
        }
        self
    }

    pub fn push_image_cond(&mut self, image: &ToyImage) -> &mut Self {
        let sites = image.grid().sites();
        self.open_segment(Modality::ImgCond, Some(image.clone()));
        for s in 0..sites {
            self.push_token(Modality::ImgCond, TokenValue::Site(s), false, false);
        }
        self
    }

    /// Placeholder block whose values are supplied as `z_t` at forward time.
    pub fn push_image_gen(&mut self, grid: GridConfig, supervised: bool) -> &mut Self {
        self.open_segment(Modality::ImgGen, None);
        for s in 0..grid.sites() {
            self.push_token(Modality::ImgGen, TokenValue::Site(s), false, supervised);
        }
        self
    }

    pub fn positions(&self, modality: Modality) -> Vec<usize> {
        self.tokens
            .iter()
            .enumerate()
            .filter(|(_, t)| t.modality == modality)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn has_gen(&self) -> bool {
        self.tokens.iter().any(|t| t.modality == Modality::ImgGen)
    }

    pub fn text_id(&self, i: usize) -> Option<TokenId> {
        match self.tokens[i].value {
            TokenValue::Text(id) => Some(id),
            TokenValue::Site(_) => None,
        }
    }

    /// `(predictor_position, target_id)` for every AR-supervised token.
    pub fn ar_targets(&self) -> Vec<(usize, TokenId)> {
        (1..self.tokens.len())
            .filter(|&j| self.ar_loss_mask[j])
            .filter_map(|j| self.text_id(j).map(|id| (j - 1, id)))
            .collect()
    }

    pub fn num_ar_supervised(&self) -> usize {
        self.ar_loss_mask.iter().filter(|&&b| b).count()
    }
}

/// One assembled training example.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub sequence: MultimodalSequence,
    pub task_tag: TaskTag,
    pub fm_target: Option<ToyImage>,
}

#[derive(Debug, Clone, Copy)]
pub enum AssemblyInput<'a> {
    Detection(&'a DetectionSample),
    Correction(&'a CorrectionTuple),
}

/// Lay out segments and loss masks for one curriculum state.
///
/// `vcot_intermediate` yields one sample per mid image; every other state
/// yields exactly one.
pub fn assemble(input: AssemblyInput<'_>, state: TaskTag) -> Result<Vec<TrainSample>, DatasetError> {
    match (state, input) {
        (TaskTag::Detect, AssemblyInput::Detection(d)) => {
            let mut seq = MultimodalSequence::new();
            seq.push_image_cond(&d.image)
                .push_text(&detection_prompt(), false)
                .push_text(&d.answer_text, true);
            Ok(vec![TrainSample {
                sequence: seq,
                task_tag: state,
                fm_target: None,
            }])
        }
        (TaskTag::S1Correct, AssemblyInput::Correction(t)) => {
            let mut seq = MultimodalSequence::new();
            seq.push_image_cond(&t.artifact_image)
                .push_text(&t.diag_text, false)
                .push_image_gen(t.correct_image.grid(), true);
            Ok(vec![TrainSample {
                sequence: seq,
                task_tag: state,
                fm_target: Some(t.correct_image.clone()),
            }])
        }
        (TaskTag::VcotInitial, AssemblyInput::Correction(t)) => {
            let mut seq = MultimodalSequence::new();
            seq.push_text(&repair_prompt(), false)
                .push_image_cond(&t.artifact_image)
                .push_text(&t.diag_text, true)
                .push_image_gen(t.correct_image.grid(), true);
            Ok(vec![TrainSample {
                sequence: seq,
                task_tag: state,
                fm_target: Some(t.correct_image.clone()),
            }])
        }
        (TaskTag::VcotIntermediate, AssemblyInput::Correction(t)) => Ok(t
            .mid_images
            .iter()
            .map(|mid| {
                let mut seq = MultimodalSequence::new();
                seq.push_text(&repair_prompt(), false)
                    .push_image_cond(mid)
                    .push_image_gen(t.correct_image.grid(), true);
                TrainSample {
                    sequence: seq,
                    task_tag: state,
                    fm_target: Some(t.correct_image.clone()),
                }
            })
            .collect()),
        (TaskTag::VcotTerminate, AssemblyInput::Correction(t)) => {
            let mut seq = MultimodalSequence::new();
            seq.push_text(&repair_prompt(), false)
                .push_image_cond(&t.correct_image)
                .push_text(&t.stop_text, true)
                .push_image_gen(t.correct_image.grid(), true);
            Ok(vec![TrainSample {
                sequence: seq,
                task_tag: state,
                fm_target: Some(t.correct_image.clone()),
            }])
        }
        (state, _) => Err(DatasetError::WrongInput { state: state.name() }),
    }
}
