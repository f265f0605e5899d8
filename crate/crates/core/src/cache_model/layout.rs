use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SegmentKind {
    Text,
    /// A screenshot. `step` is the frame age: 0 is the current frame, 1 the
    /// one before it, and so on.
    VisualFrame { step: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub start: usize,
    pub end: usize,
    #[serde(flatten)]
    pub kind: SegmentKind,
}

impl Segment {
    pub fn text(start: usize, end: usize) -> Self {
        Self {
            start,
            end,
            kind: SegmentKind::Text,
        }
    }

    pub fn frame(start: usize, end: usize, step: u32) -> Self {
        Self {
            start,
            end,
            kind: SegmentKind::VisualFrame { step },
        }
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn indices(&self) -> std::ops::Range<usize> {
        self.start..self.end
    }

    pub fn step(&self) -> Option<u32> {
        match self.kind {
            SegmentKind::VisualFrame { step } => Some(step),
            SegmentKind::Text => None,
        }
    }

    pub fn is_visual(&self) -> bool {
        self.step().is_some()
    }
}

/// Token sequence split into text runs and screenshot runs, plus the length
/// of the trailing observation window.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptLayout {
    n: usize,
    segments: Vec<Segment>,
    omega: usize,
}

impl PromptLayout {
    /// Validates that `segments` tile `[0, n)` in order and that frame steps
    /// are unique with exactly one current frame.
    pub fn new(segments: Vec<Segment>, omega: usize) -> Result<Self> {
        if segments.is_empty() {
            return Err(Error::EmptyLayout);
        }
        let mut cursor = 0;
        for seg in &segments {
            if seg.start > cursor {
                return Err(Error::LayoutGap(cursor));
            }
            if seg.start < cursor {
                return Err(Error::LayoutOverlap(seg.start));
            }
            if seg.is_empty() {
                return Err(Error::EmptySegment(seg.start));
            }
            cursor = seg.end;
        }
        let n = cursor;

        let mut steps = HashSet::new();
        let mut any_visual = false;
        for step in segments.iter().filter_map(Segment::step) {
            any_visual = true;
            if !steps.insert(step) {
                return Err(if step == 0 {
                    Error::DuplicateCurrentFrame
                } else {
                    Error::DuplicateFrameStep(step)
                });
            }
        }
        if any_visual && !steps.contains(&0) {
            return Err(Error::MissingCurrentFrame);
        }
        if omega == 0 || omega > n {
            return Err(Error::OmegaOutOfRange { omega, n });
        }
        Ok(Self { n, segments, omega })
    }

    pub fn with_omega(&self, omega: usize) -> Result<Self> {
        Self::new(self.segments.clone(), omega)
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn omega(&self) -> usize {
        self.omega
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    /// First index of the observation window.
    pub fn window_start(&self) -> usize {
        self.n - self.omega
    }

    pub fn window(&self) -> std::ops::Range<usize> {
        self.window_start()..self.n
    }

    pub fn current_frame(&self) -> Option<&Segment> {
        self.segments.iter().find(|s| s.step() == Some(0))
    }

    /// Visual segments other than the current frame, in token order.
    pub fn previous_frames(&self) -> impl Iterator<Item = &Segment> {
        self.segments
            .iter()
            .filter(|s| matches!(s.step(), Some(step) if step > 0))
    }

    pub fn visual_segments(&self) -> impl Iterator<Item = &Segment> {
        self.segments.iter().filter(|s| s.is_visual())
    }

    pub fn current_frame_indices(&self) -> Vec<usize> {
        self.current_frame().map_or_else(Vec::new, |s| s.indices().collect())
    }

    pub fn previous_frame_indices(&self) -> Vec<usize> {
        self.previous_frames().flat_map(Segment::indices).collect()
    }

    pub fn frame_count(&self) -> usize {
        self.visual_segments().count()
    }

    /// Per-token visual flag.
    pub fn visual_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.n];
        for seg in self.visual_segments() {
            mask[seg.indices()].iter_mut().for_each(|m| *m = true);
        }
        mask
    }
}

/// Convenience layout: `prefix` text tokens, `frames` screenshots of
/// `tokens_per_frame` each (oldest first), then `suffix` text tokens.
pub fn gui_layout(
    prefix: usize,
    frames: usize,
    tokens_per_frame: usize,
    suffix: usize,
    omega: usize,
) -> Result<PromptLayout> {
    let mut segments = Vec::with_capacity(frames + 2);
    let mut at = 0;
    if prefix > 0 {
        segments.push(Segment::text(0, prefix));
        at = prefix;
    }
    for f in 0..frames {
        let step = (frames - 1 - f) as u32;
        segments.push(Segment::frame(at, at + tokens_per_frame, step));
        at += tokens_per_frame;
    }
    if suffix > 0 {
        segments.push(Segment::text(at, at + suffix));
    }
    PromptLayout::new(segments, omega)
}
