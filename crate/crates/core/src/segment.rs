use serde::{Deserialize, Serialize};

use crate::error::{Result, TsgError};

/// Half-open temporal interval `[start, end)` in frame units.
///
/// Ground-truth segments sit on integer frames; refined predictions may not.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawSegment", into = "RawSegment")]
pub struct MomentSegment {
    start: f64,
    end: f64,
}

#[derive(Serialize, Deserialize)]
struct RawSegment {
    start: f64,
    end: f64,
}

impl TryFrom<RawSegment> for MomentSegment {
    type Error = TsgError;

    fn try_from(raw: RawSegment) -> Result<Self> {
        MomentSegment::new(raw.start, raw.end)
    }
}

impl From<MomentSegment> for RawSegment {
    fn from(s: MomentSegment) -> Self {
        RawSegment {
            start: s.start,
            end: s.end,
        }
    }
}

impl MomentSegment {
    pub fn new(start: f64, end: f64) -> Result<Self> {
        if !(start.is_finite() && end.is_finite() && start < end) {
            return Err(TsgError::Input(format!("invalid segment [{start}, {end})")));
        }
        Ok(Self { start, end })
    }

    pub fn frames(start: usize, end: usize) -> Result<Self> {
        Self::new(start as f64, end as f64)
    }

    /// Validates against a clip of `total` frames as well.
    pub fn within(start: f64, end: f64, total: f64) -> Result<Self> {
        let s = Self::new(start, end)?;
        if start < 0.0 || end > total {
            return Err(TsgError::Input(format!(
                "segment [{start}, {end}) outside [0, {total})"
            )));
        }
        Ok(s)
    }

    pub fn start(&self) -> f64 {
        self.start
    }

    pub fn end(&self) -> f64 {
        self.end
    }

    pub fn length(&self) -> f64 {
        self.end - self.start
    }

    pub fn center(&self) -> f64 {
        0.5 * (self.start + self.end)
    }

    /// Integer frame range, for segments known to lie on frame boundaries.
    pub fn frame_range(&self) -> (usize, usize) {
        (self.start.round() as usize, self.end.round() as usize)
    }

    /// Clips to `[0, horizon)`; `None` when nothing of positive length remains.
    pub fn clipped(&self, horizon: f64) -> Option<Self> {
        let s = self.start.max(0.0);
        let e = self.end.min(horizon);
        (s < e).then_some(Self { start: s, end: e })
    }

    pub fn intersection(&self, other: &Self) -> f64 {
        (self.end.min(other.end) - self.start.max(other.start)).max(0.0)
    }

    /// Temporal intersection over union on the real line.
    pub fn iou(&self, other: &Self) -> f64 {
        let inter = self.intersection(other);
        let union = self.length() + other.length() - inter;
        inter / union
    }
}
