use crate::error::{Error, Result};

/// A detected or annotated event: class index, boundaries in seconds and a
/// confidence in `[0, 1]` (1 for ground truth).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Event {
    pub class: usize,
    pub start: f64,
    pub end: f64,
    pub confidence: f64,
}

impl Event {
    pub fn new(class: usize, start: f64, end: f64, confidence: f64) -> Result<Self> {
        if !(start.is_finite() && end.is_finite()) || start >= end {
            return Err(Error::InvalidEvent(format!(
                "class {class}: onset {start} must precede offset {end}"
            )));
        }
        if !(0.0..=1.0).contains(&confidence) {
            return Err(Error::InvalidEvent(format!(
                "class {class}: confidence {confidence} outside [0, 1]"
            )));
        }
        Ok(Self {
            class,
            start,
            end,
            confidence,
        })
    }

    pub fn truth(class: usize, start: f64, end: f64) -> Result<Self> {
        Self::new(class, start, end, 1.0)
    }

    pub fn duration(&self) -> f64 {
        self.end - self.start
    }

    /// Length of the intersection with `[start, end]`.
    pub fn overlap(&self, start: f64, end: f64) -> f64 {
        (self.end.min(end) - self.start.max(start)).max(0.0)
    }

    /// Times rounded to milliseconds and confidence to 1e-4, the precision
    /// of the events file.
    pub fn quantized(&self) -> Self {
        Self {
            start: (self.start * 1e3).round() / 1e3,
            end: (self.end * 1e3).round() / 1e3,
            confidence: (self.confidence * 1e4).round() / 1e4,
            ..*self
        }
    }
}

/// Orders by class, then onset, then offset.
pub fn sort_events(events: &mut [Event]) {
    events.sort_by(|a, b| {
        a.class
            .cmp(&b.class)
            .then(a.start.total_cmp(&b.start))
            .then(a.end.total_cmp(&b.end))
            .then(b.confidence.total_cmp(&a.confidence))
    });
}
