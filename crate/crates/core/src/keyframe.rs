//! Key-frame selection by late-interaction similarity against a buffer of
//! previously retained frames.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{dot, EmbeddingError, EmbeddingMatrix, FrameRef};

pub const DEFAULT_SIGMA: f64 = 0.5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FilterError {
    #[error("sigma must lie in (0, 1], got {0}")]
    InvalidSigma(f64),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
}

/// Mean over query tokens of the best dot product against any token of `buffered`.
///
/// Asymmetric: `query` is the incoming frame.
pub fn late_interaction_sim(query: &EmbeddingMatrix, buffered: &EmbeddingMatrix) -> Result<f64, EmbeddingError> {
    if query.dim() != buffered.dim() {
        return Err(EmbeddingError::DimMismatch {
            left: query.dim(),
            right: buffered.dim(),
        });
    }
    let total: f64 = query
        .rows()
        .map(|q| {
            buffered
                .rows()
                .map(|b| dot(q, b))
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .sum();
    Ok(total / query.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterDecision {
    pub frame: FrameRef,
    pub keep: bool,
    /// `None` when the buffer was empty (maximum over an empty set).
    pub max_similarity: Option<f64>,
    pub matched: Option<FrameRef>,
}

impl FilterDecision {
    /// The line format of `sgr3 filter` output.
    pub fn to_record(&self) -> serde_json::Value {
        serde_json::json!({
            "frame": self.frame.frame_id,
            "keep": self.keep,
            "max_sim": self.max_similarity,
            "match": self.matched.as_ref().map(|f| f.frame_id.clone()),
        })
    }
}

/// Retained frames of one scan, in admission order.
#[derive(Debug, Clone)]
pub struct KeyFrameBuffer {
    frames: Vec<(FrameRef, EmbeddingMatrix)>,
    sigma: f64,
    max_len: Option<usize>,
}

impl KeyFrameBuffer {
    pub fn new(sigma: f64) -> Result<Self, FilterError> {
        if !(sigma > 0.0 && sigma <= 1.0) {
            return Err(FilterError::InvalidSigma(sigma));
        }
        Ok(Self {
            frames: Vec::new(),
            sigma,
            max_len: None,
        })
    }

    /// Caps the buffer; once full, the oldest retained frame is evicted.
    pub fn with_max_len(mut self, max_len: Option<usize>) -> Self {
        self.max_len = max_len.filter(|&n| n > 0);
        self
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frames(&self) -> impl Iterator<Item = &FrameRef> {
        self.frames.iter().map(|(f, _)| f)
    }

    /// Decides whether `frame` is a key frame and admits it if so.
    /// A frame is kept iff the buffer is empty or `max_b Sim(frame, b) <= sigma`.
    pub fn filter_frame(&mut self, frame: FrameRef, tokens: EmbeddingMatrix) -> Result<FilterDecision, FilterError> {
        let mut best: Option<(f64, usize)> = None;
        for (i, (_, buffered)) in self.frames.iter().enumerate() {
            let sim = late_interaction_sim(&tokens, buffered)?;
            if best.is_none_or(|(s, _)| sim > s) {
                best = Some((sim, i));
            }
        }
        let keep = best.is_none_or(|(s, _)| s <= self.sigma);
        let decision = FilterDecision {
            frame: frame.clone(),
            keep,
            max_similarity: best.map(|(s, _)| s),
            matched: best.map(|(_, i)| self.frames[i].0.clone()),
        };
        if keep {
            if let Some(cap) = self.max_len {
                if self.frames.len() == cap {
                    self.frames.remove(0);
                }
            }
            self.frames.push((frame, tokens));
        } else {
            log::debug!(
                "discarding {} (similarity {:.4} to {})",
                decision.frame,
                decision.max_similarity.unwrap_or(f64::NAN),
                decision.matched.as_ref().map(ToString::to_string).unwrap_or_default()
            );
        }
        Ok(decision)
    }
}

/// Runs a whole temporally ordered sequence through a fresh buffer.
pub fn filter_sequence(
    sigma: f64,
    frames: impl IntoIterator<Item = (FrameRef, EmbeddingMatrix)>,
) -> Result<Vec<FilterDecision>, FilterError> {
    let mut buffer = KeyFrameBuffer::new(sigma)?;
    frames
        .into_iter()
        .map(|(f, t)| buffer.filter_frame(f, t))
        .collect()
}
