//! Shared run configuration, echoed into every artifact.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::generation::PromptMode;
use crate::keyframe::DEFAULT_SIGMA;
use crate::knowledge_base::DEFAULT_TOP_K;
use crate::retrieval::{RetrievalMode, RetrievalParams, DEFAULT_TAU, DEFAULT_TOP_FRAMES};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const DEFAULT_WINDOW: usize = 5;

#[derive(Debug, Error, Clone, PartialEq)]
#[error("invalid configuration: {0}")]
pub struct ConfigError(pub String);

/// Effective pipeline configuration.
///
/// Paths and the degree of parallelism are deliberately not part of it, so two
/// runs that differ only in those produce identical artifacts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub sigma: f64,
    /// Key-frame filtering on/off (off keeps every frame).
    pub filter: bool,
    /// Buffer cap for the key-frame filter; `None` is unbounded.
    pub max_buffer: Option<usize>,
    pub k: usize,
    pub tau: f64,
    pub window: usize,
    pub top_frames: usize,
    pub mode: RetrievalMode,
    pub prompt_mode: PromptMode,
    pub kb_fraction: f64,
    pub seed: u64,
    /// Wall-clock per window in the run report. Off by default since timings
    /// make reports non-reproducible.
    pub record_timings: bool,
    /// Backend descriptions (mock parameters or base URLs).
    pub embedder: String,
    pub chat: String,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            sigma: DEFAULT_SIGMA,
            filter: true,
            max_buffer: None,
            k: DEFAULT_TOP_K,
            tau: DEFAULT_TAU,
            window: DEFAULT_WINDOW,
            top_frames: DEFAULT_TOP_FRAMES,
            mode: RetrievalMode::WeightedPatch,
            prompt_mode: PromptMode::Raw,
            kb_fraction: 1.0,
            seed: 0,
            record_timings: false,
            embedder: String::new(),
            chat: String::new(),
        }
    }
}

impl Config {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |m: String| Err(ConfigError(m));
        if !(self.sigma > 0.0 && self.sigma <= 1.0) {
            return fail(format!("sigma must lie in (0, 1], got {}", self.sigma));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return fail(format!("tau must be positive, got {}", self.tau));
        }
        if self.k == 0 {
            return fail("k must be at least 1".into());
        }
        if self.window == 0 {
            return fail("window must be at least 1".into());
        }
        if self.top_frames == 0 {
            return fail("top-frames must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.kb_fraction) {
            return fail(format!("kb-fraction must lie in [0, 1], got {}", self.kb_fraction));
        }
        if self.max_buffer == Some(0) {
            return fail("max-buffer must be at least 1 when set".into());
        }
        Ok(())
    }

    pub fn retrieval_params(&self) -> RetrievalParams {
        RetrievalParams {
            k: self.k,
            tau: self.tau,
            mode: self.mode,
        }
    }

    /// Reads a config either on its own or embedded under `"config"` in a run
    /// artifact.
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| ConfigError(e.to_string()))?;
        let inner = match value.get("config") {
            Some(c) => c.clone(),
            None => match value.get("meta").and_then(|m| m.get("config")) {
                Some(c) => c.clone(),
                None => value,
            },
        };
        let config: Config = serde_json::from_value(inner).map_err(|e| ConfigError(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }
}
