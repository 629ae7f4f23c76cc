//! Window-level scene-graph generation: key frames are cut into windows, each
//! window is prompted with its images, the retrieved reference edges and the
//! current global graph, and the parsed reply is merged into the global graph.

pub mod chat;
pub mod parse;
pub mod pipeline;
pub mod prompt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::FrameRef;
use crate::keyframe::FilterError;
use crate::retrieval::RetrievalError;

pub use chat::{
    ChatClient, ChatContext, ChatError, ChatExchange, ChatJudge, ChatPurpose, ChatRequest, ChatScript, EchoChat,
    FixedChat, HttpChatClient, ReplayChat, ScriptedChat,
};
pub use parse::{parse_window_graph, ParseError, WindowGraph};
pub use pipeline::{run_pipeline, run_scenes, RunReport, SceneInput, SceneResult, WindowReport, WindowStatus};
pub use prompt::{abstract_references, abstraction_request, build_prompt, ReferenceBlock, PROMPT_VERSION};

#[derive(Debug, Error)]
pub enum GenerationError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Filter(#[from] FilterError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Chat(#[from] ChatError),
}

/// How reference edges enter the prompt.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    /// Reference triplets verbatim.
    #[default]
    Raw,
    /// A model-written summary of predicate usage replaces the triplets.
    Abstraction,
    /// No retrieval; the model sees only images and the current graph.
    None,
}

impl PromptMode {
    pub fn as_str(self) -> &'static str {
        match self {
            PromptMode::Raw => "raw",
            PromptMode::Abstraction => "abstraction",
            PromptMode::None => "none",
        }
    }
}

impl std::fmt::Display for PromptMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for PromptMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "raw" => Ok(Self::Raw),
            "abstraction" => Ok(Self::Abstraction),
            "none" => Ok(Self::None),
            other => Err(format!("unknown prompt mode `{other}` (expected raw, abstraction or none)")),
        }
    }
}

/// Consecutive key frames handled by one chat call.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub index: usize,
    pub frames: Vec<(FrameRef, Vec<u8>)>,
}

/// Non-overlapping chunks of `size` frames in temporal order; the last one may
/// be shorter.
pub fn make_windows(keyframes: Vec<(FrameRef, Vec<u8>)>, size: usize) -> Result<Vec<Window>, GenerationError> {
    if size == 0 {
        return Err(GenerationError::Config("window size must be at least 1".into()));
    }
    let mut windows = Vec::new();
    let mut iter = keyframes.into_iter().peekable();
    while iter.peek().is_some() {
        windows.push(Window {
            index: windows.len(),
            frames: iter.by_ref().take(size).collect(),
        });
    }
    Ok(windows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frames(n: usize) -> Vec<(FrameRef, Vec<u8>)> {
        (0..n).map(|i| (FrameRef::new("s", format!("f{i}"), i as u32), vec![i as u8])).collect()
    }

    #[test]
    fn window_sizes() {
        assert!(make_windows(frames(0), 5).unwrap().is_empty());
        let w = make_windows(frames(7), 5).unwrap();
        assert_eq!(w.iter().map(|w| w.frames.len()).collect::<Vec<_>>(), [5, 2]);
        assert_eq!(w[1].index, 1);
        assert_eq!(w[1].frames[0].0.frame_id, "f5");
        assert_eq!(make_windows(frames(5), 5).unwrap().len(), 1);
        assert!(make_windows(frames(3), 0).is_err());
    }

    #[test]
    fn prompt_mode_names() {
        for m in [PromptMode::Raw, PromptMode::Abstraction, PromptMode::None] {
            assert_eq!(m.as_str().parse::<PromptMode>().unwrap(), m);
            assert_eq!(serde_json::to_value(m).unwrap(), m.as_str());
        }
    }
}
