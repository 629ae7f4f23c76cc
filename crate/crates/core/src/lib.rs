//! Training-free 3D scene-graph generation from RGB frame sequences with
//! retrieval-augmented prompting.

pub mod config;
pub mod dataset;
pub mod embedding;
pub mod evaluation;
pub mod generation;
mod http;
pub mod keyframe;
pub mod knowledge_base;
pub mod retrieval;
pub mod scene_graph;

pub use embedding::{Embedder, EmbeddingMatrix, EmbeddingSource, FrameRef, HttpEmbedder, MockEmbedder, ServerMeta};
pub use keyframe::{FilterDecision, KeyFrameBuffer};
pub use knowledge_base::{build_kb, load_kb, save_kb, KnowledgeBase};
pub use retrieval::{RetrievalMode, RetrievalParams};
pub use scene_graph::{LabeledTriplet, ObjectNode, SceneGraph, Triplet};
