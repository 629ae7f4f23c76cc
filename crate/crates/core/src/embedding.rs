//! Dense embedding matrices and the embedder contract.
//!
//! Two services are consumed: a patch embedder (one row per image patch, used
//! for knowledge-base retrieval) and a token embedder (one row per visual
//! token, used for key-frame filtering). [`MockEmbedder`] is a deterministic
//! stand-in; [`HttpEmbedder`] talks to any backend serving the wire contract.

use std::time::Duration;

use base64::Engine as _;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use xxhash_rust::xxh64::xxh64;

/// Row norms must be within this distance of 1.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-6;
/// Looser bound accepted from remote backends before rows are re-normalized.
pub const WIRE_NORM_TOLERANCE: f64 = 1e-5;
pub const DEFAULT_PATCH_DIM: usize = 768;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EmbeddingError {
    #[error("cannot normalize a zero-norm vector")]
    ZeroNorm,
    #[error("embedding matrix has no rows")]
    Empty,
    #[error("row {row} has length {got}, expected {expected}")]
    RaggedRow { row: usize, got: usize, expected: usize },
    #[error("row {row} has norm {norm}, expected unit norm")]
    NotUnitNorm { row: usize, norm: f64 },
    #[error("row {row} contains a non-finite value")]
    NonFinite { row: usize },
    #[error("dimension mismatch: {left} vs {right}")]
    DimMismatch { left: usize, right: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingSource {
    Patch,
    Token,
}

impl EmbeddingSource {
    fn tag(self) -> u64 {
        match self {
            EmbeddingSource::Patch => 0x7061_7463,
            EmbeddingSource::Token => 0x746f_6b65,
        }
    }
}

/// Identifies one frame of one scan. `ordinal` is the temporal position
/// within the scene.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct FrameRef {
    pub scene_id: String,
    pub frame_id: String,
    pub ordinal: u32,
}

impl FrameRef {
    pub fn new(scene_id: impl Into<String>, frame_id: impl Into<String>, ordinal: u32) -> Self {
        Self {
            scene_id: scene_id.into(),
            frame_id: frame_id.into(),
            ordinal,
        }
    }
}

impl std::fmt::Display for FrameRef {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}/{}", self.scene_id, self.frame_id)
    }
}

/// Returns `v / ‖v‖`.
pub fn normalize(v: &[f64]) -> Result<Vec<f64>, EmbeddingError> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !norm.is_finite() {
        return Err(EmbeddingError::NonFinite { row: 0 });
    }
    if norm == 0.0 {
        return Err(EmbeddingError::ZeroNorm);
    }
    Ok(v.iter().map(|x| x / norm).collect())
}

pub(crate) fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| f64::from(x) * f64::from(y)).sum()
}

fn norm_f32(row: &[f32]) -> f64 {
    dot(row, row).sqrt()
}

/// An ordered, non-empty list of unit-norm rows sharing one dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    data: Vec<f32>,
    dim: usize,
    source: EmbeddingSource,
}

impl EmbeddingMatrix {
    /// Accepts rows that are already unit-norm within [`UNIT_NORM_TOLERANCE`].
    pub fn from_rows(rows: Vec<Vec<f32>>, source: EmbeddingSource) -> Result<Self, EmbeddingError> {
        Self::assemble(rows, source, UNIT_NORM_TOLERANCE, false)
    }

    /// Normalizes every row; fails on zero-norm rows.
    pub fn normalized(rows: Vec<Vec<f64>>, source: EmbeddingSource) -> Result<Self, EmbeddingError> {
        let rows = rows
            .iter()
            .map(|r| normalize(r).map(|n| n.into_iter().map(|x| x as f32).collect()))
            .collect::<Result<Vec<Vec<f32>>, _>>()?;
        Self::from_rows(rows, source)
    }

    /// Checks rows against `tolerance` and then re-normalizes them in double
    /// precision so the stored matrix meets [`UNIT_NORM_TOLERANCE`].
    pub(crate) fn from_wire_rows(rows: Vec<Vec<f32>>, source: EmbeddingSource) -> Result<Self, EmbeddingError> {
        Self::assemble(rows, source, WIRE_NORM_TOLERANCE, true)
    }

    fn assemble(
        rows: Vec<Vec<f32>>,
        source: EmbeddingSource,
        tolerance: f64,
        renormalize: bool,
    ) -> Result<Self, EmbeddingError> {
        let dim = rows.first().map(Vec::len).ok_or(EmbeddingError::Empty)?;
        if dim == 0 {
            return Err(EmbeddingError::ZeroNorm);
        }
        let mut data = Vec::with_capacity(rows.len() * dim);
        for (i, row) in rows.into_iter().enumerate() {
            if row.len() != dim {
                return Err(EmbeddingError::RaggedRow { row: i, got: row.len(), expected: dim });
            }
            if row.iter().any(|x| !x.is_finite()) {
                return Err(EmbeddingError::NonFinite { row: i });
            }
            let norm = norm_f32(&row);
            if (norm - 1.0).abs() > tolerance {
                return Err(EmbeddingError::NotUnitNorm { row: i, norm });
            }
            if renormalize {
                data.extend(row.iter().map(|&x| (f64::from(x) / norm) as f32));
            } else {
                data.extend(row);
            }
        }
        Ok(Self { data, dim, source })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn source(&self) -> EmbeddingSource {
        self.source
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f32]> + DoubleEndedIterator + '_ {
        self.data.chunks_exact(self.dim)
    }

    pub fn as_flat(&self) -> &[f32] {
        &self.data
    }

    /// Re-normalized mean of all rows: a single image-level vector.
    pub fn mean_vector(&self) -> Result<Vec<f32>, EmbeddingError> {
        let mut acc = vec![0.0f64; self.dim];
        for row in self.rows() {
            for (a, &x) in acc.iter_mut().zip(row) {
                *a += f64::from(x);
            }
        }
        Ok(normalize(&acc)?.into_iter().map(|x| x as f32).collect())
    }
}

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("embedding backend unreachable after {attempts} attempt(s): {message}")]
    Transport { attempts: usize, message: String },
    #[error("embedding backend returned status {status}: {message}")]
    Backend { status: u16, message: String },
    #[error("embedding response violates the contract: {0}")]
    Contract(String),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
}

/// The two embedding endpoints consumed by the pipeline.
pub trait Embedder: Send + Sync {
    fn embed_patches(&self, image: &[u8]) -> Result<EmbeddingMatrix, EmbedError>;
    fn embed_tokens(&self, image: &[u8]) -> Result<EmbeddingMatrix, EmbedError>;
    /// Short description recorded in run artifacts.
    fn describe(&self) -> String;
}

/// Deterministic embedder keyed on the image bytes.
///
/// Row `i` is drawn from a ChaCha8 stream seeded with an xxh64 digest of
/// (image digest, source, i): `dim` standard-normal variates, normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MockEmbedder {
    pub dim: usize,
    pub patches: usize,
    pub tokens: usize,
}

impl Default for MockEmbedder {
    fn default() -> Self {
        Self {
            dim: DEFAULT_PATCH_DIM,
            patches: 16,
            tokens: 32,
        }
    }
}

impl MockEmbedder {
    pub fn with_dim(dim: usize) -> Self {
        Self { dim, ..Self::default() }
    }

    fn matrix(&self, image: &[u8], rows: usize, source: EmbeddingSource) -> Result<EmbeddingMatrix, EmbedError> {
        if self.dim == 0 || rows == 0 {
            return Err(EmbedError::Contract("mock embedder configured with zero dim or rows".into()));
        }
        let digest = xxh64(image, 0);
        let rows = (0..rows)
            .map(|i| {
                let mut seed_bytes = [0u8; 24];
                seed_bytes[..8].copy_from_slice(&digest.to_le_bytes());
                seed_bytes[8..16].copy_from_slice(&source.tag().to_le_bytes());
                seed_bytes[16..].copy_from_slice(&(i as u64).to_le_bytes());
                let mut rng = ChaCha8Rng::seed_from_u64(xxh64(&seed_bytes, 0));
                (0..self.dim)
                    .map(|_| StandardNormal.sample(&mut rng))
                    .collect::<Vec<f64>>()
            })
            .collect();
        Ok(EmbeddingMatrix::normalized(rows, source)?)
    }
}

impl Embedder for MockEmbedder {
    fn embed_patches(&self, image: &[u8]) -> Result<EmbeddingMatrix, EmbedError> {
        self.matrix(image, self.patches, EmbeddingSource::Patch)
    }

    fn embed_tokens(&self, image: &[u8]) -> Result<EmbeddingMatrix, EmbedError> {
        self.matrix(image, self.tokens, EmbeddingSource::Token)
    }

    fn describe(&self) -> String {
        format!("mock(dim={},patches={},tokens={})", self.dim, self.patches, self.tokens)
    }
}

#[derive(Debug, Serialize)]
struct EmbedRequest<'a> {
    image_b64: &'a str,
}

#[derive(Debug, Deserialize)]
struct EmbedResponse {
    dim: usize,
    rows: Vec<Vec<f32>>,
}

#[derive(Debug, Deserialize)]
pub(crate) struct ErrorBody {
    pub(crate) error: String,
}

/// Client for `POST /v1/embed_patches` and `POST /v1/embed_tokens`.
#[derive(Debug, Clone)]
pub struct HttpEmbedder {
    base_url: String,
    retries: usize,
    agent: ureq::Agent,
}

impl HttpEmbedder {
    pub fn new(base_url: impl Into<String>, timeout: Duration, retries: usize) -> Self {
        Self {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            retries,
            agent: crate::http::agent(timeout),
        }
    }

    fn call(&self, path: &str, image: &[u8], source: EmbeddingSource) -> Result<EmbeddingMatrix, EmbedError> {
        let b64 = base64::engine::general_purpose::STANDARD.encode(image);
        let url = format!("{}{}", self.base_url, path);
        let body = serde_json::to_vec(&EmbedRequest { image_b64: &b64 })
            .map_err(|e| EmbedError::Contract(e.to_string()))?;
        let (status, text) = crate::http::post_json(&self.agent, &url, &body, self.retries)
            .map_err(|(attempts, message)| EmbedError::Transport { attempts, message })?;
        if status != 200 {
            let message = serde_json::from_str::<ErrorBody>(&text)
                .map(|b| b.error)
                .unwrap_or(text);
            return Err(EmbedError::Backend { status, message });
        }
        let resp: EmbedResponse =
            serde_json::from_str(&text).map_err(|e| EmbedError::Contract(e.to_string()))?;
        if resp.rows.is_empty() {
            return Err(EmbedError::Contract("response has no rows".into()));
        }
        if let Some((row, r)) = resp.rows.iter().enumerate().find(|(_, r)| r.len() != resp.dim) {
            return Err(EmbedError::Contract(format!(
                "row {row} has length {} but dim is {}",
                r.len(),
                resp.dim
            )));
        }
        EmbeddingMatrix::from_wire_rows(resp.rows, source)
            .map_err(|e| EmbedError::Contract(e.to_string()))
    }
}

/// Body of `GET /v1/meta`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServerMeta {
    pub patch_dim: usize,
    pub token_dim: usize,
    #[serde(default)]
    pub models: serde_json::Value,
}

impl HttpEmbedder {
    pub fn meta(&self) -> Result<ServerMeta, EmbedError> {
        let url = format!("{}/v1/meta", self.base_url);
        let (status, text) = crate::http::get(&self.agent, &url, self.retries)
            .map_err(|(attempts, message)| EmbedError::Transport { attempts, message })?;
        if status != 200 {
            let message = serde_json::from_str::<ErrorBody>(&text)
                .map(|b| b.error)
                .unwrap_or(text);
            return Err(EmbedError::Backend { status, message });
        }
        serde_json::from_str(&text).map_err(|e| EmbedError::Contract(e.to_string()))
    }
}

impl Embedder for HttpEmbedder {
    fn embed_patches(&self, image: &[u8]) -> Result<EmbeddingMatrix, EmbedError> {
        self.call("/v1/embed_patches", image, EmbeddingSource::Patch)
    }

    fn embed_tokens(&self, image: &[u8]) -> Result<EmbeddingMatrix, EmbedError> {
        self.call("/v1/embed_tokens", image, EmbeddingSource::Token)
    }

    fn describe(&self) -> String {
        format!("http({})", self.base_url)
    }
}
