//! External knowledge base: patch embeddings of annotated frames, each row
//! mapped back to its frame and that frame's ground-truth subgraph.
//!
//! The default search backend is an exact flat scan. Scores are dot products
//! of unit vectors accumulated in `f64`; ties are broken by
//! `(scene_id, frame_id, patch_index)` ascending so results are reproducible.

mod ivf;
mod store;

use std::cmp::Ordering;
use std::collections::{BTreeSet, HashMap};
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::embedding::{dot, Embedder, EmbeddingMatrix, FrameRef};
use crate::scene_graph::{GraphJsonError, SceneGraph};

pub use ivf::IvfParams;
pub use store::{load_kb, save_kb, Manifest, KB_FORMAT_VERSION};

pub const DEFAULT_TOP_K: usize = 10;

#[derive(Debug, Error)]
pub enum KbError {
    #[error("embedding dimension mismatch: knowledge base has {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("k must be at least 1")]
    InvalidK,
    #[error("duplicate frame {0}")]
    DuplicateFrame(String),
    #[error("identifier `{0}` cannot be used as a path component")]
    InvalidId(String),
    #[error("unknown scene `{0}`")]
    UnknownScene(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("unsupported knowledge base version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("embeddings.bin is truncated: expected {expected} bytes, found {found}")]
    Truncated { expected: u64, found: u64 },
    #[error("embeddings.bin checksum mismatch: manifest {expected}, computed {actual}")]
    ChecksumMismatch { expected: String, actual: String },
    #[error("malformed manifest.json: {0}")]
    Manifest(String),
    #[error("malformed entries.jsonl line {line}: {message}")]
    Entries { line: usize, message: String },
    #[error("subgraph {path}: {source}")]
    Subgraph {
        path: PathBuf,
        #[source]
        source: GraphJsonError,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct EntryMeta {
    frame: u32,
    patch: u32,
}

/// A borrowed view of one stored patch.
#[derive(Debug, Clone, Copy)]
pub struct KbEntry<'a> {
    pub row: usize,
    pub frame: &'a FrameRef,
    pub patch_index: usize,
    pub embedding: &'a [f32],
}

/// One search result: a row of the knowledge base and its cosine score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PatchHit {
    pub row: usize,
    pub score: f64,
}

#[derive(Debug, Clone, Default)]
enum SearchBackend {
    #[default]
    Flat,
    Ivf(ivf::IvfIndex),
}

#[derive(Debug, Clone, Default)]
pub struct KnowledgeBase {
    dim: usize,
    embeddings: Vec<f32>,
    entries: Vec<EntryMeta>,
    frames: Vec<FrameRef>,
    subgraphs: Vec<SceneGraph>,
    frame_lookup: HashMap<(String, String), usize>,
    backend: SearchBackend,
}

impl PartialEq for KnowledgeBase {
    /// Bit-level equality of embeddings plus equality of all metadata.
    fn eq(&self, other: &Self) -> bool {
        self.dim == other.dim
            && self.entries == other.entries
            && self.frames == other.frames
            && self.subgraphs == other.subgraphs
            && self.embeddings.len() == other.embeddings.len()
            && self
                .embeddings
                .iter()
                .zip(&other.embeddings)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

fn check_path_component(id: &str) -> Result<(), KbError> {
    let bad = id.is_empty()
        || id == "."
        || id == ".."
        || id.contains(['/', '\\', '\0']);
    if bad {
        Err(KbError::InvalidId(id.to_string()))
    } else {
        Ok(())
    }
}

impl KnowledgeBase {
    /// An empty knowledge base. `dim` may be 0 when not yet known; it is
    /// fixed by the first inserted frame.
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            ..Self::default()
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn frames(&self) -> &[FrameRef] {
        &self.frames
    }

    pub fn frame_count(&self) -> usize {
        self.frames.len()
    }

    /// Distinct scene ids in ascending order.
    pub fn scenes(&self) -> Vec<String> {
        self.frames
            .iter()
            .map(|f| f.scene_id.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    pub fn frames_of_scene<'a>(&'a self, scene_id: &'a str) -> impl Iterator<Item = &'a FrameRef> + 'a {
        self.frames.iter().filter(move |f| f.scene_id == scene_id)
    }

    pub fn subgraph(&self, frame: &FrameRef) -> Option<&SceneGraph> {
        self.frame_index(frame).map(|i| &self.subgraphs[i])
    }

    pub(crate) fn frame_index(&self, frame: &FrameRef) -> Option<usize> {
        self.frame_lookup
            .get(&(frame.scene_id.clone(), frame.frame_id.clone()))
            .copied()
    }

    pub fn entry(&self, row: usize) -> KbEntry<'_> {
        let meta = self.entries[row];
        KbEntry {
            row,
            frame: &self.frames[meta.frame as usize],
            patch_index: meta.patch as usize,
            embedding: &self.embeddings[row * self.dim..(row + 1) * self.dim],
        }
    }

    pub fn entries(&self) -> impl Iterator<Item = KbEntry<'_>> + '_ {
        (0..self.len()).map(|row| self.entry(row))
    }

    pub(crate) fn frame_of_row(&self, row: usize) -> usize {
        self.entries[row].frame as usize
    }

    /// Appends every patch of one frame together with the frame's subgraph.
    pub fn insert_frame(
        &mut self,
        frame: FrameRef,
        patches: &EmbeddingMatrix,
        subgraph: SceneGraph,
    ) -> Result<(), KbError> {
        check_path_component(&frame.scene_id)?;
        check_path_component(&frame.frame_id)?;
        if self.dim == 0 {
            self.dim = patches.dim();
        }
        if patches.dim() != self.dim {
            return Err(KbError::DimMismatch {
                expected: self.dim,
                got: patches.dim(),
            });
        }
        let key = (frame.scene_id.clone(), frame.frame_id.clone());
        if self.frame_lookup.contains_key(&key) {
            return Err(KbError::DuplicateFrame(frame.to_string()));
        }
        let frame_idx = self.frames.len() as u32;
        self.frame_lookup.insert(key, self.frames.len());
        self.frames.push(frame);
        self.subgraphs.push(subgraph);
        for patch in 0..patches.len() {
            self.entries.push(EntryMeta { frame: frame_idx, patch: patch as u32 });
        }
        self.embeddings.extend_from_slice(patches.as_flat());
        self.backend = SearchBackend::Flat;
        Ok(())
    }

    /// Total order used for ranking: score descending, then
    /// `(scene_id, frame_id, patch_index)` ascending.
    pub(crate) fn rank_order(&self, a: &PatchHit, b: &PatchHit) -> Ordering {
        b.score.total_cmp(&a.score).then_with(|| {
            let ea = self.entry(a.row);
            let eb = self.entry(b.row);
            (&ea.frame.scene_id, &ea.frame.frame_id, ea.patch_index)
                .cmp(&(&eb.frame.scene_id, &eb.frame.frame_id, eb.patch_index))
        })
    }

    pub(crate) fn top_k_of(&self, mut hits: Vec<PatchHit>, k: usize) -> Vec<PatchHit> {
        if k < hits.len() {
            hits.select_nth_unstable_by(k - 1, |a, b| self.rank_order(a, b));
            hits.truncate(k);
        }
        hits.sort_by(|a, b| self.rank_order(a, b));
        hits
    }

    /// The `k` best-scoring rows for query `q`, best first.
    pub fn query_topk(&self, q: &[f32], k: usize) -> Result<Vec<PatchHit>, KbError> {
        if k == 0 {
            return Err(KbError::InvalidK);
        }
        if self.is_empty() {
            return Ok(Vec::new());
        }
        if q.len() != self.dim {
            return Err(KbError::DimMismatch {
                expected: self.dim,
                got: q.len(),
            });
        }
        match &self.backend {
            SearchBackend::Flat => {
                let hits = self
                    .embeddings
                    .chunks_exact(self.dim)
                    .enumerate()
                    .map(|(row, e)| PatchHit { row, score: dot(q, e) })
                    .collect();
                Ok(self.top_k_of(hits, k))
            }
            SearchBackend::Ivf(index) => Ok(index.search(self, q, k)),
        }
    }

    /// Switches to an inverted-file approximate index trained on the stored
    /// embeddings. Queries keep the same contract but may miss true neighbors.
    pub fn use_ivf(&mut self, params: IvfParams) {
        if !self.is_empty() {
            self.backend = SearchBackend::Ivf(ivf::IvfIndex::train(self, params));
        }
    }

    pub fn use_flat(&mut self) {
        self.backend = SearchBackend::Flat;
    }

    /// Keeps `⌊fraction · #scenes⌋` whole scenes: a prefix of one seeded
    /// permutation of the sorted scene ids, so subsets are nested in
    /// `fraction` for a fixed seed.
    pub fn subset(&self, fraction: f64, seed: u64) -> KnowledgeBase {
        let fraction = fraction.clamp(0.0, 1.0);
        let mut scenes = self.scenes();
        let keep = ((fraction * scenes.len() as f64) + 1e-9).floor() as usize;
        let keep = keep.min(scenes.len());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        scenes.shuffle(&mut rng);
        let retained: BTreeSet<&str> = scenes[..keep].iter().map(String::as_str).collect();

        let mut out = KnowledgeBase::new(self.dim);
        let mut remap: HashMap<u32, u32> = HashMap::new();
        for (row, meta) in self.entries.iter().enumerate() {
            let frame = &self.frames[meta.frame as usize];
            if !retained.contains(frame.scene_id.as_str()) {
                continue;
            }
            let new_idx = *remap.entry(meta.frame).or_insert_with(|| {
                let idx = out.frames.len();
                out.frame_lookup
                    .insert((frame.scene_id.clone(), frame.frame_id.clone()), idx);
                out.frames.push(frame.clone());
                out.subgraphs.push(self.subgraphs[meta.frame as usize].clone());
                idx as u32
            });
            out.entries.push(EntryMeta { frame: new_idx, patch: meta.patch });
            out.embeddings
                .extend_from_slice(&self.embeddings[row * self.dim..(row + 1) * self.dim]);
        }
        out
    }

    /// Distinct canonical edges across all frame subgraphs.
    pub fn distinct_edge_count(&self) -> usize {
        self.subgraphs
            .iter()
            .flat_map(SceneGraph::edge_keys)
            .collect::<BTreeSet<_>>()
            .len()
    }
}

/// Free-function form of [`KnowledgeBase::query_topk`].
pub fn query_topk(kb: &KnowledgeBase, q: &[f32], k: usize) -> Result<Vec<PatchHit>, KbError> {
    kb.query_topk(q, k)
}

/// Free-function form of [`KnowledgeBase::subset`].
pub fn subset_kb(kb: &KnowledgeBase, fraction: f64, seed: u64) -> KnowledgeBase {
    kb.subset(fraction, seed)
}

/// One annotated frame to ingest.
#[derive(Debug, Clone)]
pub struct KbSource {
    pub frame: FrameRef,
    pub image: Vec<u8>,
    pub subgraph: SceneGraph,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct BuildReport {
    pub frames_seen: usize,
    pub frames_ingested: usize,
    pub entries: usize,
    pub failures: Vec<BuildFailure>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BuildFailure {
    pub frame: FrameRef,
    pub error: String,
}

/// Incremental ingestion. Embedder failures skip the frame and are recorded;
/// structural problems (dimension mismatch, duplicate frames) are fatal.
pub struct KbBuilder<'e> {
    embedder: &'e dyn Embedder,
    kb: KnowledgeBase,
    report: BuildReport,
}

impl<'e> KbBuilder<'e> {
    pub fn new(embedder: &'e dyn Embedder) -> Self {
        Self {
            embedder,
            kb: KnowledgeBase::new(0),
            report: BuildReport::default(),
        }
    }

    pub fn add(&mut self, source: KbSource) -> Result<(), KbError> {
        self.report.frames_seen += 1;
        if self.kb.frame_index(&source.frame).is_some() {
            return Err(KbError::DuplicateFrame(source.frame.to_string()));
        }
        match self.embedder.embed_patches(&source.image) {
            Ok(patches) => {
                self.kb.insert_frame(source.frame, &patches, source.subgraph)?;
                self.report.frames_ingested += 1;
            }
            Err(e) => {
                log::warn!("skipping {}: {e}", source.frame);
                self.report.failures.push(BuildFailure {
                    frame: source.frame,
                    error: e.to_string(),
                });
            }
        }
        Ok(())
    }

    pub fn finish(mut self) -> (KnowledgeBase, BuildReport) {
        self.report.entries = self.kb.len();
        (self.kb, self.report)
    }
}

pub fn build_kb(
    dataset: impl IntoIterator<Item = KbSource>,
    embedder: &dyn Embedder,
) -> Result<(KnowledgeBase, BuildReport), KbError> {
    let mut builder = KbBuilder::new(embedder);
    for source in dataset {
        builder.add(source)?;
    }
    Ok(builder.finish())
}

#[cfg(test)]
pub(crate) mod test_support {
    use super::*;
    use crate::embedding::EmbeddingSource;
    use rand::Rng;
    use rand_distr::StandardNormal;

    pub fn random_unit(rng: &mut impl Rng, dim: usize) -> Vec<f32> {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        crate::embedding::normalize(&v).unwrap().into_iter().map(|x| x as f32).collect()
    }

    pub fn random_matrix(rng: &mut impl Rng, rows: usize, dim: usize) -> EmbeddingMatrix {
        EmbeddingMatrix::from_rows((0..rows).map(|_| random_unit(rng, dim)).collect(), EmbeddingSource::Patch).unwrap()
    }

    /// `scenes × frames` frames of `patches` random rows each.
    pub fn random_kb(seed: u64, scenes: usize, frames: usize, patches: usize, dim: usize) -> KnowledgeBase {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut kb = KnowledgeBase::new(dim);
        for s in 0..scenes {
            for f in 0..frames {
                let m = random_matrix(&mut rng, patches, dim);
                kb.insert_frame(FrameRef::new(format!("s{s}"), format!("f{f}"), f as u32), &m, SceneGraph::default())
                    .unwrap();
            }
        }
        kb
    }
}
