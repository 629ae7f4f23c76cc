//! Reference-edge retrieval.
//!
//! For every patch of a query frame the knowledge base returns its top-k
//! neighbors. Hits are grouped by source frame, keeping the best score per
//! (patch, frame); the frame score is the uniqueness-weighted sum of those
//! per-patch affinities over the patches that hit the frame. A scene's score
//! is the sum over the window's query frames of its best frame score, and the
//! highest-scoring scene supplies the reference edges.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{dot, EmbeddingError, EmbeddingMatrix, FrameRef};
use crate::knowledge_base::{KbError, KnowledgeBase};
use crate::scene_graph::{dedup_labeled, LabeledTriplet};

pub const DEFAULT_TAU: f64 = 0.1;
pub const DEFAULT_TOP_FRAMES: usize = 3;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("tau must be positive and finite, got {0}")]
    InvalidTau(f64),
    #[error("k must be at least 1")]
    InvalidK,
    #[error("retrieval window has no query frames")]
    EmptyWindow,
    #[error("scene `{0}` is not present in the knowledge base")]
    UnknownScene(String),
    #[error(transparent)]
    Kb(#[from] KbError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
}

/// Softmax-normalized uniqueness weights of one frame's patches.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PatchWeights {
    weights: Vec<f64>,
    tau: f64,
}

impl PatchWeights {
    pub fn uniform(patches: usize, tau: f64) -> Self {
        Self {
            weights: vec![1.0 / patches as f64; patches],
            tau,
        }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }
}

fn check_tau(tau: f64) -> Result<(), RetrievalError> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(RetrievalError::InvalidTau(tau))
    }
}

/// `w_i = softmax_i(-mu_i / tau)` where `mu_i` is the mean similarity of patch
/// `i` to the other patches of the same frame. A single patch gets weight 1.
pub fn patch_uniqueness_weights(patches: &EmbeddingMatrix, tau: f64) -> Result<PatchWeights, RetrievalError> {
    check_tau(tau)?;
    let p = patches.len();
    if p == 1 {
        return Ok(PatchWeights { weights: vec![1.0], tau });
    }
    let mean_corr: Vec<f64> = (0..p)
        .map(|i| {
            let row = patches.row(i);
            let sum: f64 = (0..p).filter(|&j| j != i).map(|j| dot(row, patches.row(j))).sum();
            sum / (p - 1) as f64
        })
        .collect();
    let logits: Vec<f64> = mean_corr.iter().map(|mu| -mu / tau).collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(PatchWeights {
        weights: exps.iter().map(|e| e / total).collect(),
        tau,
    })
}

/// Best score per query patch among that patch's hits landing in one frame.
/// The keys form the set of patches that retrieve the frame.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FrameAffinity {
    pub frame: FrameRef,
    pub affinity: BTreeMap<usize, f64>,
}

impl FrameAffinity {
    pub fn omega(&self) -> impl Iterator<Item = usize> + '_ {
        self.affinity.keys().copied()
    }
}

pub fn frame_affinities(
    query: &EmbeddingMatrix,
    kb: &KnowledgeBase,
    k: usize,
) -> Result<BTreeMap<FrameRef, FrameAffinity>, RetrievalError> {
    if k == 0 {
        return Err(RetrievalError::InvalidK);
    }
    let mut out: BTreeMap<FrameRef, FrameAffinity> = BTreeMap::new();
    if kb.is_empty() {
        return Ok(out);
    }
    let per_patch = (0..query.len())
        .into_par_iter()
        .map(|i| kb.query_topk(query.row(i), k))
        .collect::<Result<Vec<_>, _>>()?;
    for (i, hits) in per_patch.into_iter().enumerate() {
        for hit in hits {
            let frame = &kb.frames()[kb.frame_of_row(hit.row)];
            let aff = out.entry(frame.clone()).or_insert_with(|| FrameAffinity {
                frame: frame.clone(),
                affinity: BTreeMap::new(),
            });
            aff.affinity
                .entry(i)
                .and_modify(|s| *s = s.max(hit.score))
                .or_insert(hit.score);
        }
    }
    Ok(out)
}

/// Weighted sum of affinities over the patches that hit the frame.
pub fn frame_score(weights: &PatchWeights, aff: &FrameAffinity) -> f64 {
    aff.affinity
        .iter()
        .map(|(&i, &a)| weights.weights.get(i).copied().unwrap_or(0.0) * a)
        .sum()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrievalMode {
    /// Uniqueness-weighted patch voting.
    #[default]
    WeightedPatch,
    /// Patch voting with uniform weights.
    Patch,
    /// One re-normalized mean vector per frame, cosine frame score.
    Image,
}

impl RetrievalMode {
    pub const ALL: [RetrievalMode; 3] = [RetrievalMode::WeightedPatch, RetrievalMode::Patch, RetrievalMode::Image];

    pub fn as_str(self) -> &'static str {
        match self {
            RetrievalMode::WeightedPatch => "weighted_patch",
            RetrievalMode::Patch => "patch",
            RetrievalMode::Image => "image",
        }
    }
}

impl std::fmt::Display for RetrievalMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for RetrievalMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "weighted_patch" => Ok(Self::WeightedPatch),
            "patch" => Ok(Self::Patch),
            "image" => Ok(Self::Image),
            other => Err(format!("unknown retrieval mode `{other}` (expected weighted_patch, patch or image)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalParams {
    pub k: usize,
    pub tau: f64,
    pub mode: RetrievalMode,
}

impl Default for RetrievalParams {
    fn default() -> Self {
        Self {
            k: crate::knowledge_base::DEFAULT_TOP_K,
            tau: DEFAULT_TAU,
            mode: RetrievalMode::WeightedPatch,
        }
    }
}

/// Scores of every knowledge-base frame retrieved by one query frame.
/// Frames that no patch retrieved are absent (their score is 0).
pub fn query_frame_scores(
    query: &EmbeddingMatrix,
    kb: &KnowledgeBase,
    params: &RetrievalParams,
) -> Result<BTreeMap<FrameRef, f64>, RetrievalError> {
    check_tau(params.tau)?;
    if params.k == 0 {
        return Err(RetrievalError::InvalidK);
    }
    match params.mode {
        RetrievalMode::WeightedPatch | RetrievalMode::Patch => {
            let weights = if params.mode == RetrievalMode::WeightedPatch {
                patch_uniqueness_weights(query, params.tau)?
            } else {
                PatchWeights::uniform(query.len(), params.tau)
            };
            Ok(frame_affinities(query, kb, params.k)?
                .into_iter()
                .map(|(frame, aff)| {
                    let score = frame_score(&weights, &aff);
                    (frame, score)
                })
                .collect())
        }
        RetrievalMode::Image => image_frame_scores(query, kb, params.k),
    }
}

fn image_frame_scores(
    query: &EmbeddingMatrix,
    kb: &KnowledgeBase,
    k: usize,
) -> Result<BTreeMap<FrameRef, f64>, RetrievalError> {
    if kb.is_empty() {
        return Ok(BTreeMap::new());
    }
    let q = query.mean_vector()?;
    if q.len() != kb.dim() {
        return Err(KbError::DimMismatch { expected: kb.dim(), got: q.len() }.into());
    }
    let mut sums = vec![vec![0.0f64; kb.dim()]; kb.frame_count()];
    for entry in kb.entries() {
        let acc = &mut sums[kb.frame_of_row(entry.row)];
        for (a, &x) in acc.iter_mut().zip(entry.embedding) {
            *a += f64::from(x);
        }
    }
    let mut scored: Vec<(FrameRef, f64)> = kb
        .frames()
        .iter()
        .zip(&sums)
        .filter_map(|(frame, sum)| {
            let v: Vec<f32> = crate::embedding::normalize(sum).ok()?.into_iter().map(|x| x as f32).collect();
            Some((frame.clone(), dot(&q, &v)))
        })
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    scored.truncate(k);
    Ok(scored.into_iter().collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SceneScore {
    pub scene_id: String,
    pub score: f64,
    /// Frames of the selected scene that some query retrieved, ranked by their
    /// best per-query score (descending, then frame id).
    pub best_frames: Vec<(FrameRef, f64)>,
    /// Aggregate score of every scene in the knowledge base.
    pub scene_totals: BTreeMap<String, f64>,
}

/// Per-query frame scores for a whole window.
pub fn window_frame_scores(
    window: &[(FrameRef, EmbeddingMatrix)],
    kb: &KnowledgeBase,
    params: &RetrievalParams,
) -> Result<Vec<BTreeMap<FrameRef, f64>>, RetrievalError> {
    window
        .iter()
        .map(|(_, m)| query_frame_scores(m, kb, params))
        .collect()
}

/// Picks the scene maximizing the sum over query frames of the best frame
/// score within the scene. Ties go to the smallest scene id. Returns `None`
/// for an empty knowledge base.
pub fn select_scene(
    window: &[(FrameRef, EmbeddingMatrix)],
    kb: &KnowledgeBase,
    params: &RetrievalParams,
) -> Result<Option<SceneScore>, RetrievalError> {
    if window.is_empty() {
        return Err(RetrievalError::EmptyWindow);
    }
    if kb.is_empty() {
        return Ok(None);
    }
    let per_query = window_frame_scores(window, kb, params)?;

    let mut frames_per_scene: BTreeMap<&str, usize> = BTreeMap::new();
    for f in kb.frames() {
        *frames_per_scene.entry(f.scene_id.as_str()).or_default() += 1;
    }

    let mut totals: BTreeMap<String, f64> = BTreeMap::new();
    for (&scene, &n_frames) in &frames_per_scene {
        let mut total = 0.0;
        for scores in &per_query {
            let hit: Vec<f64> = scores
                .iter()
                .filter(|(f, _)| f.scene_id == scene)
                .map(|(_, &s)| s)
                .collect();
            // frames that no patch retrieved score 0
            let mut best = if hit.len() < n_frames { 0.0 } else { f64::NEG_INFINITY };
            for s in hit {
                best = best.max(s);
            }
            total += best;
        }
        totals.insert(scene.to_string(), total);
    }

    let (scene_id, score) = totals
        .iter()
        .fold(None::<(&String, f64)>, |acc, (id, &s)| match acc {
            Some((_, best)) if s <= best => acc,
            _ => Some((id, s)),
        })
        .map(|(id, s)| (id.clone(), s))
        .expect("non-empty knowledge base has at least one scene");

    let mut best_frames: BTreeMap<FrameRef, f64> = BTreeMap::new();
    for scores in &per_query {
        for (f, &s) in scores.iter().filter(|(f, _)| f.scene_id == scene_id) {
            best_frames
                .entry(f.clone())
                .and_modify(|b| *b = b.max(s))
                .or_insert(s);
        }
    }
    let mut best_frames: Vec<(FrameRef, f64)> = best_frames.into_iter().collect();
    best_frames.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.frame_id.cmp(&b.0.frame_id)));

    Ok(Some(SceneScore {
        scene_id,
        score,
        best_frames,
        scene_totals: totals,
    }))
}

/// Deduplicated, label-resolved edges of the top-ranked frames of one scene.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReferenceEdges {
    pub edges: Vec<LabeledTriplet>,
    pub source_scene: String,
    pub source_frames: Vec<FrameRef>,
}

impl ReferenceEdges {
    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    pub fn len(&self) -> usize {
        self.edges.len()
    }
}

/// Unions the subgraph edges of the `top_frames` best frames of the selected
/// scene (rank order, then edge order), dropping canonical duplicates.
pub fn collect_reference_edges(
    kb: &KnowledgeBase,
    selection: &SceneScore,
    top_frames: usize,
) -> Result<ReferenceEdges, RetrievalError> {
    if kb.frames_of_scene(&selection.scene_id).next().is_none() {
        return Err(RetrievalError::UnknownScene(selection.scene_id.clone()));
    }
    let source_frames: Vec<FrameRef> = selection
        .best_frames
        .iter()
        .take(top_frames)
        .map(|(f, _)| f.clone())
        .collect();
    let mut edges = Vec::new();
    for frame in &source_frames {
        let graph = kb
            .subgraph(frame)
            .ok_or_else(|| RetrievalError::UnknownScene(frame.to_string()))?;
        edges.extend(graph.labeled_edges());
    }
    Ok(ReferenceEdges {
        edges: dedup_labeled(edges),
        source_scene: selection.scene_id.clone(),
        source_frames,
    })
}

/// Scene ids in the order they would be ranked, best first.
pub fn ranked_scenes(selection: &SceneScore) -> Vec<(String, f64)> {
    let mut v: Vec<(String, f64)> = selection.scene_totals.iter().map(|(k, &s)| (k.clone(), s)).collect();
    v.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    v
}

/// Every label-resolved edge of a knowledge base, deduplicated.
pub fn all_reference_edges(kb: &KnowledgeBase) -> BTreeSet<crate::scene_graph::EdgeKey> {
    kb.frames()
        .iter()
        .filter_map(|f| kb.subgraph(f))
        .flat_map(|g| g.edge_keys())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::EmbeddingSource;
    use crate::knowledge_base::test_support::{random_kb, random_matrix};
    use crate::scene_graph::{ObjectNode, SceneGraph, Triplet};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn m(rows: Vec<Vec<f32>>) -> EmbeddingMatrix {
        EmbeddingMatrix::from_rows(rows, EmbeddingSource::Patch).unwrap()
    }

    fn axis(dim: usize, i: usize) -> Vec<f32> {
        let mut v = vec![0.0; dim];
        v[i] = 1.0;
        v
    }

    #[test]
    fn weights_for_identical_and_pairs() {
        let same = m(vec![axis(3, 0); 4]);
        let w = patch_uniqueness_weights(&same, 0.1).unwrap();
        assert!(w.as_slice().iter().all(|&x| x == 0.25));

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pair = random_matrix(&mut rng, 2, 5);
        let w = patch_uniqueness_weights(&pair, 0.1).unwrap();
        assert!((w.as_slice()[0] - 0.5).abs() < 1e-15 && (w.as_slice()[1] - 0.5).abs() < 1e-15);

        let single = m(vec![axis(3, 1)]);
        assert_eq!(patch_uniqueness_weights(&single, 0.1).unwrap().as_slice(), &[1.0]);
        assert!(matches!(patch_uniqueness_weights(&single, 0.0), Err(RetrievalError::InvalidTau(_))));
        assert!(matches!(patch_uniqueness_weights(&single, -1.0), Err(RetrievalError::InvalidTau(_))));
    }

    #[test]
    fn weights_duplicated_pair_fixture() {
        // q1 = q2 = e1, q3 = e2: mu = (0.5, 0.5, 0), tau = 0.1
        let q = m(vec![axis(2, 0), axis(2, 0), axis(2, 1)]);
        let w = patch_uniqueness_weights(&q, 0.1).unwrap();
        // oracle: exp(-5) / (2 exp(-5) + 1)
        let e5 = (-5.0f64).exp();
        let oracle = [e5 / (2.0 * e5 + 1.0), e5 / (2.0 * e5 + 1.0), 1.0 / (2.0 * e5 + 1.0)];
        for (a, b) in w.as_slice().iter().zip(oracle) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((w.as_slice()[0] - 0.00665).abs() < 1e-5);
        assert!((w.as_slice()[2] - 0.98670).abs() < 1e-5);
        assert!(w.as_slice()[0] < w.as_slice()[2]);
    }

    #[test]
    fn frame_score_examples() {
        let w = PatchWeights { weights: vec![0.2, 0.3, 0.5], tau: 0.1 };
        let empty = FrameAffinity { frame: FrameRef::new("s", "f", 0), affinity: BTreeMap::new() };
        assert_eq!(frame_score(&w, &empty), 0.0);
        let full = FrameAffinity { affinity: (0..3).map(|i| (i, 1.0)).collect(), ..empty.clone() };
        assert!((frame_score(&w, &full) - 1.0).abs() < 1e-15);
        let part = FrameAffinity { affinity: [(0, 0.9), (2, 0.4)].into_iter().collect(), ..empty };
        assert!((frame_score(&w, &part) - (0.2 * 0.9 + 0.5 * 0.4)).abs() < 1e-15);
        assert!((frame_score(&w, &part) - 0.38).abs() < 1e-12);
    }

    #[test]
    fn affinities_self_retrieval_and_empty() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let q = random_matrix(&mut rng, 4, 6);
        assert!(frame_affinities(&q, &KnowledgeBase::new(6), 3).unwrap().is_empty());
        let mut kb = KnowledgeBase::new(6);
        kb.insert_frame(FrameRef::new("s", "f", 0), &q, SceneGraph::default()).unwrap();
        let aff = frame_affinities(&q, &kb, 4).unwrap();
        assert_eq!(aff.len(), 1);
        let a = aff.values().next().unwrap();
        assert_eq!(a.omega().collect::<Vec<_>>(), vec![0, 1, 2, 3]);
        assert!(a.affinity.values().all(|&s| (s - 1.0).abs() < 1e-6));
    }

    #[test]
    fn affinities_match_brute_force() {
        let kb = random_kb(12, 1, 3, 4, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let q = random_matrix(&mut rng, 4, 5);
        let got = frame_affinities(&q, &kb, 2).unwrap();
        let mut oracle: BTreeMap<FrameRef, BTreeMap<usize, f64>> = BTreeMap::new();
        for i in 0..q.len() {
            let mut all: Vec<(f64, FrameRef, usize)> = kb
                .entries()
                .map(|e| (q.row(i).iter().zip(e.embedding).map(|(a, b)| *a as f64 * *b as f64).sum(), e.frame.clone(), e.patch_index))
                .collect();
            all.sort_by(|a, b| b.0.total_cmp(&a.0).then((&a.1.scene_id, &a.1.frame_id, a.2).cmp(&(&b.1.scene_id, &b.1.frame_id, b.2))));
            for (s, f, _) in all.into_iter().take(2) {
                let slot = oracle.entry(f).or_default().entry(i).or_insert(f64::NEG_INFINITY);
                *slot = slot.max(s);
            }
        }
        assert_eq!(got.keys().collect::<Vec<_>>(), oracle.keys().collect::<Vec<_>>());
        for (f, a) in &got {
            assert_eq!(a.affinity.keys().collect::<Vec<_>>(), oracle[f].keys().collect::<Vec<_>>());
            for (i, s) in &a.affinity {
                assert!((s - oracle[f][i]).abs() < 1e-12);
            }
        }
    }

    fn graph(edges: &[(&str, &str, &str)]) -> SceneGraph {
        let mut labels: Vec<&str> = Vec::new();
        for (s, _, o) in edges {
            for l in [*s, *o] {
                if !labels.contains(&l) {
                    labels.push(l);
                }
            }
        }
        let nodes = labels.iter().map(|l| ObjectNode::new(format!("id-{l}"), *l)).collect();
        let triplets = edges.iter().map(|(s, p, o)| Triplet::new(format!("id-{s}"), *p, format!("id-{o}"))).collect();
        SceneGraph::from_parts(None, nodes, triplets).unwrap()
    }

    #[test]
    fn select_scene_singleton_and_dominance() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let q = random_matrix(&mut rng, 4, 8);
        let window = vec![(FrameRef::new("query", "q0", 0), q.clone())];
        let params = RetrievalParams { k: 4, ..Default::default() };

        assert!(select_scene(&window, &KnowledgeBase::new(8), &params).unwrap().is_none());
        assert!(matches!(select_scene(&[], &KnowledgeBase::new(8), &params), Err(RetrievalError::EmptyWindow)));

        let mut kb = random_kb(22, 1, 2, 4, 8);
        let single = select_scene(&window, &kb, &params).unwrap().unwrap();
        assert_eq!(single.scene_id, "s0");

        kb.insert_frame(FrameRef::new("zcopy", "f0", 0), &q, SceneGraph::default()).unwrap();
        for mode in RetrievalMode::ALL {
            let sel = select_scene(&window, &kb, &RetrievalParams { mode, ..params }).unwrap().unwrap();
            assert_eq!(sel.scene_id, "zcopy", "{mode}");
            assert!((sel.score - 1.0).abs() < 1e-6, "{mode}: {}", sel.score);
        }
    }

    #[test]
    fn reference_edges_union_and_dedup() {
        let mut kb = KnowledgeBase::new(2);
        let e = m(vec![axis(2, 0)]);
        kb.insert_frame(FrameRef::new("s", "a", 0), &e, graph(&[("chair", "standing on", "floor"), ("table", "near", "wall"), ("lamp", "on", "table")])).unwrap();
        kb.insert_frame(FrameRef::new("s", "b", 1), &e, graph(&[("Chair", "standing on", "floor"), ("bed", "near", "wall")])).unwrap();
        let sel = |frames: Vec<(&str, f64)>| SceneScore {
            scene_id: "s".into(),
            score: 1.0,
            best_frames: frames.into_iter().map(|(f, s)| (kb.frames().iter().find(|x| x.frame_id == f).unwrap().clone(), s)).collect(),
            scene_totals: BTreeMap::new(),
        };
        let one = collect_reference_edges(&kb, &sel(vec![("a", 0.9), ("b", 0.5)]), 1).unwrap();
        assert_eq!(one.edges.len(), 3);
        let both = collect_reference_edges(&kb, &sel(vec![("a", 0.9), ("b", 0.5)]), 10).unwrap();
        let oracle: BTreeSet<_> = kb.subgraph(&kb.frames()[0]).unwrap().edge_keys().into_iter().chain(kb.subgraph(&kb.frames()[1]).unwrap().edge_keys()).collect();
        assert_eq!(both.edges.iter().map(LabeledTriplet::key).collect::<BTreeSet<_>>(), oracle);
        assert_eq!(both.edges.len(), 4);
        assert_eq!(both.source_frames.len(), 2);

        let missing = SceneScore { scene_id: "nope".into(), score: 0.0, best_frames: vec![], scene_totals: BTreeMap::new() };
        assert!(matches!(collect_reference_edges(&kb, &missing, 3), Err(RetrievalError::UnknownScene(_))));
    }

    #[test]
    fn weighted_equals_uniform_on_identical_patches() {
        let q = m(vec![axis(4, 0); 3]);
        let kb = random_kb(30, 3, 2, 3, 4);
        let window = vec![(FrameRef::new("q", "0", 0), q)];
        let w = select_scene(&window, &kb, &RetrievalParams { k: 5, mode: RetrievalMode::WeightedPatch, ..Default::default() }).unwrap().unwrap();
        let u = select_scene(&window, &kb, &RetrievalParams { k: 5, mode: RetrievalMode::Patch, ..Default::default() }).unwrap().unwrap();
        assert_eq!(w, u);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]

        #[test]
        fn weights_sum_to_one_and_permute(seed in 0u64..10_000, p in 1usize..12) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let q = random_matrix(&mut rng, p, 6);
            let w = patch_uniqueness_weights(&q, 0.1).unwrap();
            prop_assert!((w.as_slice().iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(w.as_slice().iter().all(|&x| x > 0.0));
            let rev = m(q.rows().rev().map(<[f32]>::to_vec).collect());
            let wr = patch_uniqueness_weights(&rev, 0.1).unwrap();
            for i in 0..p {
                prop_assert!((w.as_slice()[i] - wr.as_slice()[p - 1 - i]).abs() < 1e-12);
            }
        }

        #[test]
        fn frame_score_is_monotone(a in proptest::collection::vec(-1.0f64..1.0, 4), bump in 0.0f64..0.5, idx in 0usize..4) {
            let w = PatchWeights { weights: vec![0.1, 0.2, 0.3, 0.4], tau: 0.1 };
            let aff = FrameAffinity { frame: FrameRef::new("s", "f", 0), affinity: a.iter().copied().enumerate().collect() };
            let mut higher = aff.clone();
            *higher.affinity.get_mut(&idx).unwrap() += bump;
            prop_assert!(frame_score(&w, &higher) >= frame_score(&w, &aff));
        }

        #[test]
        fn larger_k_only_grows_omega(seed in 0u64..1000, k1 in 1usize..6, extra in 1usize..6) {
            let kb = random_kb(seed, 2, 3, 3, 5);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
            let q = random_matrix(&mut rng, 3, 5);
            let a1 = frame_affinities(&q, &kb, k1).unwrap();
            let a2 = frame_affinities(&q, &kb, k1 + extra).unwrap();
            for (f, a) in &a1 {
                for (i, s) in &a.affinity {
                    prop_assert!(a2[f].affinity.get(i).is_some_and(|t| t >= s));
                }
            }
        }

        #[test]
        fn selection_ignores_query_order(seed in 0u64..1000) {
            let kb = random_kb(seed, 3, 2, 4, 6);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 7);
            let window: Vec<_> = (0..3).map(|i| (FrameRef::new("q", format!("{i}"), i), random_matrix(&mut rng, 4, 6))).collect();
            let mut reversed = window.clone();
            reversed.reverse();
            let p = RetrievalParams { k: 6, ..Default::default() };
            let a = select_scene(&window, &kb, &p).unwrap().unwrap();
            let b = select_scene(&reversed, &kb, &p).unwrap().unwrap();
            prop_assert_eq!(&a.scene_id, &b.scene_id);
            prop_assert!((a.score - b.score).abs() < 1e-9);
        }
    }
}
