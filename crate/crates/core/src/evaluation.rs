//! Recall metrics, node redundancy and the gained/copied triplet analysis.
//!
//! Prediction and ground truth are first aligned by an injective node
//! matching. A ground-truth triplet is *reproduced* when both endpoints are
//! matched and the prediction has an edge between the matched nodes with the
//! same canonical predicate.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::TOOL_VERSION;
use crate::scene_graph::{canonical_text, EdgeKey, LabeledTriplet, NodeMatchPolicy, ObjectNode, SceneGraph};

pub const DEFAULT_OBJ_K: usize = 10;
pub const DEFAULT_PRED_K: usize = 3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("old-denominator relationship recall needs a candidate pair set")]
    MissingCandidates,
    #[error("K must be at least 1")]
    InvalidK,
}

/// Injective partial map from predicted node ids to ground-truth node ids.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct NodeMatching {
    pred_to_gt: BTreeMap<String, String>,
    #[serde(skip)]
    gt_to_pred: HashMap<String, String>,
}

impl NodeMatching {
    pub fn len(&self) -> usize {
        self.pred_to_gt.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pred_to_gt.is_empty()
    }

    pub fn gt_of(&self, pred_id: &str) -> Option<&str> {
        self.pred_to_gt.get(pred_id).map(String::as_str)
    }

    pub fn pred_of(&self, gt_id: &str) -> Option<&str> {
        self.gt_to_pred.get(gt_id).map(String::as_str)
    }

    pub fn pairs(&self) -> impl Iterator<Item = (&str, &str)> {
        self.pred_to_gt.iter().map(|(p, g)| (p.as_str(), g.as_str()))
    }
}

fn sorted_by_id(g: &SceneGraph) -> Vec<&ObjectNode> {
    let mut v: Vec<&ObjectNode> = g.nodes().iter().collect();
    v.sort_by(|a, b| a.id.cmp(&b.id));
    v
}

/// Greedy injective matching: predicted nodes in id order each take the first
/// unmatched ground-truth node (id order) accepted by `policy`.
pub fn match_nodes(pred: &SceneGraph, gt: &SceneGraph, policy: &dyn NodeMatchPolicy) -> NodeMatching {
    let gt_nodes = sorted_by_id(gt);
    let mut taken = vec![false; gt_nodes.len()];
    let mut m = NodeMatching::default();
    for p in sorted_by_id(pred) {
        if let Some(i) = (0..gt_nodes.len()).find(|&i| !taken[i] && policy.is_match(gt_nodes[i], p)) {
            taken[i] = true;
            m.pred_to_gt.insert(p.id.clone(), gt_nodes[i].id.clone());
            m.gt_to_pred.insert(gt_nodes[i].id.clone(), p.id.clone());
        }
    }
    m
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// Fraction of ground-truth nodes that are matched.
pub fn object_recall(gt: &SceneGraph, matching: &NodeMatching) -> Option<f64> {
    ratio(gt.nodes().iter().filter(|n| matching.pred_of(&n.id).is_some()).count(), gt.nodes().len())
}

/// Fraction of ground-truth nodes whose label is among the first `k` ranked
/// candidate labels supplied for them (keyed by ground-truth id).
pub fn object_recall_ranked(
    gt: &SceneGraph,
    candidates: &BTreeMap<String, Vec<String>>,
    k: usize,
) -> Result<Option<f64>, EvalError> {
    if k == 0 {
        return Err(EvalError::InvalidK);
    }
    let hits = gt
        .nodes()
        .iter()
        .filter(|n| {
            candidates
                .get(&n.id)
                .is_some_and(|c| c.iter().take(k).any(|l| canonical_text(l) == n.canonical_label()))
        })
        .count();
    Ok(ratio(hits, gt.nodes().len()))
}

/// Per ground-truth label: matched nodes of that label / nodes of that label.
pub fn object_recall_per_class(gt: &SceneGraph, matching: &NodeMatching) -> BTreeMap<String, f64> {
    let mut counts: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for n in gt.nodes() {
        let c = counts.entry(n.canonical_label()).or_default();
        c.1 += 1;
        if matching.pred_of(&n.id).is_some() {
            c.0 += 1;
        }
    }
    counts.into_iter().map(|(l, (h, t))| (l, h as f64 / t as f64)).collect()
}

/// Canonical predicates predicted for each ordered pair of predicted nodes,
/// in edge order.
fn predicted_predicates(pred: &SceneGraph) -> HashMap<(&str, &str), Vec<String>> {
    let mut out: HashMap<(&str, &str), Vec<String>> = HashMap::new();
    for e in pred.edges() {
        let p = canonical_text(&e.predicate);
        let list = out.entry((e.subject.as_str(), e.object.as_str())).or_default();
        if !list.contains(&p) {
            list.push(p);
        }
    }
    out
}

/// Ranked predicate lists keyed by ordered predicted-node pair.
pub type RankedPredicates = BTreeMap<(String, String), Vec<String>>;

fn gt_hits<'g>(
    pred: &SceneGraph,
    gt: &'g SceneGraph,
    matching: &NodeMatching,
    ranked: Option<(&RankedPredicates, usize)>,
) -> Vec<(&'g crate::scene_graph::Triplet, Option<bool>)> {
    let sets = predicted_predicates(pred);
    gt.edges()
        .iter()
        .map(|t| {
            let pair = matching.pred_of(&t.subject).zip(matching.pred_of(&t.object));
            let hit = pair.map(|(ps, po)| {
                let want = canonical_text(&t.predicate);
                match ranked {
                    Some((r, k)) => r
                        .get(&(ps.to_string(), po.to_string()))
                        .is_some_and(|l| l.iter().take(k).any(|p| canonical_text(p) == want)),
                    None => sets.get(&(ps, po)).is_some_and(|l| l.contains(&want)),
                }
            });
            (t, hit)
        })
        .collect()
}

/// Over ground-truth triplets with both endpoints matched: fraction whose
/// predicate is predicted for the matched pair (top-`k` when ranked lists are
/// given, set membership otherwise).
pub fn predicate_recall(
    pred: &SceneGraph,
    gt: &SceneGraph,
    matching: &NodeMatching,
    k: usize,
    ranked: Option<&RankedPredicates>,
) -> Result<Option<f64>, EvalError> {
    if k == 0 {
        return Err(EvalError::InvalidK);
    }
    let hits = gt_hits(pred, gt, matching, ranked.map(|r| (r, k)));
    let eligible: Vec<bool> = hits.into_iter().filter_map(|(_, h)| h).collect();
    Ok(ratio(eligible.iter().filter(|&&h| h).count(), eligible.len()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Denominator {
    /// Ground-truth triplets whose (subject, object) pair is a supplied candidate.
    Old,
    /// All ground-truth triplets.
    New,
}

/// Candidate pairs as ordered (subject, object) ground-truth node ids.
pub type CandidatePairs = BTreeSet<(String, String)>;

pub fn relationship_recall(
    pred: &SceneGraph,
    gt: &SceneGraph,
    matching: &NodeMatching,
    denominator: Denominator,
    candidates: Option<&CandidatePairs>,
) -> Result<Option<f64>, EvalError> {
    let hits = gt_hits(pred, gt, matching, None);
    let counted: Vec<bool> = match denominator {
        Denominator::New => hits.into_iter().map(|(_, h)| h == Some(true)).collect(),
        Denominator::Old => {
            let cands = candidates.ok_or(EvalError::MissingCandidates)?;
            hits.into_iter()
                .filter(|(t, _)| cands.contains(&(t.subject.clone(), t.object.clone())))
                .map(|(_, h)| h == Some(true))
                .collect()
        }
    };
    Ok(ratio(counted.iter().filter(|&&h| h).count(), counted.len()))
}

/// Per ground-truth predicate class: reproduced / total (all gt triplets).
pub fn relationship_recall_per_class(pred: &SceneGraph, gt: &SceneGraph, matching: &NodeMatching) -> BTreeMap<String, f64> {
    let mut counts: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for (t, hit) in gt_hits(pred, gt, matching, None) {
        let c = counts.entry(canonical_text(&t.predicate)).or_default();
        c.1 += 1;
        if hit == Some(true) {
            c.0 += 1;
        }
    }
    counts.into_iter().map(|(l, (h, t))| (l, h as f64 / t as f64)).collect()
}

/// Unweighted mean over the classes present.
pub fn mean_recall(per_class: &BTreeMap<String, f64>) -> Option<f64> {
    (!per_class.is_empty()).then(|| per_class.values().sum::<f64>() / per_class.len() as f64)
}

/// Predicted nodes carrying a ground-truth label, per matched ground-truth
/// node. 1.0 means every covered object was instantiated once; `None` when
/// nothing is matched. With one ground-truth node per label this is
/// (predicted nodes with a gt label) / (distinct gt labels covered).
pub fn redundancy(pred: &SceneGraph, gt: &SceneGraph, matching: &NodeMatching) -> Option<f64> {
    let labels: BTreeSet<String> = gt.nodes().iter().map(ObjectNode::canonical_label).collect();
    let labelled = pred.nodes().iter().filter(|n| labels.contains(&n.canonical_label())).count();
    ratio(labelled, matching.len())
}

/// Ground-truth triplets reproduced by `pred`, as canonical label keys.
pub fn reproduced_triplets(pred: &SceneGraph, gt: &SceneGraph, matching: &NodeMatching) -> BTreeSet<EdgeKey> {
    gt_hits(pred, gt, matching, None)
        .into_iter()
        .filter(|(_, h)| *h == Some(true))
        .map(|(t, _)| {
            EdgeKey::new(
                gt.label_of(&t.subject).unwrap_or_default(),
                &t.predicate,
                gt.label_of(&t.object).unwrap_or_default(),
            )
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CopyAnalysis {
    pub reproduced_with: usize,
    pub reproduced_without: usize,
    pub gain: Vec<EdgeKey>,
    pub copy: Vec<EdgeKey>,
    pub ratio: Option<f64>,
    pub object_pair_ratio: Option<f64>,
}

/// Set-level core of the copy analysis: gain = with \ without,
/// copy = gain ∩ refs, ratio = |copy| / |gain|; the object-pair ratio compares
/// distinct (subject, object) label pairs instead of whole triplets.
pub fn copy_ratios(with: &BTreeSet<EdgeKey>, without: &BTreeSet<EdgeKey>, refs: &BTreeSet<EdgeKey>) -> CopyAnalysis {
    let gain: BTreeSet<EdgeKey> = with.difference(without).cloned().collect();
    let copy: Vec<EdgeKey> = gain.intersection(refs).cloned().collect();
    let gain_pairs: BTreeSet<(String, String)> = gain.iter().map(EdgeKey::pair).collect();
    let ref_pairs: BTreeSet<(String, String)> = refs.iter().map(EdgeKey::pair).collect();
    CopyAnalysis {
        reproduced_with: with.len(),
        reproduced_without: without.len(),
        ratio: ratio(copy.len(), gain.len()),
        object_pair_ratio: ratio(gain_pairs.intersection(&ref_pairs).count(), gain_pairs.len()),
        gain: gain.into_iter().collect(),
        copy,
    }
}

pub fn copy_analysis(
    pred_rag: &SceneGraph,
    pred_norag: &SceneGraph,
    gt: &SceneGraph,
    refs: &[LabeledTriplet],
    policy: &dyn NodeMatchPolicy,
) -> CopyAnalysis {
    let with = reproduced_triplets(pred_rag, gt, &match_nodes(pred_rag, gt, policy));
    let without = reproduced_triplets(pred_norag, gt, &match_nodes(pred_norag, gt, policy));
    let refs: BTreeSet<EdgeKey> = refs.iter().map(LabeledTriplet::key).collect();
    copy_ratios(&with, &without, &refs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub obj_k: Vec<usize>,
    pub pred_k: Vec<usize>,
    pub candidates: Option<CandidatePairs>,
    pub ranked_objects: Option<BTreeMap<String, Vec<String>>>,
    pub ranked_predicates: Option<RankedPredicates>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            obj_k: vec![DEFAULT_OBJ_K],
            pred_k: vec![DEFAULT_PRED_K],
            candidates: None,
            ranked_objects: None,
            ranked_predicates: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalCounts {
    pub gt_nodes: usize,
    pub gt_edges: usize,
    pub pred_nodes: usize,
    pub pred_edges: usize,
    pub matched_nodes: usize,
    pub reproduced_edges: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PerClass {
    pub objects: BTreeMap<String, f64>,
    pub predicates: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMetadata {
    pub node_matching: String,
    pub redundancy_formula: String,
    pub old_denominator: String,
    pub predicate_ranking: String,
}

/// Metrics with a zero denominator are `None` (serialized as null).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tool_version: String,
    pub obj_recall_at: BTreeMap<usize, Option<f64>>,
    pub obj_mean_recall: Option<f64>,
    pub pred_recall_at: BTreeMap<usize, Option<f64>>,
    pub rel_recall_old: Option<f64>,
    pub rel_recall_new: Option<f64>,
    pub rel_mean_recall: Option<f64>,
    pub redundancy: Option<f64>,
    pub copy_ratio: Option<f64>,
    pub object_pair_copy_ratio: Option<f64>,
    pub counts: EvalCounts,
    pub per_class: PerClass,
    pub copy: Option<CopyAnalysis>,
    pub metadata: EvalMetadata,
}

/// Optional inputs for the copy analysis: the no-retrieval prediction and the
/// reference edges shown to the model.
pub struct CopyInputs<'a> {
    pub pred_norag: &'a SceneGraph,
    pub refs: &'a [LabeledTriplet],
}

pub fn evaluate(
    pred: &SceneGraph,
    gt: &SceneGraph,
    options: &EvalOptions,
    policy: &dyn NodeMatchPolicy,
    policy_name: &str,
    copy: Option<CopyInputs<'_>>,
) -> Result<EvalReport, EvalError> {
    if options.obj_k.contains(&0) || options.pred_k.contains(&0) {
        return Err(EvalError::InvalidK);
    }
    let matching = match_nodes(pred, gt, policy);
    let mut obj_recall_at = BTreeMap::new();
    for &k in &options.obj_k {
        let v = match &options.ranked_objects {
            Some(c) => object_recall_ranked(gt, c, k)?,
            None => object_recall(gt, &matching),
        };
        obj_recall_at.insert(k, v);
    }
    let mut pred_recall_at = BTreeMap::new();
    for &k in &options.pred_k {
        pred_recall_at.insert(k, predicate_recall(pred, gt, &matching, k, options.ranked_predicates.as_ref())?);
    }
    let rel_recall_old = match &options.candidates {
        Some(c) => relationship_recall(pred, gt, &matching, Denominator::Old, Some(c))?,
        None => None,
    };
    let per_class = PerClass {
        objects: object_recall_per_class(gt, &matching),
        predicates: relationship_recall_per_class(pred, gt, &matching),
    };
    let copy = copy.map(|c| copy_analysis(pred, c.pred_norag, gt, c.refs, policy));

    Ok(EvalReport {
        tool_version: TOOL_VERSION.to_string(),
        obj_recall_at,
        obj_mean_recall: mean_recall(&per_class.objects),
        pred_recall_at,
        rel_recall_old,
        rel_recall_new: relationship_recall(pred, gt, &matching, Denominator::New, None)?,
        rel_mean_recall: mean_recall(&per_class.predicates),
        redundancy: redundancy(pred, gt, &matching),
        copy_ratio: copy.as_ref().and_then(|c| c.ratio),
        object_pair_copy_ratio: copy.as_ref().and_then(|c| c.object_pair_ratio),
        counts: EvalCounts {
            gt_nodes: gt.nodes().len(),
            gt_edges: gt.edges().len(),
            pred_nodes: pred.nodes().len(),
            pred_edges: pred.edges().len(),
            matched_nodes: matching.len(),
            reproduced_edges: reproduced_triplets(pred, gt, &matching).len(),
        },
        per_class,
        copy,
        metadata: EvalMetadata {
            node_matching: policy_name.to_string(),
            redundancy_formula: "predicted nodes whose label is a ground-truth label / matched ground-truth nodes".into(),
            old_denominator: if options.candidates.is_some() {
                "ground-truth triplets whose (subject, object) pair is in the supplied candidate set".into()
            } else {
                "not computed (no candidate pairs supplied)".into()
            },
            predicate_ranking: if options.ranked_predicates.is_some() {
                "ranked lists, top-K".into()
            } else {
                "unranked predicate sets (K has no effect)".into()
            },
        },
    })
}
