//! Flat semantic scene graphs: object nodes plus subject-predicate-object
//! triplets, with label-level edge deduplication and incremental merging.
//!
//! The same type is used for knowledge-base frame subgraphs, ground truth
//! and predictions. Edge identity is defined on canonical labels rather than
//! node ids, because reference edges arrive from foreign graphs whose id
//! spaces are unrelated.

use std::collections::{BTreeSet, HashMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GraphError {
    #[error("duplicate node id `{0}`")]
    DuplicateNode(String),
    #[error("node `{0}` has an empty label")]
    EmptyLabel(String),
    #[error("edge endpoint `{0}` does not resolve to a node")]
    DanglingEndpoint(String),
    #[error("self-relation on node `{0}`")]
    SelfRelation(String),
}

/// One sighting of an object: the window that produced it and a frame of that window.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Sighting {
    pub window: usize,
    pub frame_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectNode {
    pub id: String,
    pub label: String,
    #[serde(default)]
    pub description: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub provenance: Vec<Sighting>,
}

impl ObjectNode {
    pub fn new(id: impl Into<String>, label: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            label: label.into(),
            description: None,
            provenance: Vec::new(),
        }
    }

    pub fn with_description(mut self, description: impl Into<String>) -> Self {
        self.description = Some(description.into());
        self
    }

    pub fn canonical_label(&self) -> String {
        canonical_text(&self.label)
    }
}

/// A relation between two nodes of the owning graph, referenced by id.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Triplet {
    pub subject: String,
    pub predicate: String,
    pub object: String,
}

impl Triplet {
    pub fn new(
        subject: impl Into<String>,
        predicate: impl Into<String>,
        object: impl Into<String>,
    ) -> Self {
        Self {
            subject: subject.into(),
            predicate: predicate.into(),
            object: object.into(),
        }
    }
}

/// A triplet whose endpoints are object labels instead of node ids. Used for
/// reference edges that have been detached from their source graph.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LabeledTriplet {
    pub subject: String,
    pub predicate: String,
    pub object: String,
}

impl LabeledTriplet {
    pub fn new(
        subject: impl Into<String>,
        predicate: impl Into<String>,
        object: impl Into<String>,
    ) -> Self {
        Self {
            subject: subject.into(),
            predicate: predicate.into(),
            object: object.into(),
        }
    }

    pub fn key(&self) -> EdgeKey {
        EdgeKey::new(&self.subject, &self.predicate, &self.object)
    }
}

/// Canonical (subject label, predicate, object label) key: lowercase, trimmed,
/// inner whitespace collapsed to single spaces.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct EdgeKey {
    pub subject: String,
    pub predicate: String,
    pub object: String,
}

impl EdgeKey {
    pub fn new(subject: &str, predicate: &str, object: &str) -> Self {
        Self {
            subject: canonical_text(subject),
            predicate: canonical_text(predicate),
            object: canonical_text(object),
        }
    }

    pub fn pair(&self) -> (String, String) {
        (self.subject.clone(), self.object.clone())
    }
}

pub fn canonical_text(s: &str) -> String {
    s.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

/// Decides whether an incoming node denotes the same object as an existing one.
pub trait NodeMatchPolicy {
    fn is_match(&self, existing: &ObjectNode, incoming: &ObjectNode) -> bool;
}

/// Exact canonical-label equality.
#[derive(Debug, Clone, Copy, Default)]
pub struct ExactLabel;

impl NodeMatchPolicy for ExactLabel {
    fn is_match(&self, existing: &ObjectNode, incoming: &ObjectNode) -> bool {
        existing.canonical_label() == incoming.canonical_label()
    }
}

/// Only incoming nodes carrying an explicit claim fuse, and only with existing
/// nodes whose canonical label equals the claimed label.
#[derive(Debug, Clone, Default)]
pub struct ClaimedLabel {
    claims: HashMap<String, String>,
}

impl ClaimedLabel {
    pub fn new<I, K, V>(claims: I) -> Self
    where
        I: IntoIterator<Item = (K, V)>,
        K: Into<String>,
        V: AsRef<str>,
    {
        Self {
            claims: claims
                .into_iter()
                .map(|(k, v)| (k.into(), canonical_text(v.as_ref())))
                .collect(),
        }
    }
}

impl NodeMatchPolicy for ClaimedLabel {
    fn is_match(&self, existing: &ObjectNode, incoming: &ObjectNode) -> bool {
        self.claims
            .get(&incoming.id)
            .is_some_and(|label| *label == existing.canonical_label())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SceneGraph {
    #[serde(default)]
    pub scene_id: Option<String>,
    #[serde(default)]
    nodes: Vec<ObjectNode>,
    #[serde(default)]
    edges: Vec<Triplet>,
    /// Free-form provenance block (tool version, effective configuration).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta: Option<serde_json::Value>,
}

impl SceneGraph {
    pub fn empty(scene_id: Option<String>) -> Self {
        Self {
            scene_id,
            ..Self::default()
        }
    }

    /// Validates nodes and edges and reduces the edge list to a set under
    /// [`EdgeKey`], keeping first occurrences.
    pub fn from_parts(
        scene_id: Option<String>,
        nodes: Vec<ObjectNode>,
        edges: Vec<Triplet>,
    ) -> Result<Self, GraphError> {
        let mut seen = HashSet::new();
        for node in &nodes {
            if !seen.insert(node.id.as_str()) {
                return Err(GraphError::DuplicateNode(node.id.clone()));
            }
            if node.label.trim().is_empty() {
                return Err(GraphError::EmptyLabel(node.id.clone()));
            }
        }
        let mut graph = Self {
            scene_id,
            nodes,
            edges: Vec::new(),
            meta: None,
        };
        for edge in &edges {
            if edge.subject == edge.object {
                return Err(GraphError::SelfRelation(edge.subject.clone()));
            }
        }
        graph.edges = dedup_edges(&edges, &graph)?;
        Ok(graph)
    }

    /// Re-checks the invariants of a graph obtained through deserialization.
    pub fn validate(self) -> Result<Self, GraphError> {
        let meta = self.meta.clone();
        let mut graph = Self::from_parts(self.scene_id, self.nodes, self.edges)?;
        graph.meta = meta;
        Ok(graph)
    }

    pub fn from_json(text: &str) -> Result<Self, GraphJsonError> {
        let graph: SceneGraph = serde_json::from_str(text)?;
        Ok(graph.validate()?)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("scene graph serialization is infallible")
    }

    pub fn nodes(&self) -> &[ObjectNode] {
        &self.nodes
    }

    pub fn edges(&self) -> &[Triplet] {
        &self.edges
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty() && self.edges.is_empty()
    }

    pub fn node(&self, id: &str) -> Option<&ObjectNode> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub fn label_of(&self, id: &str) -> Option<&str> {
        self.node(id).map(|n| n.label.as_str())
    }

    /// Adds a node with a fresh id and returns that id.
    pub fn push_node(&mut self, label: impl Into<String>) -> String {
        let id = self.fresh_id();
        self.nodes.push(ObjectNode::new(id.clone(), label));
        id
    }

    /// Adds an edge unless an edge with the same canonical key already exists.
    /// Returns whether the edge was inserted.
    pub fn push_edge(&mut self, edge: Triplet) -> Result<bool, GraphError> {
        if edge.subject == edge.object {
            return Err(GraphError::SelfRelation(edge.subject));
        }
        let key = canonicalize_edge(&edge, self)?;
        for existing in &self.edges {
            if canonicalize_edge(existing, self)? == key {
                return Ok(false);
            }
        }
        self.edges.push(edge);
        Ok(true)
    }

    /// Edges with endpoints replaced by their labels, in edge order.
    pub fn labeled_edges(&self) -> Vec<LabeledTriplet> {
        self.edges
            .iter()
            .filter_map(|e| {
                Some(LabeledTriplet::new(
                    self.label_of(&e.subject)?,
                    e.predicate.clone(),
                    self.label_of(&e.object)?,
                ))
            })
            .collect()
    }

    pub fn edge_keys(&self) -> Vec<EdgeKey> {
        self.labeled_edges().iter().map(LabeledTriplet::key).collect()
    }

    /// Id-independent form: sorted canonical labels and sorted edge keys.
    /// Two graphs with equal signatures are equal up to node-id renaming.
    pub fn signature(&self) -> (Vec<String>, Vec<EdgeKey>) {
        let mut labels: Vec<String> = self.nodes.iter().map(ObjectNode::canonical_label).collect();
        labels.sort();
        let mut keys = self.edge_keys();
        keys.sort();
        (labels, keys)
    }

    // Counter starts at the node count and skips ids already taken, so ids
    // depend only on graph content.
    fn fresh_id(&self) -> String {
        let taken: HashSet<&str> = self.nodes.iter().map(|n| n.id.as_str()).collect();
        let mut counter = self.nodes.len();
        loop {
            let candidate = format!("n{counter}");
            if !taken.contains(candidate.as_str()) {
                return candidate;
            }
            counter += 1;
        }
    }
}

#[derive(Debug, Error)]
pub enum GraphJsonError {
    #[error("malformed scene graph json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid scene graph: {0}")]
    Structure(#[from] GraphError),
}

pub fn canonicalize_edge(edge: &Triplet, graph: &SceneGraph) -> Result<EdgeKey, GraphError> {
    let subject = graph
        .label_of(&edge.subject)
        .ok_or_else(|| GraphError::DanglingEndpoint(edge.subject.clone()))?;
    let object = graph
        .label_of(&edge.object)
        .ok_or_else(|| GraphError::DanglingEndpoint(edge.object.clone()))?;
    Ok(EdgeKey::new(subject, &edge.predicate, object))
}

/// Stable first-occurrence-wins filtering by canonical key.
pub fn dedup_edges(edges: &[Triplet], graph: &SceneGraph) -> Result<Vec<Triplet>, GraphError> {
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(edges.len());
    for edge in edges {
        if seen.insert(canonicalize_edge(edge, graph)?) {
            out.push(edge.clone());
        }
    }
    Ok(out)
}

/// Same as [`dedup_edges`] for label-resolved triplets.
pub fn dedup_labeled(edges: impl IntoIterator<Item = LabeledTriplet>) -> Vec<LabeledTriplet> {
    let mut seen = HashSet::new();
    edges
        .into_iter()
        .filter(|e| seen.insert(e.key()))
        .collect()
}

/// Result of a merge: the new graph plus the delta-id to result-id mapping.
#[derive(Debug, Clone)]
pub struct Merged {
    pub graph: SceneGraph,
    pub id_map: HashMap<String, String>,
    /// Canonical keys of edges that were not present in the base.
    pub added_edges: Vec<EdgeKey>,
}

/// Merges `delta` into `base`.
///
/// Each delta node fuses with the first base node accepted by `policy` that
/// has not already absorbed another delta node in this merge (the mapping is
/// injective); fused nodes accumulate provenance. Unmatched delta nodes are
/// appended under fresh ids. Edges are the deduplicated union.
pub fn merge_graphs(base: &SceneGraph, delta: &SceneGraph, policy: &dyn NodeMatchPolicy) -> SceneGraph {
    merge_graphs_detailed(base, delta, policy).graph
}

pub fn merge_graphs_detailed(
    base: &SceneGraph,
    delta: &SceneGraph,
    policy: &dyn NodeMatchPolicy,
) -> Merged {
    let mut graph = base.clone();
    let base_len = base.nodes.len();
    let mut absorbed = vec![false; base_len];
    let mut id_map = HashMap::new();

    for incoming in &delta.nodes {
        let target = (0..base_len).find(|&i| !absorbed[i] && policy.is_match(&graph.nodes[i], incoming));
        match target {
            Some(i) => {
                absorbed[i] = true;
                let node = &mut graph.nodes[i];
                for sighting in &incoming.provenance {
                    if !node.provenance.contains(sighting) {
                        node.provenance.push(sighting.clone());
                    }
                }
                if node.description.is_none() {
                    node.description = incoming.description.clone();
                }
                id_map.insert(incoming.id.clone(), node.id.clone());
            }
            None => {
                let id = graph.fresh_id();
                let mut node = incoming.clone();
                node.id = id.clone();
                graph.nodes.push(node);
                id_map.insert(incoming.id.clone(), id);
            }
        }
    }

    let mut keys: BTreeSet<EdgeKey> = graph.edge_keys().into_iter().collect();
    let mut added_edges = Vec::new();
    for edge in &delta.edges {
        let (Some(subject), Some(object)) = (id_map.get(&edge.subject), id_map.get(&edge.object))
        else {
            continue;
        };
        if subject == object {
            continue;
        }
        let remapped = Triplet::new(subject.clone(), edge.predicate.clone(), object.clone());
        let key = canonicalize_edge(&remapped, &graph).expect("remapped endpoints exist");
        if keys.insert(key.clone()) {
            graph.edges.push(remapped);
            added_edges.push(key);
        }
    }

    Merged {
        graph,
        id_map,
        added_edges,
    }
}

/// Union of graphs sharing one id space (e.g. the frame subgraphs of a single
/// scene): nodes are unified by id, edges deduplicated.
pub fn union_by_id<'a>(
    scene_id: Option<String>,
    graphs: impl IntoIterator<Item = &'a SceneGraph>,
) -> Result<SceneGraph, GraphError> {
    let mut nodes: Vec<ObjectNode> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut edges = Vec::new();
    for g in graphs {
        for node in &g.nodes {
            if !index.contains_key(&node.id) {
                index.insert(node.id.clone(), nodes.len());
                nodes.push(node.clone());
            }
        }
        edges.extend(g.edges.iter().cloned());
    }
    SceneGraph::from_parts(scene_id, nodes, edges)
}
