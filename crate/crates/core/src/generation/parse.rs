//! Extraction and validation of the window graph in a model reply.

use std::collections::{HashMap, HashSet};

use serde::Deserialize;
use thiserror::Error;

use crate::scene_graph::{canonical_text, ObjectNode, SceneGraph, Triplet};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ParseError {
    #[error("no JSON object found in reply")]
    NoJson { raw: String },
    #[error("reply JSON does not match the window-graph schema: {message}")]
    Schema { message: String, raw: String },
}

impl ParseError {
    pub fn raw(&self) -> &str {
        match self {
            ParseError::NoJson { raw } | ParseError::Schema { raw, .. } => raw,
        }
    }
}

/// A parsed window graph plus the model's cross-window match claims
/// (`new node id → existing global label`).
#[derive(Debug, Clone, PartialEq)]
pub struct WindowGraph {
    pub graph: SceneGraph,
    pub claims: Vec<(String, Option<String>)>,
    pub diagnostics: Vec<String>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum Id {
    Text(String),
    Int(i64),
}

impl Id {
    fn into_string(self) -> String {
        match self {
            Id::Text(s) => s.trim().to_string(),
            Id::Int(i) => i.to_string(),
        }
    }
}

#[derive(Deserialize)]
struct RawNode {
    id: Id,
    label: String,
    #[serde(default)]
    description: Option<String>,
    #[serde(default, rename = "match")]
    claim: Option<String>,
}

#[derive(Deserialize)]
struct RawEdge {
    subject: Id,
    predicate: String,
    object: Id,
}

#[derive(Deserialize)]
struct RawGraph {
    nodes: Vec<RawNode>,
    #[serde(default)]
    edges: Vec<RawEdge>,
}

/// Balanced `{...}` spans in `text`, in order of their opening brace.
/// String literals (with escapes) are skipped when counting braces.
pub fn json_object_spans(text: &str) -> Vec<&str> {
    let bytes = text.as_bytes();
    let mut spans = Vec::new();
    for start in bytes.iter().enumerate().filter(|(_, &b)| b == b'{').map(|(i, _)| i) {
        let mut depth = 0usize;
        let mut in_str = false;
        let mut escaped = false;
        for (off, &b) in bytes[start..].iter().enumerate() {
            if in_str {
                match b {
                    _ if escaped => escaped = false,
                    b'\\' => escaped = true,
                    b'"' => in_str = false,
                    _ => {}
                }
                continue;
            }
            match b {
                b'"' => in_str = true,
                b'{' => depth += 1,
                b'}' => {
                    depth -= 1;
                    if depth == 0 {
                        spans.push(&text[start..start + off + 1]);
                        break;
                    }
                }
                _ => {}
            }
        }
    }
    spans
}

/// Parses the first JSON object with a `nodes` field. Claims naming a label
/// absent from `global` are nulled; self-loops, empty predicates and edges
/// with unresolvable endpoints are dropped. Each of these leaves a diagnostic.
pub fn parse_window_graph(text: &str, global: &SceneGraph) -> Result<WindowGraph, ParseError> {
    let raw = || text.to_string();
    let mut saw_json = false;
    let value = json_object_spans(text)
        .into_iter()
        .filter_map(|s| serde_json::from_str::<serde_json::Value>(s).ok())
        .inspect(|_| saw_json = true)
        .find(|v| v.get("nodes").is_some());
    let Some(value) = value else {
        return Err(if saw_json {
            ParseError::Schema { message: "no object with a `nodes` field".into(), raw: raw() }
        } else {
            ParseError::NoJson { raw: raw() }
        });
    };
    let parsed: RawGraph =
        serde_json::from_value(value).map_err(|e| ParseError::Schema { message: e.to_string(), raw: raw() })?;

    let global_labels: HashSet<String> = global.nodes().iter().map(ObjectNode::canonical_label).collect();
    let mut diagnostics = Vec::new();
    let mut nodes = Vec::new();
    let mut claims = Vec::new();
    let mut seen = HashSet::new();
    for n in parsed.nodes {
        let id = n.id.into_string();
        if id.is_empty() {
            return Err(ParseError::Schema { message: "node with empty id".into(), raw: raw() });
        }
        if !seen.insert(id.clone()) {
            return Err(ParseError::Schema { message: format!("duplicate node id `{id}`"), raw: raw() });
        }
        if n.label.trim().is_empty() {
            return Err(ParseError::Schema { message: format!("node `{id}` has an empty label"), raw: raw() });
        }
        let claim = match n.claim.filter(|c| !c.trim().is_empty()) {
            Some(c) if global_labels.contains(&canonical_text(&c)) => Some(c.trim().to_string()),
            Some(c) => {
                diagnostics.push(format!("node `{id}` claims unknown global label `{c}`; treated as new"));
                None
            }
            None => None,
        };
        let mut node = ObjectNode::new(id.clone(), n.label.trim());
        node.description = n.description.filter(|d| !d.trim().is_empty());
        nodes.push(node);
        claims.push((id, claim));
    }

    let mut by_label: HashMap<String, Vec<&str>> = HashMap::new();
    for n in &nodes {
        by_label.entry(n.canonical_label()).or_default().push(&n.id);
    }
    let resolve = |endpoint: &str, diagnostics: &mut Vec<String>| -> Option<String> {
        if seen.contains(endpoint) {
            return Some(endpoint.to_string());
        }
        match by_label.get(&canonical_text(endpoint)).map(Vec::as_slice) {
            Some([only]) => {
                diagnostics.push(format!("endpoint `{endpoint}` resolved by label to `{only}`"));
                Some(only.to_string())
            }
            _ => None,
        }
    };
    let mut edges = Vec::new();
    for e in parsed.edges {
        let (s, o) = (e.subject.into_string(), e.object.into_string());
        if e.predicate.trim().is_empty() {
            diagnostics.push(format!("dropped edge {s} -> {o}: empty predicate"));
            continue;
        }
        let (Some(subject), Some(object)) = (resolve(&s, &mut diagnostics), resolve(&o, &mut diagnostics)) else {
            diagnostics.push(format!("dropped edge {s} -[{}]-> {o}: unknown endpoint", e.predicate));
            continue;
        };
        if subject == object {
            diagnostics.push(format!("dropped self-relation on `{subject}` ({})", e.predicate));
            continue;
        }
        edges.push(Triplet::new(subject, e.predicate.trim(), object));
    }

    let graph = SceneGraph::from_parts(None, nodes, edges)
        .map_err(|e| ParseError::Schema { message: e.to_string(), raw: raw() })?;
    Ok(WindowGraph {
        graph,
        claims,
        diagnostics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn global() -> SceneGraph {
        SceneGraph::from_parts(None, vec![ObjectNode::new("n0", "chair")], vec![]).unwrap()
    }

    const GOOD: &str = r#"{"nodes":[{"id":"a","label":"chair","match":"Chair"},{"id":"b","label":"floor","match":null}],
        "edges":[{"subject":"a","predicate":"standing on","object":"b"}]}"#;

    #[test]
    fn well_formed_reply() {
        let w = parse_window_graph(GOOD, &global()).unwrap();
        assert_eq!(w.graph.nodes().len(), 2);
        assert_eq!(w.graph.edges(), &[Triplet::new("a", "standing on", "b")]);
        assert_eq!(w.claims, vec![("a".into(), Some("Chair".into())), ("b".into(), None)]);
        assert!(w.diagnostics.is_empty());
    }

    #[test]
    fn prose_around_json() {
        let text = format!("Sure! Here is the graph:\n```json\n{GOOD}\n```\nLet me know {{if}} you need more.");
        assert_eq!(parse_window_graph(&text, &global()).unwrap(), parse_window_graph(GOOD, &global()).unwrap());
    }

    #[test]
    fn braces_inside_strings() {
        let text = r#"{"nodes":[{"id":"a","label":"shelf {left}"},{"id":"b","label":"wall"}],"edges":[]}"#;
        assert_eq!(json_object_spans(text)[0], text);
        assert_eq!(parse_window_graph(text, &SceneGraph::default()).unwrap().graph.nodes()[0].label, "shelf {left}");
    }

    #[test]
    fn bad_claim_is_nulled() {
        let text = r#"{"nodes":[{"id":"a","label":"sofa","match":"sofa"}],"edges":[]}"#;
        let w = parse_window_graph(text, &global()).unwrap();
        assert_eq!(w.claims, vec![("a".into(), None)]);
        assert_eq!(w.diagnostics.len(), 1);
    }

    #[test]
    fn self_loops_and_dangling_dropped() {
        let text = r#"{"nodes":[{"id":1,"label":"lamp"},{"id":2,"label":"table"}],
            "edges":[{"subject":1,"predicate":"on","object":1},{"subject":"1","predicate":"on","object":"table"},
                     {"subject":"1","predicate":"near","object":"ghost"},{"subject":"1","predicate":" ","object":"2"}]}"#;
        let w = parse_window_graph(text, &SceneGraph::default()).unwrap();
        assert_eq!(w.graph.edges(), &[Triplet::new("1", "on", "2")]);
        assert_eq!(w.diagnostics.len(), 4);
    }

    #[test]
    fn failures() {
        assert!(matches!(parse_window_graph("no json here", &global()), Err(ParseError::NoJson { .. })));
        assert!(matches!(parse_window_graph(r#"{"foo": 1}"#, &global()), Err(ParseError::Schema { .. })));
        assert!(matches!(
            parse_window_graph(r#"{"nodes":[{"id":"a","label":"x"},{"id":"a","label":"y"}]}"#, &global()),
            Err(ParseError::Schema { .. })
        ));
        assert!(matches!(
            parse_window_graph(r#"{"nodes":[{"id":"a","label":"  "}]}"#, &global()),
            Err(ParseError::Schema { .. })
        ));
        let err = parse_window_graph("{unbalanced", &global()).unwrap_err();
        assert_eq!(err.raw(), "{unbalanced");
    }
}
