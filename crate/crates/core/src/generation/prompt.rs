//! Prompt template. Any change to the wording must bump `PROMPT_VERSION`,
//! which is stamped into run reports.

use std::fmt::Write as _;

use super::chat::{ChatClient, ChatContext, ChatRequest};
use super::{GenerationError, Window};
use crate::retrieval::ReferenceEdges;
use crate::scene_graph::SceneGraph;

pub const PROMPT_VERSION: &str = "sgr3-prompt/1";

pub const SECTION_GRAPH: &str = "CURRENT GRAPH";
pub const SECTION_REFS: &str = "REFERENCE RELATIONSHIPS";
pub const SECTION_TASK: &str = "TASK INSTRUCTIONS";

const SYSTEM: &str = "You build 3D semantic scene graphs of indoor scans from RGB key frames. \
Reply with a single JSON object and nothing else.";

/// What goes into the reference section.
#[derive(Debug, Clone, Copy)]
pub enum ReferenceBlock<'a> {
    Raw(&'a ReferenceEdges),
    Abstract(&'a str),
}

pub fn output_schema() -> serde_json::Value {
    serde_json::json!({
        "type": "object",
        "required": ["nodes", "edges"],
        "properties": {
            "nodes": {
                "type": "array",
                "items": {
                    "type": "object",
                    "required": ["id", "label", "match"],
                    "properties": {
                        "id": {"type": "string"},
                        "label": {"type": "string"},
                        "description": {"type": ["string", "null"]},
                        "match": {"type": ["string", "null"]}
                    }
                }
            },
            "edges": {
                "type": "array",
                "items": {
                    "type": "object",
                    "required": ["subject", "predicate", "object"],
                    "properties": {
                        "subject": {"type": "string"},
                        "predicate": {"type": "string"},
                        "object": {"type": "string"}
                    }
                }
            }
        }
    })
}

fn write_graph(out: &mut String, global: &SceneGraph) {
    if global.nodes().is_empty() {
        out.push_str(SECTION_GRAPH);
        out.push_str(": (empty)\n");
        return;
    }
    let _ = writeln!(out, "{SECTION_GRAPH}:\nnodes:");
    for n in global.nodes() {
        match &n.description {
            Some(d) => {
                let _ = writeln!(out, "- {}: {} | {}", n.id, n.label, d);
            }
            None => {
                let _ = writeln!(out, "- {}: {}", n.id, n.label);
            }
        }
    }
    out.push_str("edges:\n");
    for e in global.edges() {
        let label = |id: &str| global.label_of(id).unwrap_or_default().to_string();
        let _ = writeln!(
            out,
            "- {} ({}) — {} — {} ({})",
            label(&e.subject),
            e.subject,
            e.predicate,
            label(&e.object),
            e.object
        );
    }
}

/// Deterministic request for one window.
pub fn build_prompt(window: &Window, refs: Option<ReferenceBlock<'_>>, global: &SceneGraph) -> ChatRequest {
    let mut user = String::new();
    write_graph(&mut user, global);

    let has_refs = match refs {
        Some(ReferenceBlock::Raw(r)) if !r.is_empty() => {
            let _ = writeln!(user, "\n{SECTION_REFS}:");
            for e in &r.edges {
                let _ = writeln!(user, "- {} — {} — {}", e.subject, e.predicate, e.object);
            }
            true
        }
        Some(ReferenceBlock::Abstract(text)) if !text.trim().is_empty() => {
            let _ = writeln!(user, "\n{SECTION_REFS}:\n{}", text.trim());
            true
        }
        _ => false,
    };

    let frames: Vec<&str> = window.frames.iter().map(|(f, _)| f.frame_id.as_str()).collect();
    let _ = writeln!(user, "\n{SECTION_TASK}:");
    let _ = writeln!(
        user,
        "The {} attached images are consecutive key frames of one scan (window {}; frames: {}).",
        frames.len(),
        window.index,
        frames.join(", ")
    );
    user.push_str(
        "1. Match: for every object visible in the images that is already in the current graph, \
set \"match\" to that node's label.\n\
2. Detect: list objects not yet in the graph with \"match\": null.\n\
3. Relate: give relationship triplets between listed objects, referring to them by \"id\".\n",
    );
    if has_refs {
        user.push_str("Use the reference relationships as guidance for plausible predicates; only state relationships supported by the images.\n");
    }
    user.push_str("Output JSON schema:\n");
    user.push_str(&serde_json::to_string(&output_schema()).expect("schema serializes"));
    user.push('\n');

    ChatRequest {
        system: SYSTEM.to_string(),
        user,
        images: window.frames.iter().map(|(_, img)| img.clone()).collect(),
        json_schema: output_schema(),
    }
}

/// Follow-up request after an unparseable reply.
pub fn repair_request(original: &ChatRequest, error: &str) -> ChatRequest {
    let mut repaired = original.clone();
    let _ = write!(
        repaired.user,
        "\nYour previous reply could not be used ({error}). Reply again with only the JSON object described above."
    );
    repaired
}

/// Request asking the model to summarize reference triplets into
/// predicate-usage guidance.
pub fn abstraction_request(refs: &ReferenceEdges) -> Result<ChatRequest, GenerationError> {
    if refs.is_empty() {
        return Err(GenerationError::Config("abstraction requested without reference edges".into()));
    }
    let mut user = format!("{SECTION_REFS}:\n");
    for e in &refs.edges {
        let _ = writeln!(user, "- {} — {} — {}", e.subject, e.predicate, e.object);
    }
    user.push_str(
        "\nSummarize these relationships as general patterns of predicate usage \
(which predicates connect which kinds of objects). Do not list individual triplets.",
    );
    Ok(ChatRequest {
        system: "You summarize scene-graph relationships.".to_string(),
        user,
        images: Vec::new(),
        json_schema: serde_json::Value::Null,
    })
}

/// Summary text that replaces the raw reference lines in abstraction mode.
pub fn abstract_references(
    refs: &ReferenceEdges,
    chat: &dyn ChatClient,
    ctx: &ChatContext<'_>,
) -> Result<String, GenerationError> {
    let request = abstraction_request(refs)?;
    Ok(chat.chat(ctx, &request)?)
}
