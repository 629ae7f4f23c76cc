//! Chat-model client contract and the in-process backends used for testing
//! and record/replay.

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Duration;

use base64::Engine as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use xxhash_rust::xxh64::xxh64;

use super::prompt::{SECTION_GRAPH, SECTION_REFS, SECTION_TASK};
use crate::embedding::ErrorBody;
use crate::scene_graph::{canonical_text, NodeMatchPolicy, ObjectNode};

/// One chat call: text plus the window's images in frame order.
#[derive(Debug, Clone, PartialEq)]
pub struct ChatRequest {
    pub system: String,
    pub user: String,
    pub images: Vec<Vec<u8>>,
    /// Structured-output hint; `Null` when free text is expected.
    pub json_schema: serde_json::Value,
}

#[derive(Serialize)]
struct ChatWire<'a> {
    system: &'a str,
    user: &'a str,
    images_b64: Vec<String>,
    json_schema: &'a serde_json::Value,
}

#[derive(Deserialize)]
struct ChatReply {
    text: String,
}

impl ChatRequest {
    /// `POST /v1/chat` body.
    pub fn to_wire(&self) -> Vec<u8> {
        let engine = base64::engine::general_purpose::STANDARD;
        let wire = ChatWire {
            system: &self.system,
            user: &self.user,
            images_b64: self.images.iter().map(|i| engine.encode(i)).collect(),
            json_schema: &self.json_schema,
        };
        serde_json::to_vec(&wire).expect("chat request serializes")
    }

    /// xxh64 of the wire bytes, hex.
    pub fn digest(&self) -> String {
        format!("{:016x}", xxh64(&self.to_wire(), 0))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChatPurpose {
    Generate,
    Repair,
    Abstract,
    Judge,
}

/// Where a call sits in a run. `call_index` counts calls within one scene.
#[derive(Debug, Clone, Copy)]
pub struct ChatContext<'a> {
    pub scene_id: &'a str,
    pub window: Option<usize>,
    pub call_index: usize,
    pub purpose: ChatPurpose,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ChatError {
    #[error("chat backend unreachable after {attempts} attempt(s): {message}")]
    Transport { attempts: usize, message: String },
    #[error("chat backend returned status {status}: {message}")]
    Backend { status: u16, message: String },
    #[error("chat response violates the contract: {0}")]
    Contract(String),
    #[error("scripted chat: {0}")]
    Script(String),
}

pub trait ChatClient: Send + Sync {
    fn chat(&self, ctx: &ChatContext<'_>, request: &ChatRequest) -> Result<String, ChatError>;
    fn describe(&self) -> String;
}

/// Client for `POST /v1/chat` (temperature is pinned server-side).
#[derive(Debug, Clone)]
pub struct HttpChatClient {
    base_url: String,
    retries: usize,
    agent: ureq::Agent,
}

impl HttpChatClient {
    pub fn new(base_url: impl Into<String>, timeout: Duration, retries: usize) -> Self {
        Self {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            retries,
            agent: crate::http::agent(timeout),
        }
    }
}

impl ChatClient for HttpChatClient {
    fn chat(&self, _ctx: &ChatContext<'_>, request: &ChatRequest) -> Result<String, ChatError> {
        let url = format!("{}/v1/chat", self.base_url);
        let (status, text) = crate::http::post_json(&self.agent, &url, &request.to_wire(), self.retries)
            .map_err(|(attempts, message)| ChatError::Transport { attempts, message })?;
        if status != 200 {
            let message = serde_json::from_str::<ErrorBody>(&text).map(|b| b.error).unwrap_or(text);
            return Err(ChatError::Backend { status, message });
        }
        serde_json::from_str::<ChatReply>(&text)
            .map(|r| r.text)
            .map_err(|e| ChatError::Contract(e.to_string()))
    }

    fn describe(&self) -> String {
        format!("http({})", self.base_url)
    }
}

/// Canned responses indexed by the per-scene call counter.
///
/// Script file: either a JSON array of response strings used for every scene,
/// or `{"default": [...], "scenes": {"<scene_id>": [...]}}`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ChatScript {
    #[serde(default)]
    pub default: Vec<String>,
    #[serde(default)]
    pub scenes: BTreeMap<String, Vec<String>>,
}

#[derive(Debug, Clone)]
pub struct ScriptedChat {
    script: ChatScript,
    digest: u64,
}

impl ScriptedChat {
    pub fn new(script: ChatScript) -> Self {
        let digest = xxh64(&serde_json::to_vec(&script).expect("script serializes"), 0);
        Self { script, digest }
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        let script = match serde_json::from_str::<Vec<String>>(text) {
            Ok(default) => ChatScript {
                default,
                scenes: BTreeMap::new(),
            },
            Err(_) => serde_json::from_str(text)?,
        };
        Ok(Self::new(script))
    }
}

impl ChatClient for ScriptedChat {
    fn chat(&self, ctx: &ChatContext<'_>, _request: &ChatRequest) -> Result<String, ChatError> {
        let list = self.script.scenes.get(ctx.scene_id).unwrap_or(&self.script.default);
        list.get(ctx.call_index).cloned().ok_or_else(|| {
            ChatError::Script(format!(
                "no response for call {} of scene `{}` ({} scripted)",
                ctx.call_index,
                ctx.scene_id,
                list.len()
            ))
        })
    }

    fn describe(&self) -> String {
        format!("scripted({:016x})", self.digest)
    }
}

/// Always answers with the same text.
#[derive(Debug, Clone)]
pub struct FixedChat(pub String);

impl ChatClient for FixedChat {
    fn chat(&self, _ctx: &ChatContext<'_>, _request: &ChatRequest) -> Result<String, ChatError> {
        Ok(self.0.clone())
    }

    fn describe(&self) -> String {
        format!("fixed({:016x})", xxh64(self.0.as_bytes(), 0))
    }
}

/// A recorded call, as kept in run reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatExchange {
    pub scene_id: String,
    pub call_index: usize,
    pub window: Option<usize>,
    pub purpose: ChatPurpose,
    pub request_xxh64: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Replays recorded exchanges. A request whose digest differs from the
/// recording is rejected, so divergence is detected instead of masked.
#[derive(Debug, Clone, Default)]
pub struct ReplayChat {
    calls: HashMap<(String, usize), ChatExchange>,
}

impl ReplayChat {
    pub fn new(exchanges: impl IntoIterator<Item = ChatExchange>) -> Self {
        Self {
            calls: exchanges
                .into_iter()
                .map(|x| ((x.scene_id.clone(), x.call_index), x))
                .collect(),
        }
    }
}

impl ChatClient for ReplayChat {
    fn chat(&self, ctx: &ChatContext<'_>, request: &ChatRequest) -> Result<String, ChatError> {
        let x = self
            .calls
            .get(&(ctx.scene_id.to_string(), ctx.call_index))
            .ok_or_else(|| ChatError::Script(format!("no recorded call {} for scene `{}`", ctx.call_index, ctx.scene_id)))?;
        let digest = request.digest();
        if digest != x.request_xxh64 {
            return Err(ChatError::Script(format!(
                "call {} of scene `{}` diverged from the recording ({} != {})",
                ctx.call_index, ctx.scene_id, digest, x.request_xxh64
            )));
        }
        match (&x.response, &x.error) {
            (Some(r), _) => Ok(r.clone()),
            (None, Some(e)) => Err(ChatError::Script(format!("recorded failure: {e}"))),
            (None, None) => Err(ChatError::Script("recording has neither response nor error".into())),
        }
    }

    fn describe(&self) -> String {
        format!("replay({} calls)", self.calls.len())
    }
}

/// Offline stand-in for a real model: turns the prompt's reference lines into
/// a window graph, claiming existing global nodes with the same label. With no
/// references it reports an empty graph. Abstraction calls get a one-line
/// predicate summary, judge calls compare labels.
#[derive(Debug, Clone, Copy)]
pub struct EchoChat {
    pub max_edges: usize,
}

impl Default for EchoChat {
    fn default() -> Self {
        Self { max_edges: 8 }
    }
}

fn section<'t>(text: &'t str, header: &str) -> Option<&'t str> {
    let start = text.find(&format!("{header}:"))? + header.len() + 1;
    let rest = &text[start..];
    let end = [SECTION_GRAPH, SECTION_REFS, SECTION_TASK]
        .iter()
        .filter_map(|h| rest.find(&format!("\n{h}:")))
        .min()
        .unwrap_or(rest.len());
    Some(&rest[..end])
}

fn reference_lines(text: &str) -> Vec<(String, String, String)> {
    section(text, SECTION_REFS)
        .map(|s| {
            s.lines()
                .filter_map(|l| l.strip_prefix("- "))
                .filter_map(|l| {
                    let parts: Vec<&str> = l.split(" — ").collect();
                    (parts.len() == 3).then(|| (parts[0].to_string(), parts[1].to_string(), parts[2].to_string()))
                })
                .collect()
        })
        .unwrap_or_default()
}

fn global_labels(text: &str) -> Vec<String> {
    section(text, SECTION_GRAPH)
        .map(|s| {
            s.lines()
                .take_while(|l| !l.starts_with("edges:"))
                .filter_map(|l| l.strip_prefix("- "))
                .filter_map(|l| l.split_once(": "))
                .map(|(_, rest)| canonical_text(rest.split(" | ").next().unwrap_or(rest)))
                .collect()
        })
        .unwrap_or_default()
}

impl ChatClient for EchoChat {
    fn chat(&self, ctx: &ChatContext<'_>, request: &ChatRequest) -> Result<String, ChatError> {
        match ctx.purpose {
            ChatPurpose::Abstract => {
                let mut preds: Vec<String> = reference_lines(&request.user).into_iter().map(|(_, p, _)| p).collect();
                preds.sort();
                preds.dedup();
                Ok(format!("Predicates used in similar scenes: {}.", preds.join(", ")))
            }
            ChatPurpose::Judge => {
                let labels: Vec<String> = request
                    .user
                    .lines()
                    .filter_map(|l| l.strip_prefix("A: ").or_else(|| l.strip_prefix("B: ")))
                    .map(canonical_text)
                    .collect();
                Ok(if labels.len() == 2 && labels[0] == labels[1] { "yes" } else { "no" }.into())
            }
            ChatPurpose::Generate | ChatPurpose::Repair => {
                let existing = global_labels(&request.user);
                let mut labels: Vec<String> = Vec::new();
                let mut edges = Vec::new();
                for (s, p, o) in reference_lines(&request.user).into_iter().take(self.max_edges) {
                    for l in [&s, &o] {
                        if !labels.contains(l) {
                            labels.push(l.clone());
                        }
                    }
                    let id = |l: &str| format!("w{}", labels.iter().position(|x| x == l).unwrap());
                    edges.push(serde_json::json!({ "subject": id(&s), "predicate": p, "object": id(&o) }));
                }
                let nodes: Vec<_> = labels
                    .iter()
                    .enumerate()
                    .map(|(i, l)| {
                        let claim = existing.contains(&canonical_text(l)).then(|| l.clone());
                        serde_json::json!({ "id": format!("w{i}"), "label": l, "match": claim })
                    })
                    .collect();
                Ok(serde_json::json!({ "nodes": nodes, "edges": edges }).to_string())
            }
        }
    }

    fn describe(&self) -> String {
        format!("echo(max_edges={})", self.max_edges)
    }
}

/// Node-identity policy backed by a chat model ("same object? yes/no").
/// Falls back to exact label equality when the call fails.
pub struct ChatJudge<'c> {
    chat: &'c dyn ChatClient,
    scene_id: String,
    calls: AtomicUsize,
}

impl<'c> ChatJudge<'c> {
    pub fn new(chat: &'c dyn ChatClient, scene_id: impl Into<String>) -> Self {
        Self {
            chat,
            scene_id: scene_id.into(),
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }
}

fn describe_node(n: &ObjectNode) -> String {
    match &n.description {
        Some(d) => format!("{} ({d})", n.label),
        None => n.label.clone(),
    }
}

impl NodeMatchPolicy for ChatJudge<'_> {
    fn is_match(&self, existing: &ObjectNode, incoming: &ObjectNode) -> bool {
        let request = ChatRequest {
            system: "You judge whether two object descriptions from an indoor scene refer to the same kind of object. Answer yes or no.".into(),
            user: format!("A: {}\nB: {}", describe_node(existing), describe_node(incoming)),
            images: Vec::new(),
            json_schema: serde_json::Value::Null,
        };
        let ctx = ChatContext {
            scene_id: &self.scene_id,
            window: None,
            call_index: self.calls.fetch_add(1, Ordering::Relaxed),
            purpose: ChatPurpose::Judge,
        };
        match self.chat.chat(&ctx, &request) {
            Ok(text) => text.trim_start().to_ascii_lowercase().starts_with("yes"),
            Err(e) => {
                log::warn!("judge call failed, using label equality: {e}");
                existing.canonical_label() == incoming.canonical_label()
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ctx(scene: &str, call: usize) -> ChatContext<'_> {
        ChatContext {
            scene_id: scene,
            window: Some(0),
            call_index: call,
            purpose: ChatPurpose::Generate,
        }
    }

    fn req(user: &str) -> ChatRequest {
        ChatRequest {
            system: "sys".into(),
            user: user.into(),
            images: vec![vec![1, 2, 3]],
            json_schema: serde_json::json!({"type": "object"}),
        }
    }

    #[test]
    fn wire_shape() {
        let v: serde_json::Value = serde_json::from_slice(&req("hi").to_wire()).unwrap();
        assert_eq!(v["images_b64"], serde_json::json!(["AQID"]));
        assert_eq!(v["user"], "hi");
        assert_eq!(v["json_schema"]["type"], "object");
        assert_eq!(req("hi").digest(), req("hi").digest());
        assert_ne!(req("hi").digest(), req("ho").digest());
    }

    #[test]
    fn scripted_by_scene_and_index() {
        let chat = ScriptedChat::from_json(r#"{"default":["d0"],"scenes":{"a":["a0","a1"]}}"#).unwrap();
        assert_eq!(chat.chat(&ctx("a", 1), &req("")).unwrap(), "a1");
        assert_eq!(chat.chat(&ctx("b", 0), &req("")).unwrap(), "d0");
        assert!(matches!(chat.chat(&ctx("b", 1), &req("")), Err(ChatError::Script(_))));
        let flat = ScriptedChat::from_json(r#"["x","y"]"#).unwrap();
        assert_eq!(flat.chat(&ctx("any", 1), &req("")).unwrap(), "y");
    }

    #[test]
    fn replay_checks_digest() {
        let r = req("hello");
        let chat = ReplayChat::new([ChatExchange {
            scene_id: "s".into(),
            call_index: 0,
            window: Some(0),
            purpose: ChatPurpose::Generate,
            request_xxh64: r.digest(),
            response: Some("out".into()),
            error: None,
        }]);
        assert_eq!(chat.chat(&ctx("s", 0), &r).unwrap(), "out");
        assert!(chat.chat(&ctx("s", 0), &req("other")).is_err());
        assert!(chat.chat(&ctx("s", 1), &r).is_err());
    }

    #[test]
    fn echo_builds_graph_from_references() {
        let user = "CURRENT GRAPH:\nnodes:\n- n0: Chair | wooden\nedges:\n\nREFERENCE RELATIONSHIPS:\n- chair — standing on — floor\n- lamp — on — table\n\nTASK INSTRUCTIONS:\n...";
        let text = EchoChat::default().chat(&ctx("s", 0), &req(user)).unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["nodes"].as_array().unwrap().len(), 4);
        assert_eq!(v["nodes"][0]["match"], "chair");
        assert_eq!(v["nodes"][1]["match"], serde_json::Value::Null);
        assert_eq!(v["edges"][1]["subject"], "w2");

        let empty = EchoChat::default().chat(&ctx("s", 0), &req("CURRENT GRAPH: (empty)\n\nTASK INSTRUCTIONS:\n")).unwrap();
        assert_eq!(empty, r#"{"edges":[],"nodes":[]}"#);
    }

    #[test]
    fn judge_uses_chat_answer() {
        let yes = FixedChat("Yes, same object.".into());
        let judge = ChatJudge::new(&yes, "s");
        assert!(judge.is_match(&ObjectNode::new("a", "sofa"), &ObjectNode::new("b", "couch")));
        let echo = EchoChat::default();
        let judge = ChatJudge::new(&echo, "s");
        assert!(judge.is_match(&ObjectNode::new("a", "Sofa"), &ObjectNode::new("b", "sofa")));
        assert!(!judge.is_match(&ObjectNode::new("a", "sofa"), &ObjectNode::new("b", "couch")));
        assert_eq!(judge.calls(), 2);
    }
}
