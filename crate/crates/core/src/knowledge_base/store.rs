//! On-disk layout:
//!
//! ```text
//! <dir>/manifest.json                    {"version":1,"dim":D,"count":N,"checksum_xxh64":"<hex>"}
//! <dir>/embeddings.bin                   N×D little-endian f32, row-major
//! <dir>/entries.jsonl                    line i: {"scene","frame","ordinal","patch"} for row i
//! <dir>/subgraphs/<scene>/<frame>.json   scene graph JSON
//! ```

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use xxhash_rust::xxh64::xxh64;

use super::{EntryMeta, KbError, KnowledgeBase};
use crate::embedding::FrameRef;
use crate::scene_graph::SceneGraph;

pub const KB_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub dim: usize,
    pub count: usize,
    pub checksum_xxh64: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct EntryLine {
    scene: String,
    frame: String,
    ordinal: u32,
    patch: u32,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> KbError + '_ {
    move |source| KbError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn checksum_hex(bytes: &[u8]) -> String {
    format!("{:016x}", xxh64(bytes, 0))
}

fn subgraph_path(dir: &Path, frame: &FrameRef) -> PathBuf {
    dir.join("subgraphs")
        .join(&frame.scene_id)
        .join(format!("{}.json", frame.frame_id))
}

pub fn save_kb(kb: &KnowledgeBase, dir: &Path) -> Result<Manifest, KbError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;

    let mut blob = Vec::with_capacity(kb.embeddings.len() * 4);
    for x in &kb.embeddings {
        blob.extend_from_slice(&x.to_le_bytes());
    }
    let emb_path = dir.join("embeddings.bin");
    fs::write(&emb_path, &blob).map_err(io_err(&emb_path))?;

    let entries_path = dir.join("entries.jsonl");
    let file = fs::File::create(&entries_path).map_err(io_err(&entries_path))?;
    let mut out = BufWriter::new(file);
    for meta in &kb.entries {
        let frame = &kb.frames[meta.frame as usize];
        let line = EntryLine {
            scene: frame.scene_id.clone(),
            frame: frame.frame_id.clone(),
            ordinal: frame.ordinal,
            patch: meta.patch,
        };
        serde_json::to_writer(&mut out, &line).map_err(|e| KbError::Io {
            path: entries_path.clone(),
            source: e.into(),
        })?;
        out.write_all(b"\n").map_err(io_err(&entries_path))?;
    }
    out.flush().map_err(io_err(&entries_path))?;

    let sub_root = dir.join("subgraphs");
    if sub_root.exists() {
        fs::remove_dir_all(&sub_root).map_err(io_err(&sub_root))?;
    }
    for (frame, graph) in kb.frames.iter().zip(&kb.subgraphs) {
        let path = subgraph_path(dir, frame);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
        fs::write(&path, graph.to_json_pretty()).map_err(io_err(&path))?;
    }

    let manifest = Manifest {
        version: KB_FORMAT_VERSION,
        dim: kb.dim,
        count: kb.entries.len(),
        checksum_xxh64: checksum_hex(&blob),
    };
    let manifest_path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&manifest_path, text).map_err(io_err(&manifest_path))?;
    Ok(manifest)
}

pub fn load_kb(dir: &Path) -> Result<KnowledgeBase, KbError> {
    let manifest_path = dir.join("manifest.json");
    let text = fs::read_to_string(&manifest_path).map_err(io_err(&manifest_path))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| KbError::Manifest(e.to_string()))?;
    if manifest.version != KB_FORMAT_VERSION {
        return Err(KbError::VersionMismatch {
            found: manifest.version,
            expected: KB_FORMAT_VERSION,
        });
    }

    let emb_path = dir.join("embeddings.bin");
    let blob = fs::read(&emb_path).map_err(io_err(&emb_path))?;
    let expected_len = (manifest.count * manifest.dim * 4) as u64;
    if blob.len() as u64 != expected_len {
        return Err(KbError::Truncated {
            expected: expected_len,
            found: blob.len() as u64,
        });
    }
    let actual = checksum_hex(&blob);
    if !actual.eq_ignore_ascii_case(&manifest.checksum_xxh64) {
        return Err(KbError::ChecksumMismatch {
            expected: manifest.checksum_xxh64,
            actual,
        });
    }
    let embeddings: Vec<f32> = blob
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();

    let entries_path = dir.join("entries.jsonl");
    let file = fs::File::open(&entries_path).map_err(io_err(&entries_path))?;
    let mut kb = KnowledgeBase::new(manifest.dim);
    let mut frame_of: HashMap<(String, String), u32> = HashMap::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(&entries_path))?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: EntryLine = serde_json::from_str(&line).map_err(|e| KbError::Entries {
            line: i + 1,
            message: e.to_string(),
        })?;
        super::check_path_component(&entry.scene)?;
        super::check_path_component(&entry.frame)?;
        let key = (entry.scene.clone(), entry.frame.clone());
        let frame_idx = match frame_of.get(&key) {
            Some(&idx) => {
                if kb.frames[idx as usize].ordinal != entry.ordinal {
                    return Err(KbError::Entries {
                        line: i + 1,
                        message: format!("ordinal changed for frame {}/{}", entry.scene, entry.frame),
                    });
                }
                idx
            }
            None => {
                let idx = kb.frames.len() as u32;
                let frame = FrameRef::new(entry.scene, entry.frame, entry.ordinal);
                let path = subgraph_path(dir, &frame);
                let text = fs::read_to_string(&path).map_err(io_err(&path))?;
                let graph = SceneGraph::from_json(&text).map_err(|source| KbError::Subgraph {
                    path: path.clone(),
                    source,
                })?;
                frame_of.insert(key.clone(), idx);
                kb.frame_lookup.insert(key, idx as usize);
                kb.frames.push(frame);
                kb.subgraphs.push(graph);
                idx
            }
        };
        kb.entries.push(EntryMeta {
            frame: frame_idx,
            patch: entry.patch,
        });
    }
    if kb.entries.len() != manifest.count {
        return Err(KbError::Entries {
            line: kb.entries.len(),
            message: format!(
                "entries.jsonl has {} rows but manifest count is {}",
                kb.entries.len(),
                manifest.count
            ),
        });
    }
    kb.embeddings = embeddings;
    Ok(kb)
}
