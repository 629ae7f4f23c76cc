//! Neutral on-disk dataset format.
//!
//! ```text
//! <dataset>/<scene_id>/frames/<frame_id>.{jpg,jpeg,png}
//! <dataset>/<scene_id>/graph/<frame_id>.json      per-frame subgraph (optional)
//! <dataset>/<scene_id>/scene_graph.json           full ground truth (optional)
//! ```
//!
//! Frames are ordered by natural sort of their file stem; the ordinal is the
//! position in that order. A frame without a graph file has an empty subgraph.
//! Without `scene_graph.json` the ground truth is the id-wise union of the
//! frame subgraphs.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::embedding::FrameRef;
use crate::generation::SceneInput;
use crate::knowledge_base::KbSource;
use crate::scene_graph::{union_by_id, GraphError, GraphJsonError, SceneGraph};

const IMAGE_EXTENSIONS: [&str; 3] = ["jpg", "jpeg", "png"];

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Graph {
        path: PathBuf,
        #[source]
        source: GraphJsonError,
    },
    #[error("scene {scene}: {source}")]
    Union {
        scene: String,
        #[source]
        source: GraphError,
    },
    #[error("{0} is not a scene directory (no frames/ subdirectory)")]
    NotAScene(PathBuf),
    #[error("scene {scene}: two images share the frame id `{frame}`")]
    DuplicateFrame { scene: String, frame: String },
    #[error("non-UTF-8 file name {0}")]
    Name(PathBuf),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameFile {
    pub frame: FrameRef,
    pub image: PathBuf,
    pub graph: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneDir {
    pub scene_id: String,
    pub root: PathBuf,
    pub frames: Vec<FrameFile>,
}

pub fn is_scene_dir(path: &Path) -> bool {
    path.join("frames").is_dir()
}

fn file_name(path: &Path) -> Result<String, DatasetError> {
    path.file_name()
        .and_then(|n| n.to_str())
        .map(str::to_string)
        .ok_or_else(|| DatasetError::Name(path.to_path_buf()))
}

fn read_graph(path: &Path) -> Result<SceneGraph, DatasetError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    SceneGraph::from_json(&text).map_err(|source| DatasetError::Graph {
        path: path.to_path_buf(),
        source,
    })
}

pub fn open_scene(root: &Path) -> Result<SceneDir, DatasetError> {
    if !is_scene_dir(root) {
        return Err(DatasetError::NotAScene(root.to_path_buf()));
    }
    let scene_id = file_name(root)?;
    let frames_dir = root.join("frames");
    let mut images: Vec<(String, PathBuf)> = Vec::new();
    for entry in fs::read_dir(&frames_dir).map_err(io_err(&frames_dir))? {
        let path = entry.map_err(io_err(&frames_dir))?.path();
        let is_image = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()));
        if !is_image || !path.is_file() {
            continue;
        }
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| DatasetError::Name(path.clone()))?
            .to_string();
        images.push((stem, path));
    }
    images.sort_by(|a, b| natord::compare(&a.0, &b.0).then_with(|| a.0.cmp(&b.0)));
    let mut seen = BTreeSet::new();
    let mut frames = Vec::with_capacity(images.len());
    for (ordinal, (stem, image)) in images.into_iter().enumerate() {
        if !seen.insert(stem.clone()) {
            return Err(DatasetError::DuplicateFrame {
                scene: scene_id,
                frame: stem,
            });
        }
        let graph = root.join("graph").join(format!("{stem}.json"));
        frames.push(FrameFile {
            frame: FrameRef::new(scene_id.clone(), stem, ordinal as u32),
            image,
            graph: graph.is_file().then_some(graph),
        });
    }
    Ok(SceneDir {
        scene_id,
        root: root.to_path_buf(),
        frames,
    })
}

/// Scenes of a dataset directory in sorted order. A path that is itself a
/// scene directory yields that single scene.
pub fn open_dataset(root: &Path) -> Result<Vec<SceneDir>, DatasetError> {
    if is_scene_dir(root) {
        return Ok(vec![open_scene(root)?]);
    }
    let mut dirs = Vec::new();
    for entry in fs::read_dir(root).map_err(io_err(root))? {
        let path = entry.map_err(io_err(root))?.path();
        if is_scene_dir(&path) {
            dirs.push(path);
        }
    }
    dirs.sort();
    dirs.iter().map(|d| open_scene(d)).collect()
}

impl SceneDir {
    pub fn frame_subgraph(&self, frame: &FrameFile) -> Result<SceneGraph, DatasetError> {
        match &frame.graph {
            Some(path) => read_graph(path),
            None => Ok(SceneGraph::empty(Some(self.scene_id.clone()))),
        }
    }

    pub fn kb_sources(&self) -> Result<Vec<KbSource>, DatasetError> {
        self.frames
            .iter()
            .map(|f| {
                Ok(KbSource {
                    frame: f.frame.clone(),
                    image: fs::read(&f.image).map_err(io_err(&f.image))?,
                    subgraph: self.frame_subgraph(f)?,
                })
            })
            .collect()
    }

    pub fn load_input(&self) -> Result<SceneInput, DatasetError> {
        let frames = self
            .frames
            .iter()
            .map(|f| Ok((f.frame.clone(), fs::read(&f.image).map_err(io_err(&f.image))?)))
            .collect::<Result<_, DatasetError>>()?;
        Ok(SceneInput {
            scene_id: self.scene_id.clone(),
            frames,
        })
    }

    pub fn ground_truth(&self) -> Result<SceneGraph, DatasetError> {
        let full = self.root.join("scene_graph.json");
        if full.is_file() {
            return read_graph(&full);
        }
        let graphs = self
            .frames
            .iter()
            .filter(|f| f.graph.is_some())
            .map(|f| self.frame_subgraph(f))
            .collect::<Result<Vec<_>, _>>()?;
        union_by_id(Some(self.scene_id.clone()), graphs.iter()).map_err(|source| DatasetError::Union {
            scene: self.scene_id.clone(),
            source,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene_graph::{ObjectNode, Triplet};

    fn write_scene(root: &Path, scene: &str, frames: &[&str]) -> PathBuf {
        let dir = root.join(scene);
        fs::create_dir_all(dir.join("frames")).unwrap();
        fs::create_dir_all(dir.join("graph")).unwrap();
        for f in frames {
            fs::write(dir.join("frames").join(f), f.as_bytes()).unwrap();
        }
        dir
    }

    #[test]
    fn natural_order_and_ordinals() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = write_scene(tmp.path(), "s1", &["frame10.jpg", "frame2.png", "frame1.jpg", "notes.txt"]);
        let scene = open_scene(&dir).unwrap();
        let ids: Vec<_> = scene.frames.iter().map(|f| (f.frame.frame_id.as_str(), f.frame.ordinal)).collect();
        assert_eq!(ids, [("frame1", 0), ("frame2", 1), ("frame10", 2)]);
        let input = scene.load_input().unwrap();
        assert_eq!(input.frames[2].1, b"frame10.jpg");
    }

    #[test]
    fn ground_truth_union_and_override() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = write_scene(tmp.path(), "s1", &["a.jpg", "b.jpg", "c.jpg"]);
        let g1 = SceneGraph::from_parts(None, vec![ObjectNode::new("1", "chair"), ObjectNode::new("2", "floor")], vec![Triplet::new("1", "standing on", "2")]).unwrap();
        let g2 = SceneGraph::from_parts(None, vec![ObjectNode::new("2", "floor"), ObjectNode::new("3", "lamp")], vec![Triplet::new("3", "standing on", "2")]).unwrap();
        fs::write(dir.join("graph/a.json"), g1.to_json_pretty()).unwrap();
        fs::write(dir.join("graph/b.json"), g2.to_json_pretty()).unwrap();
        let scene = open_scene(&dir).unwrap();
        let sources = scene.kb_sources().unwrap();
        assert!(sources[2].subgraph.is_empty());
        let gt = scene.ground_truth().unwrap();
        assert_eq!((gt.nodes().len(), gt.edges().len()), (3, 2));

        fs::write(dir.join("scene_graph.json"), g1.to_json_pretty()).unwrap();
        assert_eq!(scene.ground_truth().unwrap().nodes().len(), 2);
    }

    #[test]
    fn dataset_listing() {
        let tmp = tempfile::tempdir().unwrap();
        write_scene(tmp.path(), "b", &["0.png"]);
        write_scene(tmp.path(), "a", &["0.png"]);
        fs::create_dir_all(tmp.path().join("junk")).unwrap();
        let scenes = open_dataset(tmp.path()).unwrap();
        assert_eq!(scenes.iter().map(|s| s.scene_id.as_str()).collect::<Vec<_>>(), ["a", "b"]);
        assert_eq!(open_dataset(&tmp.path().join("a")).unwrap().len(), 1);
        assert!(open_dataset(&tmp.path().join("missing")).is_err());
        assert!(open_dataset(tempfile::tempdir().unwrap().path()).unwrap().is_empty());
    }

    #[test]
    fn duplicate_stems_rejected() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = write_scene(tmp.path(), "s", &["x.jpg", "x.png"]);
        assert!(matches!(open_scene(&dir), Err(DatasetError::DuplicateFrame { .. })));
    }

    #[test]
    fn bad_graph_reported_with_path() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = write_scene(tmp.path(), "s", &["x.jpg"]);
        fs::write(dir.join("graph/x.json"), "{not json").unwrap();
        let err = open_scene(&dir).unwrap().kb_sources().unwrap_err();
        assert!(err.to_string().contains("x.json"));
    }
}
