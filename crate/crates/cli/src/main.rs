//! `sgr3`: command-line front end for the scene graph pipeline.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};

use sgr3_core::config::{Config, ConfigError, TOOL_VERSION};
use sgr3_core::dataset::{open_dataset, DatasetError, SceneDir};
use sgr3_core::evaluation::{evaluate, CandidatePairs, CopyInputs, EvalOptions, EvalReport};
use sgr3_core::generation::pipeline::prepare_kb;
use sgr3_core::generation::{
    make_windows, run_scenes, ChatClient, ChatError, ChatJudge, EchoChat, GenerationError, HttpChatClient, PromptMode,
    ReplayChat, RunReport, SceneResult, ScriptedChat, PROMPT_VERSION,
};
use sgr3_core::keyframe::{FilterError, KeyFrameBuffer};
use sgr3_core::knowledge_base::KbError;
use sgr3_core::retrieval::{collect_reference_edges, select_scene, RetrievalError, RetrievalMode};
use sgr3_core::scene_graph::{ExactLabel, GraphJsonError, NodeMatchPolicy, SceneGraph};
use sgr3_core::embedding::EmbedError;
use sgr3_core::{build_kb, load_kb, save_kb, Embedder, HttpEmbedder, KnowledgeBase, MockEmbedder};

#[derive(Parser, Debug)]
#[command(name = "sgr3", version, about = "Training-free 3D scene graph generation with retrieval-augmented prompting")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct GlobalArgs {
    /// Base configuration (bare, or embedded in a previous artifact).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Print the JSON report on stdout instead of the human summary.
    #[arg(long, global = true)]
    json: bool,
    #[arg(long, global = true, default_value = "warn")]
    log_level: String,
    /// Scenes processed in parallel.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,

    #[arg(long, global = true)]
    mock_embedder: bool,
    #[arg(long, global = true, default_value_t = 64)]
    mock_dim: usize,
    #[arg(long, global = true, default_value_t = 8)]
    mock_patches: usize,
    #[arg(long, global = true, default_value_t = 8)]
    mock_tokens: usize,
    #[arg(long, global = true, env = "SGR3_EMBEDDER_URL")]
    embedder_url: Option<String>,

    #[arg(long, global = true, env = "SGR3_CHAT_URL")]
    chat_url: Option<String>,
    /// JSON list of canned replies, or {"default": [...], "scenes": {id: [...]}}.
    #[arg(long, global = true)]
    chat_script: Option<PathBuf>,
    /// Answer chat calls from the chat log of earlier run reports.
    #[arg(long, global = true)]
    chat_replay: Vec<PathBuf>,
    /// Offline chat that echoes reference edges back as the window graph.
    #[arg(long, global = true)]
    mock_chat: bool,
    #[arg(long, global = true, default_value_t = 60)]
    timeout_secs: u64,
    #[arg(long, global = true, default_value_t = 2)]
    retries: usize,

    #[command(flatten)]
    overrides: ConfigOverrides,
}

#[derive(Args, Debug, Clone, Default)]
struct ConfigOverrides {
    #[arg(long, global = true)]
    sigma: Option<f64>,
    /// Keep every frame.
    #[arg(long, global = true)]
    no_filter: bool,
    #[arg(long, global = true)]
    max_buffer: Option<usize>,
    #[arg(long, global = true)]
    k: Option<usize>,
    #[arg(long, global = true)]
    tau: Option<f64>,
    #[arg(long, global = true)]
    window: Option<usize>,
    #[arg(long, global = true)]
    top_frames: Option<usize>,
    #[arg(long, global = true)]
    mode: Option<RetrievalMode>,
    #[arg(long, global = true)]
    prompt_mode: Option<PromptMode>,
    #[arg(long, global = true)]
    kb_fraction: Option<f64>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    record_timings: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Embed every annotated frame of a dataset and save the knowledge base.
    BuildKb { dataset: PathBuf, out: PathBuf },
    /// Run the key-frame filter over each scene.
    Filter {
        dataset: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Retrieve the reference scene and edges for each window of each scene.
    Retrieve {
        dataset: PathBuf,
        #[arg(long)]
        kb: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate scene graphs; writes <out>/<scene>/{scene_graph,run_report}.json.
    Generate {
        dataset: PathBuf,
        #[arg(long)]
        kb: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predicted graphs against ground truth.
    Eval {
        /// A scene graph file, or a `generate` output directory.
        #[arg(long)]
        pred: PathBuf,
        /// A scene graph file, a scene directory or a dataset directory.
        #[arg(long)]
        gt: PathBuf,
        /// Predictions without retrieval, for the gained/copied analysis.
        #[arg(long)]
        norag: Option<PathBuf>,
        /// JSON list of [subject_id, object_id] ground-truth pairs for the old denominator.
        #[arg(long)]
        candidates: Option<PathBuf>,
        #[arg(long, num_args = 1.., default_values_t = [10usize])]
        obj_k: Vec<usize>,
        #[arg(long, num_args = 1.., default_values_t = [3usize])]
        pred_k: Vec<usize>,
        /// Ask the chat backend whether two nodes are the same object.
        #[arg(long)]
        judge: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Ablation sweeps over one knowledge base build.
    Ablate {
        #[command(subcommand)]
        which: Ablation,
    },
}

#[derive(Args, Debug, Clone)]
struct AblateCommon {
    dataset: PathBuf,
    #[arg(long)]
    kb: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Ablation {
    /// Knowledge-base size sweep via nested scene subsets.
    KbScale {
        #[command(flatten)]
        common: AblateCommon,
        #[arg(long, num_args = 1.., default_values_t = [1.0, 0.75, 0.5, 0.25, 0.0])]
        fractions: Vec<f64>,
    },
    /// Retrieval granularity sweep.
    Granularity {
        #[command(flatten)]
        common: AblateCommon,
        #[arg(long, num_args = 1.., default_values = ["weighted_patch", "patch", "image"])]
        modes: Vec<RetrievalMode>,
    },
    /// Key-frame filter on vs off, with per-window wall-clock and redundancy.
    Filter {
        #[command(flatten)]
        common: AblateCommon,
        #[arg(long)]
        on: bool,
        #[arg(long)]
        off: bool,
    },
}

/// Error raised for invalid command-line usage.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

/// The chat backend failed for every window of a scene.
#[derive(Debug)]
struct BackendDown(String);

impl std::fmt::Display for BackendDown {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for BackendDown {}

const CHAT_FAILURE_PREFIX: &str = "chat failed";

const EXIT_OTHER: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_BACKEND: u8 = 4;

fn exit_category(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<Usage>() || cause.is::<ConfigError>() || cause.is::<clap::Error>() {
            return EXIT_CONFIG;
        }
        if cause.is::<EmbedError>() || cause.is::<ChatError>() || cause.is::<BackendDown>() {
            return EXIT_BACKEND;
        }
        if let Some(e) = cause.downcast_ref::<GenerationError>() {
            return match e {
                GenerationError::Config(_) => EXIT_CONFIG,
                GenerationError::Chat(_) => EXIT_BACKEND,
                GenerationError::Retrieval(RetrievalError::Kb(_)) => EXIT_DATA,
                _ => EXIT_OTHER,
            };
        }
        if let Some(FilterError::InvalidSigma(_)) = cause.downcast_ref::<FilterError>() {
            return EXIT_CONFIG;
        }
        if cause.is::<DatasetError>()
            || cause.is::<KbError>()
            || cause.is::<GraphJsonError>()
            || cause.is::<std::io::Error>()
            || cause.is::<serde_json::Error>()
        {
            return EXIT_DATA;
        }
        if let Some(RetrievalError::Kb(_)) = cause.downcast_ref::<RetrievalError>() {
            return EXIT_DATA;
        }
    }
    EXIT_OTHER
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .parse_filters(&cli.global.log_level)
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {}", error_message(&err));
            ExitCode::from(exit_category(&err))
        }
    }
}

/// The cause chain joined with ": ", skipping causes already quoted by their
/// parent's message.
fn error_message(err: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in err.chain() {
        let text = cause.to_string();
        if !out.contains(&text) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&text);
        }
    }
    out
}

fn resolve_config(g: &GlobalArgs) -> Result<Config> {
    let mut config = match &g.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            Config::from_json(&text).with_context(|| format!("config {}", path.display()))?
        }
        None => Config::default(),
    };
    let o = &g.overrides;
    if let Some(v) = o.sigma {
        config.sigma = v;
    }
    if o.no_filter {
        config.filter = false;
    }
    if o.max_buffer.is_some() {
        config.max_buffer = o.max_buffer;
    }
    if let Some(v) = o.k {
        config.k = v;
    }
    if let Some(v) = o.tau {
        config.tau = v;
    }
    if let Some(v) = o.window {
        config.window = v;
    }
    if let Some(v) = o.top_frames {
        config.top_frames = v;
    }
    if let Some(v) = o.mode {
        config.mode = v;
    }
    if let Some(v) = o.prompt_mode {
        config.prompt_mode = v;
    }
    if let Some(v) = o.kb_fraction {
        config.kb_fraction = v;
    }
    if let Some(v) = o.seed {
        config.seed = v;
    }
    if o.record_timings {
        config.record_timings = true;
    }
    if g.jobs == 0 {
        return Err(Usage("--jobs must be at least 1".into()).into());
    }
    config.validate()?;
    Ok(config)
}

fn make_embedder(g: &GlobalArgs) -> Result<Box<dyn Embedder>> {
    match (&g.embedder_url, g.mock_embedder) {
        (_, true) => {
            if g.mock_dim == 0 || g.mock_patches == 0 || g.mock_tokens == 0 {
                return Err(Usage("mock embedder dimensions must be positive".into()).into());
            }
            Ok(Box::new(MockEmbedder {
                dim: g.mock_dim,
                patches: g.mock_patches,
                tokens: g.mock_tokens,
            }))
        }
        (Some(url), false) => Ok(Box::new(HttpEmbedder::new(url.clone(), Duration::from_secs(g.timeout_secs), g.retries))),
        (None, false) => Err(Usage("no embedder: pass --mock-embedder or --embedder-url (or set SGR3_EMBEDDER_URL)".into()).into()),
    }
}

fn make_chat(g: &GlobalArgs) -> Result<Box<dyn ChatClient>> {
    if let Some(path) = &g.chat_script {
        let text = fs::read_to_string(path).with_context(|| format!("reading chat script {}", path.display()))?;
        let chat = ScriptedChat::from_json(&text).with_context(|| format!("chat script {}", path.display()))?;
        return Ok(Box::new(chat));
    }
    if !g.chat_replay.is_empty() {
        let mut exchanges = Vec::new();
        for path in &g.chat_replay {
            let report: RunReport = read_json(path)?;
            exchanges.extend(report.chat_log);
        }
        return Ok(Box::new(ReplayChat::new(exchanges)));
    }
    if g.mock_chat {
        return Ok(Box::new(EchoChat::default()));
    }
    match &g.chat_url {
        Some(url) => Ok(Box::new(HttpChatClient::new(url.clone(), Duration::from_secs(g.timeout_secs), g.retries))),
        None => Err(Usage(
            "no chat backend: pass --mock-chat, --chat-script, --chat-replay or --chat-url (or set SGR3_CHAT_URL)".into(),
        )
        .into()),
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn read_graph(path: &Path) -> Result<SceneGraph> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    SceneGraph::from_json(&text).with_context(|| format!("scene graph {}", path.display()))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Prints the JSON report or the human summary and writes `out` if given.
fn emit(g: &GlobalArgs, report: &Value, out: Option<&Path>, summary: &str) -> Result<()> {
    if let Some(path) = out {
        write_json(path, report)?;
    }
    let text = if g.json {
        serde_json::to_string_pretty(report)? + "\n"
    } else {
        summary.to_string()
    };
    let mut stdout = std::io::stdout().lock();
    match stdout.write_all(text.as_bytes()).and_then(|()| stdout.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn header(config: &Config) -> Value {
    json!({"tool_version": TOOL_VERSION, "prompt_version": PROMPT_VERSION, "config": config})
}

fn merge(mut base: Value, extra: Value) -> Value {
    if let (Value::Object(b), Value::Object(e)) = (&mut base, extra) {
        b.extend(e);
    }
    base
}

fn open_kb(path: &Path) -> Result<KnowledgeBase> {
    load_kb(path).with_context(|| format!("loading knowledge base {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    let mut config = resolve_config(g)?;
    match &cli.command {
        Command::BuildKb { dataset, out } => {
            let embedder = make_embedder(g)?;
            config.embedder = embedder.describe();
            cmd_build_kb(g, &config, embedder.as_ref(), dataset, out)
        }
        Command::Filter { dataset, out } => {
            let embedder = make_embedder(g)?;
            config.embedder = embedder.describe();
            cmd_filter(g, &config, embedder.as_ref(), dataset, out.as_deref())
        }
        Command::Retrieve { dataset, kb, out } => {
            let embedder = make_embedder(g)?;
            config.embedder = embedder.describe();
            cmd_retrieve(g, &config, embedder.as_ref(), dataset, kb, out.as_deref())
        }
        Command::Generate { dataset, kb, out } => {
            let embedder = make_embedder(g)?;
            let chat = make_chat(g)?;
            config.embedder = embedder.describe();
            config.chat = chat.describe();
            cmd_generate(g, &config, embedder.as_ref(), chat.as_ref(), dataset, kb.as_deref(), out)
        }
        Command::Eval {
            pred,
            gt,
            norag,
            candidates,
            obj_k,
            pred_k,
            judge,
            out,
        } => {
            let chat = if *judge { Some(make_chat(g)?) } else { None };
            let options = EvalOptions {
                obj_k: obj_k.clone(),
                pred_k: pred_k.clone(),
                candidates: match candidates {
                    Some(p) => Some(read_json::<Vec<(String, String)>>(p)?.into_iter().collect::<CandidatePairs>()),
                    None => None,
                },
                ..EvalOptions::default()
            };
            if options.obj_k.contains(&0) || options.pred_k.contains(&0) {
                return Err(Usage("K values must be at least 1".into()).into());
            }
            cmd_eval(g, &config, chat.as_deref(), pred, gt, norag.as_deref(), &options, out.as_deref())
        }
        Command::Ablate { which } => {
            let embedder = make_embedder(g)?;
            let chat = make_chat(g)?;
            config.embedder = embedder.describe();
            config.chat = chat.describe();
            cmd_ablate(g, config, embedder.as_ref(), chat.as_ref(), which)
        }
    }
}

fn cmd_build_kb(g: &GlobalArgs, config: &Config, embedder: &dyn Embedder, dataset: &Path, out: &Path) -> Result<()> {
    let scenes = open_dataset(dataset)?;
    let mut sources = Vec::new();
    for scene in &scenes {
        sources.extend(scene.kb_sources()?);
    }
    let (kb, build) = build_kb(sources, embedder)?;
    let manifest = save_kb(&kb, out).with_context(|| format!("saving knowledge base to {}", out.display()))?;
    let report = merge(
        header(config),
        json!({"scenes": scenes.len(), "build": build, "manifest": manifest}),
    );
    write_json(&out.join("build_report.json"), &report)?;
    let summary = format!(
        "knowledge base {}: {} scenes, {} frames ingested ({} failed), {} entries of dim {}\n",
        out.display(),
        scenes.len(),
        build.frames_ingested,
        build.failures.len(),
        kb.len(),
        kb.dim()
    );
    emit(g, &report, None, &summary)
}

fn cmd_filter(g: &GlobalArgs, config: &Config, embedder: &dyn Embedder, dataset: &Path, out: Option<&Path>) -> Result<()> {
    let scenes = open_dataset(dataset)?;
    let mut records = Vec::new();
    let mut summary = String::new();
    for scene in &scenes {
        let input = scene.load_input()?;
        let mut buffer = KeyFrameBuffer::new(config.sigma)?.with_max_len(config.max_buffer);
        let mut decisions = Vec::new();
        let mut failures = Vec::new();
        for (frame, image) in input.frames {
            match embedder.embed_tokens(&image) {
                Ok(tokens) if config.filter => decisions.push(buffer.filter_frame(frame, tokens)?.to_record()),
                Ok(_) => decisions.push(json!({"frame": frame.frame_id, "keep": true, "max_sim": null, "match": null})),
                Err(e) => {
                    log::warn!("{frame}: {e}");
                    failures.push(json!({"frame": frame.frame_id, "error": e.to_string()}));
                }
            }
        }
        let kept = decisions.iter().filter(|d| d["keep"] == true).count();
        summary.push_str(&format!("{}: kept {kept} of {} frames\n", scene.scene_id, scene.frames.len()));
        records.push(json!({
            "scene_id": scene.scene_id,
            "frames": scene.frames.len(),
            "kept": kept,
            "decisions": decisions,
            "failures": failures,
        }));
    }
    emit(g, &merge(header(config), json!({"scenes": records})), out, &summary)
}

fn cmd_retrieve(
    g: &GlobalArgs,
    config: &Config,
    embedder: &dyn Embedder,
    dataset: &Path,
    kb_path: &Path,
    out: Option<&Path>,
) -> Result<()> {
    let kb = open_kb(kb_path)?;
    let kb = prepare_kb(&kb, config);
    let params = config.retrieval_params();
    let mut records = Vec::new();
    let mut summary = String::new();
    for scene in open_dataset(dataset)? {
        let input = scene.load_input()?;
        let mut keyframes = Vec::new();
        let mut buffer = KeyFrameBuffer::new(config.sigma)?.with_max_len(config.max_buffer);
        for (frame, image) in input.frames {
            if config.filter {
                let tokens = embedder.embed_tokens(&image)?;
                if !buffer.filter_frame(frame.clone(), tokens)?.keep {
                    continue;
                }
            }
            keyframes.push((frame, image));
        }
        let mut windows = Vec::new();
        for window in make_windows(keyframes, config.window)? {
            let queries = window
                .frames
                .iter()
                .map(|(f, img)| Ok((f.clone(), embedder.embed_patches(img)?)))
                .collect::<Result<Vec<_>, EmbedError>>()?;
            let selection = select_scene(&queries, &kb, &params)?;
            let refs = match &selection {
                Some(s) => collect_reference_edges(&kb, s, config.top_frames)?,
                None => Default::default(),
            };
            if let Some(s) = &selection {
                summary.push_str(&format!(
                    "{} window {}: scene {} (score {:.4}), {} reference edges\n",
                    scene.scene_id,
                    window.index,
                    s.scene_id,
                    s.score,
                    refs.len()
                ));
            } else {
                summary.push_str(&format!("{} window {}: no retrieval hit\n", scene.scene_id, window.index));
            }
            windows.push(json!({
                "index": window.index,
                "frames": window.frames.iter().map(|(f, _)| f.frame_id.clone()).collect::<Vec<_>>(),
                "selection": selection,
                "reference_edges": refs,
            }));
        }
        records.push(json!({"scene_id": scene.scene_id, "windows": windows}));
    }
    emit(g, &merge(header(config), json!({"kb_scenes": kb.scenes().len(), "scenes": records})), out, &summary)
}

/// Runs `generate` over loaded scenes; failed scenes are logged and reported.
fn generate_all(
    g: &GlobalArgs,
    config: &Config,
    embedder: &dyn Embedder,
    chat: &dyn ChatClient,
    scenes: &[SceneDir],
    kb: &KnowledgeBase,
) -> Result<Vec<(String, SceneResult)>> {
    let inputs = scenes.iter().map(SceneDir::load_input).collect::<Result<Vec<_>, _>>()?;
    let results = run_scenes(&inputs, kb, embedder, chat, config, g.jobs)?;
    Ok(scenes.iter().map(|s| s.scene_id.clone()).zip(results).collect())
}

fn cmd_generate(
    g: &GlobalArgs,
    config: &Config,
    embedder: &dyn Embedder,
    chat: &dyn ChatClient,
    dataset: &Path,
    kb_path: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let scenes = open_dataset(dataset)?;
    let kb = match kb_path {
        Some(p) => open_kb(p)?,
        None => {
            log::warn!("no --kb given; generating without retrieval");
            KnowledgeBase::new(0)
        }
    };
    let mut summary = String::new();
    let mut scene_records = Vec::new();
    let mut first_error = None;
    let mut backend_down = None;
    for (scene_id, result) in generate_all(g, config, embedder, chat, &scenes, &kb)? {
        match result {
            Ok((graph, report)) => {
                let dir = out.join(&scene_id);
                fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
                fs::write(dir.join("scene_graph.json"), graph.to_json_pretty() + "\n")
                    .with_context(|| format!("writing {}", dir.display()))?;
                write_json(&dir.join("run_report.json"), &report)?;
                let s = &report.summary;
                summary.push_str(&format!(
                    "{scene_id}: {} frames, {} key frames, {}/{} windows merged ({} with references), {} nodes, {} edges\n",
                    s.frames, s.key_frames, s.windows_merged, s.windows, s.windows_with_references, s.nodes, s.edges
                ));
                let chat_failures: Vec<&str> = report
                    .windows
                    .iter()
                    .filter_map(|w| w.failure.as_deref())
                    .filter(|f| f.starts_with(CHAT_FAILURE_PREFIX))
                    .collect();
                if s.windows > 0 && chat_failures.len() == s.windows {
                    backend_down.get_or_insert_with(|| {
                        BackendDown(format!("every window of scene {scene_id} failed; first: {}", chat_failures[0]))
                    });
                }
                scene_records.push(json!({"scene_id": scene_id, "summary": report.summary}));
            }
            Err(e) => {
                summary.push_str(&format!("{scene_id}: FAILED: {e}\n"));
                scene_records.push(json!({"scene_id": scene_id, "error": e.to_string()}));
                first_error.get_or_insert((scene_id, e));
            }
        }
    }
    let report = merge(header(config), json!({"scenes": scene_records}));
    write_json(&out.join("generate_report.json"), &report)?;
    emit(g, &report, None, &summary)?;
    if let Some((scene, e)) = first_error {
        return Err(anyhow::Error::new(e).context(format!("scene {scene}")));
    }
    match backend_down {
        Some(e) => Err(e.into()),
        None => Ok(()),
    }
}

/// (scene_id, prediction, optional no-retrieval run report path) pairs.
fn load_predictions(pred: &Path) -> Result<Vec<(String, SceneGraph, Option<PathBuf>)>> {
    if pred.is_file() {
        let graph = read_graph(pred)?;
        let id = graph.scene_id.clone().unwrap_or_else(|| "scene".to_string());
        let report = pred.with_file_name("run_report.json");
        return Ok(vec![(id, graph, report.is_file().then_some(report))]);
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(pred)
        .with_context(|| format!("reading {}", pred.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("scene_graph.json").is_file())
        .collect();
    dirs.sort();
    dirs.into_iter()
        .map(|d| {
            let id = d.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
            let report = d.join("run_report.json");
            Ok((id, read_graph(&d.join("scene_graph.json"))?, report.is_file().then_some(report)))
        })
        .collect()
}

fn load_ground_truth(gt: &Path) -> Result<BTreeMap<String, SceneGraph>> {
    if gt.is_file() {
        let graph = read_graph(gt)?;
        return Ok([(graph.scene_id.clone().unwrap_or_else(|| "scene".to_string()), graph)].into());
    }
    open_dataset(gt)?
        .into_iter()
        .map(|s| Ok((s.scene_id.clone(), s.ground_truth()?)))
        .collect()
}

/// Arithmetic mean of the defined values of each headline metric.
fn mean_metrics<'a>(reports: impl IntoIterator<Item = &'a EvalReport>) -> Value {
    let mut acc: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    let mut add = |name: String, v: Option<f64>| {
        if let Some(v) = v {
            let e = acc.entry(name).or_default();
            e.0 += v;
            e.1 += 1;
        }
    };
    for r in reports {
        for (k, v) in &r.obj_recall_at {
            add(format!("obj_recall@{k}"), *v);
        }
        for (k, v) in &r.pred_recall_at {
            add(format!("pred_recall@{k}"), *v);
        }
        add("obj_mean_recall".into(), r.obj_mean_recall);
        add("rel_recall_old".into(), r.rel_recall_old);
        add("rel_recall_new".into(), r.rel_recall_new);
        add("rel_mean_recall".into(), r.rel_mean_recall);
        add("redundancy".into(), r.redundancy);
        add("copy_ratio".into(), r.copy_ratio);
        add("object_pair_copy_ratio".into(), r.object_pair_copy_ratio);
    }
    let map: serde_json::Map<String, Value> = acc.into_iter().map(|(k, (s, n))| (k, json!(s / n as f64))).collect();
    Value::Object(map)
}

fn fmt_metric(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.4}"))
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    g: &GlobalArgs,
    config: &Config,
    chat: Option<&dyn ChatClient>,
    pred: &Path,
    gt: &Path,
    norag: Option<&Path>,
    options: &EvalOptions,
    out: Option<&Path>,
) -> Result<()> {
    let preds = load_predictions(pred)?;
    let gts = load_ground_truth(gt)?;
    let norags: BTreeMap<String, SceneGraph> = match norag {
        Some(p) => load_predictions(p)?.into_iter().map(|(id, g, _)| (id, g)).collect(),
        None => BTreeMap::new(),
    };
    if preds.len() == 1 && gts.len() == 1 && pred.is_file() {
        // single-file mode: pair them regardless of scene ids
    } else if let Some((id, ..)) = preds.iter().find(|(id, ..)| !gts.contains_key(id)) {
        bail!(Usage(format!("no ground truth for predicted scene `{id}`")));
    }
    let single = preds.len() == 1 && gts.len() == 1 && pred.is_file();
    let mut reports = BTreeMap::new();
    let mut summary = String::new();
    for (id, graph, report_path) in &preds {
        let truth = if single { gts.values().next().unwrap() } else { &gts[id] };
        let refs = match (norags.get(id).or(if single { norags.values().next() } else { None }), report_path) {
            (Some(_), Some(path)) => read_json::<RunReport>(path)?.reference_edges(),
            _ => Vec::new(),
        };
        let copy = norags
            .get(id)
            .or(if single { norags.values().next() } else { None })
            .map(|n| CopyInputs { pred_norag: n, refs: &refs });
        let judge;
        let (policy, name): (&dyn NodeMatchPolicy, &str) = match chat {
            Some(c) => {
                judge = ChatJudge::new(c, id.clone());
                (&judge, "chat_judge")
            }
            None => (&ExactLabel, "exact_label"),
        };
        let report = evaluate(graph, truth, options, policy, name, copy)?;
        summary.push_str(&format!(
            "{id}: obj R {} | pred R {} | rel R(new) {} | mR {} | redundancy {}{}\n",
            fmt_metric(report.obj_recall_at.values().next().copied().flatten()),
            fmt_metric(report.pred_recall_at.values().next().copied().flatten()),
            fmt_metric(report.rel_recall_new),
            fmt_metric(report.rel_mean_recall),
            fmt_metric(report.redundancy),
            report
                .copy
                .as_ref()
                .map(|c| format!(" | copy ratio {} ({} gained)", fmt_metric(c.ratio), c.gain.len()))
                .unwrap_or_default(),
        ));
        reports.insert(id.clone(), report);
    }
    let mean = mean_metrics(reports.values());
    let report = merge(header(config), json!({"scenes": reports, "mean": mean}));
    emit(g, &report, out, &summary)
}

#[derive(Debug, Serialize)]
struct SweepPoint {
    setting: Value,
    kb_scenes: usize,
    scenes: Vec<Value>,
    reference_edges_available: usize,
    reference_edges_used: usize,
    windows: usize,
    windows_with_references: usize,
    window_ms: Vec<f64>,
    metrics: Value,
    failures: Vec<String>,
}

#[allow(clippy::too_many_arguments)]
fn sweep_point(
    g: &GlobalArgs,
    config: &Config,
    setting: Value,
    embedder: &dyn Embedder,
    chat: &dyn ChatClient,
    scenes: &[SceneDir],
    gts: &BTreeMap<String, SceneGraph>,
    kb: &KnowledgeBase,
) -> Result<SweepPoint> {
    let mut point = SweepPoint {
        setting,
        kb_scenes: prepare_kb(kb, config).scenes().len(),
        scenes: Vec::new(),
        reference_edges_available: 0,
        reference_edges_used: 0,
        windows: 0,
        windows_with_references: 0,
        window_ms: Vec::new(),
        metrics: Value::Null,
        failures: Vec::new(),
    };
    let mut reports = Vec::new();
    for (scene_id, result) in generate_all(g, config, embedder, chat, scenes, kb)? {
        match result {
            Ok((graph, run)) => {
                point.reference_edges_available = point.reference_edges_available.max(run.kb_reference_edges);
                point.reference_edges_used += run.reference_edges().len();
                point.windows += run.summary.windows;
                point.windows_with_references += run.summary.windows_with_references;
                point.window_ms.extend(run.windows.iter().filter_map(|w| w.elapsed_ms));
                let eval = match gts.get(&scene_id).filter(|t| !t.is_empty()) {
                    Some(truth) => Some(evaluate(&graph, truth, &EvalOptions::default(), &ExactLabel, "exact_label", None)?),
                    None => None,
                };
                point.scenes.push(json!({
                    "scene_id": scene_id,
                    "summary": run.summary,
                    "rel_recall_new": eval.as_ref().and_then(|e| e.rel_recall_new),
                    "redundancy": eval.as_ref().and_then(|e| e.redundancy),
                }));
                reports.extend(eval);
            }
            Err(e) => point.failures.push(format!("{scene_id}: {e}")),
        }
    }
    point.metrics = mean_metrics(&reports);
    Ok(point)
}

fn cmd_ablate(g: &GlobalArgs, config: Config, embedder: &dyn Embedder, chat: &dyn ChatClient, which: &Ablation) -> Result<()> {
    let (common, name, settings): (&AblateCommon, &str, Vec<(Value, Config)>) = match which {
        Ablation::KbScale { common, fractions } => {
            if let Some(f) = fractions.iter().find(|f| !(0.0..=1.0).contains(*f)) {
                bail!(Usage(format!("fraction {f} outside [0, 1]")));
            }
            let s = fractions
                .iter()
                .map(|&f| (json!({"kb_fraction": f}), Config { kb_fraction: f, ..config.clone() }))
                .collect();
            (common, "kb-scale", s)
        }
        Ablation::Granularity { common, modes } => {
            let s = modes
                .iter()
                .map(|&m| (json!({"mode": m}), Config { mode: m, ..config.clone() }))
                .collect();
            (common, "granularity", s)
        }
        Ablation::Filter { common, on, off } => {
            let both = !on && !off;
            let s = [(true, *on || both), (false, *off || both)]
                .into_iter()
                .filter(|(_, wanted)| *wanted)
                .map(|(f, _)| {
                    (
                        json!({"filter": f}),
                        Config {
                            filter: f,
                            record_timings: true,
                            ..config.clone()
                        },
                    )
                })
                .collect();
            (common, "filter", s)
        }
    };
    let kb = open_kb(&common.kb)?;
    let scenes = open_dataset(&common.dataset)?;
    let gts = scenes
        .iter()
        .map(|s| Ok((s.scene_id.clone(), s.ground_truth()?)))
        .collect::<Result<BTreeMap<_, _>>>()?;
    let mut points = Vec::new();
    let mut summary = format!("ablation {name} over {} scenes\n", scenes.len());
    for (setting, cfg) in settings {
        cfg.validate()?;
        let p = sweep_point(g, &cfg, setting, embedder, chat, &scenes, &gts, &kb)?;
        let mean_ms = (!p.window_ms.is_empty()).then(|| p.window_ms.iter().sum::<f64>() / p.window_ms.len() as f64);
        summary.push_str(&format!(
            "{}: kb scenes {}, reference edges available {}, used {}, windows with references {}/{}, rel R(new) {}, redundancy {}{}\n",
            p.setting,
            p.kb_scenes,
            p.reference_edges_available,
            p.reference_edges_used,
            p.windows_with_references,
            p.windows,
            fmt_metric(p.metrics.get("rel_recall_new").and_then(Value::as_f64)),
            fmt_metric(p.metrics.get("redundancy").and_then(Value::as_f64)),
            mean_ms.map(|m| format!(", {m:.1} ms/window")).unwrap_or_default(),
        ));
        points.push(p);
    }
    let report = merge(header(&config), json!({"ablation": name, "points": points}));
    emit(g, &report, common.out.as_deref(), &summary)
}
