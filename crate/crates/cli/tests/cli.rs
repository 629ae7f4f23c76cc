use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures")
}

fn golden() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/golden")
}

fn sgr3(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sgr3"))
        .args(args)
        .env_remove("SGR3_EMBEDDER_URL")
        .env_remove("SGR3_CHAT_URL")
        .output()
        .expect("spawn sgr3")
}

fn ok(args: &[&str]) -> Output {
    let out = sgr3(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn json_stdout(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn build_fixture_kb(dir: &Path) -> PathBuf {
    let kb = dir.join("kb");
    ok(&["--mock-embedder", "build-kb", s(&fixtures().join("dataset")), s(&kb)]);
    kb
}

fn generate(kb: &Path, out: &Path, jobs: &str) {
    let f = fixtures();
    ok(&[
        "--mock-embedder",
        "--chat-script",
        s(&f.join("chat_script.json")),
        "--config",
        s(&f.join("config.json")),
        "--jobs",
        jobs,
        "generate",
        s(&f.join("query")),
        "--kb",
        s(kb),
        "--out",
        s(out),
    ]);
}

#[test]
fn build_kb_on_empty_dataset_reports_zero_entries() {
    let tmp = tempfile::tempdir().unwrap();
    let empty = tmp.path().join("empty");
    std::fs::create_dir(&empty).unwrap();
    let out = ok(&["--mock-embedder", "--json", "build-kb", s(&empty), s(&tmp.path().join("kb"))]);
    let report = json_stdout(&out);
    assert_eq!(report["manifest"]["count"], 0);
    assert_eq!(report["scenes"], 0);
    assert!(tmp.path().join("kb/manifest.json").is_file());
}

#[test]
fn generate_matches_golden_and_is_independent_of_jobs() {
    let tmp = tempfile::tempdir().unwrap();
    let kb = build_fixture_kb(tmp.path());
    let one = tmp.path().join("gen1");
    let four = tmp.path().join("gen4");
    generate(&kb, &one, "1");
    generate(&kb, &four, "4");
    for name in ["scene_graph.json", "run_report.json"] {
        let a = std::fs::read(one.join("scan_kitchen").join(name)).unwrap();
        let b = std::fs::read(four.join("scan_kitchen").join(name)).unwrap();
        let want = std::fs::read(golden().join(format!("scan_kitchen.{name}"))).unwrap();
        assert_eq!(a, b, "{name} differs between --jobs 1 and --jobs 4");
        assert_eq!(a, want, "{name} differs from the golden file");
    }

    let eval = |pred: &Path| {
        let out = ok(&["--json", "eval", "--pred", s(pred), "--gt", s(&fixtures().join("query"))]);
        String::from_utf8(out.stdout).unwrap()
    };
    let first = eval(&one);
    assert_eq!(first, eval(&four));
    let report: Value = serde_json::from_str(&first).unwrap();
    let scene = &report["scenes"]["scan_kitchen"];
    assert_eq!(scene["counts"]["gt_edges"], 5);
    assert_eq!(scene["rel_recall_new"], 1.0);
    assert_eq!(scene["metadata"]["node_matching"], "exact_label");
}

#[test]
fn replaying_a_run_report_reproduces_the_graph() {
    let tmp = tempfile::tempdir().unwrap();
    let kb = build_fixture_kb(tmp.path());
    let first = tmp.path().join("gen");
    generate(&kb, &first, "1");
    let f = fixtures();
    let replay = tmp.path().join("replay");
    ok(&[
        "--mock-embedder",
        "--chat-replay",
        s(&first.join("scan_kitchen/run_report.json")),
        "--config",
        s(&f.join("config.json")),
        "generate",
        s(&f.join("query")),
        "--kb",
        s(&kb),
        "--out",
        s(&replay),
    ]);
    let a: Value = serde_json::from_slice(&std::fs::read(first.join("scan_kitchen/scene_graph.json")).unwrap()).unwrap();
    let b: Value = serde_json::from_slice(&std::fs::read(replay.join("scan_kitchen/scene_graph.json")).unwrap()).unwrap();
    assert_eq!(a["nodes"], b["nodes"]);
    assert_eq!(a["edges"], b["edges"]);
}

#[test]
fn kb_scale_at_zero_has_no_reference_edges() {
    let tmp = tempfile::tempdir().unwrap();
    let kb = build_fixture_kb(tmp.path());
    let f = fixtures();
    let out = ok(&[
        "--mock-embedder",
        "--mock-chat",
        "--json",
        "--config",
        s(&f.join("config.json")),
        "ablate",
        "kb-scale",
        s(&f.join("query")),
        "--kb",
        s(&kb),
        "--fractions",
        "1.0",
        "0.5",
        "0.0",
    ]);
    let report = json_stdout(&out);
    let points = report["points"].as_array().unwrap();
    assert_eq!(points.len(), 3);
    let avail: Vec<u64> = points.iter().map(|p| p["reference_edges_available"].as_u64().unwrap()).collect();
    assert!(avail.windows(2).all(|w| w[0] >= w[1]), "{avail:?}");
    let zero = &points[2];
    assert_eq!(zero["kb_scenes"], 0);
    assert_eq!(zero["reference_edges_available"], 0);
    assert_eq!(zero["reference_edges_used"], 0);
    assert_eq!(zero["windows_with_references"], 0);
    assert!(zero["windows"].as_u64().unwrap() > 0);
}

#[test]
fn exit_codes_follow_error_category() {
    let tmp = tempfile::tempdir().unwrap();
    let f = fixtures();
    let query = f.join("query");

    let bad_sigma = sgr3(&["--mock-embedder", "--sigma", "1.5", "filter", s(&query)]);
    assert_eq!(bad_sigma.status.code(), Some(2), "{}", String::from_utf8_lossy(&bad_sigma.stderr));
    assert_eq!(sgr3(&["filter", s(&query)]).status.code(), Some(2), "no embedder configured");

    let missing = sgr3(&["--mock-embedder", "filter", s(&tmp.path().join("nope"))]);
    assert_eq!(missing.status.code(), Some(3));
    let missing_kb = sgr3(&["--mock-embedder", "retrieve", s(&query), "--kb", s(&tmp.path().join("nokb"))]);
    assert_eq!(missing_kb.status.code(), Some(3));

    let kb = build_fixture_kb(tmp.path());
    let down = sgr3(&[
        "--mock-embedder",
        "--chat-url",
        "http://127.0.0.1:1",
        "--retries",
        "0",
        "--timeout-secs",
        "2",
        "generate",
        s(&query),
        "--kb",
        s(&kb),
        "--out",
        s(&tmp.path().join("gen")),
    ]);
    assert_eq!(down.status.code(), Some(4), "{}", String::from_utf8_lossy(&down.stderr));
    assert!(tmp.path().join("gen/scan_kitchen/run_report.json").is_file());
}
