use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;
use vexg::dataset::load_ivecs;

fn vexg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vexg")).args(args).env_remove("VEXG_WORKERS").output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = vexg(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    vexg(args).status.code().unwrap()
}

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new() -> Self {
        let f = Fixture { dir: tempfile::tempdir().unwrap() };
        ok(&["ingest", "--random", "1500", "--dim", "12", "--seed", "1", "--out", &f.s("base.fvecs")]);
        ok(&["ingest", "--random", "50", "--dim", "12", "--seed", "2", "--out", &f.s("q.fvecs")]);
        f
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn s(&self, name: &str) -> String {
        self.path(name).to_string_lossy().into_owned()
    }

    fn build(&self, out: &str, extra: &[&str]) -> serde_json::Value {
        let (data, out_path) = (self.s("base.fvecs"), self.s(out));
        let mut args = vec!["build", "--data", &data, "--degree", "12", "--out", &out_path];
        args.extend(extra);
        serde_json::from_str(ok(&args).trim()).unwrap()
    }
}

fn last_json(stdout: &str) -> serde_json::Value {
    serde_json::from_str(stdout.lines().last().unwrap()).unwrap()
}

#[test]
fn same_seed_gives_identical_files() {
    let f = Fixture::new();
    f.build("a.idx", &["--quantize", "sq8"]);
    f.build("b.idx", &["--quantize", "sq8"]);
    assert_eq!(std::fs::read(f.path("a.idx")).unwrap(), std::fs::read(f.path("b.idx")).unwrap());
    f.build("c.idx", &["--quantize", "sq8", "--seed", "7"]);
    assert_ne!(std::fs::read(f.path("a.idx")).unwrap(), std::fs::read(f.path("c.idx")).unwrap());
}

#[test]
fn build_reports_invariants() {
    let f = Fixture::new();
    let summary = f.build("a.idx", &[]);
    assert_eq!(summary["reachable"], 1500);
    assert!(summary["max_out_degree"].as_u64().unwrap() <= 12);
    assert_eq!(summary["reorder"], "mst");
    assert!(summary["mean_span_after"].as_f64().unwrap() <= summary["mean_span_before"].as_f64().unwrap());
    let plain = f.build("b.idx", &["--reorder", "none"]);
    assert_eq!(plain["bandwidth_before"], plain["bandwidth_after"]);
}

#[test]
fn search_writes_ids_and_stats() {
    let f = Fixture::new();
    f.build("a.idx", &[]);
    ok(&["groundtruth", "--data", &f.s("base.fvecs"), "--queries", &f.s("q.fvecs"), "--k", "5", "--out", &f.s("gt.ivecs")]);
    ok(&[
        "search", "--index", &f.s("a.idx"), "--queries", &f.s("q.fvecs"), "--k", "5", "--efs", "1500",
        "--workers", "2", "--out", &f.s("r.ivecs"), "--stats", &f.s("s.jsonl"),
    ]);
    let ids = load_ivecs(f.path("r.ivecs")).unwrap();
    assert_eq!(ids, load_ivecs(f.path("gt.ivecs")).unwrap());
    let stats = std::fs::read_to_string(f.path("s.jsonl")).unwrap();
    assert_eq!(stats.lines().count(), 51);
    let first: serde_json::Value = serde_json::from_str(stats.lines().next().unwrap()).unwrap();
    assert!(first["distance_computations"].as_u64().unwrap() > 0);
    assert_eq!(last_json(&stats)["workers"], 2);
}

#[test]
fn workers_come_from_the_environment() {
    let f = Fixture::new();
    f.build("a.idx", &[]);
    let out = Command::new(env!("CARGO_BIN_EXE_vexg"))
        .args(["search", "--index", &f.s("a.idx"), "--queries", &f.s("q.fvecs")])
        .env("VEXG_WORKERS", "3")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(last_json(&String::from_utf8(out.stdout).unwrap())["workers"], 3);
}

#[test]
fn bench_formats_and_full_queue_recall() {
    let f = Fixture::new();
    f.build("a.idx", &["--quantize", "pq:3"]);
    let csv = ok(&["bench", "--index", &f.s("a.idx"), "--queries", &f.s("q.fvecs"), "--efs", "20,1500", "--format", "csv"]);
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows.len(), 3);
    assert!(rows[2].starts_with("1500,1.000000,"), "{}", rows[2]);
    let jsonl = ok(&["bench", "--index", &f.s("a.idx"), "--queries", &f.s("q.fvecs"), "--efs", "40", "--rerank", "40", "--format", "jsonl"]);
    let env: serde_json::Value = serde_json::from_str(jsonl.lines().next().unwrap()).unwrap();
    assert_eq!(env["scoring"], "codes, rerank 40");
    let table = ok(&["bench", "--index", &f.s("a.idx"), "--queries", &f.s("q.fvecs"), "--efs", "40"]);
    assert!(table.contains("recall"));
}

#[test]
fn tuned_rule_is_stored_and_used() {
    let f = Fixture::new();
    f.build("a.idx", &[]);
    let report: serde_json::Value = serde_json::from_str(
        ok(&["tune", "--index", &f.s("a.idx"), "--queries", &f.s("q.fvecs"), "--efs", "60", "--recall-floor", "0.9", "--save", &f.s("t.idx")])
            .trim(),
    )
    .unwrap();
    let chosen = &report["chosen"];
    assert!(chosen["recall"].as_f64().unwrap() >= 0.9);
    let summary = last_json(&ok(&["search", "--index", &f.s("t.idx"), "--queries", &f.s("q.fvecs"), "--efs", "60"]));
    assert_eq!(summary["early_term"], serde_json::json!([chosen["threshold"], chosen["patience"]]));
    let off = last_json(&ok(&["search", "--index", &f.s("t.idx"), "--queries", &f.s("q.fvecs"), "--efs", "60", "--no-early-term"]));
    assert!(off["early_term"].is_null());
    let other = last_json(&ok(&["search", "--index", &f.s("t.idx"), "--queries", &f.s("q.fvecs"), "--efs", "80"]));
    assert!(other["early_term"].is_null());
}

#[test]
fn ablate_lists_five_configurations() {
    let f = Fixture::new();
    let out = ok(&[
        "ablate", "--data", &f.s("base.fvecs"), "--queries", &f.s("q.fvecs"), "--degree", "12", "--efs", "20,40,80",
        "--recall-floor", "0.9", "--format", "jsonl",
    ]);
    let names: Vec<String> =
        out.lines().map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["name"].as_str().unwrap().to_string()).collect();
    assert_eq!(names, ["base", "+index", "+early_term", "+batch", "+prefetch"]);
}

#[test]
fn ingest_converts_bvecs_and_limits() {
    let f = Fixture::new();
    let rows: Vec<Vec<u8>> = (0..10u8).map(|i| vec![i, i + 1, i + 2]).collect();
    vexg::dataset::save_bvecs(f.path("x.bvecs"), &rows).unwrap();
    let out: serde_json::Value =
        serde_json::from_str(ok(&["ingest", "--input", &f.s("x.bvecs"), "--limit", "4", "--out", &f.s("x.fvecs")]).trim()).unwrap();
    assert_eq!(out["n"], 4);
    let raw = vexg::dataset::load_fvecs(f.path("x.fvecs")).unwrap();
    assert_eq!(raw.row(3), &[3.0, 4.0, 5.0]);
}

#[test]
fn exit_codes() {
    let f = Fixture::new();
    f.build("a.idx", &[]);
    let (idx, q) = (f.s("a.idx"), f.s("q.fvecs"));
    assert_eq!(code(&["nonsense"]), 2);
    assert_eq!(code(&["bench", "--index", &idx, "--queries", &q, "--efs", ""]), 2);
    assert_eq!(code(&["search", "--index", &idx, "--queries", &q, "--k", "20", "--efs", "10"]), 2);
    assert_eq!(code(&["search", "--index", &idx, "--queries", &q, "--early-term", "10"]), 2);
    assert_eq!(code(&["build", "--data", &f.s("base.fvecs"), "--quantize", "int4", "--out", &f.s("x.idx")]), 2);
    assert_eq!(code(&["search", "--index", &f.s("base.fvecs"), "--queries", &q]), 3);
    assert_eq!(code(&["search", "--index", &f.s("missing.idx"), "--queries", &q]), 3);
    assert_eq!(code(&["search", "--index", &idx, "--queries", &q, "--rerank", "10"]), 2);

    let mut bytes = std::fs::read(f.path("a.idx")).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0xff;
    std::fs::write(f.path("bad.idx"), &bytes).unwrap();
    let out = vexg(&["search", "--index", &f.s("bad.idx"), "--queries", &q]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("checksum"));

    ok(&["ingest", "--random", "5", "--dim", "7", "--out", &f.s("q7.fvecs")]);
    assert_eq!(code(&["search", "--index", &idx, "--queries", &f.s("q7.fvecs")]), 3);
    assert!(Path::new(&idx).exists());
}
