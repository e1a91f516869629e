use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use folio::store;

fn folio(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_folio"))
        .args(args)
        .env_remove("FOLIO_RANKER_URL")
        .env_remove("FOLIO_REASONER_URL")
        .env_remove("FOLIO_API_KEY")
        .output()
        .expect("spawn folio")
}

fn ok(args: &[&str]) -> String {
    let out = folio(args);
    assert!(
        out.status.success(),
        "folio {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const SMALL_CFG: &str = "embed_dim = 16\nsource_dim = 16\nstage1_cutoff = 100\nshortlist_r = 400\nstage2_cutoff = 20\nshard_size = 50\nmap_target_k = 10\n";

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    cfg: PathBuf,
    corpus: PathBuf,
    index: PathBuf,
}

fn fixture(pages: usize) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let cfg = root.join("cfg.toml");
    std::fs::write(&cfg, SMALL_CFG).unwrap();
    let corpus = root.join("corpus");
    let index = root.join("index");
    let n = pages.to_string();
    ok(&[
        "--config", p(&cfg), "--seed", "42", "gen-corpus", "--out", p(&corpus), "--pages", &n,
        "--patches-per-page", "12", "--queries", "10", "--tokens-per-query", "6", "--planted", "2",
    ]);
    ok(&["--config", p(&cfg), "build-index", "--corpus", p(&corpus), "--out", p(&index)]);
    Fixture {
        _dir: dir,
        root,
        cfg,
        corpus,
        index,
    }
}

fn manifest(dir: &Path) -> serde_json::Value {
    serde_json::from_slice(&std::fs::read(dir.join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn build_index_manifest_and_determinism() {
    let f = fixture(1000);
    let m = manifest(&f.index);
    assert_eq!(m["num_pages"], 1000);
    assert!(m["num_centroids"].as_u64().unwrap() <= 8000);
    let again = f.root.join("index2");
    ok(&["--config", p(&f.cfg), "build-index", "--corpus", p(&f.corpus), "--out", p(&again)]);
    for name in ["centroids.bin", "ann.bin", "patches.bin", "pages.jsonl", "manifest.json"] {
        assert_eq!(
            std::fs::read(f.index.join(name)).unwrap(),
            std::fs::read(again.join(name)).unwrap(),
            "{name}"
        );
    }
}

#[test]
fn dedup_drops_constructed_duplicate() {
    let f = fixture(1000);
    let mut pages = store::read_corpus_pages(&f.corpus).unwrap();
    let mut copy = pages[10].clone();
    copy.page_id = "p9999999".into();
    pages.truncate(999);
    pages.push(copy);
    let dup_corpus = f.root.join("dup");
    store::write_corpus_dir(&dup_corpus, &pages, &[], &[], &[]).unwrap();

    // The dedup oracle: the copy is the only page identical to an earlier one.
    let (_, report) = folio::ingest::dedup_pages(pages, 0.97).unwrap();
    let out = f.root.join("dup_index");
    ok(&["--config", p(&f.cfg), "build-index", "--corpus", p(&dup_corpus), "--out", p(&out), "--dedup"]);
    let m = manifest(&out);
    assert_eq!(m["num_pages"].as_u64().unwrap() as usize, 1000 - report.dropped.len());
    let drops: Vec<serde_json::Value> = store::read_jsonl(&out.join("dedup_report.jsonl")).unwrap();
    assert_eq!(drops.len(), report.dropped.len());
    assert!(drops.iter().any(|d| d["dropped_id"] == "p9999999" && d["kept_id"] == pages_id(10)));
}

fn pages_id(i: usize) -> String {
    folio::ingest::page_id(i)
}

fn ids(path: &Path) -> Vec<String> {
    let rows: Vec<serde_json::Value> = store::read_jsonl(path).unwrap();
    rows.iter().map(|r| format!("{}:{}", r["query_id"], r["page_id"])).collect()
}

#[test]
fn search_exact_matches_full_shortlist() {
    let f = fixture(400);
    let q = p(&f.corpus.join("queries.jsonl")).to_string();
    let exact = f.root.join("exact.jsonl");
    let c2f = f.root.join("c2f.jsonl");
    let base = ["--config", p(&f.cfg), "search", "--index", p(&f.index), "--queries", &q, "--n1", "50"];
    ok(&[&base[..], &["--exact", "--out", p(&exact)]].concat());
    ok(&[&base[..], &["--coarse-to-fine", "--r", "400", "--exact-flat", "--out", p(&c2f)]].concat());
    assert_eq!(ids(&exact), ids(&c2f));
}

fn fine_dots(stdout: &str) -> u64 {
    stdout
        .lines()
        .find_map(|l| l.split("fine dots ").nth(1))
        .unwrap()
        .trim()
        .parse()
        .unwrap()
}

#[test]
fn search_timing_rows_and_counters() {
    let f = fixture(1000);
    let q = p(&f.corpus.join("queries.jsonl")).to_string();
    let run = |r: &str| {
        ok(&[
            "--config", p(&f.cfg), "search", "--index", p(&f.index), "--queries", &q, "--query-id", "q0003", "--n1", "100",
            "--r", r,
        ])
    };
    let out = run("200");
    let stage_rows: Vec<&str> = out
        .lines()
        .map(str::trim)
        .filter(|l| ["ann search", "coarse ranking", "fine scoring"].iter().any(|s| l.starts_with(s)))
        .collect();
    assert_eq!(stage_rows.len(), 3, "{out}");
    assert_eq!(out.lines().filter(|l| l.trim().starts_with("total ")).count(), 1);

    let (a, b) = (fine_dots(&out) as f64, fine_dots(&run("400")) as f64);
    let ratio = b / a;
    assert!((1.8..=2.2).contains(&ratio), "ratio {ratio}");
}

fn eval(f: &Fixture, out: &str, extra: &[&str]) -> serde_json::Value {
    let dir = f.root.join(out);
    ok(&[
        &[
            "--config",
            p(&f.cfg),
            "eval",
            "--index",
            p(&f.index),
            "--questions",
            p(&f.corpus.join("questions.jsonl")),
            "--queries",
            p(&f.corpus.join("queries.jsonl")),
            "--out",
            p(&dir),
        ][..],
        extra,
    ]
    .concat());
    serde_json::from_slice(&std::fs::read(dir.join("report.json")).unwrap()).unwrap()
}

fn shares(report: &serde_json::Value) -> Vec<f64> {
    report["rounds"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["share"].as_f64().unwrap())
        .collect()
}

#[test]
fn eval_oracle_scripted_and_silent_backends() {
    let f = fixture(600);
    let oracle = eval(&f, "oracle", &[]);
    assert_eq!(oracle["accuracy"], 1.0);
    assert_eq!(shares(&oracle), vec![1.0, 0.0, 0.0]);

    // Questions q0000..q0004 refine twice before answering.
    let questions = store::read_questions(&f.corpus.join("questions.jsonl")).unwrap();
    let mut entries = Vec::new();
    for q in &questions {
        let slow = q.question_id.as_str() < "q0005";
        for round in 1..=3 {
            let response = if slow && round < 3 {
                "<query_update>follow-up</query_update><notes>partial</notes>".to_string()
            } else {
                format!("<answer>{}</answer>", q.gold_label.as_ref().unwrap())
            };
            entries.push(serde_json::json!({
                "matcher": {"all_of": [format!("[{}]", q.question_id), format!("iteration {round}/3")]},
                "response": response,
            }));
        }
    }
    let script = f.root.join("script.json");
    std::fs::write(&script, serde_json::json!({"entries": entries, "default": ""}).to_string()).unwrap();
    let scripted = eval(&f, "scripted", &["--reasoner", "script", "--script", p(&script)]);
    assert_eq!(shares(&scripted), vec![0.5, 0.0, 0.5]);
    assert_eq!(scripted["mean_retrieval_calls"], 2.0);

    let silent = f.root.join("silent.json");
    std::fs::write(&silent, r#"{"entries": [], "default": "I am not sure."}"#).unwrap();
    let none = eval(&f, "silent", &["--reasoner", "script", "--script", p(&silent)]);
    assert_eq!(none["accuracy"], 0.0);
    assert_eq!(none["unparseable"], 10);
    assert_eq!(shares(&none), vec![0.0, 0.0, 1.0]);
}

#[test]
fn eval_is_deterministic() {
    let f = fixture(400);
    eval(&f, "a", &["--workers", "3"]);
    eval(&f, "b", &["--workers", "1"]);
    for name in ["traces.jsonl", "report.json", "filter_transcript.jsonl", "reasoner_transcript.jsonl"] {
        assert_eq!(
            std::fs::read(f.root.join("a").join(name)).unwrap(),
            std::fs::read(f.root.join("b").join(name)).unwrap(),
            "{name}"
        );
    }
}

#[test]
fn missing_index_fails_with_context() {
    let dir = tempfile::tempdir().unwrap();
    let out = folio(&["search", "--index", p(&dir.path().join("nope")), "--queries", "q.jsonl"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("opening index"));
}

#[test]
fn config_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "seed = 7\nstage2_cutoff = 50\n").unwrap();
    let defaults = ok(&["config"]);
    assert!(defaults.contains("stage2_cutoff = 100"));
    assert!(defaults.contains("seed = 42"));
    let file = ok(&["--config", p(&cfg), "config"]);
    assert!(file.contains("stage2_cutoff = 50") && file.contains("seed = 7"));
    let flag = ok(&["--config", p(&cfg), "--seed", "9", "config"]);
    assert!(flag.contains("seed = 9"));

    std::fs::write(&cfg, "stage2_cutoff = 3000\n").unwrap();
    let bad = folio(&["--config", p(&cfg), "config"]);
    assert!(String::from_utf8_lossy(&bad.stderr).contains("N2 ≤ N1 violated"));
}

#[test]
fn bench_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("b.csv");
    let out = ok(&[
        "bench", "--sizes", "200,400", "--queries", "3", "--patches-per-page", "8", "--dim", "16", "--tokens-per-query",
        "4", "--n1", "10", "--r", "40", "--csv", p(&csv),
    ]);
    assert!(out.contains("speedup"));
    assert_eq!(std::fs::read_to_string(&csv).unwrap().lines().count(), 3);
}
