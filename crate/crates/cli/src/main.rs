use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use folio::bench::{run_bench, to_csv, to_table, BenchSpec};
use folio::coarse::Stage1Params;
use folio::eval::{format_report, run_questions, summarize, timings_jsonl, traces_jsonl};
use folio::gateway::{
    EvidenceOracleBackend, HttpBackend, HttpConfig, KeyRankerBackend, ModelBackend, ScriptEntry, ScriptedBackend,
    Transcript,
};
use folio::ingest::{generate_synthetic_corpus, SyntheticQuery, SyntheticSpec};
use folio::pipeline::{filter_candidates, search, SearchMode, TwoStageRetriever};
use folio::reasoner::{AnswerLoop, HashEncoder, LookupEncoder, QueryEncoder};
use folio::store::{self, PageIndex};
use folio::{PipelineConfig, QueryTokens, Question};

#[derive(Parser)]
#[command(name = "folio", version, about = "Multi-vector page retrieval and iterative reasoning")]
struct Cli {
    /// TOML config; flags override it, it overrides the built-in defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic corpus directory with questions, queries and ground truth.
    GenCorpus(GenCorpusArgs),
    /// Build an index directory from a corpus directory.
    BuildIndex(BuildIndexArgs),
    /// Stage-1 search for one or all queries.
    Search(SearchArgs),
    /// Stage-1 + Stage-2 for one question.
    Filter(FilterArgs),
    /// Run the reasoning loop for one question.
    Answer(AnswerArgs),
    /// Run the reasoning loop over a question set and report accuracy.
    Eval(EvalArgs),
    /// Stage-1 scaling benchmark on synthetic corpora.
    Bench(BenchArgs),
    /// Print the effective configuration.
    Config,
}

#[derive(Args)]
struct GenCorpusArgs {
    #[arg(long)]
    out: PathBuf,
    /// TOML file with synthetic corpus parameters.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    pages: Option<usize>,
    #[arg(long)]
    patches_per_page: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    queries: Option<usize>,
    #[arg(long)]
    tokens_per_query: Option<usize>,
    #[arg(long)]
    planted: Option<usize>,
    #[arg(long)]
    noise: Option<f32>,
}

#[derive(Args)]
struct BuildIndexArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Drop near-duplicate pages before indexing.
    #[arg(long)]
    dedup: bool,
}

#[derive(Args, Clone)]
struct Stage1Flags {
    #[arg(long, conflicts_with = "coarse_to_fine")]
    exact: bool,
    #[arg(long)]
    coarse_to_fine: bool,
    #[arg(long)]
    n1: Option<usize>,
    #[arg(long)]
    r: Option<usize>,
    /// Exhaustive centroid search instead of inverted lists.
    #[arg(long)]
    exact_flat: bool,
}

#[derive(Args)]
struct SearchArgs {
    #[arg(long)]
    index: PathBuf,
    /// queries.jsonl with query_id, text and tokens.
    #[arg(long)]
    queries: PathBuf,
    /// Only this query; all queries otherwise.
    #[arg(long)]
    query_id: Option<String>,
    #[command(flatten)]
    stage1: Stage1Flags,
    /// Ranked results as JSON-lines.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Rows printed per query.
    #[arg(long, default_value_t = 10)]
    show: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum RankerKind {
    /// Reads `relevance-key=` values from summaries.
    MockKey,
    Http,
}

#[derive(Clone, Copy, ValueEnum)]
enum ReasonerKind {
    /// Answers from `evidence(<id>)=<label>` markers in summaries.
    MockOracle,
    /// Scripted responses from `--script`.
    Script,
    Http,
}

#[derive(Args, Clone)]
struct BackendFlags {
    #[arg(long, value_enum, default_value = "mock-key")]
    ranker: RankerKind,
    #[arg(long, value_enum, default_value = "mock-oracle")]
    reasoner: ReasonerKind,
    /// JSON `{"entries": [...], "default": "..."}` for the scripted reasoner.
    #[arg(long)]
    script: Option<PathBuf>,
    #[arg(long, env = "FOLIO_RANKER_URL")]
    ranker_url: Option<String>,
    #[arg(long, env = "FOLIO_REASONER_URL")]
    reasoner_url: Option<String>,
    #[arg(long, env = "FOLIO_API_KEY", hide_env_values = true)]
    api_key: Option<String>,
    /// Whether the HTTP reasoner receives page images.
    #[arg(long)]
    images: bool,
    #[arg(long, default_value_t = 120)]
    timeout_secs: u64,
}

#[derive(Args)]
struct QuestionSource {
    #[arg(long)]
    index: PathBuf,
    #[arg(long)]
    questions: PathBuf,
    /// Precomputed query embeddings keyed by text; unknown text falls back to the hash encoder.
    #[arg(long)]
    queries: Option<PathBuf>,
}

#[derive(Args)]
struct FilterArgs {
    #[command(flatten)]
    source: QuestionSource,
    #[arg(long)]
    question_id: String,
    #[command(flatten)]
    stage1: Stage1Flags,
    #[command(flatten)]
    backends: BackendFlags,
}

#[derive(Args)]
struct AnswerArgs {
    #[command(flatten)]
    source: QuestionSource,
    #[arg(long)]
    question_id: String,
    #[command(flatten)]
    stage1: Stage1Flags,
    #[command(flatten)]
    backends: BackendFlags,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    source: QuestionSource,
    #[command(flatten)]
    stage1: Stage1Flags,
    #[command(flatten)]
    backends: BackendFlags,
    /// Output directory for traces, timings, report and transcripts.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4)]
    workers: usize,
    #[arg(long)]
    max_iterations: Option<u32>,
}

#[derive(Args)]
struct BenchArgs {
    /// Comma-separated corpus sizes.
    #[arg(long, value_delimiter = ',', default_values_t = [1000usize, 10000])]
    sizes: Vec<usize>,
    #[arg(long, default_value_t = 20)]
    queries: usize,
    #[arg(long, default_value_t = 32)]
    patches_per_page: usize,
    #[arg(long, default_value_t = 64)]
    dim: usize,
    #[arg(long, default_value_t = 16)]
    tokens_per_query: usize,
    #[arg(long, default_value_t = 200)]
    n1: usize,
    #[arg(long, default_value_t = 800)]
    r: usize,
    #[arg(long)]
    skip_exact: bool,
    #[arg(long)]
    csv: Option<PathBuf>,
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn apply_stage1(cfg: &mut PipelineConfig, f: &Stage1Flags) -> SearchMode {
    if let Some(n1) = f.n1 {
        cfg.stage1_cutoff = n1;
        cfg.stage2_cutoff = cfg.stage2_cutoff.min(n1);
    }
    if let Some(r) = f.r {
        cfg.shortlist_r = r;
    }
    if f.exact_flat {
        cfg.exact_flat = true;
    }
    if f.exact {
        SearchMode::Exact
    } else {
        SearchMode::CoarseToFine
    }
}

fn open_index(dir: &Path, cfg: &PipelineConfig) -> Result<PageIndex> {
    let mut index = PageIndex::open(dir).with_context(|| format!("opening index {}", dir.display()))?;
    index.ann.exact_flat_mode = cfg.exact_flat;
    Ok(index)
}

fn read_queries(path: &Path) -> Result<Vec<SyntheticQuery>> {
    Ok(store::read_jsonl(path)?)
}

fn write(path: &Path, text: &str) -> Result<()> {
    store::write_file(path, text.as_bytes()).with_context(|| format!("writing {}", path.display()))
}

fn cmd_gen_corpus(cfg: &PipelineConfig, a: &GenCorpusArgs) -> Result<()> {
    let mut spec = match &a.spec {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml_spec(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => SyntheticSpec {
            dim: cfg.embed_dim,
            ..SyntheticSpec::default()
        },
    };
    macro_rules! set {
        ($($field:ident <- $flag:ident),*) => { $(if let Some(v) = a.$flag { spec.$field = v; })* };
    }
    set!(num_pages <- pages, patches_per_page <- patches_per_page, dim <- dim, num_queries <- queries,
         tokens_per_query <- tokens_per_query, planted_per_query <- planted, noise <- noise);
    let corpus = generate_synthetic_corpus(&spec, cfg.seed)?;
    store::write_synthetic(&a.out, &corpus)?;
    println!(
        "wrote {} pages ({} patches, d={}), {} questions to {}",
        corpus.pages.len(),
        corpus.total_patches(),
        spec.dim,
        corpus.questions.len(),
        a.out.display()
    );
    Ok(())
}

fn toml_spec(text: &str) -> Result<SyntheticSpec> {
    Ok(toml::from_str(text)?)
}

fn cmd_build_index(cfg: &PipelineConfig, a: &BuildIndexArgs) -> Result<()> {
    let pages = store::read_corpus_pages(&a.corpus).with_context(|| format!("reading corpus {}", a.corpus.display()))?;
    let mut cfg = cfg.clone();
    if let Some(dim) = pages.first().map(|p| p.patches.dim()) {
        if dim < cfg.embed_dim {
            eprintln!("corpus vectors have d={dim} < embed_dim={}; indexing at d={dim}", cfg.embed_dim);
            cfg.embed_dim = dim;
        }
    }
    let index = PageIndex::build(pages, &cfg, a.dedup)?;
    let m = index.write(&a.out)?;
    println!(
        "indexed {} pages, {} patches, {} centroids (d={}, source d={}, projected={}, nlist={}, dedup dropped {})",
        m.num_pages, m.num_patches, m.num_centroids, m.dim, m.source_dim, m.projected, m.ann_nlist, m.dedup_dropped
    );
    Ok(())
}

fn cmd_search(mut cfg: PipelineConfig, a: &SearchArgs) -> Result<()> {
    let mode = apply_stage1(&mut cfg, &a.stage1);
    if cfg.shortlist_r < cfg.stage1_cutoff {
        bail!("shortlist R ({}) must be at least N1 ({})", cfg.shortlist_r, cfg.stage1_cutoff);
    }
    let index = open_index(&a.index, &cfg)?;
    let queries: Vec<SyntheticQuery> = read_queries(&a.queries)?
        .into_iter()
        .filter(|q| a.query_id.as_ref().is_none_or(|id| &q.query_id == id))
        .collect();
    if queries.is_empty() {
        bail!("no matching queries in {}", a.queries.display());
    }
    let params = Stage1Params::from(&cfg);
    let mut rows = Vec::new();
    for q in &queries {
        let res = search(&index, &q.tokens, mode, params)?;
        println!("query {} ({} results)", q.query_id, res.ranked.len());
        for r in res.ranked.iter().take(a.show) {
            println!("  {:>5}  {:<16} {:.6}", r.rank, r.page_id, r.score);
        }
        let t = &res.timings;
        println!("  stage            ms");
        println!("  ann search       {:.3}", t.ann_ms);
        println!("  coarse ranking   {:.3}", t.coarse_ms);
        println!("  fine scoring     {:.3}", t.fine_ms);
        println!("  total            {:.3}", t.total_ms);
        println!(
            "  counters: shortlist {}, probe/token {}, ann dots {}, fine dots {}",
            res.counters.shortlist_len,
            res.counters.probe_per_token,
            res.counters.ann_flops,
            res.counters.fine_dot_products
        );
        for r in res.ranked {
            rows.push(serde_json::json!({ "query_id": q.query_id, "page_id": r.page_id, "rank": r.rank, "score": r.score }));
        }
    }
    if let Some(out) = &a.out {
        store::write_jsonl(out, &rows)?;
    }
    Ok(())
}

fn http_backend(url: &Option<String>, model: &str, b: &BackendFlags, cfg: &PipelineConfig, images: bool) -> Result<HttpBackend> {
    let url = url.clone().context("HTTP backend needs an endpoint URL (flag or environment)")?;
    let mut hc = HttpConfig::new(url, model);
    hc.auth_token = b.api_key.clone();
    hc.retries = cfg.retries;
    hc.backoff = Duration::from_millis(cfg.retry_backoff_ms);
    hc.timeout = Duration::from_secs(b.timeout_secs);
    hc.accepts_images = images;
    Ok(HttpBackend::new(hc)?)
}

enum Ranker {
    Key(KeyRankerBackend),
    Http(HttpBackend),
}

impl Ranker {
    fn backend(&self) -> &dyn ModelBackend {
        match self {
            Ranker::Key(k) => k,
            Ranker::Http(h) => h,
        }
    }
    fn transcript(&self) -> Option<&Transcript> {
        match self {
            Ranker::Key(k) => Some(k.transcript()),
            Ranker::Http(_) => None,
        }
    }
}

enum Reasoner {
    Oracle(EvidenceOracleBackend),
    Script(ScriptedBackend),
    Http(HttpBackend),
}

impl Reasoner {
    fn backend(&self) -> &dyn ModelBackend {
        match self {
            Reasoner::Oracle(o) => o,
            Reasoner::Script(s) => s,
            Reasoner::Http(h) => h,
        }
    }
    fn transcript(&self) -> Option<&Transcript> {
        match self {
            Reasoner::Oracle(o) => Some(o.transcript()),
            Reasoner::Script(s) => Some(s.transcript()),
            Reasoner::Http(_) => None,
        }
    }
}

fn make_ranker(b: &BackendFlags, cfg: &PipelineConfig) -> Result<Ranker> {
    Ok(match b.ranker {
        RankerKind::MockKey => Ranker::Key(KeyRankerBackend::new()),
        RankerKind::Http => Ranker::Http(http_backend(&b.ranker_url, &cfg.filter_model, b, cfg, false)?),
    })
}

fn make_reasoner(b: &BackendFlags, cfg: &PipelineConfig) -> Result<Reasoner> {
    Ok(match b.reasoner {
        ReasonerKind::MockOracle => Reasoner::Oracle(EvidenceOracleBackend::new()),
        ReasonerKind::Script => {
            let path = b.script.as_ref().context("--reasoner script needs --script")?;
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let v: serde_json::Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
            let entries: Vec<ScriptEntry> = serde_json::from_value(v.get("entries").cloned().unwrap_or_default())
                .with_context(|| format!("{}: bad entries", path.display()))?;
            let default = v.get("default").and_then(|d| d.as_str()).unwrap_or("");
            Reasoner::Script(ScriptedBackend::new(entries, default))
        }
        ReasonerKind::Http => Reasoner::Http(http_backend(&b.reasoner_url, &cfg.reasoner_model, b, cfg, b.images)?),
    })
}

fn make_encoder(src: &QuestionSource, index: &PageIndex, cfg: &PipelineConfig) -> Result<Box<dyn QueryEncoder>> {
    let hash = Box::new(HashEncoder::new(index.ann.dim(), cfg.seed));
    Ok(match &src.queries {
        Some(p) => {
            let table: HashMap<String, QueryTokens> =
                read_queries(p)?.into_iter().map(|q| (q.text, q.tokens)).collect();
            Box::new(LookupEncoder::new(table).with_fallback(hash))
        }
        None => hash,
    })
}

fn load_questions(path: &Path) -> Result<Vec<Question>> {
    store::read_questions(path).with_context(|| format!("reading questions {}", path.display()))
}

fn find_question(qs: Vec<Question>, id: &str) -> Result<Question> {
    qs.into_iter()
        .find(|q| q.question_id == id)
        .with_context(|| format!("question {id} not found"))
}

fn cmd_filter(mut cfg: PipelineConfig, a: &FilterArgs) -> Result<()> {
    let mode = apply_stage1(&mut cfg, &a.stage1);
    let cfg = cfg.validate()?;
    let index = open_index(&a.source.index, &cfg)?;
    let question = find_question(load_questions(&a.source.questions)?, &a.question_id)?;
    let encoder = make_encoder(&a.source, &index, &cfg)?;
    let ranker = make_ranker(&a.backends, &cfg)?;
    let q = encoder.encode(&question.stem)?;
    let mut retriever = TwoStageRetriever::new(&index, ranker.backend(), &cfg);
    retriever.mode = mode;
    let (stage1, filtered) = retriever.run(&question, &q)?;
    let cands = filter_candidates(&index, &stage1);
    println!(
        "{} stage-1 candidates, {} map calls, {} reduce call(s), {} pages kept",
        cands.len(),
        filtered.stats.map_calls,
        filtered.stats.reduce_calls,
        filtered.pages.len()
    );
    println!("{}", serde_json::to_string_pretty(&filtered)?);
    Ok(())
}

fn cmd_answer(mut cfg: PipelineConfig, a: &AnswerArgs) -> Result<()> {
    let mode = apply_stage1(&mut cfg, &a.stage1);
    let cfg = cfg.validate()?;
    let index = open_index(&a.source.index, &cfg)?;
    let question = find_question(load_questions(&a.source.questions)?, &a.question_id)?;
    let encoder = make_encoder(&a.source, &index, &cfg)?;
    let ranker = make_ranker(&a.backends, &cfg)?;
    let reasoner = make_reasoner(&a.backends, &cfg)?;
    let mut retriever = TwoStageRetriever::new(&index, ranker.backend(), &cfg);
    retriever.mode = mode;
    let lp = AnswerLoop::new(&retriever, reasoner.backend(), encoder.as_ref(), &cfg);
    let trace = lp.run(&question)?;
    println!("{}", serde_json::to_string_pretty(&trace)?);
    Ok(())
}

fn cmd_eval(mut cfg: PipelineConfig, a: &EvalArgs) -> Result<()> {
    let mode = apply_stage1(&mut cfg, &a.stage1);
    if let Some(m) = a.max_iterations {
        cfg.max_iterations = m;
    }
    let cfg = cfg.validate()?;
    let index = open_index(&a.source.index, &cfg)?;
    let questions = load_questions(&a.source.questions)?;
    let encoder = make_encoder(&a.source, &index, &cfg)?;
    let ranker = make_ranker(&a.backends, &cfg)?;
    let reasoner = make_reasoner(&a.backends, &cfg)?;
    let mut retriever = TwoStageRetriever::new(&index, ranker.backend(), &cfg);
    retriever.mode = mode;
    let lp = AnswerLoop::new(&retriever, reasoner.backend(), encoder.as_ref(), &cfg);
    let results = run_questions(&lp, &questions, a.workers)?;
    let report = summarize(&results, cfg.max_iterations);

    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    write(&a.out.join("traces.jsonl"), &traces_jsonl(&results)?)?;
    write(&a.out.join("timings.jsonl"), &timings_jsonl(&results)?)?;
    write(&a.out.join("report.json"), &(serde_json::to_string_pretty(&report)? + "\n"))?;
    let text = format_report(&report);
    write(&a.out.join("report.txt"), &text)?;
    for (name, t) in [("filter", ranker.transcript()), ("reasoner", reasoner.transcript())] {
        if let Some(t) = t {
            write(&a.out.join(format!("{name}_transcript.jsonl")), &Transcript::to_jsonl(&t.canonical()))?;
        }
    }
    print!("{text}");
    Ok(())
}

fn cmd_bench(cfg: &PipelineConfig, a: &BenchArgs) -> Result<()> {
    let spec = BenchSpec {
        sizes: a.sizes.clone(),
        queries: a.queries,
        patches_per_page: a.patches_per_page,
        dim: a.dim,
        tokens_per_query: a.tokens_per_query,
        n1: a.n1,
        r: a.r,
        probe_k: cfg.probe_k,
        skip_exact: a.skip_exact,
    };
    let rows = run_bench(&spec, cfg)?;
    print!("{}", to_table(&rows));
    if let Some(p) = &a.csv {
        write(p, &to_csv(&rows))?;
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let cfg = load_config(&cli)?;
    match &cli.command {
        Command::GenCorpus(a) => cmd_gen_corpus(&cfg, a),
        Command::BuildIndex(a) => cmd_build_index(&cfg, a),
        Command::Search(a) => cmd_search(cfg, a),
        Command::Filter(a) => cmd_filter(cfg, a),
        Command::Answer(a) => cmd_answer(cfg, a),
        Command::Eval(a) => cmd_eval(cfg, a),
        Command::Bench(a) => cmd_bench(&cfg, a),
        Command::Config => {
            print!("{}", cfg.validate()?.to_toml_string());
            Ok(())
        }
    }
}
