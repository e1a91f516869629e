//! Stage-1 scaling benchmark on synthetic corpora.

use std::collections::HashSet;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::coarse::{build_centroid_index, stage1_search, Stage1Params};
use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::ingest::{generate_synthetic_corpus, SyntheticSpec};
use crate::scoring::exact_top_k;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchSpec {
    pub sizes: Vec<usize>,
    pub queries: usize,
    pub patches_per_page: usize,
    pub dim: usize,
    pub tokens_per_query: usize,
    pub n1: usize,
    pub r: usize,
    pub probe_k: usize,
    /// Skip the brute-force column.
    pub skip_exact: bool,
}

impl Default for BenchSpec {
    fn default() -> Self {
        Self {
            sizes: vec![1_000, 10_000],
            queries: 20,
            patches_per_page: 32,
            dim: 64,
            tokens_per_query: 16,
            n1: 200,
            r: 800,
            probe_k: 32,
            skip_exact: false,
        }
    }
}

/// Mean per-query figures for one corpus size.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub pages: usize,
    pub patches: usize,
    pub centroids: usize,
    pub build_ms: f64,
    pub ann_ms: f64,
    pub coarse_ms: f64,
    pub fine_ms: f64,
    pub c2f_ms: f64,
    pub exact_ms: Option<f64>,
    pub speedup: Option<f64>,
    pub ann_dot_products: f64,
    pub fine_dot_products: f64,
    /// Mean `|c2f top-N1 ∩ exact top-N1| / N1`.
    pub overlap: Option<f64>,
}

pub fn run_bench(spec: &BenchSpec, cfg: &PipelineConfig) -> Result<Vec<BenchRow>> {
    if spec.queries == 0 || spec.sizes.is_empty() {
        return Err(Error::InvalidInput("bench needs sizes and queries".into()));
    }
    spec.sizes.iter().map(|&n| bench_one(spec, cfg, n)).collect()
}

fn bench_one(spec: &BenchSpec, cfg: &PipelineConfig, n: usize) -> Result<BenchRow> {
    let corpus = generate_synthetic_corpus(
        &SyntheticSpec {
            num_pages: n,
            patches_per_page: spec.patches_per_page,
            dim: spec.dim,
            num_queries: spec.queries,
            tokens_per_query: spec.tokens_per_query,
            planted_per_query: 1,
            ..SyntheticSpec::default()
        },
        cfg.seed,
    )?;
    let cfg = PipelineConfig {
        embed_dim: spec.dim,
        ..cfg.clone()
    };
    let mut pages = corpus.pages;
    pages.sort_by(|a, b| a.page_id.cmp(&b.page_id));
    let start = Instant::now();
    let (_, idx) = build_centroid_index(&pages, &cfg)?;
    let build_ms = start.elapsed().as_secs_f64() * 1e3;
    let params = Stage1Params {
        n1: spec.n1.min(n),
        r: spec.r.min(n),
        probe_k: spec.probe_k,
    };

    let mut row = BenchRow {
        pages: n,
        patches: pages.iter().map(|p| p.n_patches()).sum(),
        centroids: idx.len(),
        build_ms,
        ..Default::default()
    };
    let (mut exact_ms, mut overlap) = (0.0, 0.0);
    for q in &corpus.queries {
        let res = stage1_search(&q.tokens, &pages, &idx, params)?;
        row.ann_ms += res.timings.ann_ms;
        row.coarse_ms += res.timings.coarse_ms;
        row.fine_ms += res.timings.fine_ms;
        row.c2f_ms += res.timings.total_ms;
        row.ann_dot_products += res.counters.ann_flops as f64;
        row.fine_dot_products += res.counters.fine_dot_products as f64;
        if !spec.skip_exact {
            let t = Instant::now();
            let exact = exact_top_k(&q.tokens, &pages, params.n1)?;
            exact_ms += t.elapsed().as_secs_f64() * 1e3;
            let truth: HashSet<&str> = exact.iter().map(|r| r.page_id.as_str()).collect();
            let hit = res.ranked.iter().filter(|r| truth.contains(r.page_id.as_str())).count();
            overlap += hit as f64 / exact.len() as f64;
        }
    }
    let k = corpus.queries.len() as f64;
    for v in [
        &mut row.ann_ms,
        &mut row.coarse_ms,
        &mut row.fine_ms,
        &mut row.c2f_ms,
        &mut row.ann_dot_products,
        &mut row.fine_dot_products,
    ] {
        *v /= k;
    }
    if !spec.skip_exact {
        row.exact_ms = Some(exact_ms / k);
        row.speedup = Some(exact_ms / k / row.c2f_ms.max(1e-9));
        row.overlap = Some(overlap / k);
    }
    Ok(row)
}

const HEADER: [&str; 12] = [
    "pages", "patches", "centroids", "build_ms", "ann_ms", "coarse_ms", "fine_ms", "c2f_ms", "exact_ms",
    "speedup", "fine_dots", "overlap",
];

fn cells(r: &BenchRow) -> Vec<String> {
    let opt = |v: Option<f64>, p: usize| v.map_or("-".to_string(), |x| format!("{x:.p$}"));
    vec![
        r.pages.to_string(),
        r.patches.to_string(),
        r.centroids.to_string(),
        format!("{:.1}", r.build_ms),
        format!("{:.3}", r.ann_ms),
        format!("{:.3}", r.coarse_ms),
        format!("{:.3}", r.fine_ms),
        format!("{:.3}", r.c2f_ms),
        opt(r.exact_ms, 3),
        opt(r.speedup, 1),
        format!("{:.0}", r.fine_dot_products),
        opt(r.overlap, 3),
    ]
}

pub fn to_csv(rows: &[BenchRow]) -> String {
    let mut s = HEADER.join(",");
    s.push('\n');
    for r in rows {
        s.push_str(&cells(r).join(","));
        s.push('\n');
    }
    s
}

pub fn to_table(rows: &[BenchRow]) -> String {
    let body: Vec<Vec<String>> = rows.iter().map(cells).collect();
    let widths: Vec<usize> = (0..HEADER.len())
        .map(|c| body.iter().map(|r| r[c].len()).chain([HEADER[c].len()]).max().unwrap())
        .collect();
    let line = |cols: Vec<&str>| {
        cols.iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:>w$}"))
            .collect::<Vec<_>>()
            .join("  ")
    };
    let mut s = line(HEADER.to_vec());
    s.push('\n');
    for r in &body {
        s.push_str(&line(r.iter().map(String::as_str).collect()));
        s.push('\n');
    }
    s
}
