//! Corpus ingest: pooled page vectors, near-duplicate removal and the
//! synthetic corpus generator used for desk-scale experiments.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kmeans::splitmix64;
use crate::types::{dot, norm, Matrix, PageRecord, Question, QueryTokens};

/// L2-normalized mean of the page's patches.
pub fn pooled_page_vector(patches: &Matrix) -> Result<Vec<f32>> {
    if patches.is_empty() {
        return Err(Error::Empty("page patches"));
    }
    let mut mean = vec![0f64; patches.dim()];
    for r in patches.iter_rows() {
        for (m, x) in mean.iter_mut().zip(r) {
            *m += *x as f64;
        }
    }
    let n = patches.rows() as f64;
    let len = mean.iter().map(|m| (m / n) * (m / n)).sum::<f64>().sqrt();
    if len < 1e-9 {
        return Err(Error::Degenerate("pooled page vector is zero".into()));
    }
    Ok(mean.iter().map(|m| (m / n / len) as f32).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DropRecord {
    pub dropped_id: String,
    pub kept_id: String,
    pub cosine: f32,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DedupReport {
    pub dropped: Vec<DropRecord>,
    /// Pages whose pooled vector vanished; kept without comparison.
    pub degenerate: Vec<String>,
}

/// Greedy keep-first dedup in page_id order.
///
/// A page is dropped iff its pooled cosine with some already-kept page is
/// strictly greater than `threshold`. The report names the most similar kept page.
pub fn dedup_pages(pages: Vec<PageRecord>, threshold: f64) -> Result<(Vec<PageRecord>, DedupReport)> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::InvalidInput(format!("threshold {threshold} outside [0, 1]")));
    }
    let mut pages = pages;
    pages.sort_by(|a, b| a.page_id.cmp(&b.page_id));
    let pooled: Vec<Option<Vec<f32>>> = pages
        .par_iter()
        .map(|p| pooled_page_vector(&p.patches).ok())
        .collect();
    let thr = threshold as f32;

    let mut kept_idx: Vec<usize> = Vec::new();
    let mut report = DedupReport::default();
    let mut keep = vec![false; pages.len()];
    for (i, v) in pooled.iter().enumerate() {
        let Some(v) = v else {
            report.degenerate.push(pages[i].page_id.clone());
            keep[i] = true;
            continue;
        };
        let best = kept_idx
            .iter()
            .filter_map(|&k| pooled[k].as_ref().map(|u| (k, dot(v, u))))
            .fold(None::<(usize, f32)>, |acc, (k, c)| match acc {
                Some((_, bc)) if bc >= c => acc,
                _ => Some((k, c)),
            });
        match best {
            Some((k, c)) if c > thr => report.dropped.push(DropRecord {
                dropped_id: pages[i].page_id.clone(),
                kept_id: pages[k].page_id.clone(),
                cosine: c,
            }),
            _ => {
                keep[i] = true;
                kept_idx.push(i);
            }
        }
    }
    let kept = pages
        .into_iter()
        .zip(keep)
        .filter_map(|(p, k)| k.then_some(p))
        .collect();
    Ok((kept, report))
}

/// Parameters of a synthetic corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_pages: usize,
    /// Mean patches per page; counts are uniform on `[mean/2, 3·mean/2]`.
    pub patches_per_page: usize,
    pub dim: usize,
    pub num_queries: usize,
    pub tokens_per_query: usize,
    /// Pages built from noisy copies of each query's tokens.
    pub planted_per_query: usize,
    /// Norm of the perturbation added to planted patches.
    pub noise: f32,
    /// Topic clusters; 0 picks `max(4, num_pages / 250)`.
    pub topics: usize,
    pub anchors_per_topic: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_pages: 1000,
            patches_per_page: 103,
            dim: 128,
            num_queries: 20,
            tokens_per_query: 16,
            planted_per_query: 1,
            noise: 0.3,
            topics: 0,
            anchors_per_topic: 24,
        }
    }
}

/// Ground truth for one synthetic query.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub query_id: String,
    pub relevant: Vec<String>,
    pub gold_label: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticQuery {
    pub query_id: String,
    /// Text the query is keyed by in embedding lookups (the question stem).
    pub text: String,
    pub tokens: QueryTokens,
}

#[derive(Clone, Debug)]
pub struct SyntheticCorpus {
    pub pages: Vec<PageRecord>,
    pub queries: Vec<SyntheticQuery>,
    pub questions: Vec<Question>,
    pub ground_truth: Vec<GroundTruth>,
}

impl SyntheticCorpus {
    pub fn total_patches(&self) -> usize {
        self.pages.iter().map(PageRecord::n_patches).sum()
    }
}

fn gaussian_unit<R: Rng>(rng: &mut R, dim: usize) -> Vec<f32> {
    loop {
        let mut v: Vec<f32> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        if crate::types::normalize(&mut v) > 0.0 {
            return v;
        }
    }
}

/// `normalize(base + scale · g / √d)` with Gaussian `g`.
fn perturb<R: Rng>(rng: &mut R, base: &[f32], scale: f32) -> Vec<f32> {
    if scale == 0.0 {
        return base.to_vec();
    }
    let s = scale / (base.len() as f32).sqrt();
    let mut v: Vec<f32> = base
        .iter()
        .map(|b| b + s * rng.sample::<f32, _>(StandardNormal))
        .collect();
    if crate::types::normalize(&mut v) == 0.0 {
        return base.to_vec();
    }
    v
}

pub fn page_id(i: usize) -> String {
    format!("p{i:07}")
}

pub fn query_id(i: usize) -> String {
    format!("q{i:04}")
}

/// Generates a topic-structured corpus with planted relevant pages.
///
/// Background pages draw their patches around anchors of one topic, with a
/// per-page noise level so that scores spread out. Each query draws its tokens
/// from one topic's anchors; its planted pages are noisy copies of the query
/// tokens. Page summaries carry `relevance-key=<x>` (planted pages get the
/// highest keys) and planted summaries carry `evidence(<query_id>)=<gold>`.
pub fn generate_synthetic_corpus(spec: &SyntheticSpec, seed: u64) -> Result<SyntheticCorpus> {
    if spec.num_pages == 0 || spec.patches_per_page == 0 || spec.dim == 0 || spec.tokens_per_query == 0 {
        return Err(Error::InvalidInput("synthetic spec sizes must be positive".into()));
    }
    if spec.num_queries * spec.planted_per_query > spec.num_pages {
        return Err(Error::InvalidInput("more planted pages than pages".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let topics = if spec.topics == 0 {
        (spec.num_pages / 250).max(4)
    } else {
        spec.topics
    };
    let anchors: Vec<Vec<Vec<f32>>> = (0..topics)
        .map(|_| {
            (0..spec.anchors_per_topic.max(1))
                .map(|_| gaussian_unit(&mut rng, spec.dim))
                .collect()
        })
        .collect();

    // Article grouping: runs of 5..=15 consecutive pages.
    let mut article_of = Vec::with_capacity(spec.num_pages);
    let mut article = 0usize;
    while article_of.len() < spec.num_pages {
        let len = rng.random_range(5..=15);
        for _ in 0..len {
            if article_of.len() < spec.num_pages {
                article_of.push(article);
            }
        }
        article += 1;
    }

    let lo = (spec.patches_per_page / 2).max(1);
    let hi = (spec.patches_per_page * 3 / 2).max(lo);
    let page_seed = rng.random::<u64>();
    let mut pages: Vec<(PageRecord, usize)> = (0..spec.num_pages)
        .into_par_iter()
        .map(|i| {
            let mut r = ChaCha8Rng::seed_from_u64(splitmix64(page_seed ^ i as u64));
            let topic = r.random_range(0..topics);
            let spread = r.random_range(0.3f32..1.6);
            let n = r.random_range(lo..=hi);
            let mut patches = Matrix::zeros(0, spec.dim);
            for _ in 0..n {
                let t = if r.random_bool(0.85) { topic } else { r.random_range(0..topics) };
                let a = &anchors[t][r.random_range(0..anchors[t].len())];
                patches.push_row(&perturb(&mut r, a, spread)).expect("dim");
            }
            let key = r.random_range(0.0..0.5);
            let page = PageRecord {
                page_id: page_id(i),
                article_id: format!("a{:06}", article_of[i]),
                patches,
                summary: format!(
                    "Synthetic page {} from article a{:06} on topic {topic}. relevance-key={key:.6}.",
                    page_id(i),
                    article_of[i]
                ),
                image_ref: None,
            };
            (page, topic)
        })
        .collect();

    let mut order: Vec<usize> = (0..spec.num_pages).collect();
    order.shuffle(&mut rng);
    let mut planted_iter = order.into_iter();

    let labels = ["A", "B", "C", "D"];
    let mut queries = Vec::with_capacity(spec.num_queries);
    let mut questions = Vec::with_capacity(spec.num_queries);
    let mut ground_truth = Vec::with_capacity(spec.num_queries);
    for qi in 0..spec.num_queries {
        let qid = query_id(qi);
        let topic = rng.random_range(0..topics);
        let rows: Vec<Vec<f32>> = (0..spec.tokens_per_query)
            .map(|_| {
                let a = &anchors[topic][rng.random_range(0..anchors[topic].len())];
                perturb(&mut rng, a, 0.25)
            })
            .collect();
        let tokens = QueryTokens::new(Matrix::from_rows(&rows)?)?;
        let gold = labels[rng.random_range(0..labels.len())].to_string();
        let stem = format!("Synthetic question [{qid}] on topic {topic}: which option does the literature support?");

        let mut relevant = Vec::new();
        for _ in 0..spec.planted_per_query {
            let pi = planted_iter.next().expect("checked planted count");
            let (page, ptopic) = &mut pages[pi];
            let n = page.n_patches().max(spec.tokens_per_query);
            let mut patches = Matrix::zeros(0, spec.dim);
            for j in 0..n {
                patches
                    .push_row(&perturb(&mut rng, &rows[j % rows.len()], spec.noise))
                    .expect("dim");
            }
            page.patches = patches;
            *ptopic = topic;
            let key = rng.random_range(0.9..1.0);
            page.summary = format!(
                "Synthetic page {} from article {} on topic {topic}. relevance-key={key:.6}. evidence({qid})={gold}.",
                page.page_id, page.article_id
            );
            relevant.push(page.page_id.clone());
        }
        relevant.sort();

        queries.push(SyntheticQuery {
            query_id: qid.clone(),
            text: stem.clone(),
            tokens,
        });
        questions.push(Question {
            question_id: qid.clone(),
            stem,
            options: labels
                .iter()
                .map(|l| (l.to_string(), format!("Option {l} for {qid}")))
                .collect(),
            gold_label: Some(gold.clone()),
        });
        ground_truth.push(GroundTruth {
            query_id: qid,
            relevant,
            gold_label: gold,
        });
    }

    Ok(SyntheticCorpus {
        pages: pages.into_iter().map(|(p, _)| p).collect(),
        queries,
        questions,
        ground_truth,
    })
}

/// Sanity check used by ingest: finite values, unit rows.
pub fn check_corpus(pages: &[PageRecord]) -> Result<()> {
    let mut ids = std::collections::HashSet::new();
    for p in pages {
        p.validate()?;
        if !ids.insert(p.page_id.as_str()) {
            return Err(Error::InvalidInput(format!("duplicate page_id {}", p.page_id)));
        }
    }
    Ok(())
}

/// Cosine of two pooled vectors (both unit-norm).
pub fn pooled_cosine(a: &[f32], b: &[f32]) -> f32 {
    dot(a, b) / (norm(a) * norm(b)).max(f32::MIN_POSITIVE)
}
