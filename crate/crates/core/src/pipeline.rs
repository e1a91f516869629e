//! Stage 1 + Stage 2 over a [`PageIndex`].

use std::time::Instant;

use crate::coarse::{stage1_search, Stage1Counters, Stage1Params, Stage1Result, Stage1Timings};
use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::filter::{FilterCandidate, FilteredSet, Stage2Filter};
use crate::gateway::ModelBackend;
use crate::reasoner::{Retrieval, RetrievalPipeline, RetrievedPage};
use crate::scoring::exact_top_k;
use crate::store::PageIndex;
use crate::types::{QueryTokens, Question};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SearchMode {
    /// Exhaustive two-way scoring of every page.
    Exact,
    CoarseToFine,
}

/// Brings query tokens into the index space, projecting when they arrive at the source dimension.
pub fn prepare_query(index: &PageIndex, q: &QueryTokens) -> Result<QueryTokens> {
    if q.dim() == index.ann.dim() {
        return Ok(q.clone());
    }
    match &index.projection {
        Some(p) if q.dim() == p.source_dim => {
            let out = p.apply(q.matrix())?;
            if !out.degenerate.is_empty() {
                return Err(Error::Degenerate(format!(
                    "{} query tokens project to zero",
                    out.degenerate.len()
                )));
            }
            QueryTokens::new(out.vectors)
        }
        _ => Err(Error::DimensionMismatch {
            expected: index.ann.dim(),
            actual: q.dim(),
        }),
    }
}

/// Stage-1 search in either mode. Exact mode reports all time as fine scoring.
pub fn search(index: &PageIndex, q: &QueryTokens, mode: SearchMode, params: Stage1Params) -> Result<Stage1Result> {
    let q = prepare_query(index, q)?;
    match mode {
        SearchMode::CoarseToFine => stage1_search(&q, &index.pages, &index.ann, params),
        SearchMode::Exact => {
            let start = Instant::now();
            let ranked = exact_top_k(&q, &index.pages, params.n1)?;
            let ms = start.elapsed().as_secs_f64() * 1e3;
            Ok(Stage1Result {
                ranked,
                timings: Stage1Timings {
                    fine_ms: ms,
                    total_ms: ms,
                    ..Default::default()
                },
                counters: Stage1Counters {
                    fine_dot_products: (q.m() * index.num_patches()) as u64,
                    shortlist_len: index.pages.len(),
                    ..Default::default()
                },
            })
        }
    }
}

/// Stage-1 output as Stage-2 input.
pub fn filter_candidates(index: &PageIndex, stage1: &Stage1Result) -> Vec<FilterCandidate> {
    stage1
        .ranked
        .iter()
        .map(|r| FilterCandidate {
            rank: r.rank,
            page_id: r.page_id.clone(),
            summary: index
                .page_position(&r.page_id)
                .map(|i| index.pages[i].summary.clone())
                .unwrap_or_default(),
        })
        .collect()
}

/// Full two-stage retrieval used by the answer loop.
pub struct TwoStageRetriever<'a> {
    pub index: &'a PageIndex,
    pub ranker: &'a dyn ModelBackend,
    pub cfg: &'a PipelineConfig,
    pub mode: SearchMode,
}

impl<'a> TwoStageRetriever<'a> {
    pub fn new(index: &'a PageIndex, ranker: &'a dyn ModelBackend, cfg: &'a PipelineConfig) -> Self {
        Self {
            index,
            ranker,
            cfg,
            mode: SearchMode::CoarseToFine,
        }
    }

    pub fn run(&self, question: &Question, q: &QueryTokens) -> Result<(Stage1Result, FilteredSet)> {
        let stage1 = search(self.index, q, self.mode, Stage1Params::from(self.cfg))?;
        let cands = filter_candidates(self.index, &stage1);
        let filtered = Stage2Filter::new(self.ranker, self.cfg).run(question, &cands)?;
        Ok((stage1, filtered))
    }
}

impl RetrievalPipeline for TwoStageRetriever<'_> {
    fn retrieve(&self, question: &Question, q: &QueryTokens) -> Result<Retrieval> {
        let (stage1, filtered) = self.run(question, q)?;
        let pages = filtered
            .pages
            .iter()
            .filter_map(|id| self.index.page_position(id))
            .map(|i| {
                let p = &self.index.pages[i];
                RetrievedPage {
                    page_id: p.page_id.clone(),
                    summary: p.summary.clone(),
                    image_ref: p.image_ref_or_default(),
                }
            })
            .collect();
        Ok(Retrieval {
            pages,
            stage1_timings: stage1.timings,
            filter_stats: filtered.stats,
        })
    }
}
