//! Exact two-way late-interaction scoring.
//!
//! ```text
//! S(q, p) = (1/m) Σᵢ maxⱼ qᵢ·vⱼ  +  (1/n) Σⱼ maxᵢ qᵢ·vⱼ
//! ```
//!
//! The first term is the usual query→page MaxSim average; the second runs the
//! same reduction from the page side, so a page full of patches that match
//! nothing in the query is penalised. Each dot product is computed in `f32`;
//! the per-term sums accumulate in `f64`.

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{dot, rank_order, MatrixView, PageRecord, QueryTokens, RankedPage};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreBreakdown {
    pub query_to_page: f64,
    pub page_to_query: f64,
    pub total: f64,
}

/// Scores a page against a query. Fails on empty inputs or mismatched dimensions.
pub fn two_way_score(q: &QueryTokens, page: MatrixView<'_>) -> Result<ScoreBreakdown> {
    if page.rows() == 0 {
        return Err(Error::Empty("page patches"));
    }
    if q.dim() != page.dim() {
        return Err(Error::DimensionMismatch {
            expected: q.dim(),
            actual: page.dim(),
        });
    }
    Ok(score_unchecked(q.matrix().view(), page, &mut Vec::new()))
}

/// Core kernel. `col_max` is scratch space reused across pages.
pub(crate) fn score_unchecked(
    q: MatrixView<'_>,
    page: MatrixView<'_>,
    col_max: &mut Vec<f32>,
) -> ScoreBreakdown {
    let m = q.rows();
    let n = page.rows();
    col_max.clear();
    col_max.resize(n, f32::NEG_INFINITY);

    let mut q2p = 0.0f64;
    for qi in q.iter_rows() {
        let mut row_max = f32::NEG_INFINITY;
        for (j, vj) in page.iter_rows().enumerate() {
            let s = dot(qi, vj);
            if s > row_max {
                row_max = s;
            }
            if s > col_max[j] {
                col_max[j] = s;
            }
        }
        q2p += row_max as f64;
    }
    let p2q: f64 = col_max.iter().map(|&x| x as f64).sum();

    let query_to_page = q2p / m as f64;
    let page_to_query = p2q / n as f64;
    ScoreBreakdown {
        query_to_page,
        page_to_query,
        total: query_to_page + page_to_query,
    }
}

/// Scores every page in `corpus` and returns the top `k` by (score desc, page_id asc).
///
/// Exhaustive; this is the reference every approximate path is checked against.
pub fn exact_top_k(q: &QueryTokens, corpus: &[PageRecord], k: usize) -> Result<Vec<RankedPage>> {
    if corpus.is_empty() {
        return Err(Error::Empty("corpus"));
    }
    if k == 0 {
        return Err(Error::InvalidInput("k must be at least 1".into()));
    }
    for p in corpus {
        if p.patches.dim() != q.dim() {
            return Err(Error::DimensionMismatch {
                expected: q.dim(),
                actual: p.patches.dim(),
            });
        }
        if p.patches.is_empty() {
            return Err(Error::Empty("page patches"));
        }
    }
    let qv = q.matrix().view();
    let scores: Vec<f64> = corpus
        .par_iter()
        .map_init(Vec::new, |scratch, p| {
            score_unchecked(qv, p.patches.view(), scratch).total
        })
        .collect();
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let cmp = |a: &usize, b: &usize| {
        rank_order(scores[*a], &corpus[*a].page_id, scores[*b], &corpus[*b].page_id)
    };
    top_k_by(&mut order, k, cmp);
    Ok(order
        .into_iter()
        .enumerate()
        .map(|(i, idx)| RankedPage {
            page_id: corpus[idx].page_id.clone(),
            score: scores[idx],
            rank: i + 1,
        })
        .collect())
}

/// Keeps the `k` smallest elements under `cmp`, sorted.
pub(crate) fn top_k_by<T, F>(items: &mut Vec<T>, k: usize, cmp: F)
where
    F: Fn(&T, &T) -> Ordering,
{
    if items.len() > k && k > 0 {
        items.select_nth_unstable_by(k - 1, &cmp);
        items.truncate(k);
    }
    items.truncate(k);
    items.sort_by(cmp);
}
