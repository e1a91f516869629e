//! Coarse-to-fine Stage-1 search.
//!
//! Offline, each page's patches are clustered into at most `C` centroids and
//! every centroid is stored in a [`CentroidAnnIndex`] with a pointer back to
//! its page. Online, each query token fetches its nearest centroids, pages are
//! ranked by the summed per-token best centroid similarity, and only the top
//! `R` pages get the exact two-way score. Work is `O(m·C·N)` for the coarse
//! pass (less with the inverted lists) plus `O(m·n·R)` for the fine pass.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::kmeans::{nearest, rng_for, spherical_kmeans};
use crate::scoring::{score_unchecked, top_k_by};
use crate::types::{dot, rank_order, Matrix, PageRecord, QueryTokens, RankedPage};

/// Per-page centroid summary.
#[derive(Clone, Debug, PartialEq)]
pub struct CentroidSet {
    pub page_id: String,
    pub centroids: Matrix,
    pub weights: Vec<u32>,
}

/// Clusters one page's patches into `min(c, n)` unit-norm centroids.
///
/// With `n ≤ c` the patches themselves are the centroids. Otherwise Lloyd's
/// k-means with k-means++ seeding runs for at most `max_iter` updates.
pub fn build_page_centroids(
    page: &PageRecord,
    c: usize,
    max_iter: usize,
    seed: u64,
) -> Result<CentroidSet> {
    let n = page.n_patches();
    if n == 0 {
        return Err(Error::Empty("page patches"));
    }
    if c == 0 {
        return Err(Error::InvalidInput("centroid count must be positive".into()));
    }
    if n <= c {
        return Ok(CentroidSet {
            page_id: page.page_id.clone(),
            centroids: page.patches.clone(),
            weights: vec![1; n],
        });
    }
    let mut rng = rng_for(seed, &page.page_id);
    let r = spherical_kmeans(page.patches.view(), c, max_iter, &mut rng);
    Ok(CentroidSet {
        page_id: page.page_id.clone(),
        centroids: r.centroids,
        weights: r.weights,
    })
}

/// Builds centroid sets for a whole corpus, in corpus order.
pub fn build_all_centroids(corpus: &[PageRecord], cfg: &PipelineConfig) -> Result<Vec<CentroidSet>> {
    corpus
        .par_iter()
        .map(|p| build_page_centroids(p, cfg.centroids_per_page, cfg.kmeans_iterations, cfg.seed))
        .collect()
}

/// Inverted lists over the centroid entries. Vectors are stored grouped by list.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct IvfLists {
    pub(crate) centers: Matrix,
    /// CSR offsets into `members`, length `nlist + 1`.
    pub(crate) offsets: Vec<u32>,
    /// Entry ids grouped by list.
    pub(crate) members: Vec<u32>,
    /// Entry vectors in `members` order.
    pub(crate) vectors: Matrix,
}

/// Inner-product top-k index over all page centroids.
#[derive(Clone, Debug, PartialEq)]
pub struct CentroidAnnIndex {
    pub(crate) entries: Matrix,
    pub(crate) entry_page: Vec<u32>,
    pub(crate) page_ids: Vec<String>,
    pub(crate) ivf: Option<IvfLists>,
    pub(crate) nprobe: usize,
    pub exact_flat_mode: bool,
}

/// A centroid hit: entry id and similarity.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CentroidHit {
    pub entry: u32,
    pub similarity: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoarseCandidate {
    pub page_id: String,
    /// Position of the page in the indexed corpus.
    pub page_index: u32,
    pub coarse_score: f64,
}

impl CentroidAnnIndex {
    /// Builds the index over the given centroid sets. `sets[i]` belongs to page `i`.
    pub fn build(sets: &[CentroidSet], cfg: &PipelineConfig) -> Result<Self> {
        let first = sets.first().ok_or(Error::Empty("corpus"))?;
        let dim = first.centroids.dim();
        let total: usize = sets.iter().map(|s| s.centroids.rows()).sum();
        let mut data = Vec::with_capacity(total * dim);
        let mut entry_page = Vec::with_capacity(total);
        for (i, s) in sets.iter().enumerate() {
            if s.centroids.dim() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    actual: s.centroids.dim(),
                });
            }
            data.extend_from_slice(s.centroids.as_slice());
            entry_page.extend(std::iter::repeat_n(i as u32, s.centroids.rows()));
        }
        let entries = Matrix::new(total, dim, data)?;
        let nlist = if cfg.ann_nlist > 0 {
            cfg.ann_nlist
        } else {
            (total as f64).sqrt().round() as usize
        };
        // Small indexes are searched flat; inverted lists only pay off with enough entries per list.
        let ivf = if nlist >= 4 && total >= nlist * 8 {
            Some(build_ivf(&entries, nlist, cfg.seed))
        } else {
            None
        };
        Ok(Self {
            entries,
            entry_page,
            page_ids: sets.iter().map(|s| s.page_id.clone()).collect(),
            ivf,
            nprobe: cfg.ann_nprobe,
            exact_flat_mode: cfg.exact_flat,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.rows() == 0
    }

    pub fn num_pages(&self) -> usize {
        self.page_ids.len()
    }

    pub fn dim(&self) -> usize {
        self.entries.dim()
    }

    pub fn page_of(&self, entry: u32) -> u32 {
        self.entry_page[entry as usize]
    }

    pub fn page_id(&self, page: u32) -> &str {
        &self.page_ids[page as usize]
    }

    pub fn entry(&self, entry: u32) -> &[f32] {
        self.entries.row(entry as usize)
    }

    pub fn nlist(&self) -> usize {
        self.ivf.as_ref().map_or(0, |l| l.centers.rows())
    }

    /// Top-`k` centroid entries by inner product with `token` (ties: lower entry id).
    ///
    /// Exhaustive when `exact_flat_mode` is set or no inverted lists exist.
    /// Returns the hits and the number of dot products computed.
    pub fn search(&self, token: &[f32], k: usize) -> (Vec<CentroidHit>, u64) {
        let k = k.min(self.len());
        let mut hits = Vec::new();
        let mut work = 0u64;
        match (&self.ivf, self.exact_flat_mode) {
            (Some(ivf), false) => {
                let nlist = ivf.centers.rows();
                let avg = (self.len() as f64 / nlist as f64).max(1.0);
                let needed = ((2 * k) as f64 / avg).ceil() as usize;
                let nprobe = self.nprobe.max(needed).min(nlist);
                let mut lists: Vec<(u32, f32)> = ivf
                    .centers
                    .iter_rows()
                    .enumerate()
                    .map(|(j, c)| (j as u32, dot(token, c)))
                    .collect();
                work += nlist as u64;
                top_k_by(&mut lists, nprobe, |a, b| {
                    b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
                });
                for (list, _) in lists {
                    let lo = ivf.offsets[list as usize] as usize;
                    let hi = ivf.offsets[list as usize + 1] as usize;
                    for pos in lo..hi {
                        hits.push(CentroidHit {
                            entry: ivf.members[pos],
                            similarity: dot(token, ivf.vectors.row(pos)),
                        });
                    }
                    work += (hi - lo) as u64;
                }
            }
            _ => {
                hits.extend(self.entries.iter_rows().enumerate().map(|(e, v)| CentroidHit {
                    entry: e as u32,
                    similarity: dot(token, v),
                }));
                work += self.len() as u64;
            }
        }
        top_k_by(&mut hits, k, |a, b| {
            b.similarity
                .total_cmp(&a.similarity)
                .then(a.entry.cmp(&b.entry))
        });
        (hits, work)
    }

    /// Per-token neighbour count actually used for a shortlist of `r` pages.
    ///
    /// At least `probe_k`; widened so the union of per-token hits can reach
    /// `r` distinct pages, and exhaustive once `r` covers the whole corpus.
    pub fn effective_probe(&self, r: usize, probe_k: usize, m: usize) -> usize {
        if r >= self.num_pages() {
            return self.len();
        }
        let avg_c = self.len() as f64 / self.num_pages() as f64;
        let widened = ((r as f64 * avg_c) / m.max(1) as f64).ceil() as usize;
        probe_k.max(widened).min(self.len())
    }

    /// Serializes the list structure. Entry vectors live in `centroids.bin`.
    ///
    /// Layout (little-endian): magic `FANN`, u32 version, u32 nprobe, u32 nlist,
    /// u32 dim, then `nlist·dim` f32 centers, `nlist+1` u32 offsets and the u32 members.
    pub fn ann_to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(ANN_MAGIC);
        let nlist = self.ivf.as_ref().map_or(0, |l| l.centers.rows());
        for v in [ANN_VERSION, self.nprobe as u32, nlist as u32, self.dim() as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        if let Some(l) = &self.ivf {
            for x in l.centers.as_slice() {
                out.extend_from_slice(&x.to_le_bytes());
            }
            for x in l.offsets.iter().chain(&l.members) {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    /// Rebuilds the index from centroid sets and [`Self::ann_to_bytes`] output.
    pub fn from_parts(sets: &[CentroidSet], ann: &[u8], exact_flat: bool) -> Result<Self> {
        let bad = |m: &str| Error::InvalidInput(format!("ann blob: {m}"));
        if ann.len() < 20 || &ann[..4] != ANN_MAGIC {
            return Err(bad("bad magic"));
        }
        let mut words = ann[4..].chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap()));
        let mut next = || words.next().ok_or_else(|| bad("truncated"));
        if next()? != ANN_VERSION {
            return Err(bad("unsupported version"));
        }
        let nprobe = next()? as usize;
        let nlist = next()? as usize;
        let dim = next()? as usize;
        let cfg = PipelineConfig {
            ann_nlist: 1,
            ann_nprobe: nprobe,
            exact_flat,
            ..PipelineConfig::default()
        };
        let mut idx = Self::build(sets, &cfg)?;
        if dim != idx.dim() {
            return Err(Error::DimensionMismatch {
                expected: idx.dim(),
                actual: dim,
            });
        }
        if nlist > 0 {
            let mut centers = Vec::with_capacity(nlist * dim);
            for _ in 0..nlist * dim {
                centers.push(f32::from_bits(next()?));
            }
            let offsets = (0..=nlist).map(|_| next()).collect::<Result<Vec<u32>>>()?;
            let total = idx.len();
            if offsets[nlist] as usize != total || offsets.windows(2).any(|w| w[0] > w[1]) {
                return Err(bad("inconsistent offsets"));
            }
            let members = (0..total).map(|_| next()).collect::<Result<Vec<u32>>>()?;
            let mut vectors = Matrix::zeros(0, dim);
            for &e in &members {
                if e as usize >= total {
                    return Err(bad("member out of range"));
                }
                vectors.push_row(idx.entries.row(e as usize))?;
            }
            idx.ivf = Some(IvfLists {
                centers: Matrix::new(nlist, dim, centers)?,
                offsets,
                members,
                vectors,
            });
        }
        if next().is_ok() {
            return Err(bad("trailing bytes"));
        }
        Ok(idx)
    }
}

const ANN_MAGIC: &[u8; 4] = b"FANN";
const ANN_VERSION: u32 = 1;

fn build_ivf(entries: &Matrix, nlist: usize, seed: u64) -> IvfLists {
    let total = entries.rows();
    let dim = entries.dim();
    // Train on an evenly strided sample; assignment then covers every entry.
    let sample_size = (nlist * 32).min(total);
    let stride = total as f64 / sample_size as f64;
    let mut sample = Matrix::zeros(0, dim);
    for i in 0..sample_size {
        let idx = ((i as f64 * stride) as usize).min(total - 1);
        sample.push_row(entries.row(idx)).expect("same dim");
    }
    let mut rng = rng_for(seed, "ivf");
    let centers = spherical_kmeans(sample.view(), nlist, 10, &mut rng).centroids;

    let assignment: Vec<u32> = (0..total)
        .into_par_iter()
        .map(|i| nearest(&centers, entries.row(i)).0 as u32)
        .collect();
    let mut counts = vec![0u32; nlist];
    for a in &assignment {
        counts[*a as usize] += 1;
    }
    let mut offsets = vec![0u32; nlist + 1];
    for j in 0..nlist {
        offsets[j + 1] = offsets[j] + counts[j];
    }
    let mut cursor = offsets.clone();
    let mut members = vec![0u32; total];
    for (e, a) in assignment.iter().enumerate() {
        let slot = &mut cursor[*a as usize];
        members[*slot as usize] = e as u32;
        *slot += 1;
    }
    let mut vectors = Matrix::zeros(0, dim);
    for e in &members {
        vectors.push_row(entries.row(*e as usize)).expect("same dim");
    }
    IvfLists {
        centers,
        offsets,
        members,
        vectors,
    }
}

/// Builds centroid sets and the ANN structure for a corpus.
pub fn build_centroid_index(
    corpus: &[PageRecord],
    cfg: &PipelineConfig,
) -> Result<(Vec<CentroidSet>, CentroidAnnIndex)> {
    if corpus.is_empty() {
        return Err(Error::Empty("corpus"));
    }
    let sets = build_all_centroids(corpus, cfg)?;
    let idx = CentroidAnnIndex::build(&sets, cfg)?;
    Ok((sets, idx))
}

/// Raw per-token centroid hits for a query.
pub struct TokenHits {
    pub hits: Vec<Vec<CentroidHit>>,
    pub dot_products: u64,
}

pub fn probe_tokens(q: &QueryTokens, idx: &CentroidAnnIndex, probe: usize) -> TokenHits {
    let mut dot_products = 0;
    let hits = q
        .matrix()
        .iter_rows()
        .map(|t| {
            let (h, w) = idx.search(t, probe);
            dot_products += w * idx.dim() as u64;
            h
        })
        .collect();
    TokenHits { hits, dot_products }
}

/// Aggregates per-token hits: a page's coarse score is the sum over tokens of
/// the best centroid similarity that token saw for it (0 when unseen). Pages no
/// token saw are dropped. Returns the top `r` by (score desc, page_id asc).
pub fn aggregate_coarse(hits: &TokenHits, idx: &CentroidAnnIndex, r: usize) -> Vec<CoarseCandidate> {
    let n = idx.num_pages();
    let mut total = vec![0f64; n];
    let mut seen = vec![false; n];
    let mut token_best = vec![f32::NEG_INFINITY; n];
    let mut touched: Vec<u32> = Vec::new();
    let mut pages: Vec<u32> = Vec::new();
    for token_hits in &hits.hits {
        for h in token_hits {
            let p = idx.page_of(h.entry);
            if token_best[p as usize] == f32::NEG_INFINITY {
                touched.push(p);
            }
            if h.similarity > token_best[p as usize] {
                token_best[p as usize] = h.similarity;
            }
        }
        for p in touched.drain(..) {
            total[p as usize] += token_best[p as usize] as f64;
            token_best[p as usize] = f32::NEG_INFINITY;
            if !seen[p as usize] {
                seen[p as usize] = true;
                pages.push(p);
            }
        }
    }
    top_k_by(&mut pages, r, |a, b| {
        rank_order(total[*a as usize], idx.page_id(*a), total[*b as usize], idx.page_id(*b))
    });
    pages
        .into_iter()
        .map(|p| CoarseCandidate {
            page_id: idx.page_id(p).to_string(),
            page_index: p,
            coarse_score: total[p as usize],
        })
        .collect()
}

/// Coarse shortlist of at most `r` pages.
pub fn coarse_candidates(
    q: &QueryTokens,
    idx: &CentroidAnnIndex,
    r: usize,
    probe_k: usize,
) -> Result<Vec<CoarseCandidate>> {
    if r == 0 {
        return Err(Error::InvalidInput("R must be at least 1".into()));
    }
    if q.dim() != idx.dim() {
        return Err(Error::DimensionMismatch {
            expected: idx.dim(),
            actual: q.dim(),
        });
    }
    let probe = idx.effective_probe(r, probe_k, q.m());
    Ok(aggregate_coarse(&probe_tokens(q, idx, probe), idx, r))
}

/// Wall-clock breakdown of one Stage-1 query, in milliseconds.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Stage1Timings {
    pub ann_ms: f64,
    pub coarse_ms: f64,
    pub fine_ms: f64,
    pub total_ms: f64,
}

/// Work counters for one Stage-1 query.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stage1Counters {
    /// Scalar multiply-adds spent searching centroids.
    pub ann_flops: u64,
    /// Query-token × patch dot products in exact scoring.
    pub fine_dot_products: u64,
    pub shortlist_len: usize,
    pub probe_per_token: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stage1Result {
    pub ranked: Vec<RankedPage>,
    pub timings: Stage1Timings,
    pub counters: Stage1Counters,
}

/// Search parameters for one Stage-1 call.
#[derive(Clone, Copy, Debug)]
pub struct Stage1Params {
    pub n1: usize,
    pub r: usize,
    pub probe_k: usize,
}

impl From<&PipelineConfig> for Stage1Params {
    fn from(cfg: &PipelineConfig) -> Self {
        Self {
            n1: cfg.stage1_cutoff,
            r: cfg.shortlist_r,
            probe_k: cfg.probe_k,
        }
    }
}

/// Coarse shortlist of `r` pages, exact two-way scoring on the shortlist, top `n1` returned.
///
/// `corpus[i]` must be the page the index calls page `i`.
pub fn stage1_search(
    q: &QueryTokens,
    corpus: &[PageRecord],
    idx: &CentroidAnnIndex,
    params: Stage1Params,
) -> Result<Stage1Result> {
    if corpus.len() != idx.num_pages() {
        return Err(Error::InvalidInput(format!(
            "index covers {} pages, corpus has {}",
            idx.num_pages(),
            corpus.len()
        )));
    }
    if q.dim() != idx.dim() {
        return Err(Error::DimensionMismatch {
            expected: idx.dim(),
            actual: q.dim(),
        });
    }
    if params.r == 0 || params.n1 == 0 {
        return Err(Error::InvalidInput("R and N1 must be positive".into()));
    }
    let start = Instant::now();
    let probe = idx.effective_probe(params.r, params.probe_k, q.m());
    let hits = probe_tokens(q, idx, probe);
    let ann_done = Instant::now();

    let shortlist = aggregate_coarse(&hits, idx, params.r);
    let coarse_done = Instant::now();

    let qv = q.matrix().view();
    let mut scored: Vec<(u32, f64)> = shortlist
        .par_iter()
        .map_init(Vec::new, |scratch, c| {
            let page = &corpus[c.page_index as usize];
            (c.page_index, score_unchecked(qv, page.patches.view(), scratch).total)
        })
        .collect();
    let fine_dot_products: u64 = shortlist
        .iter()
        .map(|c| (q.m() * corpus[c.page_index as usize].n_patches()) as u64)
        .sum();
    top_k_by(&mut scored, params.n1, |a, b| {
        rank_order(a.1, &corpus[a.0 as usize].page_id, b.1, &corpus[b.0 as usize].page_id)
    });
    let ranked = scored
        .into_iter()
        .enumerate()
        .map(|(i, (p, s))| RankedPage {
            page_id: corpus[p as usize].page_id.clone(),
            score: s,
            rank: i + 1,
        })
        .collect();
    let end = Instant::now();

    let ms = |a: Instant, b: Instant| (b - a).as_secs_f64() * 1e3;
    Ok(Stage1Result {
        ranked,
        timings: Stage1Timings {
            ann_ms: ms(start, ann_done),
            coarse_ms: ms(ann_done, coarse_done),
            fine_ms: ms(coarse_done, end),
            total_ms: ms(start, end),
        },
        counters: Stage1Counters {
            ann_flops: hits.dot_products,
            fine_dot_products,
            shortlist_len: shortlist.len(),
            probe_per_token: probe,
        },
    })
}
