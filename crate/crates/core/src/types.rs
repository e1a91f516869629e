//! Domain types shared across the pipeline.
//!
//! Vectors are stored as dense row-major `f32` matrices. A page is a
//! [`PatchMatrix`] of `n` unit-norm patch vectors; a query is a
//! [`QueryTokens`] matrix of `m` unit-norm token vectors.

use std::cmp::Ordering;
use std::fmt;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on row norms for data entering the index.
pub const UNIT_NORM_TOL: f32 = 1e-4;

/// Dense row-major `f32` matrix.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    dim: usize,
    data: Vec<f32>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Matrix")
            .field("rows", &self.rows)
            .field("dim", &self.dim)
            .finish()
    }
}

impl Matrix {
    pub fn new(rows: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidInput("matrix dimension must be positive".into()));
        }
        if data.len() != rows * dim {
            return Err(Error::InvalidInput(format!(
                "matrix data length {} is not {rows} x {dim}",
                data.len()
            )));
        }
        Ok(Self { rows, dim, data })
    }

    pub fn zeros(rows: usize, dim: usize) -> Self {
        Self {
            rows,
            dim,
            data: vec![0.0; rows * dim],
        }
    }

    pub fn from_rows<R: AsRef<[f32]>>(rows: &[R]) -> Result<Self> {
        let first = rows.first().ok_or(Error::Empty("matrix rows"))?;
        let dim = first.as_ref().len();
        let mut data = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            let r = r.as_ref();
            if r.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    actual: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), dim, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.rows == 0
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter_rows(&self) -> impl ExactSizeIterator<Item = &[f32]> + '_ {
        self.data.chunks_exact(self.dim)
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn view(&self) -> MatrixView<'_> {
        MatrixView {
            rows: self.rows,
            dim: self.dim,
            data: &self.data,
        }
    }

    pub fn push_row(&mut self, row: &[f32]) -> Result<()> {
        if row.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: row.len(),
            });
        }
        self.data.extend_from_slice(row);
        self.rows += 1;
        Ok(())
    }

    /// Checks every row has unit L2 norm within `tol`.
    pub fn check_unit_rows(&self, tol: f32) -> Result<()> {
        for (i, r) in self.iter_rows().enumerate() {
            let n = norm(r);
            if (n - 1.0).abs() > tol {
                return Err(Error::InvalidInput(format!(
                    "row {i} has norm {n}, expected 1 within {tol}"
                )));
            }
        }
        Ok(())
    }
}

/// Borrowed view over a row-major matrix.
#[derive(Clone, Copy, Debug)]
pub struct MatrixView<'a> {
    rows: usize,
    dim: usize,
    data: &'a [f32],
}

impl<'a> MatrixView<'a> {
    pub fn new(rows: usize, dim: usize, data: &'a [f32]) -> Self {
        assert_eq!(data.len(), rows * dim, "matrix view shape");
        Self { rows, dim, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &'a [f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter_rows(&self) -> impl ExactSizeIterator<Item = &'a [f32]> + 'a {
        self.data.chunks_exact(self.dim)
    }

    pub fn as_slice(&self) -> &'a [f32] {
        self.data
    }

    pub fn to_owned(&self) -> Matrix {
        Matrix {
            rows: self.rows,
            dim: self.dim,
            data: self.data.to_vec(),
        }
    }
}

/// A page's patch vectors.
pub type PatchMatrix = Matrix;

/// A query encoded into `m` unit-norm token vectors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f32>>", into = "Vec<Vec<f32>>")]
pub struct QueryTokens(Matrix);

impl QueryTokens {
    pub fn new(tokens: Matrix) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::Empty("query tokens"));
        }
        tokens.check_unit_rows(UNIT_NORM_TOL)?;
        Ok(Self(tokens))
    }

    /// Builds query tokens from arbitrary rows, normalizing each to unit length.
    pub fn from_unnormalized(mut tokens: Matrix) -> Result<Self> {
        for i in 0..tokens.rows() {
            if normalize(tokens.row_mut(i)) == 0.0 {
                return Err(Error::Degenerate(format!("query token {i} is zero")));
            }
        }
        Self::new(tokens)
    }

    pub fn m(&self) -> usize {
        self.0.rows()
    }

    pub fn dim(&self) -> usize {
        self.0.dim()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }
}

impl TryFrom<Vec<Vec<f32>>> for QueryTokens {
    type Error = Error;

    fn try_from(rows: Vec<Vec<f32>>) -> Result<Self> {
        Self::new(Matrix::from_rows(&rows)?)
    }
}

impl From<QueryTokens> for Vec<Vec<f32>> {
    fn from(q: QueryTokens) -> Self {
        q.0.iter_rows().map(<[f32]>::to_vec).collect()
    }
}

/// One page of the corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct PageRecord {
    pub page_id: String,
    pub article_id: String,
    pub patches: PatchMatrix,
    pub summary: String,
    /// Reference to the rendered page image (path or URL), passed through to the reasoner.
    pub image_ref: Option<String>,
}

impl PageRecord {
    pub fn n_patches(&self) -> usize {
        self.patches.rows()
    }

    pub fn validate(&self) -> Result<()> {
        if self.patches.is_empty() {
            return Err(Error::InvalidInput(format!("page {} has no patches", self.page_id)));
        }
        self.patches
            .check_unit_rows(UNIT_NORM_TOL)
            .map_err(|e| Error::InvalidInput(format!("page {}: {e}", self.page_id)))
    }

    pub fn image_ref_or_default(&self) -> String {
        self.image_ref
            .clone()
            .unwrap_or_else(|| format!("page:{}", self.page_id))
    }
}

/// One entry of a ranked result list (1-based rank).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedPage {
    pub page_id: String,
    pub score: f64,
    pub rank: usize,
}

/// Ordering used everywhere for scored items: score descending, then id ascending.
pub fn rank_order(a_score: f64, a_id: &str, b_score: f64, b_id: &str) -> Ordering {
    b_score
        .partial_cmp(&a_score)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a_id.cmp(b_id))
}

/// Answer labels accepted by the extraction rule.
pub const VALID_LABELS: [&str; 7] = ["A", "B", "C", "D", "yes", "no", "maybe"];

/// A multiple-choice question.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Question {
    pub question_id: String,
    pub stem: String,
    pub options: IndexMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_label: Option<String>,
}

impl Question {
    pub fn validate(&self) -> Result<()> {
        if self.options.len() < 2 {
            return Err(Error::InvalidInput(format!(
                "question {} has fewer than 2 options",
                self.question_id
            )));
        }
        let letters = ["A", "B", "C", "D"];
        let ynm = ["yes", "no", "maybe"];
        let all_letters = self.options.keys().all(|k| letters.contains(&k.as_str()));
        let all_ynm = self.options.keys().all(|k| ynm.contains(&k.as_str()));
        if !all_letters && !all_ynm {
            return Err(Error::InvalidInput(format!(
                "question {} mixes or uses unknown option labels",
                self.question_id
            )));
        }
        if let Some(gold) = &self.gold_label {
            if !self.options.contains_key(gold) {
                return Err(Error::InvalidInput(format!(
                    "question {} gold label {gold} is not an option",
                    self.question_id
                )));
            }
        }
        Ok(())
    }
}

#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    // Four accumulators let the compiler vectorize without reassociation flags.
    let mut acc = [0.0f32; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

pub fn norm(v: &[f32]) -> f32 {
    v.iter().map(|x| (*x as f64) * (*x as f64)).sum::<f64>().sqrt() as f32
}

/// Normalizes in place and returns the original norm. Zero vectors are left untouched.
pub fn normalize(v: &mut [f32]) -> f32 {
    let n = norm(v);
    if n > 0.0 {
        for x in v.iter_mut() {
            *x /= n;
        }
    }
    n
}

#[cfg(test)]
mod tests {
    use super::*;

    fn q(opts: &[&str], gold: Option<&str>) -> Question {
        Question {
            question_id: "q1".into(),
            stem: "stem".into(),
            options: opts.iter().map(|o| (o.to_string(), format!("opt {o}"))).collect(),
            gold_label: gold.map(String::from),
        }
    }

    #[test]
    fn question_validation() {
        assert!(q(&["A", "B", "C", "D"], Some("B")).validate().is_ok());
        assert!(q(&["yes", "no", "maybe"], Some("maybe")).validate().is_ok());
        assert!(q(&["A"], None).validate().is_err());
        assert!(q(&["A", "B"], Some("C")).validate().is_err());
        assert!(q(&["A", "yes"], None).validate().is_err());
    }

    #[test]
    fn question_options_keep_order_through_json() {
        let question = q(&["yes", "no", "maybe"], Some("no"));
        let s = serde_json::to_string(&question).unwrap();
        assert!(s.find("\"yes\"").unwrap() < s.find("\"maybe\"").unwrap());
        let back: Question = serde_json::from_str(&s).unwrap();
        assert_eq!(back, question);
    }

    #[test]
    fn query_tokens_reject_non_unit_rows() {
        let m = Matrix::from_rows(&[vec![1.0, 1.0]]).unwrap();
        assert!(QueryTokens::new(m.clone()).is_err());
        let t = QueryTokens::from_unnormalized(m).unwrap();
        assert!((norm(t.matrix().row(0)) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn dot_matches_naive_for_odd_lengths() {
        let a: Vec<f32> = (0..13).map(|i| i as f32 * 0.1).collect();
        let b: Vec<f32> = (0..13).map(|i| 1.0 - i as f32 * 0.05).collect();
        let naive: f32 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert!((dot(&a, &b) - naive).abs() < 1e-5);
    }

    #[test]
    fn rank_order_breaks_ties_by_id() {
        assert_eq!(rank_order(1.0, "b", 1.0, "a"), Ordering::Greater);
        assert_eq!(rank_order(2.0, "z", 1.0, "a"), Ordering::Less);
    }
}
