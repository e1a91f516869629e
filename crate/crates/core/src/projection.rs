//! PCA projection of patch vectors to the index dimension.
//!
//! The basis is the top principal directions of the centered fit sample, with
//! no whitening. Projected rows are re-normalized so that dot products remain
//! cosines.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::types::{Matrix, normalize};

/// Projected norms below this are treated as zero.
pub const DEGENERATE_NORM: f32 = 1e-6;

const MAGIC: &[u8; 4] = b"FPRJ";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionModel {
    pub source_dim: usize,
    pub target_dim: usize,
    pub mean: Vec<f32>,
    /// `target_dim × source_dim`, orthonormal rows.
    pub basis: Matrix,
    /// Variance captured by each basis row, non-increasing.
    pub explained_variance: Vec<f32>,
    /// Total variance of the fit sample.
    pub total_variance: f64,
}

/// Result of projecting a batch.
#[derive(Clone, Debug)]
pub struct Projected {
    pub vectors: Matrix,
    /// Rows whose centered projection vanished; they are left as zero vectors.
    pub degenerate: Vec<usize>,
}

/// Fits a PCA basis on at most `max_samples` rows drawn uniformly with `seed`.
pub fn fit_projection(
    samples: &Matrix,
    target_dim: usize,
    max_samples: usize,
    seed: u64,
) -> Result<ProjectionModel> {
    let source_dim = samples.dim();
    if target_dim == 0 || target_dim > source_dim {
        return Err(Error::InvalidInput(format!(
            "target_dim {target_dim} must lie in 1..={source_dim}"
        )));
    }
    if samples.rows() < target_dim {
        return Err(Error::InsufficientSamples {
            needed: target_dim,
            got: samples.rows(),
        });
    }
    if let Some(pos) = samples.as_slice().iter().position(|x| !x.is_finite()) {
        return Err(Error::InvalidSamples(format!(
            "non-finite value in row {}",
            pos / source_dim
        )));
    }

    let rows: Vec<usize> = if samples.rows() > max_samples {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx = sample(&mut rng, samples.rows(), max_samples).into_vec();
        idx.sort_unstable();
        idx
    } else {
        (0..samples.rows()).collect()
    };
    let s = rows.len();

    let mut mean = vec![0f64; source_dim];
    for &r in &rows {
        for (m, x) in mean.iter_mut().zip(samples.row(r)) {
            *m += *x as f64;
        }
    }
    for m in &mut mean {
        *m /= s as f64;
    }
    let centered = DMatrix::<f64>::from_fn(s, source_dim, |i, j| {
        samples.row(rows[i])[j] as f64 - mean[j]
    });
    let denom = (s.max(2) - 1) as f64;
    let cov = (centered.transpose() * &centered) / denom;
    let total_variance = cov.trace();

    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..source_dim).collect();
    order.sort_by(|a, b| {
        eig.eigenvalues[*b]
            .total_cmp(&eig.eigenvalues[*a])
            .then(a.cmp(b))
    });

    let mut basis = Matrix::zeros(target_dim, source_dim);
    let mut explained_variance = Vec::with_capacity(target_dim);
    for (k, &col) in order.iter().take(target_dim).enumerate() {
        let v = eig.eigenvectors.column(col);
        // Sign convention: largest-magnitude component positive.
        let pivot = (0..source_dim)
            .max_by(|a, b| v[*a].abs().total_cmp(&v[*b].abs()).then(b.cmp(a)))
            .expect("non-empty");
        let sign = if v[pivot] < 0.0 { -1.0 } else { 1.0 };
        let row = basis.row_mut(k);
        for j in 0..source_dim {
            row[j] = (sign * v[j]) as f32;
        }
        explained_variance.push(eig.eigenvalues[col].max(0.0) as f32);
    }

    Ok(ProjectionModel {
        source_dim,
        target_dim,
        mean: mean.into_iter().map(|m| m as f32).collect(),
        basis,
        explained_variance,
        total_variance,
    })
}

impl ProjectionModel {
    /// `basis · (row − mean)` without normalization.
    pub fn project_raw(&self, row: &[f32]) -> Vec<f32> {
        let centered: Vec<f64> = row
            .iter()
            .zip(&self.mean)
            .map(|(x, m)| (*x - *m) as f64)
            .collect();
        self.basis
            .iter_rows()
            .map(|b| {
                b.iter()
                    .zip(&centered)
                    .map(|(w, c)| *w as f64 * c)
                    .sum::<f64>() as f32
            })
            .collect()
    }

    /// Projects and re-normalizes every row.
    pub fn apply(&self, vectors: &Matrix) -> Result<Projected> {
        if vectors.dim() != self.source_dim {
            return Err(Error::DimensionMismatch {
                expected: self.source_dim,
                actual: vectors.dim(),
            });
        }
        let mut out = Matrix::zeros(vectors.rows(), self.target_dim);
        let mut degenerate = Vec::new();
        for (i, row) in vectors.iter_rows().enumerate() {
            let mut p = self.project_raw(row);
            if crate::types::norm(&p) < DEGENERATE_NORM {
                degenerate.push(i);
                continue;
            }
            normalize(&mut p);
            out.row_mut(i).copy_from_slice(&p);
        }
        Ok(Projected {
            vectors: out,
            degenerate,
        })
    }

    /// Variance of the fit sample lost by projecting onto the basis.
    pub fn reconstruction_error(&self) -> f64 {
        self.total_variance - self.explained_variance.iter().map(|v| *v as f64).sum::<f64>()
    }

    /// Binary form: magic, version, dims, then `f64` total variance and `f32` LE blobs.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.source_dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.target_dim as u32).to_le_bytes());
        out.extend_from_slice(&self.total_variance.to_le_bytes());
        for x in self
            .mean
            .iter()
            .chain(self.basis.as_slice())
            .chain(&self.explained_variance)
        {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::InvalidInput(format!("projection blob: {m}"));
        if bytes.len() < 24 || &bytes[..4] != MAGIC {
            return Err(bad("bad header"));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        if u32_at(4) != VERSION {
            return Err(bad("unsupported version"));
        }
        let source_dim = u32_at(8) as usize;
        let target_dim = u32_at(12) as usize;
        let total_variance = f64::from_le_bytes(bytes[16..24].try_into().unwrap());
        let n = source_dim + target_dim * source_dim + target_dim;
        if bytes.len() != 24 + 4 * n {
            return Err(bad("length mismatch"));
        }
        let floats: Vec<f32> = bytes[24..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let mean = floats[..source_dim].to_vec();
        let basis = Matrix::new(
            target_dim,
            source_dim,
            floats[source_dim..source_dim + target_dim * source_dim].to_vec(),
        )?;
        let explained_variance = floats[source_dim + target_dim * source_dim..].to_vec();
        Ok(Self {
            source_dim,
            target_dim,
            mean,
            basis,
            explained_variance,
            total_variance,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::dot;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn gaussian(seed: u64, rows: usize, dim: usize, scales: &[f32]) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * dim)
            .map(|i| {
                let z: f32 = rng.sample(StandardNormal);
                z * scales[i % dim]
            })
            .collect();
        Matrix::new(rows, dim, data).unwrap()
    }

    #[test]
    fn rank_two_data_is_captured_by_two_components() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let u: Vec<f32> = (0..10).map(|_| rng.sample(StandardNormal)).collect();
        let v: Vec<f32> = (0..10).map(|_| rng.sample(StandardNormal)).collect();
        let rows: Vec<Vec<f32>> = (0..200)
            .map(|_| {
                let a: f32 = rng.sample(StandardNormal);
                let b: f32 = rng.sample(StandardNormal);
                (0..10).map(|j| 3.0 + a * u[j] + b * v[j]).collect()
            })
            .collect();
        let m = fit_projection(&Matrix::from_rows(&rows).unwrap(), 2, 100_000, 1).unwrap();
        let captured: f64 = m.explained_variance.iter().map(|x| *x as f64).sum();
        assert!(captured / m.total_variance >= 0.999);
    }

    #[test]
    fn diagonal_covariance_selects_heaviest_axes() {
        let dim = 768;
        let weights: Vec<f32> = (0..dim).map(|i| ((i * 7919) % dim) as f32 + 1.0).collect();
        let mut rows = Vec::new();
        for (i, w) in weights.iter().enumerate() {
            for sign in [1.0f32, -1.0] {
                let mut r = vec![0.0; dim];
                r[i] = sign * w;
                rows.push(r);
            }
        }
        let m = fit_projection(&Matrix::from_rows(&rows).unwrap(), 128, 100_000, 0).unwrap();
        let mut heaviest: Vec<usize> = (0..dim).collect();
        heaviest.sort_by(|a, b| weights[*b].total_cmp(&weights[*a]));
        let mut chosen: Vec<usize> = m
            .basis
            .iter_rows()
            .map(|r| (0..dim).max_by(|a, b| r[*a].abs().total_cmp(&r[*b].abs())).unwrap())
            .collect();
        chosen.sort();
        let mut expected = heaviest[..128].to_vec();
        expected.sort();
        assert_eq!(chosen, expected);
    }

    #[test]
    fn basis_is_orthonormal_and_variance_sorted() {
        let scales: Vec<f32> = (0..32).map(|i| 1.0 + i as f32 * 0.1).collect();
        let m = fit_projection(&gaussian(3, 400, 32, &scales), 8, 100_000, 3).unwrap();
        for i in 0..8 {
            for j in 0..8 {
                let d = dot(m.basis.row(i), m.basis.row(j));
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((d - expect).abs() < 1e-4);
            }
        }
        assert!(m.explained_variance.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn fit_errors() {
        let few = gaussian(1, 3, 8, &[1.0; 8]);
        assert!(matches!(
            fit_projection(&few, 4, 100, 0),
            Err(Error::InsufficientSamples { .. })
        ));
        let mut data = gaussian(1, 10, 4, &[1.0; 4]).into_vec();
        data[5] = f32::NAN;
        let bad = Matrix::new(10, 4, data).unwrap();
        assert!(matches!(fit_projection(&bad, 2, 100, 0), Err(Error::InvalidSamples(_))));
    }

    #[test]
    fn mean_row_is_degenerate_and_eigen_direction_maps_to_axis() {
        let scales: Vec<f32> = (0..16).map(|i| 4.0 - i as f32 * 0.2).collect();
        let m = fit_projection(&gaussian(4, 300, 16, &scales), 4, 100_000, 4).unwrap();
        let on_axis: Vec<f32> = m
            .mean
            .iter()
            .zip(m.basis.row(0))
            .map(|(mu, b)| mu + 2.5 * b)
            .collect();
        let batch = Matrix::from_rows(&[m.mean.clone(), on_axis]).unwrap();
        let out = m.apply(&batch).unwrap();
        assert_eq!(out.degenerate, vec![0]);
        assert!(out.vectors.row(0).iter().all(|x| *x == 0.0));
        let r = out.vectors.row(1);
        assert!((r[0] - 1.0).abs() < 1e-5);
        assert!(r[1..].iter().all(|x| x.abs() < 1e-5));
    }

    #[test]
    fn width_mismatch_is_rejected() {
        let m = fit_projection(&gaussian(5, 50, 8, &[1.0; 8]), 2, 100, 0).unwrap();
        assert!(m.apply(&Matrix::zeros(1, 7)).is_err());
    }

    #[test]
    fn binary_round_trip() {
        let m = fit_projection(&gaussian(6, 60, 12, &[1.0; 12]), 5, 100, 0).unwrap();
        assert_eq!(ProjectionModel::from_bytes(&m.to_bytes()).unwrap(), m);
        assert!(ProjectionModel::from_bytes(b"nope").is_err());
    }

    #[test]
    fn projection_is_linear_before_normalization() {
        let m = fit_projection(&gaussian(7, 200, 24, &[1.0; 24]), 6, 1000, 0).unwrap();
        let batch = gaussian(8, 2, 24, &[1.0; 24]);
        let (a, b) = (batch.row(0), batch.row(1));
        let pa = m.project_raw(a);
        let pb = m.project_raw(b);
        let diff: Vec<f32> = a.iter().zip(b).map(|(x, y)| x - y).collect();
        for (k, brow) in m.basis.iter_rows().enumerate() {
            assert!(((pa[k] - pb[k]) - dot(brow, &diff)).abs() < 1e-5);
        }
    }

    #[test]
    fn fit_is_deterministic_under_subsampling() {
        let data = gaussian(10, 500, 16, &[1.0; 16]);
        let a = fit_projection(&data, 4, 100, 77).unwrap();
        let b = fit_projection(&data, 4, 100, 77).unwrap();
        assert_eq!(a, b);
    }
}
