//! Similarity scoring between signatures: cosine distance for the
//! unsupervised mode, PCA + Joint Bayesian for the supervised mode.

mod jb;

pub use jb::{
    finalize_model, jb_fit, jb_log_likelihood, jb_oracle_score, jb_score, JbFitOptions,
    JbFitReport, JbModel,
};

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::io_util;

#[derive(Debug, Error)]
pub enum MatchError {
    #[error("requested dimension {requested} exceeds data rank {available}")]
    Rank { requested: usize, available: usize },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("cannot score a zero vector")]
    ZeroVector,
    #[error("model unidentifiable: {0}")]
    Unidentifiable(String),
    #[error("fit failure: {0}")]
    FitFailure(String),
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Mean + top eigenvectors of the training covariance. Projection is
/// y = B^T (x - mean), optionally whitened by 1/sqrt(eigenvalue).
#[derive(Debug, Clone)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// d x k, orthonormal columns, eigenvalues non-increasing.
    pub basis: DMatrix<f64>,
    pub eigenvalues: Vec<f64>,
    pub whiten: bool,
}

/// Fits PCA via eigendecomposition of the centered covariance, taking the
/// Gram route when samples are fewer than dimensions.
pub fn pca_fit(features: &[Vec<f32>], dim: usize, whiten: bool) -> Result<PcaModel, MatchError> {
    let n = features.len();
    if n == 0 {
        return Err(MatchError::EmptyInput("pca_fit".into()));
    }
    let d = features[0].len();
    if n <= dim {
        return Err(MatchError::Rank {
            requested: dim,
            available: n.saturating_sub(1),
        });
    }
    for f in features {
        if f.len() != d {
            return Err(MatchError::Dimension(format!(
                "pca_fit: inconsistent feature dims {} vs {d}",
                f.len()
            )));
        }
    }
    let mut mean = vec![0.0f64; d];
    for f in features {
        for (m, &v) in mean.iter_mut().zip(f) {
            *m += v as f64 / n as f64;
        }
    }
    // Centered data matrix, n x d.
    let xc = DMatrix::from_fn(n, d, |r, c| features[r][c] as f64 - mean[c]);
    let denom = (n - 1) as f64;
    let (eigenvalues, basis) = if n <= d {
        // Gram route: eigenvectors of (Xc Xc^T)/(n-1) lift to covariance
        // eigenvectors via Xc^T u / sqrt((n-1) lambda).
        let gram = &xc * xc.transpose() / denom;
        let (vals, vecs) = sorted_symmetric_eigen(gram);
        check_rank(&vals, dim)?;
        let mut basis = DMatrix::zeros(d, dim);
        for k in 0..dim {
            let u = vecs.column(k);
            let mut b = xc.transpose() * u;
            let norm = b.norm();
            b /= norm;
            basis.set_column(k, &b);
        }
        (vals[..dim].to_vec(), basis)
    } else {
        let cov = xc.transpose() * &xc / denom;
        let (vals, vecs) = sorted_symmetric_eigen(cov);
        check_rank(&vals, dim)?;
        (vals[..dim].to_vec(), vecs.columns(0, dim).into_owned())
    };
    Ok(PcaModel {
        mean,
        basis,
        eigenvalues,
        whiten,
    })
}

/// Eigenpairs of a symmetric matrix, sorted by descending eigenvalue.
fn sorted_symmetric_eigen(m: DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let dim = m.nrows();
    let se = nalgebra::SymmetricEigen::new(m);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| se.eigenvalues[b].total_cmp(&se.eigenvalues[a]));
    let vals: Vec<f64> = order.iter().map(|&i| se.eigenvalues[i]).collect();
    let mut vecs = DMatrix::zeros(dim, dim);
    for (k, &i) in order.iter().enumerate() {
        vecs.set_column(k, &se.eigenvectors.column(i));
    }
    (vals, vecs)
}

fn check_rank(vals: &[f64], dim: usize) -> Result<(), MatchError> {
    let lmax = vals.first().copied().unwrap_or(0.0).max(0.0);
    let rank = vals.iter().filter(|&&v| v > 1e-10 * lmax.max(1e-300)).count();
    if rank < dim {
        return Err(MatchError::Rank {
            requested: dim,
            available: rank,
        });
    }
    Ok(())
}

impl PcaModel {
    pub fn input_dim(&self) -> usize {
        self.mean.len()
    }

    pub fn output_dim(&self) -> usize {
        self.basis.ncols()
    }

    pub fn project(&self, x: &[f32]) -> Result<Vec<f64>, MatchError> {
        if x.len() != self.input_dim() {
            return Err(MatchError::Dimension(format!(
                "pca project: input dim {} vs model {}",
                x.len(),
                self.input_dim()
            )));
        }
        let centered = DVector::from_fn(x.len(), |i, _| x[i] as f64 - self.mean[i]);
        let mut y = self.basis.transpose() * centered;
        if self.whiten {
            for (k, v) in y.iter_mut().enumerate() {
                *v /= (self.eigenvalues[k].max(0.0) + 1e-12).sqrt();
            }
        }
        Ok(y.as_slice().to_vec())
    }

    /// Replaces the mean with the fold mean; the basis stays fixed.
    pub fn reestimate_mean(&self, fold_features: &[Vec<f32>]) -> Result<PcaModel, MatchError> {
        if fold_features.is_empty() {
            return Err(MatchError::EmptyInput("pca mean re-estimation".into()));
        }
        let d = self.input_dim();
        let mut mean = vec![0.0f64; d];
        for f in fold_features {
            if f.len() != d {
                return Err(MatchError::Dimension(format!(
                    "mean re-estimation: dim {} vs model {d}",
                    f.len()
                )));
            }
            for (m, &v) in mean.iter_mut().zip(f) {
                *m += v as f64 / fold_features.len() as f64;
            }
        }
        Ok(PcaModel {
            mean,
            basis: self.basis.clone(),
            eigenvalues: self.eigenvalues.clone(),
            whiten: self.whiten,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), MatchError> {
        let io_err = |source| MatchError::Io {
            path: path.display().to_string(),
            source,
        };
        let file = File::create(path).map_err(io_err)?;
        let mut w = BufWriter::new(file);
        w.write_all(b"MMPC").map_err(io_err)?;
        io_util::write_u32(&mut w, 1).map_err(io_err)?;
        io_util::write_u32(&mut w, self.input_dim() as u32).map_err(io_err)?;
        io_util::write_u32(&mut w, self.output_dim() as u32).map_err(io_err)?;
        w.write_all(&[self.whiten as u8]).map_err(io_err)?;
        io_util::write_f64_slice(&mut w, &self.mean).map_err(io_err)?;
        io_util::write_f64_slice(&mut w, &self.eigenvalues).map_err(io_err)?;
        for r in 0..self.basis.nrows() {
            for c in 0..self.basis.ncols() {
                w.write_all(&self.basis[(r, c)].to_le_bytes()).map_err(io_err)?;
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<PcaModel, MatchError> {
        let io_err = |source| MatchError::Io {
            path: path.display().to_string(),
            source,
        };
        let file = File::open(path).map_err(io_err)?;
        let mut r = BufReader::new(file);
        let magic = io_util::read_exact_array::<4>(&mut r).map_err(io_err)?;
        if &magic != b"MMPC" {
            return Err(MatchError::Checkpoint(format!(
                "{}: bad magic {magic:?}",
                path.display()
            )));
        }
        let version = io_util::read_u32(&mut r).map_err(io_err)?;
        if version != 1 {
            return Err(MatchError::Checkpoint(format!(
                "unsupported PCA checkpoint version {version}"
            )));
        }
        let d = io_util::read_u32(&mut r).map_err(io_err)? as usize;
        let k = io_util::read_u32(&mut r).map_err(io_err)? as usize;
        let whiten = io_util::read_exact_array::<1>(&mut r).map_err(io_err)?[0] != 0;
        let mean = io_util::read_f64_vec(&mut r, d).map_err(io_err)?;
        let eigenvalues = io_util::read_f64_vec(&mut r, k).map_err(io_err)?;
        let raw = io_util::read_f64_vec(&mut r, d * k).map_err(io_err)?;
        let basis = DMatrix::from_fn(d, k, |row, col| raw[row * k + col]);
        Ok(PcaModel {
            mean,
            basis,
            eigenvalues,
            whiten,
        })
    }
}

/// Cosine similarity y1.y2 / (|y1||y2|), in [-1, 1].
pub fn cosine_similarity(y1: &[f64], y2: &[f64]) -> Result<f64, MatchError> {
    if y1.len() != y2.len() {
        return Err(MatchError::Dimension(format!(
            "cosine: {} vs {}",
            y1.len(),
            y2.len()
        )));
    }
    let n1 = y1.iter().map(|v| v * v).sum::<f64>().sqrt();
    let n2 = y2.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n1 <= 0.0 || n2 <= 0.0 {
        return Err(MatchError::ZeroVector);
    }
    let dot: f64 = y1.iter().zip(y2).map(|(a, b)| a * b).sum();
    Ok((dot / (n1 * n2)).clamp(-1.0, 1.0))
}

pub fn cosine_similarity_f32(a: &[f32], b: &[f32]) -> Result<f64, MatchError> {
    let y1: Vec<f64> = a.iter().map(|&v| v as f64).collect();
    let y2: Vec<f64> = b.iter().map(|&v| v as f64).collect();
    cosine_similarity(&y1, &y2)
}
