//! Joint Bayesian metric: x = mu + eps with identity covariance S_mu and
//! intra-personal covariance S_eps, scored by the log-likelihood ratio of
//! the same-identity vs different-identity joint Gaussians.
//!
//! Fitting is exact EM for the Gaussian random-effects model (posterior
//! second moments included), so the data log-likelihood is non-decreasing
//! across iterations.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector};

use super::MatchError;
use crate::io_util;

#[derive(Debug, Clone)]
pub struct JbModel {
    pub dim: usize,
    pub s_mu: DMatrix<f64>,
    pub s_eps: DMatrix<f64>,
    /// Score matrices of r = y1'Ay1 + y2'Ay2 - 2 y1'Gy2 + c.
    pub a: DMatrix<f64>,
    pub g: DMatrix<f64>,
    pub c: f64,
}

#[derive(Debug, Clone)]
pub struct JbFitOptions {
    pub max_iters: usize,
    /// Stop when the relative Frobenius change of both covariances drops
    /// below this.
    pub tol: f64,
    /// Ridge scale applied when a covariance's condition exceeds 1e10.
    pub ridge: f64,
    pub track_loglik: bool,
}

impl Default for JbFitOptions {
    fn default() -> Self {
        JbFitOptions {
            max_iters: 100,
            tol: 1e-5,
            ridge: 1e-4,
            track_loglik: true,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct JbFitReport {
    pub iterations: usize,
    pub converged: bool,
    /// Data log-likelihood trace (initial model first) when tracking is on.
    pub loglik: Vec<f64>,
}

fn outer_acc(acc: &mut DMatrix<f64>, v: &DVector<f64>) {
    let d = v.len();
    for i in 0..d {
        for j in 0..d {
            acc[(i, j)] += v[i] * v[j];
        }
    }
}

/// Ridge-regularize in place when ill-conditioned (condition > 1e10).
fn regularize(m: &mut DMatrix<f64>, ridge: f64) {
    let d = m.nrows();
    let se = nalgebra::SymmetricEigen::new(m.clone());
    let lmax = se.eigenvalues.iter().fold(f64::MIN, |a, &b| a.max(b));
    let lmin = se.eigenvalues.iter().fold(f64::MAX, |a, &b| a.min(b));
    if lmin <= 0.0 || lmax / lmin > 1e10 {
        let tr = m.trace().max(1e-300);
        let bump = ridge * tr / d as f64;
        for i in 0..d {
            m[(i, i)] += bump;
        }
    }
}

fn chol(m: &DMatrix<f64>, what: &str) -> Result<Cholesky<f64, nalgebra::Dyn>, MatchError> {
    m.clone()
        .cholesky()
        .ok_or_else(|| MatchError::FitFailure(format!("{what} is not positive definite")))
}

/// log N(v; 0, C) given the Cholesky factor of C.
fn gaussian_logpdf(chol: &Cholesky<f64, nalgebra::Dyn>, v: &DVector<f64>) -> f64 {
    let d = v.len() as f64;
    let half_logdet: f64 = chol.l().diagonal().iter().map(|x| x.ln()).sum();
    let solved = chol.solve(v);
    let quad = v.dot(&solved);
    -0.5 * (d * (2.0 * std::f64::consts::PI).ln() + quad) - half_logdet
}

/// Groups sample indices by label, preserving first-appearance order of
/// samples within each group.
fn group_by_label(labels: &[usize]) -> BTreeMap<usize, Vec<usize>> {
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        groups.entry(l).or_default().push(i);
    }
    groups
}

/// Exact data log-likelihood of zero-mean features under (S_mu, S_eps).
///
/// Uses the orthogonal decomposition of each subject's stacked Gaussian:
/// the scaled mean sqrt(m)*xbar ~ N(0, m*S_mu + S_eps) and m-1 deviation
/// components i.i.d. N(0, S_eps) carrying the within-subject scatter.
pub fn jb_log_likelihood(
    s_mu: &DMatrix<f64>,
    s_eps: &DMatrix<f64>,
    features: &[Vec<f64>],
    labels: &[usize],
) -> Result<f64, MatchError> {
    let d = s_mu.nrows();
    let eps_chol = chol(s_eps, "S_eps")?;
    let eps_logdet: f64 = 2.0 * eps_chol.l().diagonal().iter().map(|x| x.ln()).sum::<f64>();
    let ln2pi = (2.0 * std::f64::consts::PI).ln();
    let mut ll = 0.0;
    for (_, idxs) in group_by_label(labels) {
        let m = idxs.len();
        let mut xbar = DVector::zeros(d);
        for &i in &idxs {
            for j in 0..d {
                xbar[j] += features[i][j] / m as f64;
            }
        }
        let mean_cov = s_mu * m as f64 + s_eps;
        let mean_chol = chol(&mean_cov, "m*S_mu + S_eps")?;
        let scaled = &xbar * (m as f64).sqrt();
        ll += gaussian_logpdf(&mean_chol, &scaled);
        if m > 1 {
            // Deviation block: -(m-1)/2 (d ln 2pi + logdet S_eps)
            //                  - 1/2 tr(S_eps^-1 W)
            let mut tr_term = 0.0;
            for &i in &idxs {
                let dev = DVector::from_fn(d, |j, _| features[i][j] - xbar[j]);
                tr_term += dev.dot(&eps_chol.solve(&dev));
            }
            ll += -0.5 * (m as f64 - 1.0) * (d as f64 * ln2pi + eps_logdet) - 0.5 * tr_term;
        }
    }
    Ok(ll)
}

/// EM estimation of S_mu and S_eps from zero-mean features, then
/// precomputation of the score matrices.
pub fn jb_fit(
    features: &[Vec<f64>],
    labels: &[usize],
    opts: &JbFitOptions,
) -> Result<(JbModel, JbFitReport), MatchError> {
    if features.is_empty() {
        return Err(MatchError::EmptyInput("jb_fit".into()));
    }
    if features.len() != labels.len() {
        return Err(MatchError::Dimension(
            "jb_fit: features/labels length mismatch".into(),
        ));
    }
    let d = features[0].len();
    for f in features {
        if f.len() != d {
            return Err(MatchError::Dimension(format!(
                "jb_fit: inconsistent dims {} vs {d}",
                f.len()
            )));
        }
    }
    let groups = group_by_label(labels);
    if groups.len() < 2 {
        return Err(MatchError::Unidentifiable(
            "need at least 2 subjects".into(),
        ));
    }
    if groups.values().all(|g| g.len() < 2) {
        return Err(MatchError::Unidentifiable(
            "every subject has a single sample; S_mu and S_eps are not separable — provide subjects with two or more images".into(),
        ));
    }
    let n_total = features.len() as f64;
    let n_subjects = groups.len() as f64;

    // Moment-matching start: between-subject scatter of subject means and
    // pooled within-subject scatter.
    let mut s_mu = DMatrix::zeros(d, d);
    let mut s_eps = DMatrix::zeros(d, d);
    let mut means: BTreeMap<usize, DVector<f64>> = BTreeMap::new();
    for (&label, idxs) in &groups {
        let m = idxs.len() as f64;
        let mut mean = DVector::zeros(d);
        for &i in idxs {
            for j in 0..d {
                mean[j] += features[i][j] / m;
            }
        }
        outer_acc(&mut s_mu, &mean);
        for &i in idxs {
            let dev = DVector::from_fn(d, |j, _| features[i][j] - mean[j]);
            outer_acc(&mut s_eps, &dev);
        }
        means.insert(label, mean);
    }
    s_mu /= n_subjects;
    s_eps /= n_total;
    regularize(&mut s_eps, opts.ridge);
    // A zero between scatter is legitimate data; keep S_mu symmetric psd
    // without forcing positivity.
    symmetrize(&mut s_mu);
    symmetrize(&mut s_eps);

    let mut report = JbFitReport::default();
    if opts.track_loglik {
        report.loglik.push(jb_log_likelihood(&s_mu, &s_eps, features, labels)?);
    }

    for iter in 0..opts.max_iters {
        // Posterior terms cached per group size m:
        //   T_m = (S_mu + S_eps/m)^-1
        //   post_cov_m = S_mu - S_mu T_m S_mu   (posterior covariance of mu)
        let mut cache: BTreeMap<usize, (DMatrix<f64>, DMatrix<f64>)> = BTreeMap::new();
        for idxs in groups.values() {
            let m = idxs.len();
            if cache.contains_key(&m) {
                continue;
            }
            let shrunk = &s_mu + &s_eps / m as f64;
            let t = chol(&shrunk, "S_mu + S_eps/m")?.inverse();
            let post_cov = &s_mu - &s_mu * &t * &s_mu;
            cache.insert(m, (t, post_cov));
        }
        let mut new_mu = DMatrix::zeros(d, d);
        let mut new_eps = DMatrix::zeros(d, d);
        for idxs in groups.values() {
            let m = idxs.len();
            let (t, post_cov) = &cache[&m];
            let mut xbar = DVector::zeros(d);
            for &i in idxs {
                for j in 0..d {
                    xbar[j] += features[i][j] / m as f64;
                }
            }
            // Posterior mean of mu: S_mu (S_mu + S_eps/m)^-1 xbar.
            let mu_hat = &s_mu * (t * &xbar);
            new_mu += post_cov;
            outer_acc(&mut new_mu, &mu_hat);
            // E[eps eps'] = post_cov + (x - mu_hat)(x - mu_hat)'.
            new_eps += post_cov * m as f64;
            for &i in idxs {
                let eps_hat = DVector::from_fn(d, |j, _| features[i][j] - mu_hat[j]);
                outer_acc(&mut new_eps, &eps_hat);
            }
        }
        new_mu /= n_subjects;
        new_eps /= n_total;
        symmetrize(&mut new_mu);
        symmetrize(&mut new_eps);
        regularize(&mut new_eps, opts.ridge);

        let change = (rel_frob(&new_mu, &s_mu)).max(rel_frob(&new_eps, &s_eps));
        s_mu = new_mu;
        s_eps = new_eps;
        report.iterations = iter + 1;
        if opts.track_loglik {
            report.loglik.push(jb_log_likelihood(&s_mu, &s_eps, features, labels)?);
        }
        if change < opts.tol {
            report.converged = true;
            break;
        }
    }

    let model = finalize_model(s_mu, s_eps)?;
    Ok((model, report))
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let t = m.transpose();
    *m += t;
    *m /= 2.0;
}

fn rel_frob(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let num = (a - b).norm();
    let den = b.norm().max(1e-300);
    num / den
}

/// Precomputes A, G, c from the covariances by block inversion of the two
/// joint covariances:
///   same-identity     [[P, Q], [Q, P]]  with P = S_mu + S_eps, Q = S_mu
///   different-identity blockdiag(P, P)
/// giving A = (P^-1 - R)/2, G = S/2 with [[R, S], [S, R]] the inverse of
/// the same-identity joint, and c = (logdet P + logdet R)/2 so the score
/// is the true log-likelihood ratio.
pub fn finalize_model(s_mu: DMatrix<f64>, s_eps: DMatrix<f64>) -> Result<JbModel, MatchError> {
    let d = s_mu.nrows();
    let p = &s_mu + &s_eps;
    let p_chol = chol(&p, "S_mu + S_eps")?;
    let p_inv = p_chol.inverse();
    let schur = &p - &s_mu * &p_inv * &s_mu;
    let r_chol = chol(&schur, "joint covariance Schur complement")?;
    let r = r_chol.inverse();
    let s = -(&p_inv * &s_mu * &r);
    let a = (&p_inv - &r) / 2.0;
    let g = &s / 2.0;
    let logdet_p: f64 = 2.0 * p_chol.l().diagonal().iter().map(|x| x.ln()).sum::<f64>();
    let logdet_r: f64 = -2.0 * r_chol.l().diagonal().iter().map(|x| x.ln()).sum::<f64>();
    let c = 0.5 * (logdet_p + logdet_r);
    Ok(JbModel {
        dim: d,
        s_mu,
        s_eps,
        a,
        g,
        c,
    })
}

fn quad(m: &DMatrix<f64>, x: &DVector<f64>, y: &DVector<f64>) -> f64 {
    (x.transpose() * m * y)[(0, 0)]
}

impl JbModel {
    fn check_dim(&self, y1: &[f64], y2: &[f64]) -> Result<(), MatchError> {
        if y1.len() != self.dim || y2.len() != self.dim {
            return Err(MatchError::Dimension(format!(
                "jb score: inputs {}/{} vs model dim {}",
                y1.len(),
                y2.len(),
                self.dim
            )));
        }
        Ok(())
    }

    /// Closed-form log-likelihood ratio r(y1, y2).
    pub fn score(&self, y1: &[f64], y2: &[f64]) -> Result<f64, MatchError> {
        self.check_dim(y1, y2)?;
        let v1 = DVector::from_column_slice(y1);
        let v2 = DVector::from_column_slice(y2);
        // The cross term is averaged over both evaluation orders so the
        // score is bit-exactly symmetric in its arguments.
        let cross = 0.5 * (quad(&self.g, &v1, &v2) + quad(&self.g, &v2, &v1));
        Ok(quad(&self.a, &v1, &v1) + quad(&self.a, &v2, &v2) - 2.0 * cross + self.c)
    }

    pub fn score_f32(&self, y1: &[f32], y2: &[f32]) -> Result<f64, MatchError> {
        let a: Vec<f64> = y1.iter().map(|&v| v as f64).collect();
        let b: Vec<f64> = y2.iter().map(|&v| v as f64).collect();
        self.score(&a, &b)
    }

    pub fn save(&self, path: &Path) -> Result<(), MatchError> {
        let io_err = |source| MatchError::Io {
            path: path.display().to_string(),
            source,
        };
        let file = File::create(path).map_err(io_err)?;
        let mut w = BufWriter::new(file);
        w.write_all(b"MMJB").map_err(io_err)?;
        io_util::write_u32(&mut w, 1).map_err(io_err)?;
        io_util::write_u32(&mut w, self.dim as u32).map_err(io_err)?;
        for m in [&self.s_mu, &self.s_eps, &self.a, &self.g] {
            for r in 0..self.dim {
                for c in 0..self.dim {
                    w.write_all(&m[(r, c)].to_le_bytes()).map_err(io_err)?;
                }
            }
        }
        w.write_all(&self.c.to_le_bytes()).map_err(io_err)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<JbModel, MatchError> {
        let io_err = |source| MatchError::Io {
            path: path.display().to_string(),
            source,
        };
        let file = File::open(path).map_err(io_err)?;
        let mut r = BufReader::new(file);
        let magic = io_util::read_exact_array::<4>(&mut r).map_err(io_err)?;
        if &magic != b"MMJB" {
            return Err(MatchError::Checkpoint(format!(
                "{}: bad magic {magic:?}",
                path.display()
            )));
        }
        let version = io_util::read_u32(&mut r).map_err(io_err)?;
        if version != 1 {
            return Err(MatchError::Checkpoint(format!(
                "unsupported JB checkpoint version {version}"
            )));
        }
        let d = io_util::read_u32(&mut r).map_err(io_err)? as usize;
        let mut mats = Vec::with_capacity(4);
        for _ in 0..4 {
            let raw = io_util::read_f64_vec(&mut r, d * d).map_err(io_err)?;
            mats.push(DMatrix::from_fn(d, d, |i, j| raw[i * d + j]));
        }
        let c = f64::from_le_bytes(io_util::read_exact_array(&mut r).map_err(io_err)?);
        let g = mats.pop().unwrap();
        let a = mats.pop().unwrap();
        let s_eps = mats.pop().unwrap();
        let s_mu = mats.pop().unwrap();
        Ok(JbModel {
            dim: d,
            s_mu,
            s_eps,
            a,
            g,
            c,
        })
    }
}

/// Convenience wrapper: the closed-form score of a (model, pair) instance.
pub fn jb_score(model: &JbModel, y1: &[f64], y2: &[f64]) -> Result<f64, MatchError> {
    model.score(y1, y2)
}

/// Independent verification oracle: builds both 2d x 2d joint covariances
/// explicitly and evaluates the two multivariate Gaussian log densities
/// directly. Never touches the precomputed score matrices.
pub fn jb_oracle_score(model: &JbModel, y1: &[f64], y2: &[f64]) -> Result<f64, MatchError> {
    model.check_dim(y1, y2)?;
    let d = model.dim;
    let p = &model.s_mu + &model.s_eps;
    let mut same = DMatrix::zeros(2 * d, 2 * d);
    let mut diff = DMatrix::zeros(2 * d, 2 * d);
    for i in 0..d {
        for j in 0..d {
            same[(i, j)] = p[(i, j)];
            same[(d + i, d + j)] = p[(i, j)];
            same[(i, d + j)] = model.s_mu[(i, j)];
            same[(d + i, j)] = model.s_mu[(i, j)];
            diff[(i, j)] = p[(i, j)];
            diff[(d + i, d + j)] = p[(i, j)];
        }
    }
    let mut v = DVector::zeros(2 * d);
    for i in 0..d {
        v[i] = y1[i];
        v[d + i] = y2[i];
    }
    let same_chol = chol(&same, "same-identity joint covariance")?;
    let diff_chol = chol(&diff, "different-identity joint covariance")?;
    Ok(gaussian_logpdf(&same_chol, &v) - gaussian_logpdf(&diff_chol, &v))
}
