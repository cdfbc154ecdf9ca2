//! Metric kernels in f64: top-k accuracy, inception score, Fréchet distance
//! and instance-normalised feature distance.

use kshot_tensor::{Float, Tensor};
use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Rows of a `[N, C]` tensor as f64 vectors.
pub fn rows<T: Float>(t: &Tensor<T>) -> Result<Vec<Vec<f64>>> {
    let (_, c) = t.dims2()?;
    Ok(t.data()
        .chunks(c.max(1))
        .map(|r| r.iter().map(|v| v.to_f64().unwrap()).collect())
        .collect())
}

/// Percentage of rows whose target is among the `k` largest scores. Ties
/// are broken towards the lower index.
pub fn top_k_accuracy(scores: &[Vec<f64>], targets: &[usize], k: usize) -> Result<f64> {
    if scores.len() != targets.len() {
        return Err(Error::contract("one target per score row required"));
    }
    if scores.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for (row, &t) in scores.iter().zip(targets) {
        if t >= row.len() {
            return Err(Error::contract(format!("target {t} outside {} classes", row.len())));
        }
        let better = row
            .iter()
            .enumerate()
            .filter(|&(i, &v)| v > row[t] || (v == row[t] && i < t))
            .count();
        if better < k {
            hits += 1;
        }
    }
    Ok(100.0 * hits as f64 / scores.len() as f64)
}

/// `(top1, top5)`; top-5 is `None` with fewer than five classes.
pub fn translation_accuracy(probs: &[Vec<f64>], targets: &[usize]) -> Result<(f64, Option<f64>)> {
    let n_classes = probs.first().map_or(0, Vec::len);
    let top1 = top_k_accuracy(probs, targets, 1)?;
    let top5 = if n_classes >= 5 {
        Some(top_k_accuracy(probs, targets, 5)?)
    } else {
        None
    };
    Ok((top1, top5))
}

fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&a, _)| a > 0.0)
        .map(|(&a, &b)| a * (a.ln() - b.ln()))
        .sum()
}

/// `exp(mean_i KL(p_i || mean_j p_j))` per split, averaged over splits.
/// Consecutive rows form a split.
pub fn inception_score(probs: &[Vec<f64>], n_splits: usize) -> Result<f64> {
    if n_splits == 0 || probs.len() < 2 * n_splits {
        return Err(Error::contract(format!(
            "inception score needs at least two images per split ({} images, {n_splits} splits)",
            probs.len()
        )));
    }
    let n = probs.len();
    let mut total = 0.0;
    for s in 0..n_splits {
        let part = &probs[s * n / n_splits..(s + 1) * n / n_splits];
        let c = part[0].len();
        let mut marginal = vec![0.0; c];
        for row in part {
            for (m, v) in marginal.iter_mut().zip(row) {
                *m += v;
            }
        }
        marginal.iter_mut().for_each(|m| *m /= part.len() as f64);
        let mean_kl = part.iter().map(|p| kl(p, &marginal)).sum::<f64>() / part.len() as f64;
        // Rounding can push a zero divergence a hair below zero.
        total += mean_kl.max(0.0).exp();
    }
    Ok(total / n_splits as f64)
}

pub const FID_REGULARIZATION: f64 = 1e-6;

/// Mean and unbiased covariance of row vectors.
pub fn moments(x: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = x.len();
    let d = x.first().map_or(0, Vec::len);
    if n < 2 || d == 0 {
        return Err(Error::contract("moments need at least two non-empty samples"));
    }
    let m = DMatrix::from_fn(n, d, |i, j| x[i][j]);
    let mean = DVector::from_fn(d, |j, _| m.column(j).sum() / n as f64);
    let centered = DMatrix::from_fn(n, d, |i, j| m[(i, j)] - mean[j]);
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    Ok((mean, cov))
}

fn eigen(m: DMatrix<f64>, what: &str) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let d = m.nrows();
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!("{what}: non-finite entries in a {d}x{d} matrix")));
    }
    SymmetricEigen::try_new(m, 1e-14, 10_000)
        .ok_or_else(|| Error::Numerical(format!("{what}: eigendecomposition of a {d}x{d} matrix did not converge")))
}

/// Fréchet distance between two Gaussians, with `1e-6 * I` added to both
/// covariances.
pub fn fid_from_moments(mu_a: &DVector<f64>, cov_a: &DMatrix<f64>, mu_b: &DVector<f64>, cov_b: &DMatrix<f64>) -> Result<f64> {
    let d = mu_a.len();
    if mu_b.len() != d || cov_a.shape() != (d, d) || cov_b.shape() != (d, d) {
        return Err(Error::contract("moment dimensions disagree"));
    }
    let reg = DMatrix::<f64>::identity(d, d) * FID_REGULARIZATION;
    let sa = (cov_a + &reg).symmetrize();
    let sb = (cov_b + &reg).symmetrize();
    let ea = eigen(sa.clone(), "covariance square root")?;
    let root = &ea.eigenvectors * DMatrix::from_diagonal(&ea.eigenvalues.map(|l| l.max(0.0).sqrt())) * ea.eigenvectors.transpose();
    let inner = (&root * &sb * &root).symmetrize();
    let trace_sqrt: f64 = eigen(inner, "covariance product")?
        .eigenvalues
        .iter()
        .map(|l| l.max(0.0).sqrt())
        .sum();
    let diff = mu_a - mu_b;
    let value = diff.dot(&diff) + sa.trace() + sb.trace() - 2.0 * trace_sqrt;
    if !value.is_finite() {
        return Err(Error::Numerical("Fréchet distance is not finite".into()));
    }
    Ok(value.max(0.0))
}

pub fn fid(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    let (ma, ca) = moments(a)?;
    let (mb, cb) = moments(b)?;
    fid_from_moments(&ma, &ca, &mb, &cb)
}

trait Symmetrize {
    fn symmetrize(self) -> Self;
}

impl Symmetrize for DMatrix<f64> {
    fn symmetrize(self) -> Self {
        (&self + self.transpose()) * 0.5
    }
}

const DIPD_EPS: f64 = 1e-12;

fn normalized_maps<T: Float>(x: &Tensor<T>) -> Result<Vec<f64>> {
    let (_, _, s) = kshot_tensor::kernels::bcs(x.shape())?;
    let mut out = Vec::with_capacity(x.numel());
    for ch in x.data().chunks(s) {
        let v: Vec<f64> = ch.iter().map(|e| e.to_f64().unwrap()).collect();
        let mean = v.iter().sum::<f64>() / s as f64;
        let var = v.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / s as f64;
        let inv = 1.0 / (var + DIPD_EPS).sqrt();
        out.extend(v.iter().map(|e| (e - mean) * inv));
    }
    Ok(out)
}

/// Per-sample L2 distances between instance-normalised feature maps.
pub fn dipd_per_sample<T: Float>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Vec<f64>> {
    if a.shape() != b.shape() {
        return Err(Error::contract(format!(
            "feature maps differ in shape: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let n = a.shape().first().copied().unwrap_or(0);
    if n == 0 {
        return Ok(Vec::new());
    }
    let (na, nb) = (normalized_maps(a)?, normalized_maps(b)?);
    let per = na.len() / n;
    Ok(na
        .chunks(per)
        .zip(nb.chunks(per))
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt())
        .collect())
}

/// Batch mean of [`dipd_per_sample`].
pub fn dipd<T: Float>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    let d = dipd_per_sample(a, b)?;
    Ok(d.iter().sum::<f64>() / d.len().max(1) as f64)
}
