//! Distribution-matching and alignment metrics over embedding sets.
//!
//! All arithmetic is f64. Covariances use the unbiased estimator.

mod report;

pub use report::*;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Eigenvalues down to `-EIG_TOL * max(1, largest)` are treated as zero.
pub const EIG_TOL: f64 = 1e-8;

fn check_finite(m: &DMatrix<f64>, what: &str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{what} contains a non-finite value")))
    }
}

/// Column means and unbiased covariance of the rows of `x`.
pub fn mean_and_covariance(x: &DMatrix<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = x.nrows();
    if n < 2 {
        return Err(Error::InvalidArgument(format!("covariance needs at least 2 rows, got {n}")));
    }
    let mean = x.row_mean().transpose();
    let mut centred = x.clone();
    for mut row in centred.row_iter_mut() {
        row -= mean.transpose();
    }
    let cov = centred.transpose() * &centred / (n - 1) as f64;
    Ok((mean, cov))
}

/// Eigenvalues of a symmetric matrix with tiny negatives clamped to zero.
fn psd_eigen(m: DMatrix<f64>, what: &str) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let sym = (&m + m.transpose()) * 0.5;
    let mut eig = SymmetricEigen::new(sym);
    let top = eig.eigenvalues.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    for v in eig.eigenvalues.iter_mut() {
        if *v < -EIG_TOL * top {
            return Err(Error::InvalidArgument(format!("{what} is not positive semi-definite: eigenvalue {v:e}")));
        }
        *v = v.max(0.0);
    }
    Ok(eig)
}

fn sqrtm_psd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = psd_eigen(m.clone(), "covariance")?;
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(f64::sqrt));
    Ok(&eig.eigenvectors * d * eig.eigenvectors.transpose())
}

/// `Tr((S_a S_b)^{1/2})` computed as the trace of the root of `S_a^{1/2} S_b S_a^{1/2}`.
fn trace_sqrt_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    let ra = sqrtm_psd(a)?;
    let inner = &ra * b * &ra;
    let eig = psd_eigen(inner, "covariance product")?;
    Ok(eig.eigenvalues.iter().map(|v| v.sqrt()).sum())
}

/// Fréchet distance between Gaussians fitted to the rows of `a` and `b`.
///
/// The cross term is averaged over both orderings so swapping the inputs
/// gives a bit-identical result.
pub fn frechet_distance(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    if a.ncols() != b.ncols() {
        return Err(Error::shape("frechet_distance", &[a.nrows(), a.ncols()], &[b.nrows(), b.ncols()]));
    }
    check_finite(a, "first embedding set")?;
    check_finite(b, "second embedding set")?;
    let (ma, ca) = mean_and_covariance(a)?;
    let (mb, cb) = mean_and_covariance(b)?;
    let mean_term: f64 = ma.iter().zip(mb.iter()).map(|(x, y)| (x - y) * (x - y)).sum();
    let cross = 0.5 * (trace_sqrt_product(&ca, &cb)? + trace_sqrt_product(&cb, &ca)?);
    let fd = mean_term + (ca.trace() + cb.trace()) - 2.0 * cross;
    Ok(fd.max(0.0))
}

/// Row-wise log-softmax. `-inf` logits give zero probability.
fn log_softmax_row(row: &[f64]) -> Result<Vec<f64>> {
    if row.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
        return Err(Error::NonFinite("logits".into()));
    }
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return Err(Error::InvalidArgument("logit row has no finite entry".into()));
    }
    let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    Ok(row.iter().map(|v| v - lse).collect())
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// `KL(p || q)` between two log-probability vectors; zero-probability terms of `p` vanish.
fn kl_logp(lp: &[f64], lq: &[f64]) -> f64 {
    lp.iter()
        .zip(lq)
        .filter(|(p, _)| **p > f64::NEG_INFINITY)
        .map(|(p, q)| p.exp() * (p - q))
        .sum()
}

/// Mean over paired rows of `KL(softmax(p_i) || softmax(q_i))`.
pub fn kl_divergence(p_logits: &DMatrix<f64>, q_logits: &DMatrix<f64>) -> Result<f64> {
    if p_logits.shape() != q_logits.shape() {
        return Err(Error::InvalidArgument(format!(
            "unpaired logits: {:?} vs {:?}",
            p_logits.shape(),
            q_logits.shape()
        )));
    }
    let n = p_logits.nrows();
    if n == 0 {
        return Err(Error::Empty("logits"));
    }
    let mut total = 0.0;
    for (p, q) in rows(p_logits).iter().zip(rows(q_logits).iter()) {
        total += kl_logp(&log_softmax_row(p)?, &log_softmax_row(q)?).max(0.0);
    }
    Ok(total / n as f64)
}

/// `exp(mean_i KL(p(y|x_i) || p(y)))` with `p(y)` the mean of the row distributions.
pub fn inception_score(logits: &DMatrix<f64>) -> Result<f64> {
    let n = logits.nrows();
    if n < 2 {
        return Err(Error::InvalidArgument(format!("inception score needs at least 2 rows, got {n}")));
    }
    let c = logits.ncols();
    let logp: Vec<Vec<f64>> = rows(logits).iter().map(|r| log_softmax_row(r)).collect::<Result<_>>()?;
    // Marginal as a mean of offsets from the first row, so rows equal to it contribute exactly zero.
    let base: Vec<f64> = logp[0].iter().map(|v| v.exp()).collect();
    let mut offset = vec![0.0f64; c];
    for r in &logp[1..] {
        for ((o, v), b) in offset.iter_mut().zip(r).zip(&base) {
            *o += v.exp() - b;
        }
    }
    let log_marginal: Vec<f64> = (0..c)
        .map(|k| {
            let shift = offset[k] / n as f64;
            if base[k] > 0.0 {
                logp[0][k] + (shift / base[k]).ln_1p()
            } else {
                shift.ln()
            }
        })
        .collect();
    let mean_kl = logp.iter().map(|r| kl_logp(r, &log_marginal)).sum::<f64>() / n as f64;
    Ok(mean_kl.max(0.0).exp().clamp(1.0, c as f64))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CosineAlignment {
    pub mean: f64,
    /// Pairs where either row has zero norm; each contributes 0 to the mean.
    pub zero_rows: Vec<usize>,
}

/// Mean cosine similarity between paired rows.
pub fn cosine_alignment(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<CosineAlignment> {
    if a.shape() != b.shape() {
        return Err(Error::InvalidArgument(format!("unpaired rows: {:?} vs {:?}", a.shape(), b.shape())));
    }
    if a.nrows() == 0 {
        return Err(Error::Empty("embedding rows"));
    }
    check_finite(a, "first embedding set")?;
    check_finite(b, "second embedding set")?;
    let mut total = 0.0;
    let mut zero_rows = Vec::new();
    for (i, (ra, rb)) in a.row_iter().zip(b.row_iter()).enumerate() {
        let (na, nb) = (ra.norm(), rb.norm());
        if na == 0.0 || nb == 0.0 {
            zero_rows.push(i);
            continue;
        }
        total += (ra.dot(&rb) / (na * nb)).clamp(-1.0, 1.0);
    }
    Ok(CosineAlignment { mean: total / a.nrows() as f64, zero_rows })
}
