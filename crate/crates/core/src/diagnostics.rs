//! Gaussian summaries of feature populations and the distances between them.
//!
//! A feature map `[N, C, H, W]` is treated as `N·H·W` samples of a
//! `C`-dimensional vector.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Ridge added to a covariance that is not safely positive definite.
pub const COV_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianFit {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianFit {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        if cov.nrows() != mean.len() || cov.ncols() != mean.len() {
            return Err(Error::Statistics(format!(
                "covariance {}x{} does not match mean of length {}",
                cov.nrows(),
                cov.ncols(),
                mean.len()
            )));
        }
        Ok(GaussianFit { mean, cov })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Per-channel mean and sample covariance (divisor `n − 1`).
pub fn fit_gaussian(features: &Tensor) -> Result<GaussianFit> {
    let [n, c, h, w] = features.dims4("fit_gaussian")?;
    let samples = n * h * w;
    if samples < 2 {
        return Err(Error::Statistics(format!(
            "need at least 2 samples, got {samples}"
        )));
    }
    let plane = h * w;
    let x = DMatrix::from_fn(samples, c, |s, ch| {
        let (b, p) = (s / plane, s % plane);
        features.data()[(b * c + ch) * plane + p]
    });
    let mean = DVector::from_fn(c, |ch, _| x.column(ch).sum() / samples as f64);
    let mut centered = x;
    for (ch, mut col) in centered.column_iter_mut().enumerate() {
        col.add_scalar_mut(-mean[ch]);
    }
    let cov = centered.transpose() * &centered / (samples - 1) as f64;
    let cov = (&cov + cov.transpose()) * 0.5;
    GaussianFit::new(mean, cov)
}

fn check_dims(p: &GaussianFit, q: &GaussianFit) -> Result<()> {
    if p.dim() != q.dim() {
        return Err(Error::Statistics(format!(
            "dimension mismatch: {} vs {}",
            p.dim(),
            q.dim()
        )));
    }
    Ok(())
}

/// Cholesky factor of `cov`, adding `COV_EPS·I` only when `cov` has a pivot
/// below `COV_EPS` (singular or numerically rank-deficient).
fn factor(cov: &DMatrix<f64>, which: &str) -> Result<(DMatrix<f64>, Cholesky<f64, Dyn>)> {
    if let Some(l) = cov.clone().cholesky() {
        if l.l().diagonal().iter().all(|d| d * d >= COV_EPS) {
            return Ok((cov.clone(), l));
        }
    }
    let reg = cov + DMatrix::<f64>::identity(cov.nrows(), cov.ncols()) * COV_EPS;
    let l = reg.clone().cholesky().ok_or_else(|| {
        Error::Numeric(format!(
            "{which} covariance is singular after regularization"
        ))
    })?;
    Ok((reg, l))
}

fn log_det(l: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * l.l().diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

/// `KL(p ‖ q)` between two Gaussians.
pub fn kl_gaussian(p: &GaussianFit, q: &GaussianFit) -> Result<f64> {
    check_dims(p, q)?;
    let (sp, lp) = factor(&p.cov, "first")?;
    let (_, lq) = factor(&q.cov, "second")?;
    let trace = lq.solve(&sp).trace();
    let diff = &q.mean - &p.mean;
    let maha = diff.dot(&lq.solve(&diff));
    Ok(0.5 * (trace + maha - p.dim() as f64 + log_det(&lq) - log_det(&lp)))
}

/// `‖μ_p − μ_q‖²`.
pub fn mean_gap(p: &GaussianFit, q: &GaussianFit) -> Result<f64> {
    check_dims(p, q)?;
    Ok((&p.mean - &q.mean).norm_squared())
}

/// `tr(Σ_p Σ_qᵀ)`.
pub fn trace_orth(p: &GaussianFit, q: &GaussianFit) -> Result<f64> {
    check_dims(p, q)?;
    Ok((&p.cov * q.cov.transpose()).trace())
}

/// Diagnostics for one pyramid level.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LevelReport {
    pub level: usize,
    /// Mean gap of the IR and RGB low-frequency bands.
    pub mean_gap: f64,
    pub kl_low: f64,
    pub kl_high: f64,
    pub trace_orth_high: f64,
}

/// Compares the IR and RGB low and high bands of one level.
pub fn level_report(
    level: usize,
    low_ir: &Tensor,
    low_rgb: &Tensor,
    high_ir: &Tensor,
    high_rgb: &Tensor,
) -> Result<LevelReport> {
    let (li, lr) = (fit_gaussian(low_ir)?, fit_gaussian(low_rgb)?);
    let (hi, hr) = (fit_gaussian(high_ir)?, fit_gaussian(high_rgb)?);
    Ok(LevelReport {
        level,
        mean_gap: mean_gap(&li, &lr)?,
        kl_low: kl_gaussian(&li, &lr)?,
        kl_high: kl_gaussian(&hi, &hr)?,
        trace_orth_high: trace_orth(&hi, &hr)?,
    })
}
