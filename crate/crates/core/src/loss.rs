//! Training objectives: plain MSE and the heteroskedastic Gaussian NLL.
//!
//! Both are normalized to a mean over every pixel of every batch item. The
//! NLL omits the constant ½·ln(2π) and uses natural logarithms.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;

/// Which objective a model is trained with.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Mse,
    Heteroskedastic,
}

/// Heteroskedastic NLL split into its two summands.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossValue {
    pub total: f64,
    /// Mean of (y − f)² / (2σ²).
    pub residual_term: f64,
    /// Mean of ½·ln σ².
    pub logdet_term: f64,
    pub pixel_count: usize,
}

fn check_batch(a: &[Grid], b: &[Grid], what: &str) -> Result<usize> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!(
            "{what}: batch sizes differ ({} vs {})",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(Error::invalid(format!("{what}: empty batch")));
    }
    let mut n = 0;
    for (x, y) in a.iter().zip(b) {
        x.ensure_same_shape(y)?;
        n += x.len();
    }
    if n == 0 {
        return Err(Error::invalid(format!("{what}: no pixels")));
    }
    Ok(n)
}

/// Mean of (y − f)² over all pixels and batch items.
pub fn mse_loss(prediction: &[Grid], target: &[Grid]) -> Result<f64> {
    let n = check_batch(prediction, target, "mse")?;
    let sum: f64 = prediction
        .iter()
        .zip(target)
        .map(|(p, t)| sq_err_sum(p.as_slice(), t.as_slice()))
        .sum();
    Ok(sum / n as f64)
}

/// Sum of squared differences of two equally long slices.
pub fn sq_err_sum(prediction: &[f64], target: &[f64]) -> f64 {
    prediction
        .iter()
        .zip(target)
        .map(|(f, y)| (y - f) * (y - f))
        .sum()
}

/// Sums of the residual and log-determinant terms over one item.
///
/// Fails with a domain error on any non-positive variance.
pub fn nll_sums(mean: &[f64], variance: &[f64], target: &[f64]) -> Result<(f64, f64)> {
    let mut residual = 0.0;
    let mut logdet = 0.0;
    for ((&f, &v), &y) in mean.iter().zip(variance).zip(target) {
        if !(v > 0.0) {
            return Err(Error::Domain(format!("non-positive variance {v}")));
        }
        let r = y - f;
        residual += r * r / (2.0 * v);
        logdet += 0.5 * v.ln();
    }
    Ok((residual, logdet))
}

/// Mean over pixels and batch of (y − f)²/(2σ²) + ½·ln σ².
pub fn heteroskedastic_nll(mean: &[Grid], variance: &[Grid], target: &[Grid]) -> Result<LossValue> {
    let n = check_batch(mean, target, "nll")?;
    check_batch(variance, target, "nll")?;
    let mut residual = 0.0;
    let mut logdet = 0.0;
    for ((f, v), y) in mean.iter().zip(variance).zip(target) {
        let (r, l) = nll_sums(f.as_slice(), v.as_slice(), y.as_slice())?;
        residual += r;
        logdet += l;
    }
    let residual_term = residual / n as f64;
    let logdet_term = logdet / n as f64;
    Ok(LossValue {
        total: residual_term + logdet_term,
        residual_term,
        logdet_term,
        pixel_count: n,
    })
}

/// Analytic gradients of [`heteroskedastic_nll`]`.total` with respect to
/// the mean and the variance inputs.
pub fn heteroskedastic_nll_gradients(
    mean: &[Grid],
    variance: &[Grid],
    target: &[Grid],
) -> Result<(Vec<Grid>, Vec<Grid>)> {
    let n = check_batch(mean, target, "nll")?;
    check_batch(variance, target, "nll")?;
    let scale = 1.0 / n as f64;
    let mut d_mean = Vec::with_capacity(mean.len());
    let mut d_var = Vec::with_capacity(mean.len());
    for ((f, v), y) in mean.iter().zip(variance).zip(target) {
        let mut gm = Grid::zeros(f.height(), f.width());
        let mut gv = Grid::zeros(f.height(), f.width());
        for (i, ((&fi, &vi), &yi)) in f
            .as_slice()
            .iter()
            .zip(v.as_slice())
            .zip(y.as_slice())
            .enumerate()
        {
            if !(vi > 0.0) {
                return Err(Error::Domain(format!("non-positive variance {vi}")));
            }
            let r = yi - fi;
            gm.as_mut_slice()[i] = -r / vi * scale;
            gv.as_mut_slice()[i] = (0.5 / vi - r * r / (2.0 * vi * vi)) * scale;
        }
        d_mean.push(gm);
        d_var.push(gv);
    }
    Ok((d_mean, d_var))
}

/// Per-pixel variance (y − f)² at which the NLL is stationary in σ².
pub fn optimal_variance_check(mean: &Grid, target: &Grid) -> Result<Grid> {
    target.zip_map(mean, |y, f| (y - f) * (y - f))
}
