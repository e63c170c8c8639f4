//! Small numerical kernels shared across modules.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// `log Σ exp(x_i)` with max subtraction. Returns `-inf` for an empty slice.
pub fn logsumexp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let sum: f64 = xs.iter().map(|&x| (x - max).exp()).sum();
    max + sum.ln()
}

/// Softmax of `logits / temperature` written into `out`.
pub fn softmax_into(logits: &[f64], temperature: f64, out: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &z) in out.iter_mut().zip(logits) {
        *o = ((z - max) / temperature).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

/// KL(p | q) for two distributions on the same finite set.
///
/// Terms with `p = 0` contribute nothing; `q = 0` where `p > 0` gives `+inf`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    let mut kl = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        if pi > 0.0 {
            if qi <= 0.0 {
                return f64::INFINITY;
            }
            kl += pi * (pi / qi).ln();
        }
    }
    kl.max(0.0)
}

/// KL between two distributions given by their log-probabilities.
///
/// Uses `Σ q (x e^x − expm1(x))` with `x = log p − log q`, which stays
/// accurate when the two are close.
pub fn kl_from_logs(log_p: &[f64], log_q: &[f64]) -> f64 {
    let mut kl = 0.0;
    for (&lp, &lq) in log_p.iter().zip(log_q) {
        if lp == f64::NEG_INFINITY {
            continue;
        }
        if lq == f64::NEG_INFINITY {
            return f64::INFINITY;
        }
        let x = lp - lq;
        kl += lq.exp() * (x * x.exp() - x.exp_m1());
    }
    kl.max(0.0)
}

/// Maximum absolute entry.
pub fn sup_norm<'a>(xs: impl IntoIterator<Item = &'a f64>) -> f64 {
    xs.into_iter().fold(0.0, |m, x| m.max(x.abs()))
}

pub(crate) fn ensure_finite(m: &DMatrix<f64>, what: &str) -> Result<()> {
    if let Some(pos) = m.iter().position(|x| !x.is_finite()) {
        let (r, c) = (pos % m.nrows(), pos / m.nrows());
        return Err(Error::NonFinite(format!("{what}[{r}][{c}] = {}", m[(r, c)])));
    }
    Ok(())
}

/// Row-major nested vectors from a matrix.
pub fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|r| m.row(r).iter().copied().collect()).collect()
}

/// Matrix from row-major nested vectors; all rows must have equal length.
pub fn from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let n = rows.len();
    let m = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != m) {
        return Err(Error::Dimension("ragged rows".into()));
    }
    Ok(DMatrix::from_fn(n, m, |i, j| rows[i][j]))
}

/// 2-norm condition number of a symmetric positive semi-definite matrix.
pub fn spd_condition_number(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 1.0;
    }
    let eig = m.clone().symmetric_eigen();
    let max = eig.eigenvalues.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}
