//! Error functionals and rate fits for experiment reports.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::reward::Weighting;

/// `√(Σ ρ (R1 − R2)²)`.
pub fn weighted_reward_error(r1: &DMatrix<f64>, r2: &DMatrix<f64>, w: &Weighting) -> Result<f64> {
    if r1.shape() != r2.shape() || r1.shape() != w.rho().shape() {
        return Err(Error::Dimension(format!(
            "rewards {:?} and {:?} with weighting {:?}",
            r1.shape(),
            r2.shape(),
            w.rho().shape()
        )));
    }
    Ok(w.norm(&(r1 - r2)))
}

/// `max_s (max_a q(s, a) − min_a q(s, a))`.
pub fn q_span(q: &DMatrix<f64>) -> f64 {
    q.row_iter().map(|row| row.max() - row.min()).fold(0.0, f64::max)
}

/// Aggregate of one sample size across seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateRow {
    pub n: usize,
    pub mean: f64,
    pub std: f64,
    pub median: f64,
    pub count: usize,
}

/// Least-squares fit of `log mean-error` against `log N`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub per_n: Vec<RateRow>,
}

fn summarize(n: usize, values: &mut [f64]) -> RateRow {
    values.sort_by(f64::total_cmp);
    let count = values.len();
    let mean = values.iter().sum::<f64>() / count as f64;
    let std = if count > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (count - 1) as f64).sqrt()
    } else {
        0.0
    };
    let median = if count % 2 == 1 {
        values[count / 2]
    } else {
        0.5 * (values[count / 2 - 1] + values[count / 2])
    };
    RateRow { n, mean, std, median, count }
}

/// Group `(N, error)` observations by `N` and regress `ln mean` on `ln N`.
pub fn fit_rate(errors: &[(usize, f64)]) -> Result<RateFit> {
    let mut groups: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for &(n, e) in errors {
        if !(e > 0.0) || !e.is_finite() {
            return Err(Error::InvalidArgument(format!("error {e} at N = {n} is not a positive finite number")));
        }
        if n == 0 {
            return Err(Error::InvalidArgument("sample size 0".into()));
        }
        groups.entry(n).or_default().push(e);
    }
    if groups.len() < 3 {
        return Err(Error::InvalidArgument(format!("need at least 3 distinct N, got {}", groups.len())));
    }
    let per_n: Vec<RateRow> = groups.into_iter().map(|(n, mut v)| summarize(n, &mut v)).collect();
    let xs: Vec<f64> = per_n.iter().map(|r| (r.n as f64).ln()).collect();
    let ys: Vec<f64> = per_n.iter().map(|r| r.mean.ln()).collect();
    let k = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / k;
    let my = ys.iter().sum::<f64>() / k;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = xs.iter().zip(&ys).map(|(x, y)| (y - intercept - slope * x).powi(2)).sum();
    let r_squared = if syy > 0.0 { (1.0 - sse / syy).clamp(0.0, 1.0) } else { 1.0 };
    Ok(RateFit { slope, intercept, r_squared, per_n })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn weighting(raw: &[f64], n: usize, m: usize) -> Weighting {
        let total: f64 = raw.iter().sum();
        Weighting::new(DMatrix::from_row_slice(n, m, raw) / total).unwrap()
    }

    #[test]
    fn weighted_error_examples() {
        let w = weighting(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], 3, 2);
        let r = DMatrix::from_row_slice(3, 2, &[0.1, 0.2, -0.3, 0.4, 0.5, -0.6]);
        assert_eq!(weighted_reward_error(&r, &r, &w).unwrap(), 0.0);
        let shifted = r.add_scalar(-0.7);
        assert!((weighted_reward_error(&r, &shifted, &w).unwrap() - 0.7).abs() < 1e-12);
        let other = DMatrix::from_row_slice(3, 2, &[1.0, -1.0, 2.0, 0.0, 0.3, 0.3]);
        let mut acc = 0.0;
        for s in 0..3 {
            for a in 0..2 {
                acc += w.rho()[(s, a)] * (r[(s, a)] - other[(s, a)]).powi(2);
            }
        }
        assert!((weighted_reward_error(&r, &other, &w).unwrap() - acc.sqrt()).abs() <= 1e-12);
        assert!(weighted_reward_error(&r, &DMatrix::zeros(2, 3), &w).is_err());
    }

    #[test]
    fn span_examples() {
        assert_eq!(q_span(&DMatrix::from_element(3, 4, 2.5)), 0.0);
        assert_eq!(q_span(&DMatrix::from_row_slice(1, 2, &[1.0, 3.0])), 2.0);
        let q = DMatrix::from_row_slice(3, 3, &[0.0, 5.0, -1.0, 2.0, 2.5, 2.0, -4.0, 1.0, 0.0]);
        let mut best: f64 = 0.0;
        for s in 0..3 {
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for a in 0..3 {
                lo = lo.min(q[(s, a)]);
                hi = hi.max(q[(s, a)]);
            }
            best = best.max(hi - lo);
        }
        assert_eq!(q_span(&q), best);
    }

    #[test]
    fn rate_recovers_power_laws() {
        let ns = [1_000usize, 10_000, 100_000, 1_000_000];
        let inv: Vec<(usize, f64)> = ns.iter().map(|&n| (n, 3.0 / n as f64)).collect();
        let fit = fit_rate(&inv).unwrap();
        assert!((fit.slope + 1.0).abs() <= 1e-10);
        assert!((fit.r_squared - 1.0).abs() <= 1e-12);
        let sqrt: Vec<(usize, f64)> = ns.iter().map(|&n| (n, 0.5 / (n as f64).sqrt())).collect();
        assert!((fit_rate(&sqrt).unwrap().slope + 0.5).abs() <= 1e-10);
    }

    #[test]
    fn rate_table_aggregates_per_n() {
        let data = [(10, 1.0), (10, 3.0), (100, 0.5), (1000, 0.1), (100, 0.7), (10, 2.0)];
        let fit = fit_rate(&data).unwrap();
        let ns: Vec<usize> = fit.per_n.iter().map(|r| r.n).collect();
        assert_eq!(ns, vec![10, 100, 1000]);
        let first = &fit.per_n[0];
        assert_eq!((first.mean, first.median, first.count), (2.0, 2.0, 3));
        assert!((first.std - 1.0).abs() < 1e-15);
        assert!((0.0..=1.0).contains(&fit.r_squared));
    }

    #[test]
    fn rate_rejects_bad_input() {
        assert!(fit_rate(&[(10, 1.0), (100, 0.0), (1000, 0.1)]).is_err());
        assert!(fit_rate(&[(10, 1.0), (100, -1.0), (1000, 0.1)]).is_err());
        assert!(fit_rate(&[(10, 1.0), (100, 0.5)]).is_err());
    }

    proptest! {
        #[test]
        fn weighted_error_is_a_norm(
            raw in prop::collection::vec(0.01f64..1.0, 6),
            a in prop::collection::vec(-5.0f64..5.0, 6),
            b in prop::collection::vec(-5.0f64..5.0, 6),
            c in prop::collection::vec(-5.0f64..5.0, 6),
        ) {
            let w = weighting(&raw, 2, 3);
            let (a, b, c) = (
                DMatrix::from_row_slice(2, 3, &a),
                DMatrix::from_row_slice(2, 3, &b),
                DMatrix::from_row_slice(2, 3, &c),
            );
            let ab = weighted_reward_error(&a, &b, &w).unwrap();
            let bc = weighted_reward_error(&b, &c, &w).unwrap();
            let ac = weighted_reward_error(&a, &c, &w).unwrap();
            prop_assert!(ab >= 0.0);
            prop_assert!(ac <= ab + bc + 1e-10);
            prop_assert_eq!(weighted_reward_error(&a, &a, &w).unwrap(), 0.0);
            prop_assert!((ab - weighted_reward_error(&b, &a, &w).unwrap()).abs() <= 1e-15);
            if a != b {
                prop_assert!(ab > 0.0);
            }
        }
    }
}
