//! Randomized inequality suites.
//!
//! Each suite draws independent trials from a per-trial ChaCha8 stream, so
//! results do not depend on the execution mode. Floating-point comparisons
//! allow a relative slack of [`ROUNDOFF`] and nothing more.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::fit::softmax_floor;
use crate::garnet::{derive_seed, dirichlet, rng_for, sample_garnet, GarnetSpec};
use crate::mdp::{solve_soft, PolicyTable};
use crate::numeric::{kl_from_logs, logsumexp};
use crate::reward::{canonical_ls_reward, Weighting};

/// Relative slack for comparing two computed sides of an inequality.
pub const ROUNDOFF: f64 = 1e-9;
/// Largest logit perturbation, relative to `λ`, in the quadratic-KL suite.
pub const QUADRATIC_SCALE: f64 = 0.01;
/// Accepted window for `KL / (Var(Δ) / 2λ²)`.
pub const QUADRATIC_WINDOW: (f64, f64) = (0.95, 1.05);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    /// `E_{π1}[(log π1/π2)²] ≤ (log(1/α) + 2) KL(π1 | π2)`.
    LogRatio,
    /// `‖R1 − R2‖_{L²_W(μ)} ≤ λ √(w_max (log(1/α) + 2)) √(E_p KL)`.
    Stability,
    /// `min_a π*(a|s) ≥ 1 / (1 + (|A| − 1) e^{Δ/λ})`.
    Floor,
    /// `KL(π1 | π2) / (Var_{π2}(Δ) / 2λ²) ∈ [0.95, 1.05]` for small `Δ`.
    QuadraticKl,
}

impl Suite {
    pub const ALL: [Suite; 4] = [Suite::LogRatio, Suite::Stability, Suite::Floor, Suite::QuadraticKl];

    pub fn name(self) -> &'static str {
        match self {
            Suite::LogRatio => "log_ratio",
            Suite::Stability => "stability",
            Suite::Floor => "floor",
            Suite::QuadraticKl => "quadratic_kl",
        }
    }

    fn stream(self) -> u64 {
        self as u64 + 1
    }
}

impl std::str::FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown suite {s:?}")))
    }
}

/// Outcome of one suite. `min_ratio`/`max_ratio` track the tested quantity:
/// `lhs / rhs` for the bounds, the KL ratio for the quadratic suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub suite: Suite,
    pub trials: usize,
    pub violations: usize,
    pub min_ratio: f64,
    pub max_ratio: f64,
    pub seed: u64,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.violations == 0
    }
}

struct Trial {
    ratio: f64,
    violated: bool,
}

fn log_uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    rng.random_range(lo.ln()..hi.ln()).exp()
}

/// `(π1, π2)` with `π2 = απ1 + (1 − α)q`, so `π1/π2 ≤ 1/α`.
fn mixed_pair(rng: &mut ChaCha8Rng, m: usize) -> (Vec<f64>, Vec<f64>) {
    let conc = log_uniform(rng, 0.2, 5.0);
    let p1 = dirichlet(m, conc, rng);
    let q = dirichlet(m, conc, rng);
    let alpha = log_uniform(rng, 1e-3, 0.99);
    let p2 = p1.iter().zip(&q).map(|(a, b)| alpha * a + (1.0 - alpha) * b).collect();
    (p1, p2)
}

/// Smallest `α` with `π1/π2 ≤ 1/α` on the support of `π1`.
fn tight_alpha(p1: &[f64], p2: &[f64]) -> f64 {
    p1.iter()
        .zip(p2)
        .filter(|(a, _)| **a > 0.0)
        .map(|(a, b)| b / a)
        .fold(1.0, f64::min)
}

fn logs(p: &[f64]) -> Vec<f64> {
    p.iter().map(|x| x.ln()).collect()
}

fn bound_trial(lhs: f64, rhs: f64) -> Trial {
    let ratio = if rhs > 0.0 { lhs / rhs } else if lhs > 0.0 { f64::INFINITY } else { 0.0 };
    Trial { ratio, violated: !(lhs <= rhs * (1.0 + ROUNDOFF) + f64::MIN_POSITIVE) }
}

fn log_ratio_trial(rng: &mut ChaCha8Rng) -> Result<Trial> {
    let m = rng.random_range(2..=6);
    let (p1, p2) = mixed_pair(rng, m);
    let alpha = tight_alpha(&p1, &p2);
    let (l1, l2) = (logs(&p1), logs(&p2));
    let second: f64 = p1.iter().zip(l1.iter().zip(&l2)).map(|(p, (a, b))| p * (a - b).powi(2)).sum();
    let kl = kl_from_logs(&l1, &l2);
    Ok(bound_trial(second, ((1.0 / alpha).ln() + 2.0) * kl))
}

fn stability_trial(rng: &mut ChaCha8Rng) -> Result<Trial> {
    let n = rng.random_range(2..=6);
    let m = rng.random_range(2..=4);
    let spec = GarnetSpec { n_states: n, n_actions: m, branching: rng.random_range(1..=n), reward_scale: 1.0, seed: 0 };
    let gamma = rng.random_range(0.5..0.95);
    let mdp = sample_garnet(&spec, gamma, rng)?;
    let lambda = log_uniform(rng, 0.05, 5.0);

    let mut pi1 = DMatrix::zeros(n, m);
    let mut pi2 = DMatrix::zeros(n, m);
    for s in 0..n {
        let (a, b) = mixed_pair(rng, m);
        for k in 0..m {
            pi1[(s, k)] = a[k];
            pi2[(s, k)] = b[k];
        }
    }
    let p: Vec<f64> = dirichlet(n, 1.0, rng).iter().map(|x| 0.5 * x + 0.5 / n as f64).collect();
    let w = DMatrix::from_fn(n, m, |_, _| rng.random_range(0.1..2.0));
    let w_max = w.max();
    // ρ ∝ w μ with μ = p π1; the projection does not see the normalization
    let wmu = DMatrix::from_fn(n, m, |s, a| w[(s, a)] * p[s] * pi1[(s, a)]);
    let rho = Weighting::new(&wmu / wmu.sum())?;

    let alpha = (0..n)
        .map(|s| {
            let (a, b): (Vec<f64>, Vec<f64>) = (0..m).map(|k| (pi1[(s, k)], pi2[(s, k)])).unzip();
            tight_alpha(&a, &b)
        })
        .fold(1.0, f64::min);
    let eps: f64 = (0..n)
        .map(|s| {
            let a: Vec<f64> = pi1.row(s).iter().map(|x| x.ln()).collect();
            let b: Vec<f64> = pi2.row(s).iter().map(|x| x.ln()).collect();
            p[s] * kl_from_logs(&a, &b)
        })
        .sum();

    let r1 = canonical_ls_reward(&mdp, &PolicyTable::new(pi1, 0.0)?, lambda, &rho)?;
    let r2 = canonical_ls_reward(&mdp, &PolicyTable::new(pi2, 0.0)?, lambda, &rho)?;
    let diff = r1.reward - r2.reward;
    let lhs = wmu.iter().zip(diff.iter()).map(|(a, d)| a * d * d).sum::<f64>().sqrt();
    let rhs = lambda * (w_max * ((1.0 / alpha).ln() + 2.0)).sqrt() * eps.sqrt();
    Ok(bound_trial(lhs, rhs))
}

fn floor_trial(rng: &mut ChaCha8Rng) -> Result<Trial> {
    let n = rng.random_range(1..=6);
    let m = rng.random_range(2..=5);
    let spec = GarnetSpec {
        n_states: n,
        n_actions: m,
        branching: rng.random_range(1..=n),
        reward_scale: rng.random_range(0.1..3.0),
        seed: 0,
    };
    let gamma = rng.random_range(0.5..0.95);
    let mdp = sample_garnet(&spec, gamma, rng)?;
    let lambda = log_uniform(rng, 0.05, 5.0);
    let sol = solve_soft(&mdp, lambda)?;
    // ratio > 1 means the floor failed: bound / min prob
    let mut worst = 0.0f64;
    let mut violated = false;
    for s in 0..n {
        let row = sol.q_values.row(s);
        let span = row.max() - row.min();
        let bound = softmax_floor(span, lambda, m);
        let min_p = sol.policy.row(s).into_iter().fold(1.0, f64::min);
        worst = worst.max(bound / min_p);
        violated |= !(min_p >= bound * (1.0 - ROUNDOFF));
    }
    Ok(Trial { ratio: worst, violated })
}

fn quadratic_trial(rng: &mut ChaCha8Rng) -> Result<Trial> {
    let m = rng.random_range(2..=6);
    let lambda = log_uniform(rng, 0.05, 5.0);
    let p2 = dirichlet(m, log_uniform(rng, 0.3, 5.0), rng);
    let raw: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mean: f64 = raw.iter().zip(&p2).map(|(d, p)| d * p).sum();
    let centered: Vec<f64> = raw.iter().map(|d| d - mean).collect();
    let sup = centered.iter().fold(0.0f64, |a, d| a.max(d.abs()));
    let scale = rng.random_range(0.05..=1.0) * QUADRATIC_SCALE * lambda / sup;
    let delta: Vec<f64> = centered.iter().map(|d| d * scale).collect();
    let var: f64 = delta.iter().zip(&p2).map(|(d, p)| p * d * d).sum();

    let l2 = logs(&p2);
    let shifted: Vec<f64> = l2.iter().zip(&delta).map(|(l, d)| l + d / lambda).collect();
    let norm = logsumexp(&shifted);
    let l1: Vec<f64> = shifted.iter().map(|x| x - norm).collect();
    let ratio = kl_from_logs(&l1, &l2) / (var / (2.0 * lambda * lambda));
    let (lo, hi) = QUADRATIC_WINDOW;
    Ok(Trial { ratio, violated: !(lo..=hi).contains(&ratio) })
}

/// Run `trials` independent draws of one suite.
pub fn run_suite(suite: Suite, trials: usize, seed: u64, mode: Execution) -> Result<SuiteReport> {
    let base = derive_seed(seed, suite.stream());
    let results = exec::map_range(mode, trials, |t| {
        let mut rng = rng_for(base, t as u64);
        match suite {
            Suite::LogRatio => log_ratio_trial(&mut rng),
            Suite::Stability => stability_trial(&mut rng),
            Suite::Floor => floor_trial(&mut rng),
            Suite::QuadraticKl => quadratic_trial(&mut rng),
        }
    });
    let mut report = SuiteReport {
        suite,
        trials,
        violations: 0,
        min_ratio: f64::INFINITY,
        max_ratio: f64::NEG_INFINITY,
        seed,
    };
    for r in results {
        let r = r?;
        report.violations += usize::from(r.violated);
        report.min_ratio = report.min_ratio.min(r.ratio);
        report.max_ratio = report.max_ratio.max(r.ratio);
    }
    Ok(report)
}

/// All four suites with the same trial count and seed.
pub fn run_all(trials: usize, seed: u64, mode: Execution) -> Result<Vec<SuiteReport>> {
    Suite::ALL.into_iter().map(|s| run_suite(s, trials, seed, mode)).collect()
}

/// Per-state KL between two policies, by rows.
pub fn per_state_kl(p1: &PolicyTable, p2: &PolicyTable) -> Result<DVector<f64>> {
    let a = p1.log_probs()?;
    let b = p2.log_probs()?;
    Ok(DVector::from_fn(p1.n_states(), |s, _| {
        let x: Vec<f64> = a.row(s).iter().copied().collect();
        let y: Vec<f64> = b.row(s).iter().copied().collect();
        kl_from_logs(&x, &y)
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suites_pass_and_modes_agree() {
        for suite in Suite::ALL {
            let a = run_suite(suite, 300, 7, Execution::Sequential).unwrap();
            let b = run_suite(suite, 300, 7, Execution::Parallel).unwrap();
            assert_eq!(a, b);
            assert!(a.passed(), "{a:?}");
        }
    }

    #[test]
    fn quadratic_ratio_is_close_to_one() {
        let r = run_suite(Suite::QuadraticKl, 500, 3, Execution::Parallel).unwrap();
        assert!(r.min_ratio > 0.98 && r.max_ratio < 1.02, "{r:?}");
    }

    #[test]
    fn log_ratio_bound_catches_a_wrong_alpha() {
        // with α overstated the bound must fail for a far-apart pair
        let p1 = [0.98, 0.02];
        let p2 = [0.02, 0.98];
        let (l1, l2) = (logs(&p1), logs(&p2));
        let second: f64 = p1.iter().zip(l1.iter().zip(&l2)).map(|(p, (a, b))| p * (a - b).powi(2)).sum();
        let kl = kl_from_logs(&l1, &l2);
        assert!(bound_trial(second, (1.0f64.ln() + 2.0) * kl).violated);
        let alpha = tight_alpha(&p1, &p2);
        assert!(!bound_trial(second, ((1.0 / alpha).ln() + 2.0) * kl).violated);
    }

    #[test]
    fn suite_names_round_trip() {
        for s in Suite::ALL {
            assert_eq!(s.name().parse::<Suite>().unwrap(), s);
        }
        assert!("nope".parse::<Suite>().is_err());
    }

    #[test]
    fn per_state_kl_is_zero_on_equal_policies() {
        let mut rng = rng_for(1, 2);
        let p = PolicyTable::new(crate::garnet::random_policy_probs(4, 3, 1.0, &mut rng), 0.0).unwrap();
        assert!(per_state_kl(&p, &p).unwrap().amax() == 0.0);
    }
}
