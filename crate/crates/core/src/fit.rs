//! Behavior cloning: penalized maximum-likelihood estimation of the expert
//! policy over floor-constrained tabular and linear-softmax classes.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::chain::Trajectory;
use crate::error::{Error, Result};
use crate::mdp::PolicyTable;
use crate::numeric::{kl_divergence, logsumexp, softmax_into};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    #[default]
    ClosedFormTabular,
    GradientDescent,
}

/// Estimator configuration. `floor = None` means the default `1/(10|A|)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub floor: Option<f64>,
    /// Laplace pseudo-count added to every `(s, a)` of a visited state.
    pub smoothing: f64,
    /// Coefficient of `‖θ‖²` for the linear class.
    pub ridge_weight: f64,
    pub optimizer: Optimizer,
    pub gd_step: f64,
    pub gd_iters: usize,
    pub gd_tol: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            floor: None,
            smoothing: 0.5,
            ridge_weight: 0.0,
            optimizer: Optimizer::ClosedFormTabular,
            gd_step: 1.0,
            gd_iters: 50_000,
            gd_tol: 1e-8,
        }
    }
}

impl FitConfig {
    pub fn default_floor(n_actions: usize) -> f64 {
        1.0 / (10.0 * n_actions as f64)
    }

    pub fn resolved_floor(&self, n_actions: usize) -> f64 {
        self.floor.unwrap_or_else(|| Self::default_floor(n_actions))
    }

    /// Same config with the floor made explicit.
    pub fn resolved(&self, n_actions: usize) -> Self {
        Self { floor: Some(self.resolved_floor(n_actions)), ..self.clone() }
    }

    pub fn validate(&self, n_actions: usize) -> Result<()> {
        let floor = self.resolved_floor(n_actions);
        if !(floor >= 0.0) || floor * n_actions as f64 >= 1.0 {
            return Err(Error::InvalidArgument(format!("floor {floor} must lie in [0, 1/{n_actions})")));
        }
        let controls = [self.smoothing, self.ridge_weight, self.gd_step, self.gd_tol];
        if controls.iter().any(|x| !(*x >= 0.0) || !x.is_finite()) {
            return Err(Error::InvalidArgument("fit controls must be finite and nonnegative".into()));
        }
        Ok(())
    }
}

/// Features `φ(s, a) ∈ R^p`, stored flat as `[(s * n_actions + a) * p + k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    n_states: usize,
    n_actions: usize,
    dim: usize,
    features: Vec<f64>,
}

impl FeatureMap {
    pub fn new(n_states: usize, n_actions: usize, dim: usize, features: Vec<f64>) -> Result<Self> {
        if features.len() != n_states * n_actions * dim {
            return Err(Error::Dimension(format!(
                "{} feature entries for {n_states}x{n_actions}x{dim}",
                features.len()
            )));
        }
        if features.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("feature map".into()));
        }
        Ok(Self { n_states, n_actions, dim, features })
    }

    /// Indicator features, one coordinate per `(s, a)`: the unrestricted
    /// tabular softmax class.
    pub fn one_hot(n_states: usize, n_actions: usize) -> Self {
        let p = n_states * n_actions;
        let mut features = vec![0.0; p * p];
        for k in 0..p {
            features[k * p + k] = 1.0;
        }
        Self { n_states, n_actions, dim: p, features }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn get(&self, s: usize, a: usize) -> &[f64] {
        let start = (s * self.n_actions + a) * self.dim;
        &self.features[start..start + self.dim]
    }

    /// Logits `z(s, a) = φ(s, a)ᵀθ`.
    pub fn logits(&self, theta: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(self.n_states, self.n_actions, |s, a| {
            self.get(s, a).iter().zip(theta.iter()).map(|(x, t)| x * t).sum()
        })
    }
}

/// Mean negative log-likelihood `(1/N) Σ −log π(A_t|S_t)`.
///
/// A visited pair with zero probability gives `+inf`.
pub fn empirical_nll(policy: &PolicyTable, traj: &Trajectory) -> Result<f64> {
    traj.check_bounds(policy.n_states(), policy.n_actions())?;
    let mut total = 0.0;
    for (s, a) in traj.pairs() {
        let p = policy.prob(s, a);
        if p <= 0.0 {
            return Ok(f64::INFINITY);
        }
        total -= p.ln();
    }
    Ok(total / traj.len() as f64)
}

/// Maximizer of `Σ_a c_a log π_a` over the simplex with `π_a ≥ floor`.
///
/// The KKT conditions give `π_a = max(floor, c_a / ν)`. The set of actions
/// held at the floor only grows as `ν` is re-solved, so a few passes reach
/// the exact active set. Returns the row and whether the floor binds.
pub fn water_fill(weights: &[f64], floor: f64) -> (Vec<f64>, bool) {
    let m = weights.len();
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return (vec![1.0 / m as f64; m], false);
    }
    let mut clamped = vec![false; m];
    let mut n_clamped = 0usize;
    let nu = loop {
        let free: f64 = weights.iter().zip(&clamped).filter(|(_, &c)| !c).map(|(w, _)| w).sum();
        let nu = free / (1.0 - n_clamped as f64 * floor);
        let mut changed = false;
        for a in 0..m {
            if !clamped[a] && weights[a] < floor * nu {
                clamped[a] = true;
                n_clamped += 1;
                changed = true;
            }
        }
        if !changed {
            break nu;
        }
    };
    let row = (0..m).map(|a| if clamped[a] { floor } else { weights[a] / nu }).collect();
    (row, n_clamped > 0)
}

#[derive(Debug, Clone)]
pub struct TabularFit {
    pub policy: PolicyTable,
    /// Per state: the floor constraint is active in the fitted row.
    pub floor_active: Vec<bool>,
    /// States never visited by the trajectory; they receive the uniform row.
    pub unvisited: Vec<usize>,
}

/// Closed-form floor-constrained tabular MLE with Laplace smoothing.
pub fn fit_tabular(traj: &Trajectory, cfg: &FitConfig, n_states: usize, n_actions: usize) -> Result<PolicyTable> {
    Ok(fit_tabular_detailed(traj, cfg, n_states, n_actions)?.policy)
}

pub fn fit_tabular_detailed(traj: &Trajectory, cfg: &FitConfig, n_states: usize, n_actions: usize) -> Result<TabularFit> {
    cfg.validate(n_actions)?;
    let floor = cfg.resolved_floor(n_actions);
    let counts = traj.counts(n_states, n_actions)?;
    let mut probs = DMatrix::zeros(n_states, n_actions);
    let mut floor_active = vec![false; n_states];
    let mut unvisited = Vec::new();
    for s in 0..n_states {
        let visits = counts.row(s).sum();
        let (row, active) = if visits == 0.0 {
            unvisited.push(s);
            (vec![1.0 / n_actions as f64; n_actions], false)
        } else {
            let weights: Vec<f64> = counts.row(s).iter().map(|c| c + cfg.smoothing).collect();
            water_fill(&weights, floor)
        };
        floor_active[s] = active;
        for (a, p) in row.into_iter().enumerate() {
            probs[(s, a)] = p;
        }
    }
    Ok(TabularFit { policy: PolicyTable::new(probs, floor)?, floor_active, unvisited })
}

/// Statewise center-and-clamp: each row of `q` is shifted to mean zero and
/// clipped to `[-bound, bound]`.
pub fn center_and_clamp(q: &DMatrix<f64>, bound: f64) -> Result<DMatrix<f64>> {
    if !(bound >= 0.0) {
        return Err(Error::InvalidArgument(format!("clamp bound must be nonnegative, got {bound}")));
    }
    let mut out = q.clone();
    for mut row in out.row_iter_mut() {
        let mean = row.mean();
        row.apply(|x| *x = (*x - mean).clamp(-bound, bound));
    }
    Ok(out)
}

/// `1 / (1 + (|A| − 1) e^{span/λ})`: the smallest probability a Gibbs policy
/// can assign when the per-state logit span is at most `span`.
pub fn softmax_floor(span: f64, lambda: f64, n_actions: usize) -> f64 {
    1.0 / (1.0 + (n_actions as f64 - 1.0) * (span / lambda).exp())
}

/// Clamp bound `B` whose center-and-clamp guarantees probability `≥ floor`
/// under softmax at temperature `lambda`.
pub fn clamp_bound_for_floor(floor: f64, lambda: f64, n_actions: usize) -> f64 {
    if n_actions < 2 || floor <= 0.0 {
        return f64::INFINITY;
    }
    0.5 * lambda * ((1.0 / floor - 1.0) / (n_actions as f64 - 1.0)).ln()
}

#[derive(Debug, Clone)]
pub struct LinearFit {
    pub policy: PolicyTable,
    pub weights: DVector<f64>,
    /// Penalized objective at the returned weights.
    pub objective: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

struct LinearObjective<'a> {
    features: &'a FeatureMap,
    counts: DMatrix<f64>,
    n: f64,
    ridge: f64,
}

impl LinearObjective<'_> {
    fn value(&self, theta: &DVector<f64>) -> f64 {
        let z = self.features.logits(theta);
        let mut nll = 0.0;
        let mut row = vec![0.0; z.ncols()];
        for s in 0..z.nrows() {
            let visits = self.counts.row(s).sum();
            if visits == 0.0 {
                continue;
            }
            row.iter_mut().enumerate().for_each(|(a, r)| *r = z[(s, a)]);
            let lse = logsumexp(&row);
            for a in 0..z.ncols() {
                nll += self.counts[(s, a)] * (lse - z[(s, a)]);
            }
        }
        nll / self.n + self.ridge * theta.norm_squared()
    }

    fn gradient(&self, theta: &DVector<f64>) -> DVector<f64> {
        let z = self.features.logits(theta);
        let (ns, na) = z.shape();
        let mut grad = theta * (2.0 * self.ridge);
        let mut logits = vec![0.0; na];
        let mut pi = vec![0.0; na];
        for s in 0..ns {
            let visits = self.counts.row(s).sum();
            if visits == 0.0 {
                continue;
            }
            logits.iter_mut().enumerate().for_each(|(a, l)| *l = z[(s, a)]);
            softmax_into(&logits, 1.0, &mut pi);
            for a in 0..na {
                let w = (visits * pi[a] - self.counts[(s, a)]) / self.n;
                for (g, x) in grad.iter_mut().zip(self.features.get(s, a)) {
                    *g += w * x;
                }
            }
        }
        grad
    }
}

/// Ridge-penalized linear-softmax MLE: minimizes
/// `L̂_N(softmax(φθ)) + ridge_weight ‖θ‖²` by gradient descent with step
/// halving whenever a step would increase the objective.
///
/// With `floor > 0`, the fitted logits go through [`center_and_clamp`] so the
/// returned policy honors the floor.
pub fn fit_linear_softmax(traj: &Trajectory, features: &FeatureMap, cfg: &FitConfig) -> Result<LinearFit> {
    let na = features.n_actions();
    cfg.validate(na)?;
    let floor = cfg.resolved_floor(na);
    let objective = LinearObjective {
        features,
        counts: traj.counts(features.n_states(), na)?,
        n: traj.len() as f64,
        ridge: cfg.ridge_weight,
    };
    let mut theta = DVector::zeros(features.dim());
    let mut value = objective.value(&theta);
    let mut step = cfg.gd_step;
    let mut grad = objective.gradient(&theta);
    let mut iterations = 0;
    let mut converged = false;
    while iterations < cfg.gd_iters {
        let gnorm = grad.norm();
        if !gnorm.is_finite() {
            return Err(Error::NonFinite("gradient of the linear-softmax objective".into()));
        }
        if gnorm <= cfg.gd_tol {
            converged = true;
            break;
        }
        loop {
            let candidate = &theta - &grad * step;
            let cand_value = objective.value(&candidate);
            if cand_value <= value {
                theta = candidate;
                value = cand_value;
                break;
            }
            step *= 0.5;
            if step < 1e-300 {
                return Err(Error::Optimizer("step size collapsed; objective keeps increasing".into()));
            }
        }
        grad = objective.gradient(&theta);
        iterations += 1;
    }
    let grad_norm = grad.norm();
    converged |= grad_norm <= cfg.gd_tol;

    let mut logits = features.logits(&theta);
    if floor > 0.0 && na > 1 {
        logits = center_and_clamp(&logits, clamp_bound_for_floor(floor, 1.0, na))?;
    }
    let mut probs = DMatrix::zeros(features.n_states(), na);
    let mut row = vec![0.0; na];
    for s in 0..features.n_states() {
        let z: Vec<f64> = logits.row(s).iter().copied().collect();
        softmax_into(&z, 1.0, &mut row);
        for a in 0..na {
            probs[(s, a)] = row[a].max(floor);
        }
        let total = probs.row(s).sum();
        probs.row_mut(s).apply(|x| *x /= total);
    }
    Ok(LinearFit {
        policy: PolicyTable::new(probs, floor)?,
        weights: theta,
        objective: value,
        grad_norm,
        iterations,
        converged,
    })
}

/// `Σ_s d(s) KL(π*(·|s) | π̂(·|s))`; `+inf` when the estimate misses support
/// of the expert on a state with positive weight.
pub fn excess_kl(estimate: &PolicyTable, expert: &PolicyTable, d: &DVector<f64>) -> Result<f64> {
    if estimate.probs().shape() != expert.probs().shape() || d.len() != expert.n_states() {
        return Err(Error::Dimension("estimate, expert and state weights disagree".into()));
    }
    let mut total = 0.0;
    for s in 0..expert.n_states() {
        if d[s] == 0.0 {
            continue;
        }
        total += d[s] * kl_divergence(&expert.row(s), &estimate.row(s));
    }
    Ok(total)
}

/// Metadata attached to a fitted policy on disk.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitMeta {
    pub nll: f64,
    pub config: FitConfig,
}

/// JSON layout `{probs, floor, fit_meta: {nll, config}}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FittedPolicy {
    #[serde(flatten)]
    pub policy: PolicyTable,
    pub fit_meta: FitMeta,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::sample_chain;
    use crate::garnet::{sample_garnet, GarnetSpec};
    use crate::mdp::{gibbs_policy, TabularMdp};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn traj_from_counts(rows: &[&[usize]]) -> Trajectory {
        let (mut states, mut actions) = (vec![], vec![]);
        for (s, counts) in rows.iter().enumerate() {
            for (a, &c) in counts.iter().enumerate() {
                states.extend(std::iter::repeat_n(s, c));
                actions.extend(std::iter::repeat_n(a, c));
            }
        }
        Trajectory::new(states, actions, 0, 0, String::new()).unwrap()
    }

    fn cfg(floor: f64, smoothing: f64) -> FitConfig {
        FitConfig { floor: Some(floor), smoothing, ..FitConfig::default() }
    }

    fn log_lik(counts: &[f64], row: &[f64]) -> f64 {
        counts.iter().zip(row).map(|(c, p)| if *c > 0.0 { c * p.ln() } else { 0.0 }).sum()
    }

    /// Zooming grid search over `{π ≥ floor}` on the 2-simplex.
    fn grid_oracle(counts: &[f64; 3], floor: f64) -> [f64; 3] {
        let mut center = [1.0 / 3.0; 3];
        let mut width = 1.0;
        for _ in 0..12 {
            let mut best = (f64::NEG_INFINITY, center);
            let steps = 200;
            for i in 0..=steps {
                for j in 0..=steps {
                    let p0 = center[0] - width / 2.0 + width * i as f64 / steps as f64;
                    let p1 = center[1] - width / 2.0 + width * j as f64 / steps as f64;
                    let p2 = 1.0 - p0 - p1;
                    if p0 < floor || p1 < floor || p2 < floor {
                        continue;
                    }
                    let ll = log_lik(counts, &[p0, p1, p2]);
                    if ll > best.0 {
                        best = (ll, [p0, p1, p2]);
                    }
                }
            }
            center = best.1;
            width /= 8.0;
        }
        center
    }

    #[test]
    fn tabular_examples() {
        let p = fit_tabular(&traj_from_counts(&[&[10, 10]]), &cfg(0.1, 0.0), 1, 2).unwrap();
        assert_eq!(p.row(0), vec![0.5, 0.5]);
        let p = fit_tabular(&traj_from_counts(&[&[100, 0]]), &cfg(0.1, 0.0), 1, 2).unwrap();
        assert!((p.prob(0, 0) - 0.9).abs() < 1e-15 && (p.prob(0, 1) - 0.1).abs() < 1e-15);
        let p = fit_tabular(&traj_from_counts(&[&[7, 2, 1]]), &cfg(0.05, 0.0), 1, 3).unwrap();
        let oracle = grid_oracle(&[7.0, 2.0, 1.0], 0.05);
        for a in 0..3 {
            assert!((p.prob(0, a) - oracle[a]).abs() <= 1e-6, "{:?} vs {oracle:?}", p.row(0));
        }
    }

    #[test]
    fn tabular_binding_floor_matches_oracle() {
        let counts = [50.0, 3.0, 0.0];
        let traj = traj_from_counts(&[&[50, 3, 0]]);
        let fit = fit_tabular_detailed(&traj, &cfg(0.08, 0.0), 1, 3).unwrap();
        let oracle = grid_oracle(&counts, 0.08);
        for a in 0..3 {
            assert!((fit.policy.prob(0, a) - oracle[a]).abs() <= 1e-6);
        }
        assert!(fit.floor_active[0]);
        // 3/53 < 0.08 forces the second action to the floor as well
        assert!((fit.policy.prob(0, 1) - 0.08).abs() < 1e-15);
    }

    #[test]
    fn unvisited_states_are_uniform_and_flagged() {
        let traj = traj_from_counts(&[&[3, 1], &[], &[0, 2]]);
        let fit = fit_tabular_detailed(&traj, &FitConfig::default(), 3, 2).unwrap();
        assert_eq!(fit.unvisited, vec![1]);
        assert_eq!(fit.policy.row(1), vec![0.5, 0.5]);
        // smoothing 0.5: (3.5, 1.5)/5
        assert!((fit.policy.prob(0, 0) - 0.7).abs() < 1e-15);
        assert!((fit.policy.floor() - 0.05).abs() < 1e-15);
    }

    #[test]
    fn constrained_mle_beats_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..30 {
            let counts: Vec<usize> = (0..3).map(|_| rng.random_range(0..40)).collect();
            if counts.iter().sum::<usize>() == 0 {
                continue;
            }
            let floor = rng.random_range(0.0..0.3);
            let traj = traj_from_counts(&[&counts]);
            let p = fit_tabular(&traj, &cfg(floor, 0.0), 1, 3).unwrap().row(0);
            let c: Vec<f64> = counts.iter().map(|&x| x as f64).collect();
            let best = log_lik(&c, &p);
            let res = 1000;
            for i in 0..=res {
                for j in 0..=(res - i) {
                    let q = [i as f64 / res as f64, j as f64 / res as f64, (res - i - j) as f64 / res as f64];
                    if q.iter().all(|&x| x >= floor) {
                        assert!(best - log_lik(&c, &q) >= -1e-9);
                    }
                }
            }
        }
    }

    #[test]
    fn nll_examples() {
        let traj = traj_from_counts(&[&[3, 1, 4, 2]]);
        let u = PolicyTable::uniform(1, 4);
        assert!((empirical_nll(&u, &traj).unwrap() - 4f64.ln()).abs() < 1e-15);
        let det = PolicyTable::new(DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]), 0.0).unwrap();
        let t = Trajectory::new(vec![0, 1, 1], vec![0, 1, 1], 0, 0, String::new()).unwrap();
        assert_eq!(empirical_nll(&det, &t).unwrap(), 0.0);
        let t = Trajectory::new(vec![0, 1], vec![1, 1], 0, 0, String::new()).unwrap();
        assert_eq!(empirical_nll(&det, &t).unwrap(), f64::INFINITY);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let probs = crate::garnet::random_policy_probs(4, 3, 1.0, &mut rng);
        let pol = PolicyTable::new(probs.clone(), 0.0).unwrap();
        let states: Vec<usize> = (0..500).map(|_| rng.random_range(0..4)).collect();
        let actions: Vec<usize> = (0..500).map(|_| rng.random_range(0..3)).collect();
        let t = Trajectory::new(states.clone(), actions.clone(), 0, 0, String::new()).unwrap();
        let mut direct = 0.0;
        for i in 0..500 {
            direct += -probs[(states[i], actions[i])].ln();
        }
        assert!((empirical_nll(&pol, &t).unwrap() - direct / 500.0).abs() <= 1e-12);
    }

    #[test]
    fn clamp_examples() {
        let q = DMatrix::from_row_slice(2, 3, &[0.5, -0.2, -0.3, 4.0, 4.0, 4.0]);
        let out = center_and_clamp(&q, 1.0).unwrap();
        assert!((out.row(0) - q.row(0)).amax() < 1e-15);
        assert_eq!(out.row(1).iter().copied().collect::<Vec<_>>(), vec![0.0, 0.0, 0.0]);
        assert!(center_and_clamp(&q, -1.0).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..500 {
            let m = rng.random_range(2..6);
            let lambda = rng.random_range(0.1..3.0);
            let span: f64 = rng.random_range(0.0..5.0);
            let q = DMatrix::from_fn(3, m, |_, _| rng.sample::<f64, _>(StandardNormal) * 4.0);
            let clamped = center_and_clamp(&q, span / 2.0).unwrap();
            let pi = gibbs_policy(&clamped, lambda).unwrap();
            let bound = softmax_floor(span, lambda, m);
            assert!(pi.min_prob() >= bound * (1.0 - 1e-12));
        }
    }

    #[test]
    fn clamp_bound_inverts_floor() {
        let b = clamp_bound_for_floor(0.05, 0.7, 4);
        assert!((softmax_floor(2.0 * b, 0.7, 4) - 0.05).abs() < 1e-15);
        assert_eq!(clamp_bound_for_floor(0.0, 1.0, 3), f64::INFINITY);
    }

    #[test]
    fn excess_kl_examples() {
        let expert = PolicyTable::uniform(1, 2);
        let d = DVector::from_element(1, 1.0);
        assert_eq!(excess_kl(&expert, &expert, &d).unwrap(), 0.0);
        let est = PolicyTable::new(DMatrix::from_row_slice(1, 2, &[0.75, 0.25]), 0.0).unwrap();
        let closed = 0.5 * (0.5f64 / 0.75).ln() + 0.5 * (0.5f64 / 0.25).ln();
        assert!((excess_kl(&est, &expert, &d).unwrap() - closed).abs() < 1e-15);
        let est = PolicyTable::new(DMatrix::from_row_slice(1, 2, &[1.0, 0.0]), 0.0).unwrap();
        assert_eq!(excess_kl(&est, &expert, &d).unwrap(), f64::INFINITY);

        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = crate::garnet::random_policy_probs(5, 3, 1.0, &mut rng);
        let b = crate::garnet::random_policy_probs(5, 3, 1.0, &mut rng);
        let d = DVector::from_vec(crate::garnet::dirichlet(5, 1.0, &mut rng));
        let mut direct = 0.0;
        for s in 0..5 {
            for x in 0..3 {
                direct += d[s] * a[(s, x)] * (a[(s, x)] / b[(s, x)]).ln();
            }
        }
        let got = excess_kl(&PolicyTable::new(b, 0.0).unwrap(), &PolicyTable::new(a, 0.0).unwrap(), &d).unwrap();
        assert!((got - direct).abs() <= 1e-12);
    }

    fn small_mdp(seed: u64, n: usize, m: usize) -> TabularMdp {
        let spec = GarnetSpec { n_states: n, n_actions: m, branching: n, reward_scale: 1.0, seed };
        sample_garnet(&spec, 0.9, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn one_hot_linear_matches_tabular() {
        let mdp = small_mdp(1, 4, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let expert = PolicyTable::new(crate::garnet::random_policy_probs(4, 3, 3.0, &mut rng), 0.0).unwrap();
        let traj = sample_chain(&mdp, &expert, 200_000, 9, 0).unwrap();
        let tab = fit_tabular(&traj, &cfg(0.0, 0.0), 4, 3).unwrap();
        let lin_cfg = FitConfig {
            floor: Some(0.0),
            smoothing: 0.0,
            optimizer: Optimizer::GradientDescent,
            gd_step: 4.0,
            ..FitConfig::default()
        };
        let lin = fit_linear_softmax(&traj, &FeatureMap::one_hot(4, 3), &lin_cfg).unwrap();
        assert!(lin.converged, "grad norm {}", lin.grad_norm);
        assert!((lin.policy.probs() - tab.probs()).amax() <= 1e-3);
    }

    #[test]
    fn heavy_ridge_gives_uniform() {
        let traj = traj_from_counts(&[&[30, 2, 1], &[0, 5, 9]]);
        let lin_cfg = FitConfig { ridge_weight: 1e8, gd_step: 1e-9, ..FitConfig::default() };
        let lin = fit_linear_softmax(&traj, &FeatureMap::one_hot(2, 3), &lin_cfg).unwrap();
        assert!(lin.weights.amax() < 1e-6);
        assert!((lin.policy.probs().add_scalar(-1.0 / 3.0)).amax() < 1e-6);
    }

    #[test]
    fn linear_recovers_known_weights() {
        let (n, m, p) = (6, 3, 4);
        let mdp = small_mdp(5, n, m);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let feats: Vec<f64> = (0..n * m * p).map(|_| rng.sample(StandardNormal)).collect();
        let fmap = FeatureMap::new(n, m, p, feats).unwrap();
        let theta0 = DVector::from_fn(p, |_, _| rng.sample::<f64, _>(StandardNormal) * 0.7);
        let true_logits = fmap.logits(&theta0);
        let expert = gibbs_policy(&true_logits, 1.0).unwrap();
        let traj = sample_chain(&mdp, &expert, 100_000, 17, 0).unwrap();
        let lin_cfg = FitConfig { floor: Some(0.0), optimizer: Optimizer::GradientDescent, ..FitConfig::default() };
        let fit = fit_linear_softmax(&traj, &fmap, &lin_cfg).unwrap();
        assert!(fit.converged);
        let z = fmap.logits(&fit.weights);
        for s in 0..n {
            for a in 1..m {
                let got = z[(s, a)] - z[(s, 0)];
                let want = true_logits[(s, a)] - true_logits[(s, 0)];
                assert!((got - want).abs() <= 5e-2, "({s},{a}): {got} vs {want}");
            }
        }
    }

    #[test]
    fn linear_floor_projection() {
        let traj = traj_from_counts(&[&[90, 0, 0]]);
        let lin_cfg = FitConfig { floor: Some(0.1), smoothing: 0.0, gd_iters: 2_000, ..FitConfig::default() };
        let fit = fit_linear_softmax(&traj, &FeatureMap::one_hot(1, 3), &lin_cfg).unwrap();
        assert!(fit.policy.min_prob() >= 0.1 - 1e-12);
        assert!(!fit.converged);
    }

    #[test]
    fn penalized_objective_is_midpoint_convex() {
        let (n, m, p) = (5, 3, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let feats: Vec<f64> = (0..n * m * p).map(|_| rng.sample(StandardNormal)).collect();
        let fmap = FeatureMap::new(n, m, p, feats).unwrap();
        let states: Vec<usize> = (0..300).map(|_| rng.random_range(0..n)).collect();
        let actions: Vec<usize> = (0..300).map(|_| rng.random_range(0..m)).collect();
        let traj = Trajectory::new(states, actions, 0, 0, String::new()).unwrap();
        let obj = LinearObjective { features: &fmap, counts: traj.counts(n, m).unwrap(), n: 300.0, ridge: 0.1 };
        for _ in 0..200 {
            let t1 = DVector::from_fn(p, |_, _| rng.sample::<f64, _>(StandardNormal) * 2.0);
            let t2 = DVector::from_fn(p, |_, _| rng.sample::<f64, _>(StandardNormal) * 2.0);
            let mid = (&t1 + &t2) * 0.5;
            assert!(obj.value(&mid) <= 0.5 * (obj.value(&t1) + obj.value(&t2)) + 1e-10);
        }
        // gradient agrees with central differences
        let t = DVector::from_fn(p, |_, _| rng.sample::<f64, _>(StandardNormal));
        let g = obj.gradient(&t);
        for k in 0..p {
            let mut e = DVector::zeros(p);
            e[k] = 1e-6;
            let fd = (obj.value(&(&t + &e)) - obj.value(&(&t - &e))) / 2e-6;
            assert!((fd - g[k]).abs() <= 1e-6 * (1.0 + g[k].abs()));
        }
    }

    #[test]
    fn config_validation_and_json() {
        assert!(cfg(0.5, 0.0).validate(2).is_err());
        assert!(cfg(-0.1, 0.0).validate(2).is_err());
        assert!(FitConfig { smoothing: -1.0, ..FitConfig::default() }.validate(3).is_err());
        let parsed: FitConfig = serde_json::from_str(r#"{"optimizer": "gradient_descent", "ridge_weight": 0.5}"#).unwrap();
        assert_eq!(parsed.optimizer, Optimizer::GradientDescent);
        assert_eq!(parsed.smoothing, 0.5);
        assert!(serde_json::from_str::<FitConfig>(r#"{"floorr": 0.1}"#).is_err());

        let fp = FittedPolicy {
            policy: PolicyTable::uniform(1, 2),
            fit_meta: FitMeta { nll: 0.5, config: FitConfig::default().resolved(2) },
        };
        let text = serde_json::to_string(&fp).unwrap();
        assert!(text.starts_with(r#"{"probs":[[0.5,0.5]],"floor":0.0,"fit_meta":{"nll":0.5,"config":{"floor":0.05"#));
        let back: PolicyTable = serde_json::from_str(&text).unwrap();
        assert_eq!(back, fp.policy);
    }
}
