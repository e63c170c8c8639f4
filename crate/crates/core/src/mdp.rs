//! Finite MDPs, the entropy-regularized (soft) Bellman solver and
//! potential-based reward shaping.
//!
//! Conventions: states and actions are `0..n`, matrices indexed by `(s, a)`
//! are `n_states × n_actions`, and the temperature `lambda` is always a
//! solver input rather than part of the MDP.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numeric::{self, ensure_finite, logsumexp, softmax_into};

/// Tolerance for row sums of stochastic objects.
pub const STOCHASTIC_TOL: f64 = 1e-12;
/// Default sup-norm tolerance of soft value iteration.
pub const DEFAULT_VI_TOL: f64 = 1e-10;
/// Hard upper bound on the number of soft value iteration sweeps.
pub const MAX_VI_ITER: usize = 1_000_000;

/// A finite discounted MDP `(S, A, P, R, γ)`.
///
/// Transitions are stored densely and row-major: the distribution over next
/// states for `(s, a)` is the contiguous slice returned by
/// [`TabularMdp::next_state_probs`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MdpFile", into = "MdpFile")]
pub struct TabularMdp {
    n_states: usize,
    n_actions: usize,
    transition: Vec<f64>,
    reward: DMatrix<f64>,
    discount: f64,
}

impl TabularMdp {
    /// Build and validate an MDP from a flat `[s][a][s']` transition array.
    pub fn new(
        n_states: usize,
        n_actions: usize,
        transition: Vec<f64>,
        reward: DMatrix<f64>,
        discount: f64,
    ) -> Result<Self> {
        if n_states == 0 || n_actions == 0 {
            return Err(Error::InvalidMdp("need at least one state and one action".into()));
        }
        if transition.len() != n_states * n_actions * n_states {
            return Err(Error::Dimension(format!(
                "transition has {} entries, expected {}",
                transition.len(),
                n_states * n_actions * n_states
            )));
        }
        if reward.shape() != (n_states, n_actions) {
            return Err(Error::Dimension(format!(
                "reward is {:?}, expected ({n_states}, {n_actions})",
                reward.shape()
            )));
        }
        if !(discount > 0.0 && discount < 1.0) {
            return Err(Error::InvalidMdp(format!("discount {discount} not in (0, 1)")));
        }
        ensure_finite(&reward, "reward")?;
        for (idx, row) in transition.chunks(n_states).enumerate() {
            let (s, a) = (idx / n_actions, idx % n_actions);
            if row.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
                return Err(Error::InvalidMdp(format!("P(.|{s},{a}) has a negative or non-finite entry")));
            }
            let total: f64 = row.iter().sum();
            if (total - 1.0).abs() > STOCHASTIC_TOL {
                return Err(Error::InvalidMdp(format!("P(.|{s},{a}) sums to {total}")));
            }
        }
        Ok(Self { n_states, n_actions, transition, reward, discount })
    }

    /// Build from nested `[s][a][s']` transitions and `[s][a]` rewards.
    pub fn from_nested(transition: &[Vec<Vec<f64>>], reward: &[Vec<f64>], discount: f64) -> Result<Self> {
        let n_states = transition.len();
        let n_actions = transition.first().map_or(0, Vec::len);
        let mut flat = Vec::with_capacity(n_states * n_actions * n_states);
        for (s, per_action) in transition.iter().enumerate() {
            if per_action.len() != n_actions {
                return Err(Error::Dimension(format!("transition[{s}] has {} actions", per_action.len())));
            }
            for (a, row) in per_action.iter().enumerate() {
                if row.len() != n_states {
                    return Err(Error::Dimension(format!("transition[{s}][{a}] has length {}", row.len())));
                }
                flat.extend_from_slice(row);
            }
        }
        let reward = numeric::from_rows(reward)?;
        Self::new(n_states, n_actions, flat, reward, discount)
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }

    pub fn reward(&self) -> &DMatrix<f64> {
        &self.reward
    }

    /// `P(·|s, a)` as a slice of length `n_states`.
    pub fn next_state_probs(&self, s: usize, a: usize) -> &[f64] {
        let start = (s * self.n_actions + a) * self.n_states;
        &self.transition[start..start + self.n_states]
    }

    /// `(P_a f)(s) = Σ_{s'} P(s'|s,a) f(s')`.
    pub fn expected_next(&self, f: &DVector<f64>, s: usize, a: usize) -> f64 {
        self.next_state_probs(s, a).iter().zip(f.iter()).map(|(p, v)| p * v).sum()
    }

    /// Matrix `(P f)(s, a)` for all pairs.
    pub fn expected_next_all(&self, f: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(self.n_states, self.n_actions, |s, a| self.expected_next(f, s, a))
    }

    /// The `n_states × n_states` matrix `P_a`.
    pub fn transition_matrix(&self, a: usize) -> DMatrix<f64> {
        DMatrix::from_fn(self.n_states, self.n_states, |s, t| self.next_state_probs(s, a)[t])
    }

    /// Same dynamics with a different reward.
    pub fn with_reward(&self, reward: DMatrix<f64>) -> Result<Self> {
        if reward.shape() != self.reward.shape() {
            return Err(Error::Dimension(format!(
                "reward is {:?}, expected {:?}",
                reward.shape(),
                self.reward.shape()
            )));
        }
        ensure_finite(&reward, "reward")?;
        Ok(Self { reward, ..self.clone() })
    }

    /// Same MDP with a different discount factor.
    pub fn with_discount(&self, discount: f64) -> Result<Self> {
        Self::new(self.n_states, self.n_actions, self.transition.clone(), self.reward.clone(), discount)
    }

    /// `Q(s, a) = R(s, a) + γ (P V)(s, a)`.
    pub fn q_from_value(&self, value: &DVector<f64>) -> DMatrix<f64> {
        let g = self.discount;
        DMatrix::from_fn(self.n_states, self.n_actions, |s, a| {
            self.reward[(s, a)] + g * self.expected_next(value, s, a)
        })
    }

    fn check_state_vector(&self, f: &DVector<f64>, what: &str) -> Result<()> {
        if f.len() != self.n_states {
            return Err(Error::Dimension(format!("{what} has length {}, expected {}", f.len(), self.n_states)));
        }
        if f.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(what.into()));
        }
        Ok(())
    }
}

/// On-disk JSON layout of an MDP. Field order is fixed for fixture diffing.
#[derive(Serialize, Deserialize)]
struct MdpFile {
    n_states: usize,
    n_actions: usize,
    gamma: f64,
    transition: Vec<Vec<Vec<f64>>>,
    reward: Vec<Vec<f64>>,
}

impl TryFrom<MdpFile> for TabularMdp {
    type Error = Error;

    fn try_from(file: MdpFile) -> Result<Self> {
        let mdp = TabularMdp::from_nested(&file.transition, &file.reward, file.gamma)?;
        if mdp.n_states != file.n_states || mdp.n_actions != file.n_actions {
            return Err(Error::Dimension(format!(
                "declared {}x{} but arrays are {}x{}",
                file.n_states, file.n_actions, mdp.n_states, mdp.n_actions
            )));
        }
        Ok(mdp)
    }
}

impl From<TabularMdp> for MdpFile {
    fn from(m: TabularMdp) -> Self {
        let transition = (0..m.n_states)
            .map(|s| (0..m.n_actions).map(|a| m.next_state_probs(s, a).to_vec()).collect())
            .collect();
        MdpFile {
            n_states: m.n_states,
            n_actions: m.n_actions,
            gamma: m.discount,
            transition,
            reward: numeric::to_rows(&m.reward),
        }
    }
}

/// A conditional action distribution `π(a|s)` with a declared floor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PolicyFile", into = "PolicyFile")]
pub struct PolicyTable {
    probs: DMatrix<f64>,
    floor: f64,
}

impl PolicyTable {
    pub fn new(probs: DMatrix<f64>, floor: f64) -> Result<Self> {
        if probs.nrows() == 0 || probs.ncols() == 0 {
            return Err(Error::InvalidPolicy("empty policy".into()));
        }
        if !(floor >= 0.0) || floor * probs.ncols() as f64 > 1.0 + STOCHASTIC_TOL {
            return Err(Error::InvalidPolicy(format!("floor {floor} infeasible for {} actions", probs.ncols())));
        }
        for s in 0..probs.nrows() {
            let row = probs.row(s);
            if row.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
                return Err(Error::InvalidPolicy(format!("row {s} has a negative or non-finite entry")));
            }
            let total: f64 = row.iter().sum();
            if (total - 1.0).abs() > STOCHASTIC_TOL {
                return Err(Error::InvalidPolicy(format!("row {s} sums to {total}")));
            }
            if floor > 0.0 && row.iter().any(|&p| p < floor - STOCHASTIC_TOL) {
                return Err(Error::InvalidPolicy(format!("row {s} violates floor {floor}")));
            }
        }
        Ok(Self { probs, floor })
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        let p = 1.0 / n_actions as f64;
        Self { probs: DMatrix::from_element(n_states, n_actions, p), floor: 0.0 }
    }

    pub fn probs(&self) -> &DMatrix<f64> {
        &self.probs
    }

    pub fn floor(&self) -> f64 {
        self.floor
    }

    pub fn n_states(&self) -> usize {
        self.probs.nrows()
    }

    pub fn n_actions(&self) -> usize {
        self.probs.ncols()
    }

    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs[(s, a)]
    }

    pub fn row(&self, s: usize) -> Vec<f64> {
        self.probs.row(s).iter().copied().collect()
    }

    pub fn min_prob(&self) -> f64 {
        self.probs.min()
    }

    /// Same probabilities with a different declared floor.
    pub fn with_floor(self, floor: f64) -> Result<Self> {
        Self::new(self.probs, floor)
    }

    /// Entrywise `log π(a|s)`; fails on a zero entry.
    pub fn log_probs(&self) -> Result<DMatrix<f64>> {
        let (n, m) = self.probs.shape();
        for s in 0..n {
            for a in 0..m {
                if self.probs[(s, a)] <= 0.0 {
                    return Err(Error::ZeroProbability { state: s, action: a });
                }
            }
        }
        Ok(self.probs.map(f64::ln))
    }

    /// Hex SHA-256 of the dimensions and the little-endian bytes of every
    /// probability in row-major order.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.n_states() as u64).to_le_bytes());
        h.update((self.n_actions() as u64).to_le_bytes());
        for s in 0..self.n_states() {
            for a in 0..self.n_actions() {
                h.update(self.probs[(s, a)].to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

#[derive(Serialize, Deserialize)]
struct PolicyFile {
    probs: Vec<Vec<f64>>,
    #[serde(default)]
    floor: f64,
}

impl TryFrom<PolicyFile> for PolicyTable {
    type Error = Error;

    fn try_from(file: PolicyFile) -> Result<Self> {
        PolicyTable::new(numeric::from_rows(&file.probs)?, file.floor)
    }
}

impl From<PolicyTable> for PolicyFile {
    fn from(p: PolicyTable) -> Self {
        PolicyFile { probs: numeric::to_rows(&p.probs), floor: p.floor }
    }
}

/// Fixed point `(V*, Q*, π*)` of the soft Bellman system.
#[derive(Debug, Clone)]
pub struct SoftSolution {
    pub value: DVector<f64>,
    pub q_values: DMatrix<f64>,
    pub policy: PolicyTable,
    pub temperature: f64,
    /// `sup_s |V(s) − λ logsumexp_a(Q(s, a)/λ)|` for the returned pair.
    pub residual: f64,
    pub iterations: usize,
}

impl Serialize for SoftSolution {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        #[derive(Serialize)]
        struct View<'a> {
            value: Vec<f64>,
            q_values: Vec<Vec<f64>>,
            policy: &'a PolicyTable,
            temperature: f64,
            residual: f64,
            iterations: usize,
        }
        View {
            value: self.value.iter().copied().collect(),
            q_values: numeric::to_rows(&self.q_values),
            policy: &self.policy,
            temperature: self.temperature,
            residual: self.residual,
            iterations: self.iterations,
        }
        .serialize(serializer)
    }
}

fn check_temperature(lambda: f64) -> Result<()> {
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(Error::InvalidArgument(format!("temperature must be positive and finite, got {lambda}")));
    }
    Ok(())
}

/// `λ logsumexp_a(Q(s, a)/λ)` per state.
pub fn soft_max_values(q: &DMatrix<f64>, lambda: f64) -> DVector<f64> {
    let mut buf = vec![0.0; q.ncols()];
    DVector::from_fn(q.nrows(), |s, _| {
        for (a, b) in buf.iter_mut().enumerate() {
            *b = q[(s, a)] / lambda;
        }
        lambda * logsumexp(&buf)
    })
}

/// One application of the soft Bellman operator `V ↦ λ logsumexp((R + γPV)/λ)`.
pub fn soft_bellman_operator(mdp: &TabularMdp, value: &DVector<f64>, lambda: f64) -> DVector<f64> {
    soft_max_values(&mdp.q_from_value(value), lambda)
}

/// A-priori sweep count after which the contraction guarantees `tol`,
/// starting from `V = 0`: `ceil(log(tol (1−γ) / V_max) / log γ)`, capped at
/// [`MAX_VI_ITER`].
pub fn default_max_iter(mdp: &TabularMdp, lambda: f64, tol: f64) -> usize {
    let gamma = mdp.discount();
    let r_max = numeric::sup_norm(mdp.reward().iter());
    let v_max = (r_max + lambda * (mdp.n_actions() as f64).ln()) / (1.0 - gamma);
    if v_max <= 0.0 {
        return 2;
    }
    let k = ((tol * (1.0 - gamma) / v_max).ln() / gamma.ln()).ceil();
    if !k.is_finite() || k < 1.0 {
        return 2;
    }
    (k as usize).saturating_add(2).min(MAX_VI_ITER)
}

/// Solve the soft Bellman equations by fixed-point iteration.
///
/// Iterates `V ← λ logsumexp((R + γPV)/λ)` from `V = 0` until the Bellman
/// residual of the current iterate is at most `tol`. The returned `Q` is
/// exactly `R + γPV` for the returned `V`, and the policy is the Gibbs
/// distribution of that `Q`.
pub fn soft_value_iteration(mdp: &TabularMdp, lambda: f64, tol: f64, max_iter: usize) -> Result<SoftSolution> {
    check_temperature(lambda)?;
    if !(tol > 0.0) {
        return Err(Error::InvalidArgument(format!("tolerance must be positive, got {tol}")));
    }
    let mut value = DVector::zeros(mdp.n_states());
    let mut residual = f64::INFINITY;
    for iteration in 0..=max_iter {
        let q = mdp.q_from_value(&value);
        let next = soft_max_values(&q, lambda);
        residual = numeric::sup_norm((&next - &value).iter());
        if residual <= tol {
            let policy = gibbs_policy(&q, lambda)?;
            return Ok(SoftSolution { value, q_values: q, policy, temperature: lambda, residual, iterations: iteration });
        }
        value = next;
    }
    Err(Error::NotConverged { iterations: max_iter, residual })
}

/// [`soft_value_iteration`] with the default tolerance and iteration budget.
pub fn solve_soft(mdp: &TabularMdp, lambda: f64) -> Result<SoftSolution> {
    check_temperature(lambda)?;
    soft_value_iteration(mdp, lambda, DEFAULT_VI_TOL, default_max_iter(mdp, lambda, DEFAULT_VI_TOL))
}

/// Gibbs policy `π(a|s) ∝ exp(q(s, a)/λ)`, computed with max subtraction.
pub fn gibbs_policy(q: &DMatrix<f64>, lambda: f64) -> Result<PolicyTable> {
    check_temperature(lambda)?;
    ensure_finite(q, "q")?;
    let (n, m) = q.shape();
    let mut probs = DMatrix::zeros(n, m);
    let mut logits = vec![0.0; m];
    let mut row = vec![0.0; m];
    for s in 0..n {
        for (a, l) in logits.iter_mut().enumerate() {
            *l = q[(s, a)];
        }
        softmax_into(&logits, lambda, &mut row);
        for (a, &p) in row.iter().enumerate() {
            probs[(s, a)] = p;
        }
    }
    PolicyTable::new(probs, 0.0)
}

/// Soft advantage `A*(s, a) = Q*(s, a) − V*(s)`.
pub fn soft_advantage(sol: &SoftSolution) -> DMatrix<f64> {
    let mut adv = sol.q_values.clone();
    for (s, mut row) in adv.row_iter_mut().enumerate() {
        row.add_scalar_mut(-sol.value[s]);
    }
    adv
}

/// Potential-based shaping: reward replaced by `R + γPf − f`.
pub fn shape_reward(mdp: &TabularMdp, f: &DVector<f64>) -> Result<TabularMdp> {
    mdp.check_state_vector(f, "potential")?;
    let pf = mdp.expected_next_all(f);
    let g = mdp.discount();
    let shaped = DMatrix::from_fn(mdp.n_states(), mdp.n_actions(), |s, a| {
        mdp.reward()[(s, a)] + g * pf[(s, a)] - f[s]
    });
    mdp.with_reward(shaped)
}

/// Reward `R(s, a) = f(s) + λ log π(a|s) − γ(P f)(s, a)` under which `policy`
/// is soft-optimal with `V* = f` and `Q* = f + λ log π`.
pub fn reward_from_policy(
    policy: &PolicyTable,
    f: &DVector<f64>,
    lambda: f64,
    mdp: &TabularMdp,
) -> Result<DMatrix<f64>> {
    check_temperature(lambda)?;
    if policy.n_states() != mdp.n_states() || policy.n_actions() != mdp.n_actions() {
        return Err(Error::Dimension("policy and MDP shapes differ".into()));
    }
    mdp.check_state_vector(f, "potential")?;
    let log_pi = policy.log_probs()?;
    let pf = mdp.expected_next_all(f);
    let g = mdp.discount();
    Ok(DMatrix::from_fn(mdp.n_states(), mdp.n_actions(), |s, a| {
        f[s] + lambda * log_pi[(s, a)] - g * pf[(s, a)]
    }))
}
