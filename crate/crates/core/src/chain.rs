//! Expert demonstrations as a Markov chain: induced state kernel, stationary
//! law, trajectory sampling and the on-disk trajectory format.

use std::fmt;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{PolicyTable, TabularMdp};

/// L1 tolerance of the stationary distribution.
pub const STATIONARY_TOL: f64 = 1e-12;
/// Power-iteration budget before falling back to a direct solve.
pub const POWER_ITER_CAP: usize = 1_000_000;
/// Largest horizon examined by [`mixing_diagnostic`].
pub const MIXING_CAP: usize = 1 << 16;

/// A sampled expert chain `(S_t, A_t)_{t=1..N}` with generator metadata.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trajectory {
    pub states: Vec<usize>,
    pub actions: Vec<usize>,
    pub seed: u64,
    pub burn_in: usize,
    pub source_policy_hash: String,
}

impl Trajectory {
    pub fn new(states: Vec<usize>, actions: Vec<usize>, seed: u64, burn_in: usize, source_policy_hash: String) -> Result<Self> {
        if states.is_empty() || states.len() != actions.len() {
            return Err(Error::InvalidArgument(format!(
                "trajectory needs equal nonzero lengths, got {} states and {} actions",
                states.len(),
                actions.len()
            )));
        }
        Ok(Self { states, actions, seed, burn_in, source_policy_hash })
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.states.iter().copied().zip(self.actions.iter().copied())
    }

    /// Check every index against the given dimensions.
    pub fn check_bounds(&self, n_states: usize, n_actions: usize) -> Result<()> {
        for (t, (s, a)) in self.pairs().enumerate() {
            if s >= n_states || a >= n_actions {
                return Err(Error::Dimension(format!(
                    "pair ({s}, {a}) at t = {} outside {n_states}x{n_actions}",
                    t + 1
                )));
            }
        }
        Ok(())
    }

    /// Visit counts `n(s, a)`.
    pub fn counts(&self, n_states: usize, n_actions: usize) -> Result<DMatrix<f64>> {
        self.check_bounds(n_states, n_actions)?;
        let mut counts = DMatrix::zeros(n_states, n_actions);
        for (s, a) in self.pairs() {
            counts[(s, a)] += 1.0;
        }
        Ok(counts)
    }

    /// CSV body with header `t,state,action`, `t` counted from 1.
    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(16 * self.len() + 16);
        out.push_str("t,state,action\n");
        for (t, (s, a)) in self.pairs().enumerate() {
            out.push_str(&format!("{},{s},{a}\n", t + 1));
        }
        out
    }

    pub fn sidecar(&self) -> TrajectorySidecar {
        TrajectorySidecar {
            seed: self.seed,
            burn_in: self.burn_in,
            n: self.len(),
            policy_hash: self.source_policy_hash.clone(),
        }
    }

    /// Write `<csv>` and its JSON sidecar. Both are byte-deterministic.
    pub fn write(&self, csv_path: &Path, sidecar_path: &Path) -> Result<()> {
        fs::write(csv_path, self.to_csv())?;
        fs::write(sidecar_path, serde_json::to_string_pretty(&self.sidecar())? + "\n")?;
        Ok(())
    }

    pub fn from_csv(csv: &str, sidecar: &TrajectorySidecar) -> Result<Self> {
        let mut lines = csv.lines();
        match lines.next() {
            Some(h) if h.trim() == "t,state,action" => {}
            other => return Err(Error::Parse(format!("bad trajectory header {other:?}"))),
        }
        let mut states = Vec::new();
        let mut actions = Vec::new();
        for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let fields: Vec<&str> = line.trim().split(',').collect();
            let parse = |k: usize| -> Result<usize> {
                fields
                    .get(k)
                    .and_then(|x| x.parse().ok())
                    .ok_or_else(|| Error::Parse(format!("line {}: {line:?}", i + 2)))
            };
            if fields.len() != 3 || parse(0)? != states.len() + 1 {
                return Err(Error::Parse(format!("line {}: {line:?}", i + 2)));
            }
            states.push(parse(1)?);
            actions.push(parse(2)?);
        }
        if states.len() != sidecar.n {
            return Err(Error::Parse(format!("sidecar declares n = {} but csv has {} rows", sidecar.n, states.len())));
        }
        Self::new(states, actions, sidecar.seed, sidecar.burn_in, sidecar.policy_hash.clone())
    }

    pub fn read(csv_path: &Path, sidecar_path: &Path) -> Result<Self> {
        let sidecar: TrajectorySidecar = serde_json::from_str(&fs::read_to_string(sidecar_path)?)?;
        Self::from_csv(&fs::read_to_string(csv_path)?, &sidecar)
    }
}

/// JSON metadata stored next to a trajectory CSV.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrajectorySidecar {
    pub seed: u64,
    pub burn_in: usize,
    pub n: usize,
    pub policy_hash: String,
}

/// A state-action distribution together with its state marginal.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyMeasure {
    pub joint: DMatrix<f64>,
    pub state_marginal: DVector<f64>,
}

impl OccupancyMeasure {
    pub fn from_joint(joint: DMatrix<f64>) -> Result<Self> {
        if joint.iter().any(|&x| !(x >= 0.0)) {
            return Err(Error::InvalidArgument("occupancy has a negative entry".into()));
        }
        let total = joint.sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidArgument(format!("occupancy sums to {total}")));
        }
        let state_marginal = DVector::from_iterator(joint.nrows(), joint.row_iter().map(|r| r.sum()));
        Ok(Self { joint, state_marginal })
    }
}

/// Invariant law `ρ(s, a) = d_π(s) π(a|s)` of the chain driven by `policy`.
pub fn expert_occupancy(mdp: &TabularMdp, policy: &PolicyTable) -> Result<OccupancyMeasure> {
    let d = stationary_distribution(&policy_kernel(mdp, policy)?, STATIONARY_TOL)?;
    let mut joint = policy.probs().clone();
    for (s, mut row) in joint.row_iter_mut().enumerate() {
        row *= d[s];
    }
    Ok(OccupancyMeasure { joint, state_marginal: d })
}

/// State kernel `K(s, s') = Σ_a π(a|s) P(s'|s, a)`.
pub fn policy_kernel(mdp: &TabularMdp, policy: &PolicyTable) -> Result<DMatrix<f64>> {
    let (n, m) = (mdp.n_states(), mdp.n_actions());
    if policy.n_states() != n || policy.n_actions() != m {
        return Err(Error::Dimension(format!(
            "policy is {}x{}, MDP is {n}x{m}",
            policy.n_states(),
            policy.n_actions()
        )));
    }
    let mut kernel = DMatrix::zeros(n, n);
    for s in 0..n {
        for a in 0..m {
            let pa = policy.prob(s, a);
            if pa == 0.0 {
                continue;
            }
            for (t, &p) in mdp.next_state_probs(s, a).iter().enumerate() {
                kernel[(s, t)] += pa * p;
            }
        }
    }
    Ok(kernel)
}

fn stationarity_gap(kernel: &DMatrix<f64>, d: &DVector<f64>) -> f64 {
    (kernel.tr_mul(d) - d).lp_norm(1)
}

fn check_stochastic(kernel: &DMatrix<f64>) -> Result<()> {
    if !kernel.is_square() || kernel.nrows() == 0 {
        return Err(Error::Dimension(format!("kernel is {:?}", kernel.shape())));
    }
    for (s, row) in kernel.row_iter().enumerate() {
        if row.iter().any(|&p| !(p >= 0.0)) || (row.sum() - 1.0).abs() > 1e-10 {
            return Err(Error::InvalidArgument(format!("kernel row {s} is not a probability vector")));
        }
    }
    Ok(())
}

/// Stationary distribution `d` with `dᵀK = dᵀ` (L1 gap at most `tol`).
///
/// Power iteration from the uniform law; when it stalls or exhausts its
/// budget the linear system `(Kᵀ − I)d = 0, Σd = 1` is solved directly. A
/// chain without a unique stationary law is an error.
pub fn stationary_distribution(kernel: &DMatrix<f64>, tol: f64) -> Result<DVector<f64>> {
    check_stochastic(kernel)?;
    let closed = closed_class_count(kernel);
    if closed != 1 {
        return Err(Error::NotErgodic(format!("state kernel is reducible ({closed} closed classes)")));
    }
    let n = kernel.nrows();
    let mut d = DVector::from_element(n, 1.0 / n as f64);
    let mut checkpoint = f64::INFINITY;
    for it in 0..POWER_ITER_CAP {
        let mut next = kernel.tr_mul(&d);
        next /= next.sum();
        let gap = (&next - &d).lp_norm(1);
        d = next;
        if gap <= tol * 0.5 && stationarity_gap(kernel, &d) <= tol {
            return Ok(d);
        }
        if it % 1000 == 999 {
            if gap > 0.99 * checkpoint {
                break;
            }
            checkpoint = gap;
        }
    }
    direct_stationary(kernel, tol)
}

/// Number of closed communicating classes of the support graph of `kernel`.
/// A finite chain has a unique stationary law iff this is one.
pub fn closed_class_count(kernel: &DMatrix<f64>) -> usize {
    let n = kernel.nrows();
    let edges = |s: usize| (0..n).filter(move |&t| kernel[(s, t)] > 0.0);
    let redges = |t: usize| (0..n).filter(move |&s| kernel[(s, t)] > 0.0);

    // Kosaraju: finishing order on the graph, then components on the reverse.
    let mut order = Vec::with_capacity(n);
    let mut seen = vec![false; n];
    for root in 0..n {
        if seen[root] {
            continue;
        }
        seen[root] = true;
        let mut stack = vec![(root, edges(root).collect::<Vec<_>>().into_iter())];
        while let Some((v, it)) = stack.last_mut() {
            match it.next() {
                Some(w) if !seen[w] => {
                    seen[w] = true;
                    stack.push((w, edges(w).collect::<Vec<_>>().into_iter()));
                }
                Some(_) => {}
                None => {
                    order.push(*v);
                    stack.pop();
                }
            }
        }
    }
    let mut component = vec![usize::MAX; n];
    let mut n_comp = 0;
    for &root in order.iter().rev() {
        if component[root] != usize::MAX {
            continue;
        }
        let mut stack = vec![root];
        component[root] = n_comp;
        while let Some(v) = stack.pop() {
            for w in redges(v) {
                if component[w] == usize::MAX {
                    component[w] = n_comp;
                    stack.push(w);
                }
            }
        }
        n_comp += 1;
    }
    let mut leaves = vec![true; n_comp];
    for s in 0..n {
        if edges(s).any(|t| component[t] != component[s]) {
            leaves[component[s]] = false;
        }
    }
    leaves.into_iter().filter(|&c| c).count()
}

fn direct_stationary(kernel: &DMatrix<f64>, tol: f64) -> Result<DVector<f64>> {
    let n = kernel.nrows();
    let mut system = kernel.transpose() - DMatrix::identity(n, n);
    system.row_mut(n - 1).fill(1.0);
    let mut rhs = DVector::zeros(n);
    rhs[n - 1] = 1.0;
    let lu = system.full_piv_lu();
    let pivots = lu.u().diagonal().map(f64::abs);
    if pivots.min() <= 1e-13 * pivots.max().max(1.0) {
        return Err(Error::NotErgodic("state kernel is reducible (more than one closed class)".into()));
    }
    let mut d = lu.solve(&rhs).ok_or_else(|| Error::NotErgodic("singular stationarity system".into()))?;
    if d.iter().any(|&x| x < -1e-10) {
        return Err(Error::NotErgodic("stationarity system has no nonnegative solution".into()));
    }
    d.apply(|x| *x = x.max(0.0));
    d /= d.sum();
    let gap = stationarity_gap(kernel, &d);
    if gap > tol.max(1e-10 * n as f64) {
        return Err(Error::NotErgodic(format!("stationarity gap {gap:e} after direct solve")));
    }
    Ok(d)
}

/// Cumulative distribution rows for inverse-CDF sampling.
struct CdfTable {
    width: usize,
    cdf: Vec<f64>,
}

impl CdfTable {
    fn new(width: usize, rows: impl Iterator<Item = Vec<f64>>) -> Self {
        let mut cdf = Vec::new();
        for row in rows {
            let mut acc = 0.0;
            for p in row {
                acc += p;
                cdf.push(acc);
            }
        }
        Self { width, cdf }
    }

    fn draw<R: Rng>(&self, row: usize, rng: &mut R) -> usize {
        let c = &self.cdf[row * self.width..(row + 1) * self.width];
        let u = rng.random::<f64>() * c[self.width - 1];
        // zero-probability entries never win: `u < c[i]` requires c[i] > c[i-1]
        c.iter().position(|&x| u < x).unwrap_or_else(|| {
            c.iter().rposition(|&x| x > 0.0).map_or(self.width - 1, |i| i)
        })
    }
}

/// Sample `n` state-action pairs of the expert chain.
///
/// The initial state is drawn from the stationary law of the induced kernel,
/// then `A_t ~ π(·|S_t)` and `S_{t+1} ~ P(·|S_t, A_t)`. The first `burn_in`
/// pairs are discarded. The generator is ChaCha8 seeded with `seed`.
pub fn sample_chain(mdp: &TabularMdp, policy: &PolicyTable, n: usize, seed: u64, burn_in: usize) -> Result<Trajectory> {
    if n == 0 {
        return Err(Error::InvalidArgument("trajectory length must be at least 1".into()));
    }
    let kernel = policy_kernel(mdp, policy)?;
    let d = stationary_distribution(&kernel, STATIONARY_TOL)?;
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    let init = CdfTable::new(ns, std::iter::once(d.iter().copied().collect()));
    let pi = CdfTable::new(na, (0..ns).map(|s| policy.row(s)));
    let next = CdfTable::new(ns, (0..ns * na).map(|k| mdp.next_state_probs(k / na, k % na).to_vec()));

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut states = Vec::with_capacity(n);
    let mut actions = Vec::with_capacity(n);
    let mut s = init.draw(0, &mut rng);
    for t in 0..burn_in + n {
        let a = pi.draw(s, &mut rng);
        if t >= burn_in {
            states.push(s);
            actions.push(a);
        }
        s = next.draw(s * na + a, &mut rng);
    }
    Trajectory::new(states, actions, seed, burn_in, policy.content_hash())
}

/// `ρ̂(s, a) = count(s, a) / N`.
pub fn empirical_occupancy(traj: &Trajectory, n_states: usize, n_actions: usize) -> Result<OccupancyMeasure> {
    let counts = traj.counts(n_states, n_actions)?;
    let joint = counts / traj.len() as f64;
    let state_marginal = DVector::from_iterator(n_states, joint.row_iter().map(|r| r.sum()));
    Ok(OccupancyMeasure { joint, state_marginal })
}

/// Smallest horizon at which every start state is within total variation 1/4
/// of the stationary law.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MixingTime {
    Finite(usize),
    ExceedsCap(usize),
}

impl MixingTime {
    pub fn finite(self) -> Option<usize> {
        match self {
            MixingTime::Finite(t) => Some(t),
            MixingTime::ExceedsCap(_) => None,
        }
    }
}

impl fmt::Display for MixingTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MixingTime::Finite(t) => write!(f, "{t}"),
            MixingTime::ExceedsCap(c) => write!(f, "> {c}"),
        }
    }
}

impl Serialize for MixingTime {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            MixingTime::Finite(t) => serializer.serialize_u64(*t as u64),
            MixingTime::ExceedsCap(_) => serializer.serialize_str(&self.to_string()),
        }
    }
}

/// `max_s TV(Kⁿ(s, ·), d)`.
pub fn worst_case_tv(power: &DMatrix<f64>, d: &DVector<f64>) -> f64 {
    power
        .row_iter()
        .map(|row| 0.5 * row.iter().zip(d.iter()).map(|(p, q)| (p - q).abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Mixing time of a kernel, found by repeated squaring followed by bisection
/// (the worst-case TV distance is nonincreasing in the horizon).
///
/// Kernels without a unique stationary law never mix and report the cap.
pub fn mixing_diagnostic(kernel: &DMatrix<f64>, cap: usize) -> MixingTime {
    const THRESHOLD: f64 = 0.25;
    let Ok(d) = stationary_distribution(kernel, STATIONARY_TOL) else {
        return MixingTime::ExceedsCap(cap);
    };
    let cap = cap.max(1);
    // squares[k] = K^(2^k)
    let mut squares = vec![kernel.clone()];
    let power_of = |squares: &[DMatrix<f64>], n: usize| -> DMatrix<f64> {
        let mut acc: Option<DMatrix<f64>> = None;
        for (k, sq) in squares.iter().enumerate() {
            if n >> k & 1 == 1 {
                acc = Some(match acc {
                    None => sq.clone(),
                    Some(m) => m * sq,
                });
            }
        }
        acc.expect("n >= 1")
    };
    if worst_case_tv(kernel, &d) <= THRESHOLD {
        return MixingTime::Finite(1);
    }
    let mut lo = 1usize;
    let mut hi = loop {
        let k = squares.len() - 1;
        let next = 1usize << (k + 1);
        if next > cap {
            while squares.len() <= cap.ilog2() as usize {
                let last = squares.last().unwrap();
                squares.push(last * last);
            }
            if worst_case_tv(&power_of(&squares, cap), &d) > THRESHOLD {
                return MixingTime::ExceedsCap(cap);
            }
            break cap;
        }
        let sq = &squares[k] * &squares[k];
        let tv = worst_case_tv(&sq, &d);
        squares.push(sq);
        if tv <= THRESHOLD {
            break next;
        }
        lo = next;
    };
    // invariant: tv(lo) > 1/4 >= tv(hi)
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if worst_case_tv(&power_of(&squares, mid), &d) <= THRESHOLD {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    MixingTime::Finite(hi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::garnet::{random_policy_probs, sample_garnet, GarnetSpec};
    use crate::mdp::solve_soft;

    fn random_instance(seed: u64, n: usize, m: usize) -> (TabularMdp, PolicyTable) {
        let spec = GarnetSpec { n_states: n, n_actions: m, branching: n, reward_scale: 1.0, seed };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mdp = sample_garnet(&spec, 0.9, &mut rng).unwrap();
        let policy = PolicyTable::new(random_policy_probs(n, m, 1.0, &mut rng), 0.0).unwrap();
        (mdp, policy)
    }

    fn random_kernel(seed: u64, n: usize) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        random_policy_probs(n, n, 1.0, &mut rng)
    }

    /// Null-space oracle: solve `(Kᵀ − I) d = 0` with the first equation
    /// swapped for normalization, by dense Gaussian elimination.
    fn null_space_oracle(k: &DMatrix<f64>) -> Vec<f64> {
        let n = k.nrows();
        let mut a: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let mut row: Vec<f64> = (0..n).map(|j| k[(j, i)] - if i == j { 1.0 } else { 0.0 }).collect();
                row.push(0.0);
                row
            })
            .collect();
        a[0] = vec![1.0; n + 1];
        for col in 0..n {
            let piv = (col..n).max_by(|&x, &y| a[x][col].abs().total_cmp(&a[y][col].abs())).unwrap();
            a.swap(col, piv);
            for r in 0..n {
                if r != col {
                    let f = a[r][col] / a[col][col];
                    for c in col..=n {
                        a[r][c] -= f * a[col][c];
                    }
                }
            }
        }
        (0..n).map(|i| a[i][n] / a[i][i]).collect()
    }

    #[test]
    fn kernel_examples() {
        let (mdp, policy) = random_instance(1, 5, 3);
        let k = policy_kernel(&mdp, &policy).unwrap();
        for s in 0..5 {
            assert!((k.row(s).sum() - 1.0).abs() <= 1e-12);
            for t in 0..5 {
                let direct: f64 = (0..3).map(|a| policy.prob(s, a) * mdp.next_state_probs(s, a)[t]).sum();
                assert!((k[(s, t)] - direct).abs() < 1e-15);
            }
        }
        let uniform = PolicyTable::uniform(5, 3);
        let k = policy_kernel(&mdp, &uniform).unwrap();
        let avg = (mdp.transition_matrix(0) + mdp.transition_matrix(1) + mdp.transition_matrix(2)) / 3.0;
        assert!((k - avg).amax() < 1e-15);
        assert!(policy_kernel(&mdp, &PolicyTable::uniform(4, 3)).is_err());
    }

    #[test]
    fn single_action_kernel_is_transition() {
        let spec = GarnetSpec { n_states: 4, n_actions: 1, branching: 2, reward_scale: 1.0, seed: 2 };
        let mdp = sample_garnet(&spec, 0.9, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let k = policy_kernel(&mdp, &PolicyTable::uniform(4, 1)).unwrap();
        assert_eq!(k, mdp.transition_matrix(0));
    }

    #[test]
    fn stationary_examples() {
        let d = stationary_distribution(&DMatrix::identity(1, 1), STATIONARY_TOL).unwrap();
        assert_eq!(d.as_slice(), &[1.0]);
        let ds = DMatrix::from_row_slice(3, 3, &[0.2, 0.5, 0.3, 0.5, 0.3, 0.2, 0.3, 0.2, 0.5]);
        let d = stationary_distribution(&ds, STATIONARY_TOL).unwrap();
        assert!(d.iter().all(|x| (x - 1.0 / 3.0).abs() < 1e-12));
        let k = random_kernel(6, 6);
        let d = stationary_distribution(&k, STATIONARY_TOL).unwrap();
        let oracle = null_space_oracle(&k);
        let l1: f64 = d.iter().zip(&oracle).map(|(a, b)| (a - b).abs()).sum();
        assert!(l1 <= 1e-10, "l1 = {l1}");
        assert!(stationarity_gap(&k, &d) <= STATIONARY_TOL);
    }

    #[test]
    fn periodic_chain_falls_back_to_direct_solve() {
        let swap = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        let d = stationary_distribution(&swap, STATIONARY_TOL).unwrap();
        assert!((d[0] - 0.5).abs() < 1e-12);
        assert_eq!(mixing_diagnostic(&swap, 64), MixingTime::ExceedsCap(64));
    }

    #[test]
    fn reducible_chain_is_an_error() {
        assert_eq!(closed_class_count(&DMatrix::identity(3, 3)), 3);
        let two_blocks = DMatrix::from_row_slice(4, 4, &[
            0.5, 0.5, 0.0, 0.0, 0.5, 0.5, 0.0, 0.0, 0.0, 0.0, 0.1, 0.9, 0.0, 0.0, 0.9, 0.1,
        ]);
        assert_eq!(closed_class_count(&two_blocks), 2);
        assert!(stationary_distribution(&two_blocks, STATIONARY_TOL).is_err());
        let k = DMatrix::<f64>::identity(3, 3);
        assert!(matches!(stationary_distribution(&k, STATIONARY_TOL), Err(Error::NotErgodic(_))));
        assert!(stationary_distribution(&DMatrix::from_row_slice(1, 1, &[0.5]), 1e-12).is_err());
    }

    #[test]
    fn transient_states_are_fine() {
        let k = DMatrix::from_row_slice(3, 3, &[0.5, 0.5, 0.0, 0.0, 0.3, 0.7, 0.0, 0.6, 0.4]);
        assert_eq!(closed_class_count(&k), 1);
        let d = stationary_distribution(&k, STATIONARY_TOL).unwrap();
        assert!(d[0].abs() < 1e-12);
    }

    #[test]
    fn sampling_small_cases() {
        let mdp = TabularMdp::new(1, 1, vec![1.0], DMatrix::zeros(1, 1), 0.9).unwrap();
        let traj = sample_chain(&mdp, &PolicyTable::uniform(1, 1), 1, 5, 0).unwrap();
        assert_eq!((traj.states.clone(), traj.actions.clone()), (vec![0], vec![0]));

        let (mdp, policy) = random_instance(3, 5, 3);
        let a = sample_chain(&mdp, &policy, 500, 77, 10).unwrap();
        let b = sample_chain(&mdp, &policy, 500, 77, 10).unwrap();
        let c = sample_chain(&mdp, &policy, 500, 78, 10).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.to_csv(), b.to_csv());
        assert_ne!(a.states, c.states);
        assert_eq!(a.source_policy_hash, policy.content_hash());
        assert!(sample_chain(&mdp, &policy, 0, 1, 0).is_err());
    }

    #[test]
    fn zero_probability_actions_are_never_drawn() {
        let (mdp, _) = random_instance(4, 4, 3);
        let mut probs = DMatrix::from_element(4, 3, 0.5);
        probs.column_mut(1).fill(0.0);
        let policy = PolicyTable::new(probs, 0.0).unwrap();
        let traj = sample_chain(&mdp, &policy, 20_000, 1, 0).unwrap();
        assert!(traj.actions.iter().all(|&a| a != 1));
    }

    #[test]
    fn long_chain_matches_stationary_occupancy() {
        let (mdp, _) = random_instance(5, 5, 3);
        let expert = solve_soft(&mdp, 1.0).unwrap().policy;
        let rho = expert_occupancy(&mdp, &expert).unwrap();
        let mut prev = f64::INFINITY;
        for (i, n) in [1_000usize, 10_000, 100_000, 1_000_000].into_iter().enumerate() {
            // average over a few seeds to make the trend robust
            let mut l1 = 0.0;
            for seed in 0..4 {
                let traj = sample_chain(&mdp, &expert, n, 100 * i as u64 + seed, 0).unwrap();
                let emp = empirical_occupancy(&traj, 5, 3).unwrap();
                l1 += (emp.joint - &rho.joint).lp_norm(1) / 4.0;
            }
            assert!(l1 < prev, "L1 {l1} did not decrease at n = {n}");
            prev = l1;
        }
        assert!(prev <= 5e-3, "L1 at 1e6 = {prev}");
    }

    #[test]
    fn occupancy_examples() {
        let t = Trajectory::new(vec![0, 0, 0], vec![0, 0, 0], 0, 0, String::new()).unwrap();
        let occ = empirical_occupancy(&t, 2, 2).unwrap();
        assert_eq!(occ.joint[(0, 0)], 1.0);
        assert_eq!(occ.joint.sum(), 1.0);
        let t = Trajectory::new(vec![0, 1], vec![1, 0], 0, 0, String::new()).unwrap();
        let occ = empirical_occupancy(&t, 2, 2).unwrap();
        assert_eq!((occ.joint[(0, 1)], occ.joint[(1, 0)]), (0.5, 0.5));
        assert_eq!(occ.state_marginal.as_slice(), &[0.5, 0.5]);
        assert!(empirical_occupancy(&t, 1, 2).is_err());
        assert!(OccupancyMeasure::from_joint(occ.joint.clone()).is_ok());
        assert!(Trajectory::new(vec![], vec![], 0, 0, String::new()).is_err());
        assert!(Trajectory::new(vec![1], vec![], 0, 0, String::new()).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let (mdp, policy) = random_instance(8, 4, 2);
        let traj = sample_chain(&mdp, &policy, 50, 3, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (csv, side) = (dir.path().join("t.csv"), dir.path().join("t.json"));
        traj.write(&csv, &side).unwrap();
        let text = fs::read_to_string(&csv).unwrap();
        assert!(text.starts_with("t,state,action\n1,"));
        assert_eq!(Trajectory::read(&csv, &side).unwrap(), traj);
        let bad = TrajectorySidecar { n: 49, ..traj.sidecar() };
        assert!(Trajectory::from_csv(&text, &bad).is_err());
        assert!(Trajectory::from_csv("t,s,a\n", &traj.sidecar()).is_err());
    }

    #[test]
    fn mixing_examples() {
        let same_rows = DMatrix::from_row_slice(2, 2, &[0.3, 0.7, 0.3, 0.7]);
        assert_eq!(mixing_diagnostic(&same_rows, 100), MixingTime::Finite(1));
        assert_eq!(mixing_diagnostic(&DMatrix::identity(2, 2), 100), MixingTime::ExceedsCap(100));
    }

    #[test]
    fn mixing_matches_direct_scan() {
        for seed in 0..5 {
            // lazy kernel: mostly stay put so mixing takes many steps
            let k = random_kernel(seed, 6) * 0.05 + DMatrix::identity(6, 6) * 0.95;
            let d = stationary_distribution(&k, STATIONARY_TOL).unwrap();
            let mut power = k.clone();
            let mut scan = 1;
            while worst_case_tv(&power, &d) > 0.25 {
                power = &power * &k;
                scan += 1;
            }
            assert!(scan > 4);
            assert_eq!(mixing_diagnostic(&k, MIXING_CAP), MixingTime::Finite(scan));
            let capped = mixing_diagnostic(&k, scan - 1);
            assert_eq!(capped, MixingTime::ExceedsCap(scan - 1));
        }
    }
}
