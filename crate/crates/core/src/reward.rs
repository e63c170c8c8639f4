//! Least-squares reward reconstruction from a policy.
//!
//! With `r_a(s) = λ log π(a|s)` and `B_a = I − γP_a`, every reward that makes
//! `π` soft-optimal has the form `R_f = r + Bf`. The canonical
//! representative minimizes `E_ρ[R_f²]`, which leads to the normal equations
//! `(Σ_a B_aᵀ W_a B_a) f = −Σ_a B_aᵀ W_a r_a` with `W_a = diag(ρ(·, a))`.
//! Nothing here materializes an `|S||A| × |S||A|` projector.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::Serialize;

use crate::chain::OccupancyMeasure;
use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::mdp::{PolicyTable, TabularMdp};
use crate::numeric::{self, ensure_finite, spd_condition_number};

/// Condition number above which the normal equations are refused.
pub const CONDITION_THRESHOLD: f64 = 1e12;
/// Largest accepted normwise backward error of a linear solve.
pub const RESIDUAL_TOL: f64 = 1e-10;
/// Uniform mass mixed into an occupancy to make it strictly positive.
pub const POSITIVITY_MIX: f64 = 1e-6;

/// A strictly positive probability measure `ρ(s, a)` used to weight the
/// least-squares objective.
#[derive(Debug, Clone, PartialEq)]
pub struct Weighting {
    rho: DMatrix<f64>,
    w_min: f64,
    w_max: f64,
}

impl Weighting {
    pub fn new(rho: DMatrix<f64>) -> Result<Self> {
        ensure_finite(&rho, "weighting")?;
        let w_min = rho.min();
        let w_max = rho.max();
        if !(w_min > 0.0) {
            return Err(Error::InvalidArgument(format!("weighting must be strictly positive, min is {w_min}")));
        }
        let total = rho.sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidArgument(format!("weighting sums to {total}")));
        }
        Ok(Self { rho, w_min, w_max })
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        let w = 1.0 / (n_states * n_actions) as f64;
        Self { rho: DMatrix::from_element(n_states, n_actions, w), w_min: w, w_max: w }
    }

    /// `(1 − ε) ρ + ε · uniform` with `ε = POSITIVITY_MIX`, renormalized.
    pub fn from_occupancy(occ: &OccupancyMeasure) -> Result<Self> {
        let (n, m) = occ.joint.shape();
        let eps = POSITIVITY_MIX;
        let mut rho = occ.joint.map(|x| (1.0 - eps) * x + eps / (n * m) as f64);
        let total = rho.sum();
        rho /= total;
        Self::new(rho)
    }

    pub fn rho(&self) -> &DMatrix<f64> {
        &self.rho
    }

    pub fn w_min(&self) -> f64 {
        self.w_min
    }

    pub fn w_max(&self) -> f64 {
        self.w_max
    }

    pub fn kappa(&self) -> f64 {
        self.w_max / self.w_min
    }

    /// `⟨g, h⟩_ρ = Σ ρ g h`.
    pub fn inner(&self, g: &DMatrix<f64>, h: &DMatrix<f64>) -> f64 {
        self.rho.iter().zip(g.iter()).zip(h.iter()).map(|((w, x), y)| w * x * y).sum()
    }

    pub fn norm(&self, g: &DMatrix<f64>) -> f64 {
        self.inner(g, g).max(0.0).sqrt()
    }
}

/// Solution of the potential normal equations plus diagnostics.
#[derive(Debug, Clone, Serialize)]
pub struct PotentialSolve {
    #[serde(serialize_with = "ser_vec")]
    pub potential: DVector<f64>,
    pub ridge: f64,
    pub condition_number: f64,
    /// `‖Hf − b‖ / (‖H‖‖f‖ + ‖b‖)`.
    pub backward_error: f64,
}

/// Gaussian posterior over the potential and the induced reward.
#[derive(Debug, Clone)]
pub struct RewardPosterior {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
    pub reward_mean: DMatrix<f64>,
    /// `B_a P⁻¹ B_aᵀ`, one `|S| × |S|` block per action.
    pub reward_covariance: Vec<DMatrix<f64>>,
}

impl Serialize for RewardPosterior {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        #[derive(Serialize)]
        struct View {
            mean: Vec<f64>,
            covariance: Vec<Vec<f64>>,
            reward_mean: Vec<Vec<f64>>,
            reward_covariance: Vec<Vec<Vec<f64>>>,
        }
        View {
            mean: self.mean.iter().copied().collect(),
            covariance: numeric::to_rows(&self.covariance),
            reward_mean: numeric::to_rows(&self.reward_mean),
            reward_covariance: self.reward_covariance.iter().map(numeric::to_rows).collect(),
        }
        .serialize(serializer)
    }
}

/// A reconstructed reward `R̂ = r̂ + B f̂` with its ingredients.
#[derive(Debug, Clone)]
pub struct RewardFit {
    pub reward: DMatrix<f64>,
    pub potential: DVector<f64>,
    pub advantage_proxy: DMatrix<f64>,
    pub ridge: f64,
    pub condition_number: f64,
    pub posterior: Option<RewardPosterior>,
}

impl Serialize for RewardFit {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        #[derive(Serialize)]
        struct View<'a> {
            reward: Vec<Vec<f64>>,
            potential: Vec<f64>,
            ridge: f64,
            condition_number: f64,
            #[serde(skip_serializing_if = "Option::is_none")]
            posterior: Option<&'a RewardPosterior>,
        }
        View {
            reward: numeric::to_rows(&self.reward),
            potential: self.potential.iter().copied().collect(),
            ridge: self.ridge,
            condition_number: self.condition_number,
            posterior: self.posterior.as_ref(),
        }
        .serialize(serializer)
    }
}

fn ser_vec<S: serde::Serializer>(v: &DVector<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.collect_seq(v.iter())
}

/// `r̂(s, a) = λ log π(a|s)`.
pub fn advantage_proxy(policy: &PolicyTable, lambda: f64) -> Result<DMatrix<f64>> {
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(Error::InvalidArgument(format!("temperature must be positive and finite, got {lambda}")));
    }
    Ok(policy.log_probs()? * lambda)
}

/// `(B_a f)(s) = f(s) − γ Σ_{s'} P(s'|s, a) f(s')` for every pair.
pub fn bellman_residual_operator(mdp: &TabularMdp, f: &DVector<f64>) -> Result<DMatrix<f64>> {
    if f.len() != mdp.n_states() {
        return Err(Error::Dimension(format!("potential has length {}, expected {}", f.len(), mdp.n_states())));
    }
    let g = mdp.discount();
    Ok(DMatrix::from_fn(mdp.n_states(), mdp.n_actions(), |s, a| f[s] - g * mdp.expected_next(f, s, a)))
}

/// Dense `B_a = I − γ P_a`.
fn b_matrix(mdp: &TabularMdp, a: usize) -> DMatrix<f64> {
    let g = mdp.discount();
    DMatrix::from_fn(mdp.n_states(), mdp.n_states(), |s, t| {
        let id = if s == t { 1.0 } else { 0.0 };
        id - g * mdp.next_state_probs(s, a)[t]
    })
}

fn check_shapes(mdp: &TabularMdp, r_hat: &DMatrix<f64>, w: &Weighting) -> Result<()> {
    let shape = (mdp.n_states(), mdp.n_actions());
    if r_hat.shape() != shape || w.rho.shape() != shape {
        return Err(Error::Dimension(format!(
            "advantage proxy {:?} and weighting {:?} must both be {shape:?}",
            r_hat.shape(),
            w.rho.shape()
        )));
    }
    ensure_finite(r_hat, "advantage proxy")
}

/// `(Σ_a B_aᵀ W_a B_a, −Σ_a B_aᵀ W_a r_a)`, reduced over actions.
fn normal_system(mode: Execution, mdp: &TabularMdp, r_hat: &DMatrix<f64>, w: &Weighting) -> (DMatrix<f64>, DVector<f64>) {
    let n = mdp.n_states();
    let parts = exec::map_range(mode, mdp.n_actions(), |a| {
        let b = b_matrix(mdp, a);
        let mut wb = b.clone();
        for (s, mut row) in wb.row_iter_mut().enumerate() {
            row *= w.rho[(s, a)];
        }
        let h = b.tr_mul(&wb);
        let wr = DVector::from_fn(n, |s, _| w.rho[(s, a)] * r_hat[(s, a)]);
        let rhs = -b.tr_mul(&wr);
        (h, rhs)
    });
    let mut h = DMatrix::zeros(n, n);
    let mut rhs = DVector::zeros(n);
    for (ha, ra) in parts {
        h += ha;
        rhs += ra;
    }
    // exact symmetry for the factorization and the eigen-solver
    let h = (&h + h.transpose()) * 0.5;
    (h, rhs)
}

/// Cholesky factor of a symmetric system after the conditioning check.
fn factor(h: &DMatrix<f64>) -> Result<(Cholesky<f64, Dyn>, f64)> {
    let condition = spd_condition_number(h);
    if !(condition <= CONDITION_THRESHOLD) {
        return Err(Error::IllConditioned { condition, threshold: CONDITION_THRESHOLD });
    }
    let chol = h
        .clone()
        .cholesky()
        .ok_or(Error::IllConditioned { condition, threshold: CONDITION_THRESHOLD })?;
    Ok((chol, condition))
}

fn backward_error(h: &DMatrix<f64>, x: &DVector<f64>, b: &DVector<f64>) -> f64 {
    let denom = h.norm() * x.norm() + b.norm();
    if denom == 0.0 {
        return 0.0;
    }
    (h * x - b).norm() / denom
}

/// Solve `(Σ_a B_aᵀ W_a B_a + ηI) f = −Σ_a B_aᵀ W_a r̂_a`.
pub fn solve_potential(mdp: &TabularMdp, r_hat: &DMatrix<f64>, w: &Weighting, ridge: f64) -> Result<PotentialSolve> {
    solve_potential_with(Execution::default(), mdp, r_hat, w, ridge)
}

/// [`solve_potential`] with an explicit execution mode for the assembly.
pub fn solve_potential_with(
    mode: Execution,
    mdp: &TabularMdp,
    r_hat: &DMatrix<f64>,
    w: &Weighting,
    ridge: f64,
) -> Result<PotentialSolve> {
    check_shapes(mdp, r_hat, w)?;
    if !(ridge >= 0.0) || !ridge.is_finite() {
        return Err(Error::InvalidArgument(format!("ridge must be a nonnegative finite number, got {ridge}")));
    }
    let (mut h, rhs) = normal_system(mode, mdp, r_hat, w);
    for i in 0..h.nrows() {
        h[(i, i)] += ridge;
    }
    let (chol, condition_number) = factor(&h)?;
    let mut potential = chol.solve(&rhs);
    // one step of iterative refinement
    potential += chol.solve(&(&rhs - &h * &potential));
    let backward = backward_error(&h, &potential, &rhs);
    if !(backward <= RESIDUAL_TOL) {
        return Err(Error::IllConditioned { condition: condition_number, threshold: CONDITION_THRESHOLD });
    }
    Ok(PotentialSolve { potential, ridge, condition_number, backward_error: backward })
}

/// `R̂ = r̂ + B f̂`.
pub fn reconstruct_reward(mdp: &TabularMdp, r_hat: &DMatrix<f64>, solve: &PotentialSolve) -> Result<RewardFit> {
    let bf = bellman_residual_operator(mdp, &solve.potential)?;
    if r_hat.shape() != bf.shape() {
        return Err(Error::Dimension(format!("advantage proxy is {:?}, expected {:?}", r_hat.shape(), bf.shape())));
    }
    Ok(RewardFit {
        reward: r_hat + bf,
        potential: solve.potential.clone(),
        advantage_proxy: r_hat.clone(),
        ridge: solve.ridge,
        condition_number: solve.condition_number,
        posterior: None,
    })
}

/// Full reconstruction from a policy: proxy, potential solve, reward.
pub fn fit_reward(
    mode: Execution,
    mdp: &TabularMdp,
    policy: &PolicyTable,
    lambda: f64,
    w: &Weighting,
    ridge: f64,
) -> Result<RewardFit> {
    let r_hat = advantage_proxy(policy, lambda)?;
    let solve = solve_potential_with(mode, mdp, &r_hat, w, ridge)?;
    reconstruct_reward(mdp, &r_hat, &solve)
}

/// The least-squares reward `R*_LS` of `policy`: the unique member of its
/// shaping class with minimal `E_ρ[R²]`.
pub fn canonical_ls_reward(mdp: &TabularMdp, policy: &PolicyTable, lambda: f64, w: &Weighting) -> Result<RewardFit> {
    fit_reward(Execution::default(), mdp, policy, lambda, w, 0.0)
}

/// Result of the basis-projection problem.
#[derive(Debug, Clone)]
pub struct BasisProjection {
    /// Coefficients of the potential in the state features.
    pub theta: DVector<f64>,
    /// `G⁻¹ b(f)` for the fitted potential.
    pub alpha: DVector<f64>,
    pub potential: DVector<f64>,
    /// `R_f = r̂ + B f` at the fitted potential.
    pub reward: DMatrix<f64>,
    /// `Π_V R_f`.
    pub projected: DMatrix<f64>,
    /// `‖(I − Π_V) R_f‖_{L²(ρ)}`.
    pub residual: f64,
    /// Numerical rank of the reduced quadratic form.
    pub rank: usize,
}

/// Orthogonal projection onto `span{ψ_1..ψ_K}` in `L²(ρ)`.
struct Projector<'a> {
    basis: &'a [DMatrix<f64>],
    w: &'a Weighting,
    gram: Option<Cholesky<f64, Dyn>>,
}

impl<'a> Projector<'a> {
    fn new(basis: &'a [DMatrix<f64>], w: &'a Weighting) -> Result<Self> {
        let k = basis.len();
        if k == 0 {
            return Ok(Self { basis, w, gram: None });
        }
        for (i, psi) in basis.iter().enumerate() {
            if psi.shape() != w.rho.shape() {
                return Err(Error::Dimension(format!("basis function {i} is {:?}", psi.shape())));
            }
            ensure_finite(psi, "basis function")?;
        }
        let dependent = dependent_indices(basis, w);
        if !dependent.is_empty() {
            return Err(Error::SingularGram { dependent });
        }
        let gram = DMatrix::from_fn(k, k, |i, j| w.inner(&basis[i], &basis[j]));
        let chol = gram.cholesky().ok_or(Error::SingularGram { dependent: vec![] })?;
        Ok(Self { basis, w, gram: Some(chol) })
    }

    /// `α = G⁻¹ b(h)` with `b_i = ⟨ψ_i, h⟩_ρ`.
    fn coefficients(&self, h: &DMatrix<f64>) -> DVector<f64> {
        match &self.gram {
            None => DVector::zeros(0),
            Some(chol) => chol.solve(&DVector::from_iterator(
                self.basis.len(),
                self.basis.iter().map(|psi| self.w.inner(psi, h)),
            )),
        }
    }

    fn combine(&self, alpha: &DVector<f64>, shape: (usize, usize)) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(shape.0, shape.1);
        for (psi, c) in self.basis.iter().zip(alpha.iter()) {
            out += psi * *c;
        }
        out
    }

    /// `(I − Π_V) h`.
    fn residual(&self, h: &DMatrix<f64>) -> DMatrix<f64> {
        h - self.combine(&self.coefficients(h), h.shape())
    }
}

/// Indices of basis functions lying (numerically) in the span of earlier
/// ones, found by modified Gram-Schmidt in `L²(ρ)`.
fn dependent_indices(basis: &[DMatrix<f64>], w: &Weighting) -> Vec<usize> {
    let mut accepted: Vec<DMatrix<f64>> = Vec::new();
    let mut dependent = Vec::new();
    for (i, psi) in basis.iter().enumerate() {
        let scale = w.norm(psi);
        let mut v = psi.clone();
        for q in &accepted {
            let c = w.inner(q, &v);
            v -= q * c;
        }
        let len = w.norm(&v);
        if scale == 0.0 || len <= 1e-10 * scale {
            dependent.push(i);
        } else {
            accepted.push(v / len);
        }
    }
    dependent
}

/// Fit a parametric potential `f = Φθ` against the residual of `r̂ + Bf`
/// after projecting out `span{ψ_k}`.
///
/// `features` is `|S| × p`. The reduced normal equations `Hθ = −g` are
/// solved by a minimal-norm pseudoinverse, since `H` is singular whenever
/// the basis absorbs part of `range(B)`.
pub fn project_basis(
    mdp: &TabularMdp,
    r_hat: &DMatrix<f64>,
    w: &Weighting,
    basis: &[DMatrix<f64>],
    features: &DMatrix<f64>,
) -> Result<BasisProjection> {
    check_shapes(mdp, r_hat, w)?;
    if features.nrows() != mdp.n_states() {
        return Err(Error::Dimension(format!("features have {} rows, expected {}", features.nrows(), mdp.n_states())));
    }
    ensure_finite(features, "features")?;
    let proj = Projector::new(basis, w)?;
    let p = features.ncols();
    let b_cols: Vec<DMatrix<f64>> = (0..p)
        .map(|j| bellman_residual_operator(mdp, &features.column(j).into_owned()))
        .collect::<Result<_>>()?;
    // rank decisions are relative to the unprojected design
    let scale = b_cols.iter().map(|m| w.inner(m, m)).fold(0.0, f64::max);
    let t_cols: Vec<DMatrix<f64>> = b_cols.iter().map(|m| proj.residual(m)).collect();
    let c = proj.residual(r_hat);
    let h = DMatrix::from_fn(p, p, |i, j| w.inner(&t_cols[i], &t_cols[j]));
    let g = DVector::from_fn(p, |i, _| w.inner(&t_cols[i], &c));
    let (theta, rank) = pseudo_solve(&h, &(-g), scale);
    let potential = features * &theta;
    let reward = r_hat + bellman_residual_operator(mdp, &potential)?;
    let alpha = proj.coefficients(&reward);
    let projected = proj.combine(&alpha, reward.shape());
    let residual = w.norm(&(&reward - &projected));
    Ok(BasisProjection { theta, alpha, potential, reward, projected, residual, rank })
}

/// Minimal-norm solution of a symmetric PSD system via its eigendecomposition.
/// Eigenvalues below `1e-12 · scale` count as zero.
fn pseudo_solve(h: &DMatrix<f64>, b: &DVector<f64>, scale: f64) -> (DVector<f64>, usize) {
    if h.nrows() == 0 {
        return (DVector::zeros(0), 0);
    }
    let eig = ((h + h.transpose()) * 0.5).symmetric_eigen();
    let top = eig.eigenvalues.amax().max(scale);
    let cutoff = 1e-12 * top;
    let coords = eig.eigenvectors.tr_mul(b);
    let mut scaled = DVector::zeros(h.nrows());
    let mut rank = 0;
    for i in 0..h.nrows() {
        let lam = eig.eigenvalues[i];
        if top > 0.0 && lam > cutoff {
            scaled[i] = coords[i] / lam;
            rank += 1;
        }
    }
    (&eig.eigenvectors * scaled, rank)
}

/// Gaussian posterior of the potential under prior `N(m, Λ⁻¹)` and the
/// likelihood `r̂ | f ~ N(−Bf, W⁻¹)`.
pub fn bayesian_posterior(
    mdp: &TabularMdp,
    r_hat: &DMatrix<f64>,
    w: &Weighting,
    prior_mean: &DVector<f64>,
    prior_precision: &DMatrix<f64>,
) -> Result<RewardPosterior> {
    check_shapes(mdp, r_hat, w)?;
    let n = mdp.n_states();
    if prior_mean.len() != n || prior_precision.shape() != (n, n) {
        return Err(Error::Dimension(format!("prior must live on {n} states")));
    }
    ensure_finite(prior_precision, "prior precision")?;
    if (prior_precision - prior_precision.transpose()).amax() > 1e-10 {
        return Err(Error::InvalidArgument("prior precision is not symmetric".into()));
    }
    let prior_precision = (prior_precision + prior_precision.transpose()) * 0.5;
    let min_eig = prior_precision.clone().symmetric_eigenvalues().min();
    if min_eig < -1e-8 {
        return Err(Error::InvalidArgument(format!("prior precision has eigenvalue {min_eig:e} < 0")));
    }
    let (h, rhs) = normal_system(Execution::default(), mdp, r_hat, w);
    let precision = h + &prior_precision;
    let rhs = rhs + &prior_precision * prior_mean;
    let (chol, _) = factor(&precision)?;
    let mut mean = chol.solve(&rhs);
    mean += chol.solve(&(&rhs - &precision * &mean));
    let cov = chol.inverse();
    let covariance = (&cov + cov.transpose()) * 0.5;
    let reward_mean = r_hat + bellman_residual_operator(mdp, &mean)?;
    let reward_covariance = (0..mdp.n_actions())
        .map(|a| {
            let b = b_matrix(mdp, a);
            let rc = &b * &covariance * b.transpose();
            (&rc + rc.transpose()) * 0.5
        })
        .collect();
    Ok(RewardPosterior { mean, covariance, reward_mean, reward_covariance })
}

/// Reconstruct with the posterior attached; the point estimate is the
/// posterior mean.
pub fn fit_with_posterior(
    mdp: &TabularMdp,
    r_hat: &DMatrix<f64>,
    w: &Weighting,
    prior_mean: &DVector<f64>,
    prior_precision: &DMatrix<f64>,
) -> Result<RewardFit> {
    let posterior = bayesian_posterior(mdp, r_hat, w, prior_mean, prior_precision)?;
    let (h, _) = normal_system(Execution::default(), mdp, r_hat, w);
    let condition_number = spd_condition_number(&(h + prior_precision));
    Ok(RewardFit {
        reward: posterior.reward_mean.clone(),
        potential: posterior.mean.clone(),
        advantage_proxy: r_hat.clone(),
        ridge: 0.0,
        condition_number,
        posterior: Some(posterior),
    })
}
