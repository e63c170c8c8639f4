//! Garnet random MDPs and random distributions for tests and sweeps.

use nalgebra::DMatrix;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::chain::{mixing_diagnostic, policy_kernel, stationary_distribution, MixingTime};
use crate::error::{Error, Result};
use crate::mdp::{solve_soft, TabularMdp};

/// Attempts before [`generate_garnet`] gives up on finding an ergodic instance.
pub const GARNET_ATTEMPTS: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GarnetSpec {
    pub n_states: usize,
    pub n_actions: usize,
    /// Number of reachable next states per `(s, a)`.
    pub branching: usize,
    /// Rewards are i.i.d. uniform on `[-reward_scale, reward_scale]`.
    pub reward_scale: f64,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct GarnetInstance {
    pub mdp: TabularMdp,
    /// Sub-seed stream that produced the accepted instance (0 = first try).
    pub attempt: usize,
    pub mixing: MixingTime,
}

/// Draw one Garnet MDP from `rng` without any ergodicity check.
///
/// Each `(s, a)` moves to `branching` distinct states chosen uniformly, with
/// Dirichlet(1) weights.
pub fn sample_garnet<R: Rng + ?Sized>(spec: &GarnetSpec, gamma: f64, rng: &mut R) -> Result<TabularMdp> {
    let (n, m) = (spec.n_states, spec.n_actions);
    if n == 0 || m == 0 {
        return Err(Error::InvalidArgument("garnet needs at least one state and action".into()));
    }
    if spec.branching == 0 || spec.branching > n {
        return Err(Error::InvalidArgument(format!("branching {} not in [1, {n}]", spec.branching)));
    }
    if !(spec.reward_scale >= 0.0) {
        return Err(Error::InvalidArgument("reward_scale must be nonnegative".into()));
    }
    let mut transition = vec![0.0; n * m * n];
    for row in transition.chunks_mut(n) {
        let targets = index::sample(rng, n, spec.branching);
        let weights = dirichlet(spec.branching, 1.0, rng);
        for (t, w) in targets.iter().zip(weights) {
            row[t] = w;
        }
    }
    let scale = spec.reward_scale;
    let reward = DMatrix::from_fn(n, m, |_, _| if scale > 0.0 { rng.random_range(-scale..=scale) } else { 0.0 });
    TabularMdp::new(n, m, transition, reward, gamma)
}

/// Garnet instance whose soft-optimal expert (at temperature `lambda`)
/// induces an ergodic, mixing state chain.
///
/// Attempt `k` uses ChaCha8 stream `k` of `spec.seed`, so the result is a
/// pure function of the inputs.
pub fn generate_garnet(spec: &GarnetSpec, gamma: f64, lambda: f64) -> Result<GarnetInstance> {
    for attempt in 0..GARNET_ATTEMPTS {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(attempt as u64);
        let mdp = sample_garnet(spec, gamma, &mut rng)?;
        let expert = solve_soft(&mdp, lambda)?;
        let kernel = policy_kernel(&mdp, &expert.policy)?;
        if stationary_distribution(&kernel, crate::chain::STATIONARY_TOL).is_err() {
            continue;
        }
        let mixing = mixing_diagnostic(&kernel, crate::chain::MIXING_CAP);
        if let MixingTime::Finite(_) = mixing {
            return Ok(GarnetInstance { mdp, attempt, mixing });
        }
    }
    Err(Error::GeneratorExhausted { attempts: GARNET_ATTEMPTS })
}

/// Symmetric Dirichlet draw of dimension `k`.
pub fn dirichlet<R: Rng + ?Sized>(k: usize, concentration: f64, rng: &mut R) -> Vec<f64> {
    let gamma = Gamma::new(concentration, 1.0).expect("positive concentration");
    loop {
        let mut w: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
        let total: f64 = w.iter().sum();
        if total > 0.0 && total.is_finite() {
            w.iter_mut().for_each(|x| *x /= total);
            // absorb rounding so the row sums to one as exactly as possible
            let drift: f64 = 1.0 - w.iter().sum::<f64>();
            if let Some(max) = w.iter_mut().max_by(|a, b| a.total_cmp(b)) {
                *max += drift;
            }
            return w;
        }
    }
}

/// Random policy matrix with i.i.d. Dirichlet rows.
pub fn random_policy_probs<R: Rng + ?Sized>(n_states: usize, n_actions: usize, concentration: f64, rng: &mut R) -> DMatrix<f64> {
    let mut probs = DMatrix::zeros(n_states, n_actions);
    for s in 0..n_states {
        for (a, p) in dirichlet(n_actions, concentration, rng).into_iter().enumerate() {
            probs[(s, a)] = p;
        }
    }
    probs
}

/// Seed for replicate `stream` of `base`, via the SplitMix64 finalizer.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Convenience: a fresh ChaCha8 generator for `(seed, stream)`.
pub fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
