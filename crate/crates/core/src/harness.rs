//! Configuration-driven sweeps over sample size, seed and ridge.
//!
//! A run solves the expert, then for every `(N, seed)` cell samples a chain,
//! fits the policy, reconstructs the reward for each ridge value and compares
//! against `π*` and the least-squares reward of `π*` under the same
//! weighting. Output goes to `{output_dir}/{run_id}/`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::chain::{empirical_occupancy, expert_occupancy, mixing_diagnostic, policy_kernel, sample_chain, MixingTime, MIXING_CAP};
use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::fit::{excess_kl, fit_linear_softmax, fit_tabular_detailed, FeatureMap, FitConfig, Optimizer};
use crate::garnet::{derive_seed, generate_garnet, GarnetSpec};
use crate::mdp::{solve_soft, PolicyTable, SoftSolution, TabularMdp};
use crate::metrics::{fit_rate, q_span, weighted_reward_error, RateFit};
use crate::reward::{canonical_ls_reward, fit_reward, Weighting};

pub const SCHEMA_VERSION: u32 = 1;
pub const CSV_HEADER: &str = "n,seed,excess_kl,reward_l2,floor_bound_active,cond_number,eta";
const DEFAULT_GAMMA: f64 = 0.9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InstanceSpec {
    /// Path to an MDP JSON file.
    File(PathBuf),
    Garnet(GarnetSpec),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightingKind {
    /// Occupancy of the sampled trajectory, made strictly positive.
    #[default]
    Empirical,
    Uniform,
    /// Stationary occupancy of the expert, made strictly positive.
    ExpertOccupancy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub instance: InstanceSpec,
    pub lambda: f64,
    /// Discount; overrides the file's value when the instance is a file.
    #[serde(default)]
    pub gamma: Option<f64>,
    pub n_grid: Vec<usize>,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub fit: FitConfig,
    #[serde(default)]
    pub weighting: WeightingKind,
    #[serde(default = "default_ridge_grid")]
    pub ridge_grid: Vec<f64>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Skip estimation and feed `π*` itself to the reward stage.
    #[serde(default)]
    pub use_exact_expert: bool,
    #[serde(default)]
    pub burn_in: usize,
}

fn default_ridge_grid() -> Vec<f64> {
    vec![0.0]
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config(format!("lambda must be positive, got {}", self.lambda)));
        }
        if self.n_grid.is_empty() || self.n_grid[0] == 0 || self.n_grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("n_grid must be nonempty, positive and strictly increasing".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must be nonempty".into()));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return Err(Error::Config("seeds must be distinct".into()));
        }
        if self.ridge_grid.is_empty() || self.ridge_grid.iter().any(|e| !(*e >= 0.0) || !e.is_finite()) {
            return Err(Error::Config("ridge_grid must be nonempty with finite eta >= 0".into()));
        }
        if let Some(g) = self.gamma {
            if !(g > 0.0 && g < 1.0) {
                return Err(Error::Config(format!("gamma {g} not in (0, 1)")));
            }
        }
        Ok(())
    }

    /// Shift every seed by `offset` (wrapping).
    pub fn with_seed_offset(mut self, offset: u64) -> Self {
        for s in &mut self.seeds {
            *s = s.wrapping_add(offset);
        }
        self
    }

    /// Config with every default written out, as echoed into reports.
    pub fn resolved(&self, n_actions: usize) -> Self {
        Self { fit: self.fit.resolved(n_actions), gamma: Some(self.gamma.unwrap_or(DEFAULT_GAMMA)), ..self.clone() }
    }

    /// First 16 hex digits of the SHA-256 of the compact config JSON, with
    /// `output_dir` blanked so the id does not depend on where runs land.
    pub fn run_id(&self) -> String {
        let keyed = Self { output_dir: PathBuf::new(), ..self.clone() };
        let bytes = serde_json::to_vec(&keyed).expect("config serializes");
        hex::encode(&Sha256::digest(&bytes)[..8])
    }
}

/// Execution controls that do not change results.
#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    pub execution: Execution,
    /// Worker threads; 0 means the library default.
    pub jobs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Row {
    pub n: usize,
    pub seed: u64,
    pub excess_kl: f64,
    pub reward_l2: f64,
    pub floor_bound_active: bool,
    pub cond_number: f64,
    pub eta: f64,
}

impl Row {
    fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.n, self.seed, self.excess_kl, self.reward_l2, self.floor_bound_active, self.cond_number, self.eta
        )
    }
}

pub fn rows_to_csv(rows: &[Row]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(out, "{}", r.csv_line());
    }
    out
}

#[derive(Debug, Clone, Serialize)]
pub struct InstanceSummary {
    pub n_states: usize,
    pub n_actions: usize,
    pub gamma: f64,
    /// Generator attempt that produced the instance, for garnets.
    pub attempt: Option<usize>,
    pub mixing_time: MixingTime,
    pub expert_q_span: f64,
    pub expert_min_prob: f64,
    pub floor: f64,
    /// The fitted class cannot represent `π*` because `min π* < floor`.
    pub floor_excludes_expert: bool,
    pub soft_vi_residual: f64,
    pub soft_vi_iterations: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct RateSummary {
    pub eta: f64,
    /// `log mean excess KL` against `log N`.
    pub excess_kl: Option<RateFit>,
    /// `log mean ‖R̂ − R*_LS‖²_{L²(ρ*)}` against `log N`.
    pub reward_l2_sq: Option<RateFit>,
}

#[derive(Debug, Clone, Serialize)]
pub struct CellFailure {
    pub n: usize,
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct Summary {
    pub schema: u32,
    pub run_id: String,
    pub config: ExperimentConfig,
    pub instance: InstanceSummary,
    pub rows: usize,
    pub rates: Vec<RateSummary>,
    pub failures: Vec<CellFailure>,
}

#[derive(Debug, Clone)]
pub struct Report {
    pub run_dir: PathBuf,
    pub rows: Vec<Row>,
    pub summary: Summary,
}

struct Expert {
    mdp: TabularMdp,
    solution: SoftSolution,
    /// `ρ*`, made strictly positive; also the norm for reward errors.
    rho_star: Weighting,
    d_star: nalgebra::DVector<f64>,
    attempt: Option<usize>,
    mixing: MixingTime,
}

fn load_expert(cfg: &ExperimentConfig) -> Result<Expert> {
    let gamma = cfg.gamma.unwrap_or(DEFAULT_GAMMA);
    let (mdp, attempt) = match &cfg.instance {
        InstanceSpec::Garnet(spec) => {
            let inst = generate_garnet(spec, gamma, cfg.lambda)?;
            (inst.mdp, Some(inst.attempt))
        }
        InstanceSpec::File(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            let mdp: TabularMdp = serde_json::from_str(&text)?;
            let mdp = match cfg.gamma {
                Some(g) => mdp.with_discount(g)?,
                None => mdp,
            };
            (mdp, None)
        }
    };
    let solution = solve_soft(&mdp, cfg.lambda)?;
    let occ = expert_occupancy(&mdp, &solution.policy)?;
    let mixing = mixing_diagnostic(&policy_kernel(&mdp, &solution.policy)?, MIXING_CAP);
    Ok(Expert { rho_star: Weighting::from_occupancy(&occ)?, d_star: occ.state_marginal, mdp, solution, attempt, mixing })
}

/// Seed of the trajectory for `(seed, N)`.
pub fn trajectory_seed(seed: u64, n: usize) -> u64 {
    derive_seed(seed, n as u64)
}

fn estimate(cfg: &ExperimentConfig, expert: &Expert, n: usize, seed: u64, floor: f64) -> Result<(PolicyTable, Weighting, bool)> {
    let (ns, na) = (expert.mdp.n_states(), expert.mdp.n_actions());
    let pi_star = &expert.solution.policy;
    let needs_sample = !cfg.use_exact_expert || cfg.weighting == WeightingKind::Empirical;
    let traj = if needs_sample {
        Some(sample_chain(&expert.mdp, pi_star, n, trajectory_seed(seed, n), cfg.burn_in)?)
    } else {
        None
    };
    let (policy, active) = if cfg.use_exact_expert {
        (pi_star.clone(), false)
    } else {
        let traj = traj.as_ref().expect("sampled");
        match cfg.fit.optimizer {
            Optimizer::ClosedFormTabular => {
                let fit = fit_tabular_detailed(traj, &cfg.fit, ns, na)?;
                let active = fit.floor_active.iter().any(|&b| b);
                (fit.policy, active)
            }
            Optimizer::GradientDescent => {
                let fit = fit_linear_softmax(traj, &FeatureMap::one_hot(ns, na), &cfg.fit)?;
                let active = floor > 0.0 && fit.policy.min_prob() <= floor * (1.0 + 1e-9);
                (fit.policy, active)
            }
        }
    };
    let weighting = match cfg.weighting {
        WeightingKind::Empirical => Weighting::from_occupancy(&empirical_occupancy(traj.as_ref().expect("sampled"), ns, na)?)?,
        WeightingKind::Uniform => Weighting::uniform(ns, na),
        WeightingKind::ExpertOccupancy => expert.rho_star.clone(),
    };
    Ok((policy, weighting, active))
}

fn run_cell(cfg: &ExperimentConfig, expert: &Expert, mode: Execution, n: usize, seed: u64, floor: f64) -> Result<Vec<Row>> {
    let cell = |eta: f64, e: Error| Error::Cell { n, seed, eta, source: Box::new(e) };
    let first_eta = cfg.ridge_grid[0];
    let (policy, weighting, active) = estimate(cfg, expert, n, seed, floor).map_err(|e| cell(first_eta, e))?;
    let pi_star = &expert.solution.policy;
    let kl = excess_kl(&policy, pi_star, &expert.d_star).map_err(|e| cell(first_eta, e))?;
    let target = canonical_ls_reward(&expert.mdp, pi_star, cfg.lambda, &weighting).map_err(|e| cell(0.0, e))?;
    cfg.ridge_grid
        .iter()
        .map(|&eta| {
            let fit = fit_reward(mode, &expert.mdp, &policy, cfg.lambda, &weighting, eta).map_err(|e| cell(eta, e))?;
            let err = weighted_reward_error(&fit.reward, &target.reward, &expert.rho_star).map_err(|e| cell(eta, e))?;
            Ok(Row {
                n,
                seed,
                excess_kl: kl,
                reward_l2: err,
                floor_bound_active: active,
                cond_number: fit.condition_number,
                eta,
            })
        })
        .collect()
}

fn rate_or_none(points: Vec<(usize, f64)>) -> Option<RateFit> {
    fit_rate(&points).ok()
}

/// Compute every cell without touching the filesystem.
pub fn compute(cfg: &ExperimentConfig, opts: RunOptions) -> Result<(Vec<Row>, Summary, Option<Error>)> {
    cfg.validate()?;
    let expert = load_expert(cfg)?;
    let na = expert.mdp.n_actions();
    cfg.fit.validate(na)?;
    let floor = cfg.fit.resolved_floor(na);
    let resolved = cfg.resolved(na);
    let cells: Vec<(usize, u64)> = cfg.n_grid.iter().flat_map(|&n| cfg.seeds.iter().map(move |&s| (n, s))).collect();
    let results = exec::with_jobs(opts.jobs, || {
        exec::map_slice(opts.execution, &cells, |&(n, seed)| run_cell(cfg, &expert, opts.execution, n, seed, floor))
    });

    let mut rows = Vec::new();
    let mut failures = Vec::new();
    let mut first_error = None;
    for ((n, seed), res) in cells.iter().zip(results) {
        match res {
            Ok(r) => rows.extend(r),
            Err(e) => {
                failures.push(CellFailure { n: *n, seed: *seed, error: e.to_string() });
                first_error.get_or_insert(e);
            }
        }
    }

    let excess = rate_or_none(rows.iter().filter(|r| r.eta == cfg.ridge_grid[0]).map(|r| (r.n, r.excess_kl)).collect());
    let rates = cfg
        .ridge_grid
        .iter()
        .map(|&eta| RateSummary {
            eta,
            excess_kl: excess.clone(),
            reward_l2_sq: rate_or_none(rows.iter().filter(|r| r.eta == eta).map(|r| (r.n, r.reward_l2 * r.reward_l2)).collect()),
        })
        .collect();

    let sol = &expert.solution;
    let expert_min_prob = sol.policy.min_prob();
    let instance = InstanceSummary {
        n_states: expert.mdp.n_states(),
        n_actions: na,
        gamma: expert.mdp.discount(),
        attempt: expert.attempt,
        mixing_time: expert.mixing,
        expert_q_span: q_span(&sol.q_values),
        expert_min_prob,
        floor,
        floor_excludes_expert: expert_min_prob < floor,
        soft_vi_residual: sol.residual,
        soft_vi_iterations: sol.iterations,
    };
    let summary = Summary {
        schema: SCHEMA_VERSION,
        run_id: resolved.run_id(),
        config: resolved,
        instance,
        rows: rows.len(),
        rates,
        failures,
    };
    Ok((rows, summary, first_error))
}

/// Run the sweep and write `rows.csv`, `summary.json` and `config.json`
/// under `{output_dir}/{run_id}/`. Cells that succeeded are written even
/// when others fail; the first failure is then returned.
pub fn run_pipeline(cfg: &ExperimentConfig, opts: RunOptions) -> Result<Report> {
    let (rows, summary, first_error) = compute(cfg, opts)?;
    let run_dir = cfg.output_dir.join(&summary.run_id);
    fs::create_dir_all(&run_dir)?;
    fs::write(run_dir.join("rows.csv"), rows_to_csv(&rows))?;
    fs::write(run_dir.join("summary.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    fs::write(run_dir.join("config.json"), serde_json::to_string_pretty(&summary.config)? + "\n")?;
    if let Some(e) = first_error {
        return Err(e);
    }
    Ok(Report { run_dir, rows, summary })
}
