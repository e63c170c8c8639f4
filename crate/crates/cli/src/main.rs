use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use erirl::chain::{empirical_occupancy, expert_occupancy, sample_chain, Trajectory};
use erirl::checks::{run_all, run_suite, Suite};
use erirl::exec::{self, Execution};
use erirl::fit::{empirical_nll, fit_linear_softmax, fit_tabular, FeatureMap, FitConfig, FitMeta, FittedPolicy, Optimizer};
use erirl::garnet::{generate_garnet, GarnetSpec};
use erirl::harness::{run_pipeline, ExperimentConfig, RunOptions};
use erirl::mdp::{soft_value_iteration, solve_soft, PolicyTable, TabularMdp, DEFAULT_VI_TOL, MAX_VI_ITER};
use erirl::reward::{advantage_proxy, fit_with_posterior, reconstruct_reward, solve_potential_with, Weighting};
use nalgebra::{DMatrix, DVector};
use serde_json::Value;

#[derive(Parser)]
#[command(name = "erirl", version, about = "Inverse entropy-regularized RL on finite MDPs")]
struct Cli {
    /// JSON config for the command (experiment, fit or garnet parameters).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output path; stdout when omitted (experiment: output directory).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Added to every seed.
    #[arg(long, global = true, default_value_t = 0)]
    seed_offset: u64,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,
    /// Run data-parallel stages sequentially.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the soft Bellman equations of an MDP.
    Solve(SolveArgs),
    /// Sample an expert trajectory (CSV plus JSON sidecar).
    Sample(SampleArgs),
    /// Fit a policy to a trajectory by penalized maximum likelihood.
    Fit(FitArgs),
    /// Recover the least-squares reward of a policy.
    Reward(RewardArgs),
    /// Run a configured sweep and write rows.csv, summary.json, config.json.
    Experiment,
    /// Run the randomized inequality suites.
    Check(CheckArgs),
    /// Generate a garnet MDP with an ergodic soft-optimal expert.
    Garnet(GarnetArgs),
}

#[derive(Args)]
struct SolveArgs {
    #[arg(long)]
    mdp: PathBuf,
    #[arg(long)]
    lambda: f64,
    #[arg(long, default_value_t = DEFAULT_VI_TOL)]
    tol: f64,
    /// Sweep budget; defaults to the contraction bound.
    #[arg(long)]
    max_iter: Option<usize>,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    mdp: PathBuf,
    /// Temperature of the soft-optimal expert (ignored with --policy).
    #[arg(long, required_unless_present = "policy")]
    lambda: Option<f64>,
    /// Sample from this policy instead of the soft-optimal expert.
    #[arg(long)]
    policy: Option<PathBuf>,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0)]
    burn_in: usize,
}

#[derive(Args)]
struct FitArgs {
    /// Trajectory CSV; the sidecar defaults to the same path with `.json`.
    #[arg(long)]
    trajectory: PathBuf,
    #[arg(long)]
    sidecar: Option<PathBuf>,
    /// MDP whose dimensions the policy takes.
    #[arg(long)]
    mdp: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum WeightingArg {
    Uniform,
    ExpertOccupancy,
    Empirical,
}

#[derive(Args)]
struct RewardArgs {
    #[arg(long)]
    mdp: PathBuf,
    #[arg(long)]
    policy: PathBuf,
    #[arg(long)]
    lambda: f64,
    #[arg(long, default_value_t = 0.0)]
    eta: f64,
    #[arg(long, value_enum, default_value = "expert-occupancy")]
    weighting: WeightingArg,
    /// Trajectory for the empirical weighting.
    #[arg(long)]
    trajectory: Option<PathBuf>,
    /// Attach a Gaussian posterior with prior N(0, I / precision).
    #[arg(long)]
    prior_precision: Option<f64>,
}

#[derive(Args)]
struct CheckArgs {
    #[arg(long, default_value_t = 10_000)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// One of log_ratio, stability, floor, quadratic_kl; all when omitted.
    #[arg(long)]
    suite: Option<String>,
}

#[derive(Args)]
struct GarnetArgs {
    #[arg(long, default_value_t = 10)]
    n_states: usize,
    #[arg(long, default_value_t = 3)]
    n_actions: usize,
    #[arg(long, default_value_t = 3)]
    branching: usize,
    #[arg(long, default_value_t = 1.0)]
    reward_scale: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.9)]
    gamma: f64,
    /// Temperature of the expert used for the ergodicity check.
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn emit(out: Option<&Path>, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{text}"),
    }
    Ok(())
}

fn sidecar_path(csv: &Path) -> PathBuf {
    csv.with_extension("json")
}

fn read_trajectory(csv: &Path, sidecar: Option<&Path>) -> Result<Trajectory> {
    let side = sidecar.map(Path::to_path_buf).unwrap_or_else(|| sidecar_path(csv));
    Ok(Trajectory::read(csv, &side)?)
}

fn execution(cli: &Cli) -> Execution {
    if cli.sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    }
}

fn run(cli: &Cli) -> Result<ExitCode> {
    let out = cli.out.as_deref();
    match &cli.command {
        Command::Solve(a) => {
            let mdp: TabularMdp = read_json(&a.mdp)?;
            let sol = match a.max_iter {
                Some(k) => soft_value_iteration(&mdp, a.lambda, a.tol, k.min(MAX_VI_ITER))?,
                None => solve_soft_with_tol(&mdp, a.lambda, a.tol)?,
            };
            emit(out, &sol)?;
        }
        Command::Sample(a) => {
            let mdp: TabularMdp = read_json(&a.mdp)?;
            let policy = match (&a.policy, a.lambda) {
                (Some(p), _) => read_json::<PolicyTable>(p)?,
                (None, Some(l)) => solve_soft(&mdp, l)?.policy,
                (None, None) => bail!("need --lambda or --policy"),
            };
            let traj = sample_chain(&mdp, &policy, a.n, a.seed.wrapping_add(cli.seed_offset), a.burn_in)?;
            match out {
                Some(p) => traj.write(p, &sidecar_path(p))?,
                None => print!("{}", traj.to_csv()),
            }
        }
        Command::Fit(a) => {
            let mdp: TabularMdp = read_json(&a.mdp)?;
            let traj = read_trajectory(&a.trajectory, a.sidecar.as_deref())?;
            let cfg: FitConfig = match &cli.config {
                Some(p) => read_json(p)?,
                None => FitConfig::default(),
            };
            let (ns, na) = (mdp.n_states(), mdp.n_actions());
            let policy = match cfg.optimizer {
                Optimizer::ClosedFormTabular => fit_tabular(&traj, &cfg, ns, na)?,
                Optimizer::GradientDescent => {
                    let fit = fit_linear_softmax(&traj, &FeatureMap::one_hot(ns, na), &cfg)?;
                    if !fit.converged {
                        eprintln!("warning: gradient descent stopped after {} iterations (gradient norm {:e})", fit.iterations, fit.grad_norm);
                    }
                    fit.policy
                }
            };
            let nll = empirical_nll(&policy, &traj)?;
            emit(out, &FittedPolicy { policy, fit_meta: FitMeta { nll, config: cfg.resolved(na) } })?;
        }
        Command::Reward(a) => {
            let mdp: TabularMdp = read_json(&a.mdp)?;
            let policy: PolicyTable = read_json(&a.policy)?;
            let (ns, na) = (mdp.n_states(), mdp.n_actions());
            let weighting = match a.weighting {
                WeightingArg::Uniform => Weighting::uniform(ns, na),
                WeightingArg::ExpertOccupancy => Weighting::from_occupancy(&expert_occupancy(&mdp, &policy)?)?,
                WeightingArg::Empirical => {
                    let Some(t) = &a.trajectory else { bail!("--weighting empirical needs --trajectory") };
                    let traj = read_trajectory(t, None)?;
                    Weighting::from_occupancy(&empirical_occupancy(&traj, ns, na)?)?
                }
            };
            let r_hat = advantage_proxy(&policy, a.lambda)?;
            let fit = match a.prior_precision {
                Some(p) => fit_with_posterior(&mdp, &r_hat, &weighting, &DVector::zeros(ns), &(DMatrix::identity(ns, ns) * p))?,
                None => {
                    let solve = solve_potential_with(execution(cli), &mdp, &r_hat, &weighting, a.eta)?;
                    reconstruct_reward(&mdp, &r_hat, &solve)?
                }
            };
            emit(out, &fit)?;
        }
        Command::Experiment => {
            let Some(path) = &cli.config else { bail!("experiment needs --config") };
            let mut cfg = ExperimentConfig::load(path)?.with_seed_offset(cli.seed_offset);
            if let Some(dir) = out {
                cfg.output_dir = dir.to_path_buf();
            }
            let opts = RunOptions { execution: execution(cli), jobs: cli.jobs };
            let report = run_pipeline(&cfg, opts)?;
            for rate in &report.summary.rates {
                let slope = |r: &Option<erirl::metrics::RateFit>| r.as_ref().map_or("n/a".to_string(), |f| format!("{:.3}", f.slope));
                eprintln!("eta {}: excess KL slope {}, squared reward error slope {}", rate.eta, slope(&rate.excess_kl), slope(&rate.reward_l2_sq));
            }
            println!("{}", report.run_dir.display());
        }
        Command::Check(a) => {
            let seed = a.seed.wrapping_add(cli.seed_offset);
            let mode = execution(cli);
            let reports = exec::with_jobs(cli.jobs, || match &a.suite {
                Some(name) => name.parse::<Suite>().and_then(|s| run_suite(s, a.trials, seed, mode)).map(|r| vec![r]),
                None => run_all(a.trials, seed, mode),
            })?;
            for r in &reports {
                eprintln!(
                    "{}: {} ({} violations / {} trials, ratio in [{:.4}, {:.4}])",
                    r.suite.name(),
                    if r.passed() { "ok" } else { "FAILED" },
                    r.violations,
                    r.trials,
                    r.min_ratio,
                    r.max_ratio
                );
            }
            emit(out, &reports)?;
            if reports.iter().any(|r| !r.passed()) {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Garnet(a) => {
            let (spec, gamma, lambda) = match &cli.config {
                Some(p) => {
                    let v: Value = read_json(p)?;
                    let gamma = v.get("gamma").and_then(Value::as_f64).unwrap_or(a.gamma);
                    let lambda = v.get("lambda").and_then(Value::as_f64).unwrap_or(a.lambda);
                    let spec: GarnetSpec = serde_json::from_value(v.get("garnet").cloned().unwrap_or(v))?;
                    (spec, gamma, lambda)
                }
                None => (
                    GarnetSpec {
                        n_states: a.n_states,
                        n_actions: a.n_actions,
                        branching: a.branching,
                        reward_scale: a.reward_scale,
                        seed: a.seed,
                    },
                    a.gamma,
                    a.lambda,
                ),
            };
            let spec = GarnetSpec { seed: spec.seed.wrapping_add(cli.seed_offset), ..spec };
            let inst = generate_garnet(&spec, gamma, lambda)?;
            if inst.attempt > 0 {
                eprintln!("accepted generator attempt {} (mixing time {})", inst.attempt, inst.mixing);
            }
            emit(out, &inst.mdp)?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn solve_soft_with_tol(mdp: &TabularMdp, lambda: f64, tol: f64) -> erirl::Result<erirl::mdp::SoftSolution> {
    soft_value_iteration(mdp, lambda, tol, erirl::mdp::default_max_iter(mdp, lambda, tol))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
