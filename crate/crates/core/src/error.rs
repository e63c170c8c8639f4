use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid MDP: {0}")]
    InvalidMdp(String),

    #[error("invalid policy: {0}")]
    InvalidPolicy(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("soft value iteration did not converge after {iterations} iterations (residual {residual:e})")]
    NotConverged { iterations: usize, residual: f64 },

    #[error("policy assigns zero probability to (state {state}, action {action}); log-probability undefined")]
    ZeroProbability { state: usize, action: usize },

    #[error("chain has no unique stationary distribution: {0}")]
    NotErgodic(String),

    #[error(
        "normal equations are ill-conditioned (condition number {condition:e} > {threshold:e}); \
         use a ridge penalty eta > 0"
    )]
    IllConditioned { condition: f64, threshold: f64 },

    #[error("Gram matrix is singular: basis functions {dependent:?} are linearly dependent on earlier ones")]
    SingularGram { dependent: Vec<usize> },

    #[error("optimizer failed: {0}")]
    Optimizer(String),

    #[error("could not generate an ergodic instance after {attempts} attempts")]
    GeneratorExhausted { attempts: usize },

    #[error("run (n = {n}, seed = {seed}, eta = {eta}) failed: {source}")]
    Cell {
        n: usize,
        seed: u64,
        eta: f64,
        #[source]
        source: Box<Error>,
    },

    #[error("config: {0}")]
    Config(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
