//! Joint hr-adaptive mesh refinement on 2D triangular P1 finite-element
//! problems.
//!
//! The crate combines a classical adaptive-FEM stack (conforming red-green-blue
//! refinement, P1 Poisson and implicit-Euler heat solvers, a posteriori error
//! indicators) with a reinforcement-learned adaptation policy: two agent
//! swarms — one per mesh vertex, one per element — share a hypergraph
//! message-passing backbone and are trained with a multi-objective PPO loop.
//! Vertex agents relocate nodes through an attention-weighted graph-diffusion
//! operator that provably preserves element orientation; element agents flag
//! triangles for subdivision.
//!
//! The high-level flow:
//!
//! 1. [`mesh`] — mesh data structure, geometry queries, refinement.
//! 2. [`fem`] — solvers, interpolation, error indicators.
//! 3. [`features`] — hypergraph state construction.
//! 4. [`tensor`] — reverse-mode autodiff engine and Adam.
//! 5. [`policy`] — the dual-headed actor-critic network.
//! 6. [`env`] — the adaptation MDP: episodes, rewards, returns, GAE.
//! 7. [`ppo`] — the training loop and observation normalization.
//! 8. [`baselines`] — uniform refinement, oracle marking, ZZ estimators.
//! 9. [`harness`] — dataset generation, evaluation sweeps, rendering.
//!
//! A narrative guide with worked examples lives in the `book/` directory of
//! the repository; its code snippets are mirrored by this crate's doc-tests.

pub mod baselines;
pub mod env;
pub mod features;
pub mod fem;
pub mod harness;
pub mod mesh;
pub mod policy;
pub mod ppo;
pub mod tensor;

pub use mesh::{BoundaryClass, Mesh, RefinementMaps};

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("mesh error: {0}")]
    Mesh(String),
    #[error("fem error: {0}")]
    Fem(String),
    #[error("tensor error: {0}")]
    Tensor(String),
    #[error("policy error: {0}")]
    Policy(String),
    #[error("env error: {0}")]
    Env(String),
    #[error("train error: {0}")]
    Train(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("format error: {0}")]
    Format(String),
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Format(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
