//! Social-network-theory user-similarity kernels for rating prediction.
//!
//! Seven user-by-user Gram matrices, each tied to a social theory, are built
//! from a friendship graph, user profiles and rating histories:
//!
//! | Label  | Kernel                              |
//! |--------|-------------------------------------|
//! | `ID`   | impact distribution (random walk with restart, `RᵀR`) |
//! | `CT`   | commute time (`L⁺`)                 |
//! | `COM`  | community co-membership (modularity) |
//! | `DEM`  | demographic token overlap           |
//! | `CLA`  | claimed-interest token overlap      |
//! | `ACT1` | rated-item overlap                  |
//! | `ACT2` | RBF on mean rating                  |
//!
//! The kernels, together with an all-ones kernel, are fused by degree-2
//! non-linear multiple kernel learning ([`nlmkl`]) with an epsilon-SVR
//! ([`svr`]) as base learner, and evaluated against neighbour-influence and
//! collaborative-filtering baselines ([`baselines`]) under user-level k-fold
//! cross-validation ([`eval`]).

pub mod baselines;
pub mod community;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod graph;
pub mod kernels;
pub mod nlmkl;
pub mod svr;

pub use error::{Error, Result};
