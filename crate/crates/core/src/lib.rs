//! Collaborative sparse unmixing of hyperspectral images.
//!
//! A binary label field says which library signatures are present at each
//! pixel, and abundance values give their contributions. Labels carry a
//! truncated Ising prior that favours spatially coherent supports and forbids
//! empty pixels. A Gibbs sampler draws from the joint posterior, and
//! marginal-MAP labels with conditional-mean abundances summarise the chain.

pub mod baselines;
pub mod error;
pub mod estimators;
pub mod io;
pub mod metrics;
pub mod mrf;
pub mod rng;
pub mod sampler;
pub mod synthgen;
pub mod truncgauss;
pub mod types;

pub use error::{CsuError, Result};
pub use estimators::{mmap_support, mmse_abundances, summarize, UnmixResult};
pub use sampler::{run_chain, BetaMode, ChainState, ChainTrace, CsuSampler, RunConfig};
pub use types::{
    AbundanceField, BinaryMap, GridGeometry, HyperCube, HyperParams, Library, NoiseModel, SupportField,
};
