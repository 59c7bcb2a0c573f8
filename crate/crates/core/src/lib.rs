//! Self-pruned key/value attention: a learned per-token utility gate decides
//! which keys outside a local window stay visible to later queries.

pub mod analysis;
pub mod attention;
pub mod baselines;
pub mod checkpoint;
pub mod error;
pub mod gating;
pub mod kvcache;
pub mod model;
pub mod tape;
pub mod tasks;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Rng, Tensor};
