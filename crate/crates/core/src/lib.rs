//! Event-graph forecasting of train-delay propagation.
//!
//! The crate is organised along the data flow:
//!
//! - [`ingest`]: stop-level CSV records, trip unification, cleaning, and a
//!   synthetic network generator with known propagation dynamics.
//! - [`features`]: node/edge feature engineering, scalers and vocabularies.
//! - [`graph`]: per-day event graphs, sequentially consistent subgraph
//!   extraction, and the rollout state.
//! - [`model`]: GATv2 body with residual + LayerNorm, hurdle heads, and the
//!   one-shot GCN baseline, all with hand-written backward passes.
//! - [`train`]: k-step autoregressive rollout training with scheduled sampling.
//! - [`forecast`]: live rollout protocol and non-learned baselines.
//! - [`eval`]: metrics, edge propagation error, attention analysis,
//!   permutation importance and subgroup breakdowns.

pub mod error;
pub mod eval;
pub mod exec;
pub mod features;
pub mod forecast;
pub mod graph;
pub mod ingest;
pub mod model;
pub mod time;
pub mod train;

pub use error::{Error, Result};
