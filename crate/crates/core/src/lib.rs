//! DAG-lattice non-autoregressive sequence generation.
//!
//! A decoder emits `L` positions; an output is a token-labeled ascending
//! path through them, scored by per-position token distributions and a
//! transition matrix. Training maximizes the marginal likelihood over all
//! alignment paths by dynamic programming, optionally augmented with a
//! contrastive ranking loss or a REINFORCE reward loss over model-sampled
//! hypotheses. Decoders walk the lattice greedily (lookahead) or
//! stochastically (nucleus-filtered temperature sampling).

pub mod cli;
pub mod config;
pub mod data;
pub mod decoding;
pub mod dp;
pub mod error;
pub mod lattice;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod rng;
pub mod tape;
pub mod trainer;

pub use error::{Error, Result};
