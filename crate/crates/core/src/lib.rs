//! Flow-based retrieval agents over text-attributed knowledge graphs.
//!
//! The crate covers the full desk-scale pipeline: graph and query loading
//! ([`kg`]), hashed text features ([`encoder`]), the retrieval decision
//! process ([`mdp`]), the policy/flow model ([`model`]) and its training
//! objectives ([`objectives`]), data collection and optimization
//! ([`trainer`]), sampling-based retrieval ([`sampler`]), evaluation
//! ([`metrics`]), an exact enumeration oracle for small graphs ([`oracle`]),
//! and synthetic benchmarks ([`synth`]).

pub mod encoder;
pub mod error;
pub mod kg;
pub mod metrics;
pub mod mdp;
pub mod model;
pub mod objectives;
pub mod oracle;
pub mod sampler;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
