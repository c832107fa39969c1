//! Simulation and entropy estimation for contractive Markov systems:
//! Markov systems over a finite directed multigraph whose edge maps contract
//! on average under place-dependent probabilities.
//!
//! The main entry points are [`entropy::entropy_formula`], which integrates
//! the local branching entropy against an estimate of the invariant measure,
//! and [`coding::pushforward_measure`], which transports the symbolic shift
//! measure back to the state space through the coding map.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::large_enum_variant)]

pub mod chain;
pub mod cli;
pub mod coding;
pub mod config;
pub mod entropy;
pub mod error;
pub mod graph;
pub mod measure;
pub mod report;
pub mod rng;
pub mod stats;
pub mod system;

pub use error::{CmsError, Result};
pub use graph::{DirectedMultigraph, EdgeId};
pub use system::{MarkovSystem, State};
