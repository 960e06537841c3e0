//! Pairwise discrete graphical models trained two ways: adversarially, as a
//! learner network that emits an unbounded ensemble of log-potential vectors
//! (AGM), and by empirical risk minimization through unrolled belief
//! propagation (EGM). Queries with arbitrary evidence are answered by
//! log-linear pooling over sampled ensemble members.

pub mod agm;
pub mod autodiff;
pub mod bp;
pub mod config;
pub mod data;
pub mod egm;
pub mod ensemble;
pub mod error;
pub mod experiments;
pub mod gibbs;
pub mod graph;
pub mod nn;
pub mod query;
pub mod store;
pub mod tensor;

pub use error::{Error, Result};
