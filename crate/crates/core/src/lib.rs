//! Bayesian graph-regularized spike-and-slab logistic regression for
//! adverse-event signal detection in spontaneous-report databases.

pub mod engine;
pub mod error;
pub mod ingest;
pub mod linalg;
pub mod ontology;
pub mod pg;
pub mod posterior;
pub mod select;
pub mod simgen;
pub mod store;

pub use error::{Error, Result};
