//! Benchmark harness for counterfactual explanation generators on tabular
//! data.
//!
//! The pipeline runs in stages: a schema-described CSV is encoded, split and
//! normalized ([`dataset`]); a one-hidden-layer classifier is grid-searched
//! ([`model`]); factual rows are drawn from the test split and every
//! registered [`generators::Generator`] is asked for a counterfactual; each
//! result is scored ([`metrics`]) against the realistic-space rules in
//! [`constraints`]; finally per-factual ranks are aggregated and tested
//! ([`ranking`]) and a small decision tree recommends a generator for a
//! given setting ([`recommender`]). [`bench`](mod@bench) wires it all together.

pub mod bench;
pub mod constraints;
pub mod dataset;
pub mod error;
pub mod fetch;
pub mod generators;
pub mod metrics;
pub mod model;
pub mod ranking;
pub mod recommender;
pub mod schema;

pub use error::{Error, Result};
