//! Collaborative auto-tuning framework.
//!
//! The crate is organized around a schema-free experiment repository and a
//! single unified access function:
//!
//! - [`repo`] — directory-backed storage of entries addressed by cID
//!   (`module:alias-or-uid`), with search, merge and multi-process safety
//! - [`dispatch`] — the access function routing JSON envelopes to module
//!   actions, plus the event/hook mechanism used at pipeline stage
//!   boundaries
//! - [`pipeline`] — the compile/execute/synthetic measurement pipeline
//!   producing experiment points
//! - [`stats`] — normality verdicts, cluster detection and min/expected
//!   summaries of repeated measurements
//! - [`explore`] — random and importance-focused choice-space exploration
//!   with an online Pareto filter
//! - [`learn`] — online piecewise-linear behavior models with guard rules,
//!   outlier logs, data compaction and choice advice
//! - [`synth`] — deterministic synthetic platforms (cache-plateau CPI and
//!   a compiler-flag space) used by tests and demos
//! - [`remote`] — the HTTP JSON server and client used to aggregate results
//!   from many nodes
//! - [`cli`] — the `cm` command-line front-end

pub mod cli;
pub mod dispatch;
pub mod error;
pub mod explore;
pub mod learn;
pub mod meta;
pub mod modules;
pub mod params;
pub mod pipeline;
pub mod remote;
pub mod repo;
pub mod report;
pub mod stats;
pub mod synth;

pub use error::{CmError, Result};
pub use meta::MetaDocument;
pub use repo::{Cid, Entry, Repo, Uid};
