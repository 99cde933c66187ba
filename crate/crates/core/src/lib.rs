//! Engine behind the promptlens workbench.
//!
//! The crate is organised along the workflow an operator follows when iterating
//! on a multimodal chain-of-thought prompt:
//!
//! * [`dataset`] loads labeled clips and splits them into validation,
//!   demonstration and test sets.
//! * [`gateway`] talks to chat-completion and embedding providers, with
//!   bounded-concurrency batching, retries and a record/replay cassette.
//! * [`reasoning`] composes prompts, runs each instance in three modality
//!   modes and extracts the evidence behind each answer.
//! * [`interaction`] classifies how the visual and language answers combine
//!   and builds the three-layer Sankey summary.
//! * [`patterns`] clusters evidence with HDBSCAN and mines frequent concept
//!   co-occurrences with Apriori.
//! * [`kshot`] and [`principles`] recommend demonstration examples and
//!   instructional principles.
//! * [`prompts`] keeps immutable prompt versions with structured diffs, and
//!   [`eval`] scores runs.
//! * [`project`] persists everything in a project directory, and [`session`]
//!   exposes the operator-level operations over it.

pub mod dataset;
pub mod vecmath;
pub mod gateway;
pub mod reasoning;
pub mod testing;
pub mod interaction;
pub mod patterns;
pub mod kshot;
pub mod principles;
pub mod prompts;
pub mod eval;
pub mod project;
pub mod session;
