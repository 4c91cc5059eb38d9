//! Action-based safety policy models for guarding LLM agent trajectories.
//!
//! A policy model holds predicates, LTL_f rules over those predicates, and a
//! rule circuit per action predicate. The pipeline is:
//!
//! 1. [`ingest`]: extract structured policies and rules from documents
//!    through a [`provider::GenerationProvider`].
//! 2. [`optimizer`]: refine vague rules and prune redundant predicates.
//! 3. [`circuit`]: cluster state predicates and assemble per-action circuits.
//! 4. [`mln`]: learn rule weights with a hinge loss on the safety margin.
//! 5. [`shield`]: verify an agent action against its circuits and emit a
//!    [`shield::Verdict`].

pub mod circuit;
pub mod embedding;
pub mod ingest;
pub mod ltl;
pub mod mln;
pub mod model;
pub mod optimizer;
pub mod prompts;
pub mod provider;
pub mod shield;
