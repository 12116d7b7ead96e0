//! Genetic prompt search: evolve discrete prompt templates for a frozen
//! language model using only a small labeled dev set.
//!
//! The crate is organized bottom-up:
//!
//! * [`template`]: the prompt template dialect (parse, render, protect).
//! * [`task`]: task schemas, JSONL datasets and balanced dev splits.
//! * [`backend`]: the black-box model interface with HTTP, mock and oracle
//!   implementations.
//! * [`scoring`]: prompt fitness on the dev split.
//! * [`mutation`]: child-prompt operators and the candidate filter.
//! * [`search`]: the generational loop, final rerank and checkpoints.
//! * [`report`]: run configuration, run records, sweeps and cost accounting.

pub mod backend;
pub mod hash;
pub mod mutation;
pub mod report;
pub mod scoring;
pub mod search;
pub mod task;
pub mod template;
