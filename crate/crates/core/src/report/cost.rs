//! Forward-pass cost accounting for a search.
//!
//! ```text
//! generation = T * pool_size * gen_cost_per_prompt
//! scoring    = T * pool_size * dev_size * choices_per_example
//! rerank     = K * (T + 1) * dev_size * choices_per_example   (when included)
//! ```
//!
//! Scoring of the seed generation is not counted, and the rerank term uses
//! the largest possible archive. A commonly quoted total for the same defaults
//! (4320 forward passes) does not decompose uniquely from these parameters,
//! so it is only printed alongside for comparison.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::backend::GENERATION_PASSES;

pub const REFERENCE_TOTAL: f64 = 4320.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub iterations: usize,
    pub pool_size: usize,
    pub top_k: usize,
    pub dev_size: usize,
    /// Average number of answer choices per dev example.
    pub choices_per_example: f64,
    pub gen_cost_per_prompt: f64,
    pub rerank_included: bool,
}

impl CostModel {
    pub fn new(iterations: usize, pool_size: usize, top_k: usize, dev_size: usize, choices_per_example: f64) -> Self {
        Self {
            iterations,
            pool_size,
            top_k,
            dev_size,
            choices_per_example,
            gen_cost_per_prompt: GENERATION_PASSES as f64,
            rerank_included: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostEstimate {
    pub generation: f64,
    pub scoring: f64,
    pub rerank: f64,
    pub total: f64,
}

pub fn estimate_cost(m: &CostModel) -> CostEstimate {
    let t = m.iterations as f64;
    let pool = m.pool_size as f64;
    let per_prompt_scoring = m.dev_size as f64 * m.choices_per_example;
    let generation = t * pool * m.gen_cost_per_prompt;
    let scoring = t * pool * per_prompt_scoring;
    let rerank = if m.rerank_included {
        m.top_k as f64 * (t + 1.0) * per_prompt_scoring
    } else {
        0.0
    };
    CostEstimate {
        generation,
        scoring,
        rerank,
        total: generation + scoring + rerank,
    }
}

impl fmt::Display for CostEstimate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "generation  {:>12.1}", self.generation)?;
        writeln!(f, "scoring     {:>12.1}", self.scoring)?;
        writeln!(f, "rerank      {:>12.1}", self.rerank)?;
        writeln!(f, "total       {:>12.1}", self.total)?;
        write!(
            f,
            "reference   {REFERENCE_TOTAL:>12.1}  (quoted figure for the default setting; not derived from this formula)"
        )
    }
}
