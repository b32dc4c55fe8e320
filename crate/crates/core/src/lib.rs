pub mod attribution;
pub mod backend;
pub mod baselines;
pub mod cache;
pub mod datasets;
pub mod evaluation;
pub mod harness;
pub mod interventions;
pub mod prompts;
pub mod refine;
pub mod text;
