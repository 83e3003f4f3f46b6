//! Environment, rewards, GRPO training, curation and evaluation for agents
//! that answer questions by iteratively writing SPARQL queries.

pub mod baselines;
pub mod cli;
pub mod client;
pub mod curation;
pub mod endpoint;
pub mod environment;
pub mod eval;
pub mod generation;
pub mod grpo;
pub mod policy;
pub mod prompts;
pub mod protocol;
mod retry;
pub mod reward;
pub mod sparql;
pub mod toy;

pub use retry::RetryPolicy;
