//! Pseudo-faithful self-explanation construction and self-consistency
//! evaluation for chat-model text classifiers.

pub mod backend;
pub mod construction;
pub mod corpus;
pub mod dataset;
pub mod evaluation;
pub mod parallel;
pub mod prompts;
pub mod textops;
