//! Host side of the training data plane: model gateway, retrieval service,
//! rollout workers, curation, evaluation and the stage pipeline.

pub mod batch;
pub mod canonical;
pub mod config;
pub mod curation;
pub mod evalkit;
pub mod gateway;
pub mod pipeline;
pub mod retrieval;
pub mod rollout;
