//! Rubric-conditioned synthetic data augmentation for short-response
//! classifiers: generation through a chat gateway, self-consistency
//! grading, a native hashed-feature classifier and augmentation sweeps.

pub mod classifier;
pub mod cli;
pub mod consistency;
pub mod corpus;
pub mod evaluation;
pub mod experiments;
pub mod gateway;
pub mod generator;
