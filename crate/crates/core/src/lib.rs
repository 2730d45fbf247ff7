//! Evaluation harness for detecting mental manipulation in two-person
//! dialogues with LLM prompting strategies: zero-shot, few-shot, zero-shot
//! chain-of-thought and intent-aware prompting (IAP).
//!
//! IAP first asks the model for a one-sentence intent summary of each
//! speaker, then asks for a Yes/No verdict given the dialogue and both
//! intents.

pub mod anneval;
pub mod cli;
pub mod corpus;
pub mod gateway;
pub mod metrics;
pub mod pipeline;
pub mod prompting;
