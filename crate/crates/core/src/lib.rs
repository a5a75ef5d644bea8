//! Two-step emotion-cause pair extraction for multi-party conversations.
//!
//! Emotions are predicted for every utterance first; causes are then
//! predicted for each utterance labeled with a non-neutral emotion, and the
//! emotional utterance is optionally added as its own cause. Two backends
//! drive the steps: fine-tuned chat models prompted with the full
//! conversation, and a general chat model guided by retrieved, explained
//! demonstrations.

pub mod config;
pub mod corpus;
pub mod evaluation;
pub mod gateway;
pub mod montage;
pub mod pipeline;
pub mod prompting;
pub mod retrieval;
pub mod windowing;

pub use corpus::{Conversation, DatasetStats, EmotionCausePair, EmotionLabel, Utterance};
pub use pipeline::{Approach, Pipeline, PipelineConfig, PredictionDocument};
pub use windowing::{ContextWindow, PositionClass};
