//! Core library for training question-asking dialogue policies by expert
//! iteration.
//!
//! The crate simulates questioner/roleplayer conversations over a corpus of
//! tasks and personas, scores full trajectories by how likely a frozen
//! scorer finds each pair's gold response given the conversation, keeps the
//! best trajectory per pair, turns it into loss-masked fine-tuning data
//! (with greedy response regularization), trains the next policy, and
//! evaluates each checkpoint with controlled log-probability comparisons
//! and judged head-to-head win rates.
//!
//! Everything runs against the [`backend::Backend`] trait, so the same
//! pipeline drives remote chat-completions services and the fully hermetic
//! synthetic testbed in [`testbed`].

pub mod backend;
pub mod config;
pub mod corpus;
pub mod datagen;
pub mod dialogue;
pub mod evals;
pub mod pipeline;
pub mod report;
pub mod selection;
pub mod store;
pub mod traindata;
pub mod template;
pub mod testbed;
pub mod util;
