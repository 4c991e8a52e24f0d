//! Entity-aware cloze augmentation for few-shot question answering.
//!
//! The pipeline: load a [`gazetteer`] of entity surfaces, compile it into a
//! [`matcher::MatchAutomaton`], find the entity spans in every training
//! context, turn each span into a cloze sample ([`augment`]), and render both
//! the original QA samples and the cloze samples into one prompt format.
//! [`dataset`] reads MRQA files and draws few-shot splits; [`eval`] scores
//! predictions with bag-of-words F1.

pub mod augment;
pub mod cli;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod gazetteer;
pub mod matcher;

pub use error::{Error, Result};
