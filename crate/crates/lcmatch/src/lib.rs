//! Desk-scale dual-encoder image-text matching engine.
//!
//! Captions longer than the text encoder's fixed context are segmented into
//! overlapping token windows, each window is encoded independently, and the
//! per-window embeddings are averaged into a single caption embedding that
//! lives in the same space as the image embeddings. The crate also provides
//! the contrastive training loop and the Recall@K evaluation harness around
//! that mechanism, plus a deterministic synthetic dataset generator so the
//! whole pipeline runs end to end on a laptop.

pub mod cli;
pub mod config;
pub mod data;
pub mod encoders;
pub mod error;
pub mod evaluation;
pub mod longcap;
pub(crate) mod parallel;
pub mod rng;
pub mod tensor;
pub mod textpipe;
pub mod training;

pub use error::{Error, Result};
