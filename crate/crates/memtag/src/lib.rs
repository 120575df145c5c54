//! Sequence labeling for annotation streams: a Bi-LSTM-CRF event trigger
//! tagger trained over small annotation batches of increasing quality, with a
//! retrieval memory that carries sentence-level evidence from earlier batches
//! into later ones.
//!
//! The crate is organized around the stages of a streaming experiment:
//!
//! * [`corpus`] — batch-tagged, BIO-labeled corpora and their TSV format
//! * [`noise_sim`] — decreasing label-noise simulation over training splits
//! * [`numerics`] — dense f64 tensors, reverse-mode autodiff, Adam
//! * [`encoder`] — word/POS/character token features
//! * [`tagger`] — Bi-LSTM context encoder, pre-CRF head, linear-chain CRF
//! * [`sentence_embed`] — sentence embedding providers, projection, store
//! * [`memory`] — forward LSTM over retrieved per-batch embeddings
//! * [`trainer`] — the All/Current/Finetune/Proposed streaming strategies
//! * [`eval`] — trigger-level P/R/F1, multi-run aggregation, reports
//! * [`synth`] — synthetic corpus generation with planted ambiguous triggers

pub mod corpus;
pub mod diagnostics;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod memory;
pub mod noise_sim;
pub mod numerics;
pub mod sentence_embed;
pub mod synth;
pub mod tagger;
pub mod trainer;
pub mod util;

pub use error::{Error, Result};
