//! A from-scratch intrusion-detection pipeline for software-defined-network
//! flow records.
//!
//! The pipeline turns tabular flow records into text and classifies them with
//! a small trainable transformer encoder:
//!
//! 1. [`flow`] loads (or synthesizes) labeled flow datasets, dropping
//!    socket-identity columns that do not generalize across networks.
//! 2. [`forest`] ranks features by random-forest Gini importance and keeps
//!    the top 10.
//! 3. [`sentence`] serializes each flow to a `Name=value, ...` sentence and
//!    combines every 4 consecutive sentences into one labeled input.
//! 4. [`tokenizer`] provides WordPiece subword tokenization with
//!    `[CLS]`/`[SEP]`/`[PAD]` handling and MLM masking.
//! 5. [`encoder`] is a mini transformer-encoder binary classifier with exact
//!    hand-written gradients.
//! 6. [`trainer`] runs decoupled-weight-decay Adam with linear warmup,
//!    periodic evaluation, early stopping, and checkpointing.
//! 7. [`eval`] computes confusion matrices, accuracy/precision/recall/F1
//!    (binary and support-weighted), ROC/AUC, and the two scenario splits
//!    (known attacks vs. unseen attack families).
//! 8. [`baselines`] holds the TF-IDF featurizer and the MLP / 1-D CNN
//!    reference models trained on the same splits.

pub mod baselines;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod flow;
pub mod forest;
pub(crate) mod nn;
pub mod sentence;
pub mod tokenizer;
pub mod trainer;

pub use error::{Error, Result};
