//! Recovery-command estimation from log-template sequences.
//!
//! Raw log lines are reduced to template IDs ([`template_store`]), an
//! attentional LSTM encoder-decoder ([`seq2seq_model`]) maps ID sequences to
//! command-token sequences, and estimates are judged by replaying them on
//! recovery automata ([`recovery_eval`]). [`synth_corpus`] generates the
//! synthetic five-group benchmark and [`cli_pipeline`] drives everything from a
//! JSON config.

pub mod cli_pipeline;
pub mod error;
pub mod recovery_eval;
pub mod seq2seq_model;
pub mod synth_corpus;
pub mod template_store;
pub mod tensor_core;

pub use error::{Error, Result};
