//! Character-level BiLSTM-CRF sequence labeling engine.
//!
//! The pipeline: BIO corpus files are parsed into character/label
//! sequences ([`corpus`]), embedded and encoded by a bidirectional LSTM
//! with a tanh projection ([`nn`]), scored and decoded by a linear-chain
//! CRF ([`crf`]), trained with Adam / GD / RMSprop ([`optim`], [`train`])
//! and evaluated by exact span matching ([`eval`]). [`selfcheck`] holds
//! the built-in oracle suites behind `cmd_check`.

pub mod corpus;
pub mod crf;
pub mod error;
pub mod eval;
pub mod math;
pub mod model_io;
pub mod nn;
pub mod optim;
pub mod selfcheck;
pub mod synth;
pub mod tagger;
pub mod train;

pub use error::{Error, Result};
