//! Unified tabular encoder-decoder: table model, tokenizer, autodiff
//! engine, network, pretraining objectives, downstream tasks and
//! checkpoint persistence.

pub mod model;
pub mod numeric;
pub mod persist;
pub mod pretrain;
pub mod synth;
pub mod table;
pub mod tasks;
pub mod tokenizer;
