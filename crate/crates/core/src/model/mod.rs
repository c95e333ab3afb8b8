//! Decoder-only language model, its training loop and greedy decoding.

mod config;
mod generate;
mod train;
mod transformer;

pub use config::ModelConfig;
pub use generate::{argmax_lowest, generate, generate_batch};
pub use train::{train_lm, Batches, LmTrainConfig, LmTrainReport};
pub(crate) use transformer::hex;
pub use transformer::{
    site_weight_name, Block, Capture, ForwardHook, ForwardOptions, ForwardOutput, TokenBatch,
    TransformerModel, ATTENTION_SITES, LN_EPS, MLP_SITES,
};

use crate::error::Result;
use crate::tensor::Array;

/// Anything that maps a token batch to next-token logits `[batch·seq × V]`.
pub trait LanguageModel {
    fn config(&self) -> &ModelConfig;
    fn logits(&self, batch: &TokenBatch) -> Result<Array>;
}

impl LanguageModel for TransformerModel {
    fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn logits(&self, batch: &TokenBatch) -> Result<Array> {
        TransformerModel::logits(self, batch)
    }
}
