//! Attentional LSTM encoder-decoder: parameters, batched training on a
//! tape, greedy and beam decoding, checkpoints.

mod batch;
mod checkpoint;
mod decode;
mod model;
mod train;
mod vocab;

pub use batch::{batch_loss, mean_loss, EncodedPair, ParamVars};
pub use checkpoint::{from_bytes, to_bytes, MAGIC, VERSION};
pub use decode::{reliability, ScoredHypothesis};
pub use model::{DecState, EncoderStates, Hyperparams, ModelParams, Profile, Seq2SeqModel, PARAM_NAMES};
pub use train::{
    clip_global_norm, flat_params, init_model, train, train_encoded, Adam, EarlyStopping, EpochLog, Patience,
    TrainReport,
};
pub use vocab::{Vocab, BOS, BOS_TOKEN, EOS, PAD, PAD_TOKEN, RESERVED, UNK, UNK_TOKEN};
