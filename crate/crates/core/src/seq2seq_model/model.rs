use rand::Rng;
use serde::{Deserialize, Serialize};

use super::vocab::Vocab;
use crate::error::{Error, Result};
use crate::tensor_core::{
    attention_context, embed_lookup, lstm_step, softmax, uniform_fill, vecmat_acc, LstmParams, Tensor,
};
use crate::template_store::LogSequence;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// 512-dimensional embeddings and hidden states, batch 32.
    Paper,
    /// 64-dimensional, batch 16; trains in minutes on one core.
    Desk,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Hyperparams {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub dropout: f64,
    pub beam: usize,
    pub patience_epochs: usize,
    pub max_decode_len: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub max_epochs: usize,
    /// Feed the previous attentional vector into the next decoder input.
    pub input_feed: bool,
    /// Global gradient-norm clipping threshold.
    pub clip_norm: f64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            embed_dim: 512,
            hidden_dim: 512,
            dropout: 0.2,
            beam: 5,
            patience_epochs: 10,
            max_decode_len: 64,
            learning_rate: 1e-3,
            batch_size: 32,
            seed: 0,
            max_epochs: 500,
            input_feed: false,
            clip_norm: 5.0,
        }
    }
}

fn range_err(field: &str, reason: &str) -> Error {
    Error::OutOfRange {
        field: field.to_string(),
        reason: reason.to_string(),
    }
}

impl Hyperparams {
    pub fn with_profile(mut self, profile: Profile) -> Self {
        match profile {
            Profile::Paper => {
                self.embed_dim = 512;
                self.hidden_dim = 512;
                self.batch_size = 32;
            }
            Profile::Desk => {
                self.embed_dim = 64;
                self.hidden_dim = 64;
                self.batch_size = 16;
            }
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        for (f, v) in [
            ("embed_dim", self.embed_dim),
            ("hidden_dim", self.hidden_dim),
            ("beam", self.beam),
            ("patience_epochs", self.patience_epochs),
            ("max_decode_len", self.max_decode_len),
            ("batch_size", self.batch_size),
            ("max_epochs", self.max_epochs),
        ] {
            if v < 1 {
                return Err(range_err(f, "must be at least 1"));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(range_err("dropout", "must be in [0, 1)"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(range_err("learning_rate", "must be positive"));
        }
        if !(self.clip_norm.is_finite() && self.clip_norm > 0.0) {
            return Err(range_err("clip_norm", "must be positive"));
        }
        Ok(())
    }

    pub fn decoder_input_dim(&self) -> usize {
        if self.input_feed {
            self.embed_dim + self.hidden_dim
        } else {
            self.embed_dim
        }
    }
}

/// Every learned tensor of the encoder-attention-decoder.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    /// `|V_src| × E`
    pub src_embed: Tensor,
    /// `|V_tgt| × E`
    pub tgt_embed: Tensor,
    pub encoder: LstmParams,
    pub decoder: LstmParams,
    /// `H × H`, bilinear attention.
    pub w_a: Tensor,
    /// `2H × H`, maps `[h; context]` to the attentional vector.
    pub w_c: Tensor,
    pub b_c: Tensor,
    /// `H × |V_tgt|`
    pub w_out: Tensor,
    pub b_out: Tensor,
}

pub const PARAM_NAMES: [&str; 13] = [
    "src_embed",
    "tgt_embed",
    "encoder.w_ih",
    "encoder.w_hh",
    "encoder.bias",
    "decoder.w_ih",
    "decoder.w_hh",
    "decoder.bias",
    "w_a",
    "w_c",
    "b_c",
    "w_out",
    "b_out",
];

impl ModelParams {
    pub fn zeros(src_vocab: usize, tgt_vocab: usize, hp: &Hyperparams) -> Self {
        let (e, h) = (hp.embed_dim, hp.hidden_dim);
        ModelParams {
            src_embed: Tensor::zeros(&[src_vocab, e]),
            tgt_embed: Tensor::zeros(&[tgt_vocab, e]),
            encoder: LstmParams::zeros(e, h),
            decoder: LstmParams::zeros(hp.decoder_input_dim(), h),
            w_a: Tensor::zeros(&[h, h]),
            w_c: Tensor::zeros(&[2 * h, h]),
            b_c: Tensor::zeros(&[h]),
            w_out: Tensor::zeros(&[h, tgt_vocab]),
            b_out: Tensor::zeros(&[tgt_vocab]),
        }
    }

    pub fn init<R: Rng + ?Sized>(src_vocab: usize, tgt_vocab: usize, hp: &Hyperparams, rng: &mut R) -> Self {
        let mut p = Self::zeros(src_vocab, tgt_vocab, hp);
        uniform_fill(&mut p.src_embed, rng);
        uniform_fill(&mut p.tgt_embed, rng);
        p.encoder = LstmParams::init(hp.embed_dim, hp.hidden_dim, rng);
        p.decoder = LstmParams::init(hp.decoder_input_dim(), hp.hidden_dim, rng);
        uniform_fill(&mut p.w_a, rng);
        uniform_fill(&mut p.w_c, rng);
        uniform_fill(&mut p.w_out, rng);
        p
    }

    /// Tensors in [`PARAM_NAMES`] order.
    pub fn tensors(&self) -> [&Tensor; 13] {
        [
            &self.src_embed,
            &self.tgt_embed,
            &self.encoder.w_ih,
            &self.encoder.w_hh,
            &self.encoder.bias,
            &self.decoder.w_ih,
            &self.decoder.w_hh,
            &self.decoder.bias,
            &self.w_a,
            &self.w_c,
            &self.b_c,
            &self.w_out,
            &self.b_out,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 13] {
        [
            &mut self.src_embed,
            &mut self.tgt_embed,
            &mut self.encoder.w_ih,
            &mut self.encoder.w_hh,
            &mut self.encoder.bias,
            &mut self.decoder.w_ih,
            &mut self.decoder.w_hh,
            &mut self.decoder.bias,
            &mut self.w_a,
            &mut self.w_c,
            &mut self.b_c,
            &mut self.w_out,
            &mut self.b_out,
        ]
    }

    pub fn check(&self, src_vocab: usize, tgt_vocab: usize, hp: &Hyperparams) -> Result<()> {
        let want = Self::zeros(src_vocab, tgt_vocab, hp);
        for ((name, have), want) in PARAM_NAMES.iter().zip(self.tensors()).zip(want.tensors()) {
            if have.shape() != want.shape() {
                return Err(Error::shape(
                    "ModelParams",
                    format!("{name}: {:?}, expected {:?}", have.shape(), want.shape()),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Seq2SeqModel {
    pub src_vocab: Vocab,
    pub tgt_vocab: Vocab,
    pub hyper: Hyperparams,
    pub params: ModelParams,
}

/// Encoder outputs for one source.
#[derive(Clone, Debug)]
pub struct EncoderStates {
    pub states: Vec<Tensor>,
    pub final_h: Tensor,
    pub final_c: Tensor,
}

/// Decoder recurrent state between steps.
#[derive(Clone, Debug, PartialEq)]
pub struct DecState {
    pub h: Tensor,
    pub c: Tensor,
    /// Previous attentional vector; used only with input feeding.
    pub feed: Tensor,
}

impl Seq2SeqModel {
    pub fn new<R: Rng + ?Sized>(src_vocab: Vocab, tgt_vocab: Vocab, hyper: Hyperparams, rng: &mut R) -> Result<Self> {
        hyper.validate()?;
        let params = ModelParams::init(src_vocab.len(), tgt_vocab.len(), &hyper, rng);
        Ok(Seq2SeqModel {
            src_vocab,
            tgt_vocab,
            hyper,
            params,
        })
    }

    pub fn encode(&self, src: &LogSequence) -> Result<EncoderStates> {
        self.encode_ids(&self.src_vocab.encode_source(src))
    }

    pub fn encode_ids(&self, ids: &[usize]) -> Result<EncoderStates> {
        if ids.is_empty() {
            return Err(Error::Empty("source sequence"));
        }
        let hd = self.hyper.hidden_dim;
        let mut h = Tensor::zeros(&[hd]);
        let mut c = Tensor::zeros(&[hd]);
        let mut states = Vec::with_capacity(ids.len());
        for &id in ids {
            let x = embed_lookup(&self.params.src_embed, id)?;
            (h, c) = lstm_step(&x, &h, &c, &self.params.encoder)?;
            states.push(h.clone());
        }
        Ok(EncoderStates {
            states,
            final_h: h,
            final_c: c,
        })
    }

    pub fn initial_state(&self, enc: &EncoderStates) -> DecState {
        DecState {
            h: enc.final_h.clone(),
            c: enc.final_c.clone(),
            feed: Tensor::zeros(&[self.hyper.hidden_dim]),
        }
    }

    /// Unnormalised scores over the target vocabulary after feeding `prev`.
    pub fn step_logits(&self, prev: usize, state: &DecState, enc: &EncoderStates) -> Result<(Vec<f64>, DecState)> {
        let p = &self.params;
        let hd = self.hyper.hidden_dim;
        let mut x = embed_lookup(&p.tgt_embed, prev)?;
        if self.hyper.input_feed {
            let mut v = x.into_data();
            v.extend_from_slice(state.feed.data());
            x = Tensor::vector(v);
        }
        let (h, c) = lstm_step(&x, &state.h, &state.c, &p.decoder)?;
        let (ctx, _) = attention_context(&h, &enc.states, &p.w_a)?;
        let mut cat = h.data().to_vec();
        cat.extend_from_slice(ctx.data());
        let mut att = p.b_c.data().to_vec();
        vecmat_acc(&cat, p.w_c.data(), hd, &mut att);
        for a in &mut att {
            *a = a.tanh();
        }
        let mut logits = p.b_out.data().to_vec();
        vecmat_acc(&att, p.w_out.data(), self.tgt_vocab.len(), &mut logits);
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("decoder logits".into()));
        }
        Ok((
            logits,
            DecState {
                h,
                c,
                feed: Tensor::vector(att),
            },
        ))
    }

    /// Distribution over the target vocabulary for the next token.
    pub fn decode_step(&self, prev: usize, state: &DecState, enc: &EncoderStates) -> Result<(Vec<f64>, DecState)> {
        let (logits, next) = self.step_logits(prev, state, enc)?;
        Ok((softmax(&logits), next))
    }
}
