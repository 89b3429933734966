//! Batched teacher-forced forward pass on a [`Tape`].

use rand::Rng;

use super::model::{Hyperparams, ModelParams};
use super::vocab::{BOS, PAD};
use crate::tensor_core::{dropout_mask, LstmVars, Tape, Tensor, Var};

/// Source and target indices for one training pair. `tgt` ends with the
/// end-of-commands index.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedPair {
    pub src: Vec<usize>,
    pub tgt: Vec<usize>,
}

/// Tape handles for every parameter, in `PARAM_NAMES` order.
#[derive(Clone, Copy, Debug)]
pub struct ParamVars {
    pub src_embed: Var,
    pub tgt_embed: Var,
    pub encoder: LstmVars,
    pub decoder: LstmVars,
    pub w_a: Var,
    pub w_c: Var,
    pub b_c: Var,
    pub w_out: Var,
    pub b_out: Var,
}

impl ParamVars {
    pub fn from_slice(v: &[Var]) -> Self {
        assert_eq!(v.len(), 13, "parameter count");
        ParamVars {
            src_embed: v[0],
            tgt_embed: v[1],
            encoder: LstmVars {
                w_ih: v[2],
                w_hh: v[3],
                bias: v[4],
            },
            decoder: LstmVars {
                w_ih: v[5],
                w_hh: v[6],
                bias: v[7],
            },
            w_a: v[8],
            w_c: v[9],
            b_c: v[10],
            w_out: v[11],
            b_out: v[12],
        }
    }

    /// Registers copies of `params` as leaves; returns the handles in order.
    pub fn leaves(tape: &mut Tape, params: &ModelParams) -> (Self, Vec<Var>) {
        let vars: Vec<Var> = params.tensors().iter().map(|t| tape.leaf((*t).clone())).collect();
        (Self::from_slice(&vars), vars)
    }
}

/// Sum of per-token cross-entropies over `pairs`, and the token count.
/// Dropout is applied when `dropout` is given.
pub fn batch_loss<R: Rng + ?Sized>(
    tape: &mut Tape,
    pv: &ParamVars,
    hp: &Hyperparams,
    pairs: &[&EncodedPair],
    mut dropout: Option<&mut R>,
) -> (Var, usize) {
    let b = pairs.len();
    let hd = hp.hidden_dim;
    let src_lens: Vec<usize> = pairs.iter().map(|p| p.src.len()).collect();
    let s_max = *src_lens.iter().max().expect("non-empty batch");
    let mut drop = |tape: &mut Tape, x: Var| -> Var {
        match dropout.as_deref_mut() {
            Some(rng) if hp.dropout > 0.0 => {
                let n = tape.value(x).len();
                let mask = dropout_mask(n, hp.dropout, rng);
                tape.dropout(x, mask)
            }
            _ => x,
        }
    };

    // Encoder: one input projection for all time steps, row block t = step t.
    let src_ids: Vec<usize> = (0..s_max)
        .flat_map(|t| pairs.iter().map(move |p| p.src.get(t).copied().unwrap_or(PAD)))
        .collect();
    let emb = tape.gather(pv.src_embed, src_ids);
    let emb = drop(tape, emb);
    let xw = tape.matmul(emb, pv.encoder.w_ih);
    let xw = tape.add_row(xw, pv.encoder.bias);
    let h0 = tape.leaf(Tensor::zeros(&[b, hd]));
    let c0 = tape.leaf(Tensor::zeros(&[b, hd]));
    let enc = tape.lstm_seq(xw, h0, c0, pv.encoder.w_hh, src_lens.clone());
    let keys = tape.seq_hidden(enc);
    let mut h = tape.seq_state(enc, s_max - 1, false);
    let mut c = tape.seq_state(enc, s_max - 1, true);

    // Decoder, teacher-forced: input <s> y1 .. y_{n-1}, output y1 .. y_n.
    let tgt_lens: Vec<usize> = pairs.iter().map(|p| p.tgt.len()).collect();
    let t_max = *tgt_lens.iter().max().unwrap();
    let tgt_in: Vec<usize> = (0..t_max)
        .flat_map(|t| {
            pairs.iter().map(move |p| match t {
                0 => BOS,
                _ => p.tgt.get(t - 1).copied().unwrap_or(PAD),
            })
        })
        .collect();
    let mut targets = Vec::with_capacity(t_max * b);
    let mut weights = Vec::with_capacity(t_max * b);
    for t in 0..t_max {
        for p in pairs {
            let live = t < p.tgt.len();
            targets.push(if live { p.tgt[t] } else { PAD });
            weights.push(if live { 1.0 } else { 0.0 });
        }
    }
    let n_tokens = tgt_lens.iter().sum();

    let demb = tape.gather(pv.tgt_embed, tgt_in);
    let demb = drop(tape, demb);
    let attentional = if hp.input_feed {
        let mut feed = tape.leaf(Tensor::zeros(&[b, hd]));
        let mut outs = Vec::with_capacity(t_max);
        for t in 0..t_max {
            let x_t = tape.row_slice(demb, t * b, b);
            let x_t = tape.concat_cols(x_t, feed);
            let (h_new, c_new) = tape.lstm_step(x_t, h, c, &pv.decoder);
            h = h_new;
            c = c_new;
            let ctx = tape.attend(h, keys, src_lens.clone(), pv.w_a);
            let cat = tape.concat_cols(h, ctx);
            let pre = tape.matmul(cat, pv.w_c);
            let pre = tape.add_row(pre, pv.b_c);
            feed = tape.tanh(pre);
            outs.push(feed);
        }
        tape.concat_rows(outs)
    } else {
        let dxw = tape.matmul(demb, pv.decoder.w_ih);
        let dxw = tape.add_row(dxw, pv.decoder.bias);
        let dec = tape.lstm_seq(dxw, h, c, pv.decoder.w_hh, vec![t_max; b]);
        let hs = tape.seq_rows(dec);
        let queries = tape.matmul(hs, pv.w_a);
        let ctx = tape.attention_seq(queries, keys, src_lens);
        let cat = tape.concat_cols(hs, ctx);
        let pre = tape.matmul(cat, pv.w_c);
        let pre = tape.add_row(pre, pv.b_c);
        tape.tanh(pre)
    };
    let attentional = drop(tape, attentional);
    let logits = tape.matmul(attentional, pv.w_out);
    let logits = tape.add_row(logits, pv.b_out);
    (tape.softmax_xent(logits, targets, weights), n_tokens)
}

/// Mean per-token loss over `pairs` in inference mode, in chunks of `batch`.
pub fn mean_loss(params: &ModelParams, hp: &Hyperparams, pairs: &[EncodedPair], batch: usize) -> f64 {
    let mut total = 0.0;
    let mut tokens = 0;
    for chunk in pairs.chunks(batch.max(1)) {
        let refs: Vec<&EncodedPair> = chunk.iter().collect();
        let mut tape = Tape::new();
        let (pv, _) = ParamVars::leaves(&mut tape, params);
        let (loss, n) = batch_loss::<rand_chacha::ChaCha8Rng>(&mut tape, &pv, hp, &refs, None);
        total += tape.value(loss).data()[0];
        tokens += n;
    }
    total / tokens.max(1) as f64
}
