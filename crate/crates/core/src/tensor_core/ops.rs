//! Forward-only primitives over single vectors. Decoding runs on these; the
//! batched training path in [`super::tape`] must agree with them.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tensor::{dot, sigmoid, vecmat_acc, Tensor};
use crate::error::{Error, Result};

/// Probabilities are floored at this value before taking a logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

/// Half-width of the uniform initialisation range.
pub const INIT_RANGE: f64 = 0.08;

/// Weights of one LSTM cell. Gate blocks are laid out column-wise in the
/// order input, forget, cell candidate, output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LstmParams {
    pub input_dim: usize,
    pub hidden_dim: usize,
    /// `input_dim × 4·hidden_dim`
    pub w_ih: Tensor,
    /// `hidden_dim × 4·hidden_dim`
    pub w_hh: Tensor,
    /// `4·hidden_dim`
    pub bias: Tensor,
}

impl LstmParams {
    pub fn zeros(input_dim: usize, hidden_dim: usize) -> Self {
        LstmParams {
            input_dim,
            hidden_dim,
            w_ih: Tensor::zeros(&[input_dim, 4 * hidden_dim]),
            w_hh: Tensor::zeros(&[hidden_dim, 4 * hidden_dim]),
            bias: Tensor::zeros(&[4 * hidden_dim]),
        }
    }

    /// Uniform(−0.08, 0.08) weights, zero biases except the forget gate at 1.
    pub fn init<R: Rng + ?Sized>(input_dim: usize, hidden_dim: usize, rng: &mut R) -> Self {
        let mut p = Self::zeros(input_dim, hidden_dim);
        uniform_fill(&mut p.w_ih, rng);
        uniform_fill(&mut p.w_hh, rng);
        for v in &mut p.bias.data_mut()[hidden_dim..2 * hidden_dim] {
            *v = 1.0;
        }
        p
    }

    pub fn check(&self) -> Result<()> {
        let g = 4 * self.hidden_dim;
        if self.w_ih.shape() != [self.input_dim, g]
            || self.w_hh.shape() != [self.hidden_dim, g]
            || self.bias.shape() != [g]
        {
            return Err(Error::shape(
                "LstmParams",
                format!(
                    "dims ({}, {}) vs w_ih {:?}, w_hh {:?}, bias {:?}",
                    self.input_dim,
                    self.hidden_dim,
                    self.w_ih.shape(),
                    self.w_hh.shape(),
                    self.bias.shape()
                ),
            ));
        }
        Ok(())
    }
}

pub fn uniform_fill<R: Rng + ?Sized>(t: &mut Tensor, rng: &mut R) {
    for v in t.data_mut() {
        *v = rng.random_range(-INIT_RANGE..INIT_RANGE);
    }
}

/// Row `id` of an embedding table.
pub fn embed_lookup(table: &Tensor, id: usize) -> Result<Tensor> {
    if table.shape().len() != 2 {
        return Err(Error::shape("embed_lookup", format!("table shape {:?}", table.shape())));
    }
    if id >= table.rows() {
        return Err(Error::IndexOutOfRange {
            what: "embedding table",
            index: id,
            len: table.rows(),
        });
    }
    Ok(Tensor::vector(table.row(id).to_vec()))
}

/// One LSTM step; returns `(h, c)`.
pub fn lstm_step(x: &Tensor, h_prev: &Tensor, c_prev: &Tensor, p: &LstmParams) -> Result<(Tensor, Tensor)> {
    p.check()?;
    let hd = p.hidden_dim;
    if x.len() != p.input_dim || h_prev.len() != hd || c_prev.len() != hd {
        return Err(Error::shape(
            "lstm_step",
            format!(
                "x {} h {} c {} for cell ({}, {})",
                x.len(),
                h_prev.len(),
                c_prev.len(),
                p.input_dim,
                hd
            ),
        ));
    }
    let mut gates = p.bias.data().to_vec();
    vecmat_acc(x.data(), p.w_ih.data(), 4 * hd, &mut gates);
    vecmat_acc(h_prev.data(), p.w_hh.data(), 4 * hd, &mut gates);
    let mut h = vec![0.0; hd];
    let mut c = vec![0.0; hd];
    for j in 0..hd {
        let i = sigmoid(gates[j]);
        let f = sigmoid(gates[hd + j]);
        let g = gates[2 * hd + j].tanh();
        let o = sigmoid(gates[3 * hd + j]);
        c[j] = f * c_prev.data()[j] + i * g;
        h[j] = o * c[j].tanh();
    }
    Ok((Tensor::vector(h), Tensor::vector(c)))
}

/// Bilinear ("general") attention: scores `hᵀ W_a h̄_s`, softmax weights and
/// the weighted sum of encoder states.
pub fn attention_context(h_t: &Tensor, enc_states: &[Tensor], w_a: &Tensor) -> Result<(Tensor, Tensor)> {
    if enc_states.is_empty() {
        return Err(Error::Empty("attention over zero encoder states"));
    }
    let d = h_t.len();
    if w_a.shape() != [d, d] || enc_states.iter().any(|s| s.len() != d) {
        return Err(Error::shape(
            "attention_context",
            format!("h {} W_a {:?}", d, w_a.shape()),
        ));
    }
    let mut query = vec![0.0; d];
    vecmat_acc(h_t.data(), w_a.data(), d, &mut query);
    let scores: Vec<f64> = enc_states.iter().map(|s| dot(&query, s.data())).collect();
    let weights = softmax(&scores);
    let mut ctx = vec![0.0; d];
    for (w, s) in weights.iter().zip(enc_states) {
        for (c, v) in ctx.iter_mut().zip(s.data()) {
            *c += w * v;
        }
    }
    Ok((Tensor::vector(ctx), Tensor::vector(weights)))
}

/// Max-shifted softmax.
pub fn softmax(v: &[f64]) -> Vec<f64> {
    if v.is_empty() {
        return Vec::new();
    }
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for o in &mut out {
        *o /= sum;
    }
    out
}

/// Log-softmax with entries flagged in `banned` removed from the support
/// (their result is −∞).
pub fn masked_log_softmax(v: &[f64], banned: &[bool]) -> Vec<f64> {
    let max = v
        .iter()
        .zip(banned)
        .filter(|(_, &b)| !b)
        .map(|(x, _)| *x)
        .fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = v
        .iter()
        .zip(banned)
        .filter(|(_, &b)| !b)
        .map(|(x, _)| (x - max).exp())
        .sum();
    let log_z = max + sum.ln();
    v.iter()
        .zip(banned)
        .map(|(x, &b)| if b { f64::NEG_INFINITY } else { x - log_z })
        .collect()
}

/// `−ln max(probs[target], 1e-12)`.
pub fn cross_entropy(probs: &[f64], target: usize) -> Result<f64> {
    let p = probs.get(target).ok_or(Error::IndexOutOfRange {
        what: "distribution",
        index: target,
        len: probs.len(),
    })?;
    Ok(-p.max(PROB_FLOOR).ln())
}

/// Inverted-dropout mask: each entry is 0 with probability `rate`, otherwise
/// `1 / (1 − rate)`, so no rescaling is needed at inference.
pub fn dropout_mask<R: Rng + ?Sized>(n: usize, rate: f64, rng: &mut R) -> Vec<f64> {
    if rate <= 0.0 {
        return vec![1.0; n];
    }
    let keep = 1.0 / (1.0 - rate);
    (0..n)
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
        .collect()
}
