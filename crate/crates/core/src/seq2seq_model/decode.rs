use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use super::model::{DecState, EncoderStates, Seq2SeqModel};
use super::vocab::{BOS, EOS, PAD, UNK};
use crate::error::{Error, Result};
use crate::template_store::LogSequence;
use crate::tensor_core::masked_log_softmax;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredHypothesis {
    /// Target tokens, always ending with the end-of-commands token.
    pub tokens: Vec<String>,
    /// `ln p(y_t | y_<t, x)` for every generated token. A truncated
    /// hypothesis has one entry fewer than `tokens`: its closing token was
    /// appended, not generated.
    pub token_logprobs: Vec<f64>,
    pub reliability: f64,
    pub truncated: bool,
}

/// Geometric-mean token probability, `exp(mean(logprobs))`.
pub fn reliability(token_logprobs: &[f64]) -> Result<f64> {
    if token_logprobs.is_empty() {
        return Err(Error::Empty("token log-probabilities"));
    }
    let mean = token_logprobs.iter().sum::<f64>() / token_logprobs.len() as f64;
    Ok(mean.exp())
}

/// Tokens the decoder may never emit.
fn banned(vocab_len: usize) -> Vec<bool> {
    let mut b = vec![false; vocab_len];
    for i in [PAD, BOS, UNK] {
        if i < vocab_len {
            b[i] = true;
        }
    }
    b
}

struct Partial {
    ids: Vec<usize>,
    logprobs: Vec<f64>,
    score: f64,
    state: DecState,
}

impl Seq2SeqModel {
    fn finish(&self, ids: Vec<usize>, logprobs: Vec<f64>, truncated: bool) -> ScoredHypothesis {
        let mut ids = ids;
        if truncated {
            ids.push(EOS);
        }
        // A hypothesis holds at least one generated token, so this is finite.
        let rel = reliability(&logprobs).unwrap_or(0.0);
        ScoredHypothesis {
            tokens: self.tgt_vocab.decode(&ids),
            token_logprobs: logprobs,
            reliability: rel,
            truncated,
        }
    }

    /// Argmax decoding; stops at the end-of-commands token or after
    /// `max_len` steps.
    pub fn greedy_decode(&self, src: &LogSequence, max_len: usize) -> Result<ScoredHypothesis> {
        let enc = self.encode(src)?;
        self.greedy_from(&enc, max_len)
    }

    pub fn greedy_from(&self, enc: &EncoderStates, max_len: usize) -> Result<ScoredHypothesis> {
        let ban = banned(self.tgt_vocab.len());
        let mut state = self.initial_state(enc);
        let mut prev = BOS;
        let mut ids = Vec::new();
        let mut lps = Vec::new();
        for _ in 0..max_len.max(1) {
            let (logits, next) = self.step_logits(prev, &state, enc)?;
            let lp = masked_log_softmax(&logits, &ban);
            // First maximum wins ties, matching the beam candidate order.
            let mut best = 0;
            for (i, v) in lp.iter().enumerate() {
                if *v > lp[best] {
                    best = i;
                }
            }
            ids.push(best);
            lps.push(lp[best]);
            if best == EOS {
                return Ok(self.finish(ids, lps, false));
            }
            prev = best;
            state = next;
        }
        Ok(self.finish(ids, lps, true))
    }

    /// Beam search over cumulative log-probability. Returns up to `beam`
    /// hypotheses sorted by reliability, highest first.
    pub fn beam_decode(&self, src: &LogSequence, beam: usize, max_len: usize) -> Result<Vec<ScoredHypothesis>> {
        let enc = self.encode(src)?;
        self.beam_from(&enc, beam, max_len)
    }

    pub fn beam_from(&self, enc: &EncoderStates, beam: usize, max_len: usize) -> Result<Vec<ScoredHypothesis>> {
        if beam == 0 {
            return Err(Error::OutOfRange {
                field: "beam".into(),
                reason: "must be at least 1".into(),
            });
        }
        let ban = banned(self.tgt_vocab.len());
        let mut active = vec![Partial {
            ids: Vec::new(),
            logprobs: Vec::new(),
            score: 0.0,
            state: self.initial_state(enc),
        }];
        let mut finished: Vec<ScoredHypothesis> = Vec::new();

        for _ in 0..max_len.max(1) {
            // (cumulative score, token logprob, beam index, token, next state index)
            let mut cands: Vec<(f64, f64, usize, usize)> = Vec::new();
            let mut next_states = Vec::with_capacity(active.len());
            for (bi, p) in active.iter().enumerate() {
                let prev = p.ids.last().copied().unwrap_or(BOS);
                let (logits, next) = self.step_logits(prev, &p.state, enc)?;
                next_states.push(next);
                let lp = masked_log_softmax(&logits, &ban);
                for (tok, &l) in lp.iter().enumerate() {
                    if !ban[tok] {
                        cands.push((p.score + l, l, bi, tok));
                    }
                }
            }
            cands.sort_by(|a, b| {
                b.0.partial_cmp(&a.0)
                    .unwrap_or(Ordering::Equal)
                    .then(b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal))
                    .then(a.2.cmp(&b.2))
                    .then(a.3.cmp(&b.3))
            });
            let mut next_active = Vec::with_capacity(beam);
            for (rank, &(score, l, bi, tok)) in cands.iter().enumerate() {
                if rank >= beam && next_active.len() >= beam {
                    break;
                }
                let src = &active[bi];
                let mut ids = src.ids.clone();
                ids.push(tok);
                let mut logprobs = src.logprobs.clone();
                logprobs.push(l);
                if tok == EOS {
                    if rank < beam {
                        finished.push(self.finish(ids, logprobs, false));
                    }
                } else if next_active.len() < beam {
                    next_active.push(Partial {
                        ids,
                        logprobs,
                        score,
                        state: next_states[bi].clone(),
                    });
                }
            }
            active = next_active;
            if finished.len() >= beam || active.is_empty() {
                active.clear();
                break;
            }
        }
        for p in active {
            finished.push(self.finish(p.ids, p.logprobs, true));
        }
        finished.sort_by(|a, b| b.reliability.partial_cmp(&a.reliability).unwrap_or(Ordering::Equal));
        finished.truncate(beam);
        Ok(finished)
    }
}
