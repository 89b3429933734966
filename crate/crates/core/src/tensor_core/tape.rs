//! Reverse-mode differentiation over batched 2-D tensors.
//!
//! Every op appends a node holding its value and the inputs needed for the
//! backward pass. [`Tape::backward`] walks the nodes in exact reverse order
//! and accumulates gradients additively. Shape mismatches inside the tape
//! are programming errors and panic; non-finite values are reported as
//! [`Error::NonFinite`] naming the first offending op.

use super::ops::PROB_FLOOR;
use super::tensor::{gemm_acc, sigmoid, Tensor};
use crate::error::{Error, Result};

/// Tape handles for the three tensors of an LSTM cell.
#[derive(Clone, Copy, Debug)]
pub struct LstmVars {
    pub w_ih: Var,
    pub w_hh: Var,
    pub bias: Var,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Tanh(Var),
    Sigmoid(Var),
    Scale(Var, f64),
    Sum(Var),
    Gather { table: Var, ids: Vec<usize> },
    Dropout { x: Var, mask: Vec<f64> },
    RowSlice { x: Var, start: usize },
    /// Rows `start..start+m` of `base` plus `a · w`.
    AffineRows { base: Var, start: usize, a: Var, w: Var },
    ConcatCols(Var, Var),
    ConcatRows(Vec<Var>),
    /// `acts` holds σ(i), σ(f), tanh(g) per unit.
    LstmCell { gates: Var, c_prev: Var, acts: Vec<f64> },
    /// `acts` holds σ(o), tanh(c) per unit.
    LstmHidden { gates: Var, c: Var, acts: Vec<f64> },
    /// `acts` holds σ(i), σ(f), tanh(g), σ(o), tanh(c) per step and unit.
    LstmSeq { pre: Var, h0: Var, c0: Var, w_hh: Var, lens: Vec<usize>, acts: Vec<f64> },
    SeqHidden(Var),
    SeqRows(Var),
    /// `weights` holds, per batch row `r`, a `T×lens[r]` block at offset `r·T·S`.
    AttentionSeq { queries: Var, keys: Var, lens: Vec<usize>, weights: Vec<f64> },
    SeqState { seq: Var, t: usize, cell: bool },
    Blend { new: Var, old: Var, take_new: Vec<bool> },
    Stack(Vec<Var>),
    Attention { query: Var, keys: Var, lens: Vec<usize>, weights: Vec<f64> },
    SoftmaxXent { logits: Var, targets: Vec<usize>, weights: Vec<f64>, probs: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    non_finite: Option<String>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the output w.r.t. `v`; `None` when `v` does not influence it.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn grad_buf(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn dims2(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Name of the first op whose output contained NaN or ±∞, if any.
    pub fn non_finite(&self) -> Option<&str> {
        self.non_finite.as_deref()
    }

    fn push(&mut self, value: Tensor, op: Op, name: &str) -> Var {
        if self.non_finite.is_none() && !value.all_finite() {
            self.non_finite = Some(format!("{name} (node {})", self.nodes.len()));
        }
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, "leaf")
    }

    /// `a (m×k) · b (k×n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = dims2(self.value(a));
        let (k2, n) = dims2(self.value(b));
        assert_eq!(k, k2, "matmul inner dims {:?} · {:?}", self.value(a).shape(), self.value(b).shape());
        let mut out = vec![0.0; m * n];
        gemm_acc(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out);
        let value = Tensor::from_vec(&[m, n], out).expect("matmul shape");
        self.push(value, Op::MatMul(a, b), "matmul")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "add shapes");
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        self.push(value, Op::Add(a, b), "add")
    }

    /// `x (r×c) + bias (c)` broadcast over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Var {
        let c = self.value(x).cols();
        assert_eq!(self.value(bias).len(), c, "add_row bias length");
        let mut value = self.value(x).clone();
        let b = self.value(bias).data().to_vec();
        for row in value.data_mut().chunks_mut(c) {
            for (v, bv) in row.iter_mut().zip(&b) {
                *v += bv;
            }
        }
        self.push(value, Op::AddRow(x, bias), "add_row")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "mul shapes");
        let mut value = self.value(a).clone();
        for (v, w) in value.data_mut().iter_mut().zip(self.value(b).data()) {
            *v *= w;
        }
        self.push(value, Op::Mul(a, b), "mul")
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let mut value = self.value(x).clone();
        for v in value.data_mut() {
            *v = v.tanh();
        }
        self.push(value, Op::Tanh(x), "tanh")
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let mut value = self.value(x).clone();
        for v in value.data_mut() {
            *v = sigmoid(*v);
        }
        self.push(value, Op::Sigmoid(x), "sigmoid")
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let mut value = self.value(x).clone();
        value.scale(k);
        self.push(value, Op::Scale(x, k), "scale")
    }

    /// Sum of all entries, as a 1-element tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::vector(vec![self.value(x).sum()]);
        self.push(value, Op::Sum(x), "sum")
    }

    /// Rows `ids` of a 2-D table, stacked into `ids.len() × d`.
    pub fn gather(&mut self, table: Var, ids: Vec<usize>) -> Var {
        let t = self.value(table);
        let (rows, d) = dims2(t);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in &ids {
            assert!(id < rows, "gather id {id} out of range for {rows} rows");
            out.extend_from_slice(t.row(id));
        }
        let value = Tensor::from_vec(&[ids.len(), d], out).expect("gather shape");
        self.push(value, Op::Gather { table, ids }, "gather")
    }

    /// Elementwise product with a fixed mask (see [`super::ops::dropout_mask`]).
    pub fn dropout(&mut self, x: Var, mask: Vec<f64>) -> Var {
        assert_eq!(mask.len(), self.value(x).len(), "dropout mask length");
        let mut value = self.value(x).clone();
        for (v, m) in value.data_mut().iter_mut().zip(&mask) {
            *v *= m;
        }
        self.push(value, Op::Dropout { x, mask }, "dropout")
    }

    /// Rows `start .. start + n` of a 2-D tensor.
    pub fn row_slice(&mut self, x: Var, start: usize, n: usize) -> Var {
        let t = self.value(x);
        let c = t.cols();
        assert!(start + n <= t.rows(), "row_slice past end");
        let value = Tensor::from_vec(&[n, c], t.data()[start * c..(start + n) * c].to_vec())
            .expect("row_slice shape");
        self.push(value, Op::RowSlice { x, start }, "row_slice")
    }

    /// `base[start..start+m] + a · w` where `a` is m×k.
    pub fn affine_rows(&mut self, base: Var, start: usize, a: Var, w: Var) -> Var {
        let (m, k) = dims2(self.value(a));
        let (k2, n) = dims2(self.value(w));
        assert_eq!(k, k2, "affine_rows inner dims");
        let bt = self.value(base);
        assert_eq!(bt.cols(), n, "affine_rows base cols");
        assert!(start + m <= bt.rows(), "affine_rows past end");
        let mut out = bt.data()[start * n..(start + m) * n].to_vec();
        gemm_acc(m, k, n, self.value(a).data(), false, self.value(w).data(), false, &mut out);
        let value = Tensor::from_vec(&[m, n], out).expect("affine_rows shape");
        self.push(value, Op::AffineRows { base, start, a, w }, "affine_rows")
    }

    /// `[a | b]` along columns; both must have the same row count.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (ra, ca) = dims2(self.value(a));
        let (rb, cb) = dims2(self.value(b));
        assert_eq!(ra, rb, "concat_cols rows");
        let mut out = Vec::with_capacity(ra * (ca + cb));
        for r in 0..ra {
            out.extend_from_slice(self.value(a).row(r));
            out.extend_from_slice(self.value(b).row(r));
        }
        let value = Tensor::from_vec(&[ra, ca + cb], out).expect("concat shape");
        self.push(value, Op::ConcatCols(a, b), "concat_cols")
    }

    /// Vertical concatenation of 2-D tensors sharing a column count.
    pub fn concat_rows(&mut self, parts: Vec<Var>) -> Var {
        let c = self.value(parts[0]).cols();
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in &parts {
            let t = self.value(p);
            assert_eq!(t.cols(), c, "concat_rows cols");
            rows += t.rows();
            out.extend_from_slice(t.data());
        }
        let value = Tensor::from_vec(&[rows, c], out).expect("concat_rows shape");
        self.push(value, Op::ConcatRows(parts), "concat_rows")
    }

    /// LSTM cell state from gate pre-activations `[i|f|g|o]` (B×4H) and the
    /// previous cell (B×H): `c = σ(f)·c_prev + σ(i)·tanh(g)`.
    pub fn lstm_cell(&mut self, gates: Var, c_prev: Var) -> Var {
        let (b, g4) = dims2(self.value(gates));
        let h = g4 / 4;
        assert_eq!(self.value(c_prev).shape(), [b, h], "lstm_cell c_prev shape");
        let gv = self.value(gates).data();
        let cp = self.value(c_prev).data();
        let mut out = vec![0.0; b * h];
        let mut acts = vec![0.0; 3 * b * h];
        for r in 0..b {
            let g = &gv[r * g4..(r + 1) * g4];
            for j in 0..h {
                let i = sigmoid(g[j]);
                let f = sigmoid(g[h + j]);
                let cand = g[2 * h + j].tanh();
                let k = r * h + j;
                out[k] = f * cp[k] + i * cand;
                acts[3 * k] = i;
                acts[3 * k + 1] = f;
                acts[3 * k + 2] = cand;
            }
        }
        let value = Tensor::from_vec(&[b, h], out).expect("lstm_cell shape");
        self.push(value, Op::LstmCell { gates, c_prev, acts }, "lstm_cell")
    }

    /// LSTM hidden output `h = σ(o)·tanh(c)`.
    pub fn lstm_hidden(&mut self, gates: Var, c: Var) -> Var {
        let (b, g4) = dims2(self.value(gates));
        let h = g4 / 4;
        assert_eq!(self.value(c).shape(), [b, h], "lstm_hidden c shape");
        let gv = self.value(gates).data();
        let cv = self.value(c).data();
        let mut out = vec![0.0; b * h];
        let mut acts = vec![0.0; 2 * b * h];
        for r in 0..b {
            for j in 0..h {
                let k = r * h + j;
                let o = sigmoid(gv[r * g4 + 3 * h + j]);
                let tc = cv[k].tanh();
                out[k] = o * tc;
                acts[2 * k] = o;
                acts[2 * k + 1] = tc;
            }
        }
        let value = Tensor::from_vec(&[b, h], out).expect("lstm_hidden shape");
        self.push(value, Op::LstmHidden { gates, c, acts }, "lstm_hidden")
    }

    /// Row `r` of the result is row `r` of `new` where `take_new[r]`, else of `old`.
    pub fn blend(&mut self, new: Var, old: Var, take_new: Vec<bool>) -> Var {
        assert_eq!(self.value(new).shape(), self.value(old).shape(), "blend shapes");
        let (rows, c) = dims2(self.value(new));
        assert_eq!(take_new.len(), rows, "blend mask rows");
        let mut out = Vec::with_capacity(rows * c);
        for (r, &t) in take_new.iter().enumerate() {
            let src = if t { new } else { old };
            out.extend_from_slice(self.value(src).row(r));
        }
        let value = Tensor::from_vec(&[rows, c], out).expect("blend shape");
        self.push(value, Op::Blend { new, old, take_new }, "blend")
    }

    /// Runs an LSTM over `S` steps in one node. Rows `t*B..(t+1)*B` of `pre`
    /// hold `x_t · W_ih + bias`. Row `r` carries its state unchanged once
    /// `t >= lens[r]`. The result is `S×2×B×H`: per step, `h` then `c`.
    pub fn lstm_seq(&mut self, pre: Var, h0: Var, c0: Var, w_hh: Var, lens: Vec<usize>) -> Var {
        let (b, h) = dims2(self.value(h0));
        let g4 = 4 * h;
        let bh = b * h;
        assert_eq!(self.value(c0).shape(), [b, h], "lstm_seq c0");
        assert_eq!(self.value(w_hh).shape(), [h, g4], "lstm_seq w_hh");
        assert_eq!(lens.len(), b, "lstm_seq lens");
        let pv = self.value(pre).data();
        assert_eq!(self.value(pre).cols(), g4, "lstm_seq pre cols");
        assert!(b > 0 && self.value(pre).rows() % b == 0, "lstm_seq pre rows");
        let s = self.value(pre).rows() / b;
        let w = self.value(w_hh).data();
        let (h0v, c0v) = (self.value(h0).data(), self.value(c0).data());
        let mut out = vec![0.0; s * 2 * bh];
        let mut acts = vec![0.0; s * bh * 5];
        let mut gates = vec![0.0; b * g4];
        for t in 0..s {
            let (done, rest) = out.split_at_mut(t * 2 * bh);
            let (hp, cp) = if t == 0 {
                (h0v, c0v)
            } else {
                done[(t - 1) * 2 * bh..].split_at(bh)
            };
            gates.copy_from_slice(&pv[t * b * g4..(t + 1) * b * g4]);
            gemm_acc(b, h, g4, hp, false, w, false, &mut gates);
            let (hn, cn) = rest[..2 * bh].split_at_mut(bh);
            for r in 0..b {
                let gr = &gates[r * g4..(r + 1) * g4];
                for j in 0..h {
                    let k = r * h + j;
                    if t >= lens[r] {
                        hn[k] = hp[k];
                        cn[k] = cp[k];
                        continue;
                    }
                    let i = sigmoid(gr[j]);
                    let f = sigmoid(gr[h + j]);
                    let g = gr[2 * h + j].tanh();
                    let o = sigmoid(gr[3 * h + j]);
                    let c = f * cp[k] + i * g;
                    let tc = c.tanh();
                    cn[k] = c;
                    hn[k] = o * tc;
                    acts[(t * bh + k) * 5..(t * bh + k + 1) * 5].copy_from_slice(&[i, f, g, o, tc]);
                }
            }
        }
        let value = Tensor::from_vec(&[s, 2, b, h], out).expect("lstm_seq shape");
        self.push(value, Op::LstmSeq { pre, h0, c0, w_hh, lens, acts }, "lstm_seq")
    }

    /// Hidden states of an [`Tape::lstm_seq`] result as `B×S×H`.
    pub fn seq_hidden(&mut self, seq: Var) -> Var {
        let sv = self.value(seq);
        let (s, b, h) = (sv.shape()[0], sv.shape()[2], sv.shape()[3]);
        let mut out = vec![0.0; b * s * h];
        for t in 0..s {
            for r in 0..b {
                let src = &sv.data()[(t * 2 * b + r) * h..(t * 2 * b + r + 1) * h];
                out[(r * s + t) * h..(r * s + t + 1) * h].copy_from_slice(src);
            }
        }
        let value = Tensor::from_vec(&[b, s, h], out).expect("seq_hidden shape");
        self.push(value, Op::SeqHidden(seq), "seq_hidden")
    }

    /// Hidden states of an [`Tape::lstm_seq`] result as time-major rows,
    /// `(S·B)×H` with row `t·B + r`.
    pub fn seq_rows(&mut self, seq: Var) -> Var {
        let sv = self.value(seq);
        let (s, b, h) = (sv.shape()[0], sv.shape()[2], sv.shape()[3]);
        let mut out = Vec::with_capacity(s * b * h);
        for t in 0..s {
            out.extend_from_slice(&sv.data()[t * 2 * b * h..(t * 2 + 1) * b * h]);
        }
        let value = Tensor::from_vec(&[s * b, h], out).expect("seq_rows shape");
        self.push(value, Op::SeqRows(seq), "seq_rows")
    }

    /// [`Tape::attention`] for `T` query steps at once. `queries` is
    /// `(T·B)×H` with row `t·B + r`; the contexts come back in that layout.
    pub fn attention_seq(&mut self, queries: Var, keys: Var, lens: Vec<usize>) -> Var {
        let kt = self.value(keys);
        assert_eq!(kt.shape().len(), 3, "attention keys must be B×S×H");
        let (b, s, h) = (kt.shape()[0], kt.shape()[1], kt.shape()[2]);
        let qv = self.value(queries);
        let (tb, hq) = dims2(qv);
        assert!(hq == h && b > 0 && tb % b == 0, "attention_seq shapes");
        assert_eq!(lens.len(), b);
        let t = tb / b;
        let mut weights = vec![0.0; b * t * s];
        let mut out = vec![0.0; tb * h];
        let mut q_r = vec![0.0; t * h];
        for r in 0..b {
            let len = lens[r];
            assert!(len >= 1 && len <= s, "attention length {len} for {s} keys");
            for step in 0..t {
                q_r[step * h..(step + 1) * h].copy_from_slice(qv.row(step * b + r));
            }
            let k_r = &kt.data()[r * s * h..(r * s + len) * h];
            let w = &mut weights[r * t * s..r * t * s + t * len];
            gemm_acc(t, h, len, &q_r, false, k_r, true, w);
            for row in w.chunks_mut(len) {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for x in row.iter_mut() {
                    *x = (*x - max).exp();
                    z += *x;
                }
                for x in row.iter_mut() {
                    *x /= z;
                }
            }
            let mut c_r = vec![0.0; t * h];
            gemm_acc(t, len, h, w, false, k_r, false, &mut c_r);
            for step in 0..t {
                out[(step * b + r) * h..(step * b + r + 1) * h].copy_from_slice(&c_r[step * h..(step + 1) * h]);
            }
        }
        let value = Tensor::from_vec(&[tb, h], out).expect("attention_seq shape");
        self.push(value, Op::AttentionSeq { queries, keys, lens, weights }, "attention_seq")
    }

    /// Hidden (or, with `cell`, cell) state after step `t` of an
    /// [`Tape::lstm_seq`] result, `B×H`.
    pub fn seq_state(&mut self, seq: Var, t: usize, cell: bool) -> Var {
        let sv = self.value(seq);
        let (b, h) = (sv.shape()[2], sv.shape()[3]);
        assert!(t < sv.shape()[0], "seq_state step");
        let off = (2 * t + usize::from(cell)) * b * h;
        let value = Tensor::from_vec(&[b, h], sv.data()[off..off + b * h].to_vec()).expect("seq_state shape");
        self.push(value, Op::SeqState { seq, t, cell }, "seq_state")
    }

    /// Stacks `S` tensors of shape `B×H` into `B×S×H`.
    pub fn stack(&mut self, steps: Vec<Var>) -> Var {
        let (b, h) = dims2(self.value(steps[0]));
        let s = steps.len();
        let mut out = vec![0.0; b * s * h];
        for (t, &v) in steps.iter().enumerate() {
            let val = self.value(v);
            assert_eq!(val.shape(), [b, h], "stack shapes");
            for r in 0..b {
                out[(r * s + t) * h..(r * s + t + 1) * h].copy_from_slice(val.row(r));
            }
        }
        let value = Tensor::from_vec(&[b, s, h], out).expect("stack shape");
        self.push(value, Op::Stack(steps), "stack")
    }

    /// Bilinear attention readout. `query` is `B×H` (already multiplied by
    /// `W_a`), `keys` is `B×S×H`; only the first `lens[b]` keys of row `b`
    /// take part. Returns the `B×H` context.
    pub fn attention(&mut self, query: Var, keys: Var, lens: Vec<usize>) -> Var {
        let q = self.value(query);
        let k = self.value(keys);
        let (b, h) = dims2(q);
        assert_eq!(k.shape().len(), 3, "attention keys must be B×S×H");
        let s = k.shape()[1];
        assert_eq!(k.shape(), [b, s, h], "attention shapes");
        assert_eq!(lens.len(), b);
        let mut weights = vec![0.0; b * s];
        let mut ctx = vec![0.0; b * h];
        for r in 0..b {
            let len = lens[r];
            assert!(len >= 1 && len <= s, "attention length {len} for {s} keys");
            let qr = q.row(r);
            let w = &mut weights[r * s..r * s + len];
            for (t, wt) in w.iter_mut().enumerate() {
                let key = &k.data()[(r * s + t) * h..(r * s + t + 1) * h];
                *wt = qr.iter().zip(key).map(|(a, b)| a * b).sum();
            }
            let max = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for wt in w.iter_mut() {
                *wt = (*wt - max).exp();
                z += *wt;
            }
            for wt in w.iter_mut() {
                *wt /= z;
            }
            let cr = &mut ctx[r * h..(r + 1) * h];
            for (t, &wt) in w.iter().enumerate() {
                let key = &k.data()[(r * s + t) * h..(r * s + t + 1) * h];
                for (c, kv) in cr.iter_mut().zip(key) {
                    *c += wt * kv;
                }
            }
        }
        let value = Tensor::from_vec(&[b, h], ctx).expect("attention shape");
        self.push(value, Op::Attention { query, keys, lens, weights }, "attention")
    }

    /// `Σ_r weights[r] · −ln max(softmax(logits_r)[targets[r]], 1e-12)` as a
    /// 1-element tensor. Rows with weight 0 (padding) contribute nothing.
    pub fn softmax_xent(&mut self, logits: Var, targets: Vec<usize>, weights: Vec<f64>) -> Var {
        let l = self.value(logits);
        let (n, v) = dims2(l);
        assert_eq!(targets.len(), n);
        assert_eq!(weights.len(), n);
        let mut probs = vec![0.0; n * v];
        let mut loss = 0.0;
        for r in 0..n {
            let row = l.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let pr = &mut probs[r * v..(r + 1) * v];
            let mut z = 0.0;
            for (p, x) in pr.iter_mut().zip(row) {
                *p = (x - max).exp();
                z += *p;
            }
            for p in pr.iter_mut() {
                *p /= z;
            }
            if weights[r] != 0.0 {
                assert!(targets[r] < v, "target {} out of range {v}", targets[r]);
                loss += weights[r] * -pr[targets[r]].max(PROB_FLOOR).ln();
            }
        }
        let value = Tensor::vector(vec![loss]);
        self.push(value, Op::SoftmaxXent { logits, targets, weights, probs }, "softmax_xent")
    }

    /// One batched LSTM step from `x (B×in)`, `h (B×H)`, `c (B×H)`.
    pub fn lstm_step(&mut self, x: Var, h: Var, c: Var, p: &LstmVars) -> (Var, Var) {
        let xw = self.matmul(x, p.w_ih);
        self.lstm_step_projected(xw, h, c, p)
    }

    /// LSTM step where the input projection `x · W_ih` is already computed.
    pub fn lstm_step_projected(&mut self, xw: Var, h: Var, c: Var, p: &LstmVars) -> (Var, Var) {
        let pre = self.add_row(xw, p.bias);
        self.lstm_step_rows(pre, 0, h, c, p.w_hh)
    }

    /// LSTM step reading `x · W_ih + bias` from rows `start..start+B` of
    /// `pre`, so a whole sequence can share one input projection.
    pub fn lstm_step_rows(&mut self, pre: Var, start: usize, h: Var, c: Var, w_hh: Var) -> (Var, Var) {
        let gates = self.affine_rows(pre, start, h, w_hh);
        let c_new = self.lstm_cell(gates, c);
        let h_new = self.lstm_hidden(gates, c_new);
        (h_new, c_new)
    }

    /// Bilinear attention context for decoder states `h (B×H)`.
    pub fn attend(&mut self, h: Var, keys: Var, lens: Vec<usize>, w_a: Var) -> Var {
        let query = self.matmul(h, w_a);
        self.attention(query, keys, lens)
    }

    /// Backpropagates from the scalar `output`.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        if let Some(op) = &self.non_finite {
            return Err(Error::NonFinite(op.clone()));
        }
        assert_eq!(self.value(output).len(), 1, "backward needs a scalar output");
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(vec![1.0]);

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backward_op(&node.op, &node.value, &g, &mut grads);
        }
        let out = Gradients { grads };
        for (i, g) in out.grads.iter().enumerate() {
            if let Some(g) = g {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!("gradient of node {i}")));
                }
            }
        }
        Ok(out)
    }

    fn backward_op(&self, op: &Op, value: &Tensor, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        macro_rules! grad_of {
            ($v:expr) => {
                grad_buf(grads, $v, self.value($v).len())
            };
        }
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = dims2(self.value(*a));
                let n = value.cols();
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                // dA = dC · Bᵀ
                gemm_acc(m, n, k, g, false, bv, true, grad_of!(*a));
                // dB = Aᵀ · dC
                gemm_acc(k, m, n, av, true, g, false, grad_of!(*b));
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    for (d, x) in grad_of!(v).iter_mut().zip(g) {
                        *d += x;
                    }
                }
            }
            Op::AddRow(x, bias) => {
                for (d, v) in grad_of!(*x).iter_mut().zip(g) {
                    *d += v;
                }
                let c = value.cols();
                let db = grad_of!(*bias);
                for row in g.chunks(c) {
                    for (d, v) in db.iter_mut().zip(row) {
                        *d += v;
                    }
                }
            }
            Op::Mul(a, b) => {
                let bv = self.value(*b).data();
                for ((d, x), y) in grad_of!(*a).iter_mut().zip(g).zip(bv) {
                    *d += x * y;
                }
                let av = self.value(*a).data();
                for ((d, x), y) in grad_of!(*b).iter_mut().zip(g).zip(av) {
                    *d += x * y;
                }
            }
            Op::Tanh(x) => {
                for ((d, gv), y) in grad_of!(*x).iter_mut().zip(g).zip(value.data()) {
                    *d += gv * (1.0 - y * y);
                }
            }
            Op::Sigmoid(x) => {
                for ((d, gv), y) in grad_of!(*x).iter_mut().zip(g).zip(value.data()) {
                    *d += gv * y * (1.0 - y);
                }
            }
            Op::Scale(x, k) => {
                for (d, gv) in grad_of!(*x).iter_mut().zip(g) {
                    *d += gv * k;
                }
            }
            Op::Sum(x) => {
                for d in grad_of!(*x).iter_mut() {
                    *d += g[0];
                }
            }
            Op::Gather { table, ids } => {
                let d = value.cols();
                let dt = grad_of!(*table);
                for (r, &id) in ids.iter().enumerate() {
                    for (t, gv) in dt[id * d..(id + 1) * d].iter_mut().zip(&g[r * d..(r + 1) * d]) {
                        *t += gv;
                    }
                }
            }
            Op::Dropout { x, mask } => {
                for ((d, gv), m) in grad_of!(*x).iter_mut().zip(g).zip(mask) {
                    *d += gv * m;
                }
            }
            Op::RowSlice { x, start } => {
                let c = value.cols();
                let dx = grad_of!(*x);
                for (d, gv) in dx[start * c..start * c + g.len()].iter_mut().zip(g) {
                    *d += gv;
                }
            }
            Op::AffineRows { base, start, a, w } => {
                let (m, k) = dims2(self.value(*a));
                let n = value.cols();
                let dbase = grad_of!(*base);
                for (d, gv) in dbase[start * n..(start + m) * n].iter_mut().zip(g) {
                    *d += gv;
                }
                gemm_acc(m, n, k, g, false, self.value(*w).data(), true, grad_of!(*a));
                gemm_acc(k, m, n, self.value(*a).data(), true, g, false, grad_of!(*w));
            }
            Op::ConcatCols(a, b) => {
                let ca = self.value(*a).cols();
                let cb = self.value(*b).cols();
                let rows = value.rows();
                let da = grad_of!(*a);
                for r in 0..rows {
                    for (d, gv) in da[r * ca..(r + 1) * ca].iter_mut().zip(&g[r * (ca + cb)..]) {
                        *d += gv;
                    }
                }
                let db = grad_of!(*b);
                for r in 0..rows {
                    for (d, gv) in db[r * cb..(r + 1) * cb]
                        .iter_mut()
                        .zip(&g[r * (ca + cb) + ca..])
                    {
                        *d += gv;
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    for (d, gv) in grad_of!(p).iter_mut().zip(&g[off..off + n]) {
                        *d += gv;
                    }
                    off += n;
                }
            }
            Op::LstmCell { gates, c_prev, acts } => {
                let (b, g4) = dims2(self.value(*gates));
                let h = g4 / 4;
                let cp = self.value(*c_prev).data();
                let dgates = grad_of!(*gates);
                for r in 0..b {
                    for j in 0..h {
                        let k = r * h + j;
                        let dc = g[k];
                        let (i, f, cand) = (acts[3 * k], acts[3 * k + 1], acts[3 * k + 2]);
                        dgates[r * g4 + j] += dc * cand * i * (1.0 - i);
                        dgates[r * g4 + h + j] += dc * cp[k] * f * (1.0 - f);
                        dgates[r * g4 + 2 * h + j] += dc * i * (1.0 - cand * cand);
                    }
                }
                let dcp = grad_of!(*c_prev);
                for (k, d) in dcp.iter_mut().enumerate() {
                    *d += g[k] * acts[3 * k + 1];
                }
            }
            Op::LstmHidden { gates, c, acts } => {
                let (b, g4) = dims2(self.value(*gates));
                let h = g4 / 4;
                let dgates = grad_of!(*gates);
                for r in 0..b {
                    for j in 0..h {
                        let k = r * h + j;
                        let (o, tc) = (acts[2 * k], acts[2 * k + 1]);
                        dgates[r * g4 + 3 * h + j] += g[k] * tc * o * (1.0 - o);
                    }
                }
                let dc = grad_of!(*c);
                for (k, d) in dc.iter_mut().enumerate() {
                    let (o, tc) = (acts[2 * k], acts[2 * k + 1]);
                    *d += g[k] * o * (1.0 - tc * tc);
                }
            }
            Op::LstmSeq { pre, h0, c0, w_hh, lens, acts } => {
                let (b, h) = dims2(self.value(*h0));
                let (g4, bh) = (4 * h, b * h);
                let s = value.shape()[0];
                let out = value.data();
                let w = self.value(*w_hh).data();
                let c0v = self.value(*c0).data();
                let mut dpre = vec![0.0; s * b * g4];
                let mut dh = vec![0.0; bh];
                let mut dc = vec![0.0; bh];
                let mut dh_prev = vec![0.0; bh];
                for t in (0..s).rev() {
                    let go = &g[t * 2 * bh..(t + 1) * 2 * bh];
                    for k in 0..bh {
                        dh[k] += go[k];
                        dc[k] += go[bh + k];
                    }
                    let cp = if t == 0 { c0v } else { &out[(t - 1) * 2 * bh + bh..t * 2 * bh] };
                    let dg = &mut dpre[t * b * g4..(t + 1) * b * g4];
                    for r in 0..b {
                        for j in 0..h {
                            let k = r * h + j;
                            if t >= lens[r] {
                                dh_prev[k] = dh[k];
                                continue;
                            }
                            let a = &acts[(t * bh + k) * 5..(t * bh + k + 1) * 5];
                            let (i, f, gg, o, tc) = (a[0], a[1], a[2], a[3], a[4]);
                            let dct = dc[k] + dh[k] * o * (1.0 - tc * tc);
                            dg[r * g4 + j] = dct * gg * i * (1.0 - i);
                            dg[r * g4 + h + j] = dct * cp[k] * f * (1.0 - f);
                            dg[r * g4 + 2 * h + j] = dct * i * (1.0 - gg * gg);
                            dg[r * g4 + 3 * h + j] = dh[k] * tc * o * (1.0 - o);
                            dc[k] = dct * f;
                            dh_prev[k] = 0.0;
                        }
                    }
                    gemm_acc(b, g4, h, dg, false, w, true, &mut dh_prev);
                    std::mem::swap(&mut dh, &mut dh_prev);
                }
                // dW_hh = Σ_t h_{t-1}ᵀ · dgates_t as one product.
                let mut hprev = Vec::with_capacity(s * bh);
                hprev.extend_from_slice(self.value(*h0).data());
                for t in 0..s.saturating_sub(1) {
                    hprev.extend_from_slice(&out[t * 2 * bh..t * 2 * bh + bh]);
                }
                gemm_acc(h, s * b, g4, &hprev, true, &dpre, false, grad_of!(*w_hh));
                for (d, v) in grad_of!(*pre).iter_mut().zip(&dpre) {
                    *d += v;
                }
                for (d, v) in grad_of!(*h0).iter_mut().zip(&dh) {
                    *d += v;
                }
                for (d, v) in grad_of!(*c0).iter_mut().zip(&dc) {
                    *d += v;
                }
            }
            Op::SeqHidden(seq) => {
                let shape = self.value(*seq).shape();
                let (s, b, h) = (shape[0], shape[2], shape[3]);
                let ds = grad_of!(*seq);
                for t in 0..s {
                    for r in 0..b {
                        let src = &g[(r * s + t) * h..(r * s + t + 1) * h];
                        for (d, v) in ds[(t * 2 * b + r) * h..(t * 2 * b + r + 1) * h].iter_mut().zip(src) {
                            *d += v;
                        }
                    }
                }
            }
            Op::SeqRows(seq) => {
                let shape = self.value(*seq).shape();
                let (s, bh) = (shape[0], shape[2] * shape[3]);
                let ds = grad_of!(*seq);
                for t in 0..s {
                    for (d, v) in ds[t * 2 * bh..(t * 2 + 1) * bh].iter_mut().zip(&g[t * bh..(t + 1) * bh]) {
                        *d += v;
                    }
                }
            }
            Op::AttentionSeq { queries, keys, lens, weights } => {
                let kt = self.value(*keys);
                let (b, s, h) = (kt.shape()[0], kt.shape()[1], kt.shape()[2]);
                let qv = self.value(*queries);
                let t = qv.rows() / b;
                let mut dq = vec![0.0; t * b * h];
                let mut q_r = vec![0.0; t * h];
                let mut g_r = vec![0.0; t * h];
                let dk = grad_of!(*keys);
                for r in 0..b {
                    let len = lens[r];
                    for step in 0..t {
                        q_r[step * h..(step + 1) * h].copy_from_slice(qv.row(step * b + r));
                        g_r[step * h..(step + 1) * h].copy_from_slice(&g[(step * b + r) * h..(step * b + r + 1) * h]);
                    }
                    let k_r = &kt.data()[r * s * h..(r * s + len) * h];
                    let w = &weights[r * t * s..r * t * s + t * len];
                    // dL/dweights, then through the softmax.
                    let mut ds = vec![0.0; t * len];
                    gemm_acc(t, h, len, &g_r, false, k_r, true, &mut ds);
                    for (drow, wrow) in ds.chunks_mut(len).zip(w.chunks(len)) {
                        let mean: f64 = drow.iter().zip(wrow).map(|(a, b)| a * b).sum();
                        for (d, wv) in drow.iter_mut().zip(wrow) {
                            *d = wv * (*d - mean);
                        }
                    }
                    let mut dq_r = vec![0.0; t * h];
                    gemm_acc(t, len, h, &ds, false, k_r, false, &mut dq_r);
                    for step in 0..t {
                        dq[(step * b + r) * h..(step * b + r + 1) * h].copy_from_slice(&dq_r[step * h..(step + 1) * h]);
                    }
                    let dk_r = &mut dk[r * s * h..(r * s + len) * h];
                    gemm_acc(len, t, h, w, true, &g_r, false, dk_r);
                    gemm_acc(len, t, h, &ds, true, &q_r, false, dk_r);
                }
                for (d, v) in grad_of!(*queries).iter_mut().zip(&dq) {
                    *d += v;
                }
            }
            Op::SeqState { seq, t, cell } => {
                let shape = self.value(*seq).shape();
                let bh = shape[2] * shape[3];
                let off = (2 * t + usize::from(*cell)) * bh;
                for (d, v) in grad_of!(*seq)[off..off + bh].iter_mut().zip(g) {
                    *d += v;
                }
            }
            Op::Blend { new, old, take_new } => {
                let c = value.cols();
                let dn = grad_of!(*new);
                for (r, &t) in take_new.iter().enumerate() {
                    if t {
                        for (d, gv) in dn[r * c..(r + 1) * c].iter_mut().zip(&g[r * c..]) {
                            *d += gv;
                        }
                    }
                }
                let dold = grad_of!(*old);
                for (r, &t) in take_new.iter().enumerate() {
                    if !t {
                        for (d, gv) in dold[r * c..(r + 1) * c].iter_mut().zip(&g[r * c..]) {
                            *d += gv;
                        }
                    }
                }
            }
            Op::Stack(steps) => {
                let shape = value.shape();
                let (b, s, h) = (shape[0], shape[1], shape[2]);
                for (t, &v) in steps.iter().enumerate() {
                    let dv = grad_of!(v);
                    for r in 0..b {
                        let src = &g[(r * s + t) * h..(r * s + t + 1) * h];
                        for (d, gv) in dv[r * h..(r + 1) * h].iter_mut().zip(src) {
                            *d += gv;
                        }
                    }
                }
            }
            Op::Attention { query, keys, lens, weights } => {
                let q = self.value(*query).data();
                let kt = self.value(*keys);
                let (b, s, h) = (kt.shape()[0], kt.shape()[1], kt.shape()[2]);
                let k = kt.data();
                let mut dscore = vec![0.0; b * s];
                for r in 0..b {
                    let len = lens[r];
                    let gr = &g[r * h..(r + 1) * h];
                    let w = &weights[r * s..r * s + len];
                    let dw: Vec<f64> = (0..len)
                        .map(|t| {
                            let key = &k[(r * s + t) * h..(r * s + t + 1) * h];
                            gr.iter().zip(key).map(|(a, b)| a * b).sum::<f64>()
                        })
                        .collect();
                    let mean: f64 = w.iter().zip(&dw).map(|(a, b)| a * b).sum();
                    for t in 0..len {
                        dscore[r * s + t] = w[t] * (dw[t] - mean);
                    }
                }
                let dq = grad_of!(*query);
                for r in 0..b {
                    for t in 0..lens[r] {
                        let ds = dscore[r * s + t];
                        let key = &k[(r * s + t) * h..(r * s + t + 1) * h];
                        for (d, kv) in dq[r * h..(r + 1) * h].iter_mut().zip(key) {
                            *d += ds * kv;
                        }
                    }
                }
                let dk = grad_of!(*keys);
                for r in 0..b {
                    let gr = &g[r * h..(r + 1) * h];
                    let qr = &q[r * h..(r + 1) * h];
                    for t in 0..lens[r] {
                        let w = weights[r * s + t];
                        let ds = dscore[r * s + t];
                        let dkey = &mut dk[(r * s + t) * h..(r * s + t + 1) * h];
                        for ((d, gv), qv) in dkey.iter_mut().zip(gr).zip(qr) {
                            *d += w * gv + ds * qv;
                        }
                    }
                }
            }
            Op::SoftmaxXent { logits, targets, weights, probs } => {
                let v = self.value(*logits).cols();
                let dl = grad_of!(*logits);
                for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                    if w == 0.0 {
                        continue;
                    }
                    let pr = &probs[r * v..(r + 1) * v];
                    if pr[t] < PROB_FLOOR {
                        continue;
                    }
                    let scale = w * g[0];
                    for (j, (d, p)) in dl[r * v..(r + 1) * v].iter_mut().zip(pr).enumerate() {
                        *d += scale * (p - if j == t { 1.0 } else { 0.0 });
                    }
                }
            }
        }
    }
}
