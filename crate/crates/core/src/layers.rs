//! Reusable differentiable building blocks. Rows are sequence positions,
//! columns are features; a linear map is `x · W + b`.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, bias: bool, rng: &mut R) -> Self {
        let w = store.weight(format!("{name}.w"), fan_in, fan_out, rng);
        let b = bias.then(|| store.bias(format!("{name}.b"), fan_out));
        Self { w, b, fan_in, fan_out }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Var {
        tape.linear(x, self.w, self.b)
    }
}

/// Single-direction LSTM with gate order (input, forget, cell, output).
#[derive(Clone, Debug, PartialEq)]
pub struct Lstm {
    pub w_x: ParamId,
    pub w_h: ParamId,
    pub b: ParamId,
    pub hidden: usize,
}

impl Lstm {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, input: usize, hidden: usize, rng: &mut R) -> Self {
        let w_x = store.weight(format!("{name}.w_x"), input, 4 * hidden, rng);
        let w_h = store.weight(format!("{name}.w_h"), hidden, 4 * hidden, rng);
        let b = store.bias(format!("{name}.b"), 4 * hidden);
        Self { w_x, w_h, b, hidden }
    }

    /// Runs over the rows of `x` (forward, or back to front when `reverse`)
    /// and returns the hidden state at every position, in row order.
    pub fn forward(&self, tape: &mut Tape<'_>, x: Var, reverse: bool) -> Var {
        self.forward_from(tape, x, reverse, None)
    }

    /// As [`Lstm::forward`], with an optional `1 × hidden` initial state.
    pub fn forward_from(&self, tape: &mut Tape<'_>, x: Var, reverse: bool, h0: Option<Var>) -> Var {
        let steps = tape.shape(x).0;
        let h = self.hidden;
        let xw = tape.linear(x, self.w_x, Some(self.b));
        let w_h = tape.param(self.w_h);
        let mut states: Vec<Option<Var>> = (0..steps).map(|_| None).collect();
        let mut prev_h = h0;
        let mut prev_c: Option<Var> = None;
        for k in 0..steps {
            let t = if reverse { steps - 1 - k } else { k };
            let mut gates = tape.row(xw, t);
            if let Some(ph) = prev_h {
                let hw = tape.matmul(ph, w_h);
                gates = tape.add(gates, hw);
            }
            let i = tape.slice_cols(gates, 0, h);
            let i = tape.sigmoid(i);
            let f = tape.slice_cols(gates, h, 2 * h);
            let f = tape.sigmoid(f);
            let g = tape.slice_cols(gates, 2 * h, 3 * h);
            let g = tape.tanh(g);
            let o = tape.slice_cols(gates, 3 * h, 4 * h);
            let o = tape.sigmoid(o);
            let ig = tape.mul(i, g);
            let c = match prev_c {
                Some(pc) => {
                    let fc = tape.mul(f, pc);
                    tape.add(fc, ig)
                }
                None => ig,
            };
            let tc = tape.tanh(c);
            let hv = tape.mul(o, tc);
            states[t] = Some(hv);
            prev_h = Some(hv);
            prev_c = Some(c);
        }
        let rows: Vec<Var> = states.into_iter().map(|s| s.expect("every step visited")).collect();
        if rows.is_empty() {
            return tape.constant(Matrix::zeros(0, h));
        }
        tape.vcat(&rows)
    }
}

/// Forward and backward LSTMs over the same input.
#[derive(Clone, Debug, PartialEq)]
pub struct BiLstm {
    pub fwd: Lstm,
    pub bwd: Lstm,
}

impl BiLstm {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, input: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            fwd: Lstm::new(store, &format!("{name}.fwd"), input, hidden, rng),
            bwd: Lstm::new(store, &format!("{name}.bwd"), input, hidden, rng),
        }
    }

    /// `(forward states, backward states)`, both in row order.
    pub fn states(&self, tape: &mut Tape<'_>, x: Var) -> (Var, Var) {
        let f = self.fwd.forward(tape, x, false);
        let b = self.bwd.forward(tape, x, true);
        (f, b)
    }

    /// `[forward; backward]` per row.
    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Var {
        let (f, b) = self.states(tape, x);
        tape.hcat(&[f, b])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Output has as many rows as the input; `kernel` must be odd.
    Same,
    /// Only fully covered windows; `rows − kernel + 1` outputs.
    Valid,
}

/// 1-D convolution along rows with `channels_in` input features.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv1d {
    pub w: ParamId,
    pub b: ParamId,
    pub kernel: usize,
    pub channels_in: usize,
    pub channels_out: usize,
    pub padding: Padding,
}

impl Conv1d {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        kernel: usize,
        channels_in: usize,
        channels_out: usize,
        padding: Padding,
        rng: &mut R,
    ) -> Self {
        let w = store.weight(format!("{name}.w"), kernel * channels_in, channels_out, rng);
        let b = store.bias(format!("{name}.b"), channels_out);
        Self { w, b, kernel, channels_in, channels_out, padding }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Var {
        let rows = tape.shape(x).0;
        let (pad, out_rows) = match self.padding {
            Padding::Same => (self.kernel / 2, rows),
            Padding::Valid => (0, rows + 1 - self.kernel),
        };
        let padded = if pad > 0 {
            let z = tape.constant(Matrix::zeros(pad, self.channels_in));
            tape.vcat(&[z, x, z])
        } else {
            x
        };
        let windows: Vec<Var> = (0..self.kernel)
            .map(|o| {
                let idx: Vec<usize> = (o..o + out_rows).collect();
                tape.gather(padded, &idx)
            })
            .collect();
        let cols = tape.hcat(&windows);
        tape.linear(cols, self.w, Some(self.b))
    }
}

/// Multi-head scaled dot-product self-attention with query, key, value and
/// output maps of shape `d × d`.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut R) -> Self {
        assert!(heads > 0 && dim % heads == 0, "heads must divide the width");
        Self {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, true, rng),
            k: Linear::new(store, &format!("{name}.k"), dim, dim, true, rng),
            v: Linear::new(store, &format!("{name}.v"), dim, dim, true, rng),
            o: Linear::new(store, &format!("{name}.o"), dim, dim, true, rng),
            heads,
            dim,
        }
    }

    pub fn weight_count(&self) -> usize {
        4 * self.dim * self.dim
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Var {
        let q = self.q.forward(tape, x);
        let k = self.k.forward(tape, x);
        let v = self.v.forward(tape, x);
        let dh = self.dim / self.heads;
        let scale = 1.0 / libm::sqrt(dh as f64);
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = tape.slice_cols(q, h * dh, (h + 1) * dh);
            let kh = tape.slice_cols(k, h * dh, (h + 1) * dh);
            let vh = tape.slice_cols(v, h * dh, (h + 1) * dh);
            let kt = tape.transpose(kh);
            let scores = tape.matmul(qh, kt);
            let scores = tape.scale(scores, scale);
            let attn = tape.softmax_rows(scores);
            outs.push(tape.matmul(attn, vh));
        }
        let cat = if outs.len() == 1 { outs[0] } else { tape.hcat(&outs) };
        self.o.forward(tape, cat)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradients;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn input(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        Matrix::from_vec(rows, cols, data)
    }

    #[test]
    fn lstm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let lstm = BiLstm::new(&mut store, "l", 3, 2, &mut rng);
        let x = input(4, 3, 2);
        let r = check_gradients(&store, 1e-5, |tape| {
            let xv = tape.constant(x.clone());
            let h = lstm.forward(tape, xv);
            let sq = tape.mul(h, h);
            tape.sum_all(sq)
        });
        assert!(r.max_rel_error < 1e-5, "{r:?}");
    }

    #[test]
    fn attention_and_conv_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let mha = MultiHeadAttention::new(&mut store, "a", 4, 2, &mut rng);
        let conv = Conv1d::new(&mut store, "c", 3, 4, 2, Padding::Same, &mut rng);
        let valid = Conv1d::new(&mut store, "v", 2, 2, 3, Padding::Valid, &mut rng);
        let x = input(5, 4, 4);
        let r = check_gradients(&store, 1e-5, |tape| {
            let xv = tape.constant(x.clone());
            let a = mha.forward(tape, xv);
            let c = conv.forward(tape, a);
            let c = tape.tanh(c);
            let v = valid.forward(tape, c);
            let sq = tape.mul(v, v);
            tape.sum_all(sq)
        });
        assert!(r.max_rel_error < 1e-5, "{r:?}");
        assert_eq!(mha.weight_count(), 64);
    }

    #[test]
    fn valid_conv_output_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let conv = Conv1d::new(&mut store, "c", 3, 2, 1, Padding::Valid, &mut rng);
        let mut tape = Tape::new(&store);
        let x = tape.constant(Matrix::zeros(5, 2));
        let y = conv.forward(&mut tape, x);
        assert_eq!(tape.shape(y), (3, 1));
    }
}
