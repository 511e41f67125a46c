//! LSTM cell, sequence runner and bidirectional encoder.
//!
//! Gates follow the common formulation without peepholes:
//!
//! ```text
//! z  = W_x x + W_h h + b            (stacked as [i; f; o; g], each n rows)
//! c' = sigmoid(f) * c + sigmoid(i) * tanh(g)
//! h' = sigmoid(o) * tanh(c')
//! ```

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{ParamId, ParamStore, Tape, Tensor, Var};

pub const INIT_SCALE: f64 = 0.1;
pub const FORGET_BIAS: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LstmParams {
    pub w_x: ParamId,
    pub w_h: ParamId,
    pub b: ParamId,
    pub input: usize,
    pub hidden: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LstmState {
    pub h: Var,
    pub c: Var,
}

pub(crate) fn uniform(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| rng.gen_range(-INIT_SCALE..=INIT_SCALE))
        .collect()
}

impl LstmParams {
    /// Registers `{prefix}.w_x`, `{prefix}.w_h` and `{prefix}.b`.
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        input: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let rows = 4 * hidden;
        let w_x = store.add(
            format!("{prefix}.w_x"),
            Tensor::matrix(rows, input, uniform(rng, rows * input))?,
        )?;
        let w_h = store.add(
            format!("{prefix}.w_h"),
            Tensor::matrix(rows, hidden, uniform(rng, rows * hidden))?,
        )?;
        let mut bias = uniform(rng, rows);
        bias[hidden..2 * hidden].fill(FORGET_BIAS);
        let b = store.add(format!("{prefix}.b"), Tensor::vector(bias))?;
        Ok(LstmParams {
            w_x,
            w_h,
            b,
            input,
            hidden,
        })
    }

    /// Looks up previously registered weights and validates their shapes.
    pub fn from_store(store: &ParamStore, prefix: &str) -> Result<Self> {
        let find = |suffix: &str| {
            store
                .id(&format!("{prefix}.{suffix}"))
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{prefix}.{suffix}`")))
        };
        let (w_x, w_h, b) = (find("w_x")?, find("w_h")?, find("b")?);
        let wx = store.get(w_x);
        let wh = store.get(w_h);
        let hidden = wh.cols();
        let input = wx.cols();
        let ok = wx.shape().len() == 2
            && wh.shape().len() == 2
            && wx.rows() == 4 * hidden
            && wh.rows() == 4 * hidden
            && store.get(b).shape() == [4 * hidden];
        if !ok {
            return Err(Error::Checkpoint(format!(
                "inconsistent LSTM shapes under `{prefix}`"
            )));
        }
        Ok(LstmParams {
            w_x,
            w_h,
            b,
            input,
            hidden,
        })
    }
}

pub fn zero_state(tape: &mut Tape<'_>, hidden: usize) -> LstmState {
    LstmState {
        h: tape.constant(vec![0.0; hidden]),
        c: tape.constant(vec![0.0; hidden]),
    }
}

pub fn lstm_step(
    tape: &mut Tape<'_>,
    p: &LstmParams,
    x: Var,
    prev: &LstmState,
) -> Result<LstmState> {
    if tape.dim(x) != p.input {
        return Err(Error::Dimension {
            op: "lstm_step",
            left: vec![p.input],
            right: vec![tape.dim(x)],
        });
    }
    let n = p.hidden;
    let zx = tape.affine(p.w_x, x, Some(p.b))?;
    let zh = tape.affine(p.w_h, prev.h, None)?;
    let z = tape.add(zx, zh)?;
    let i = tape.slice(z, 0, n)?;
    let f = tape.slice(z, n, n)?;
    let o = tape.slice(z, 2 * n, n)?;
    let g = tape.slice(z, 3 * n, n)?;
    let i = tape.sigmoid(i);
    let f = tape.sigmoid(f);
    let o = tape.sigmoid(o);
    let g = tape.tanh(g);
    let keep = tape.mul(f, prev.c)?;
    let write = tape.mul(i, g)?;
    let c = tape.add(keep, write)?;
    let tc = tape.tanh(c);
    let h = tape.mul(o, tc)?;
    Ok(LstmState { h, c })
}

pub fn run_sequence(
    tape: &mut Tape<'_>,
    p: &LstmParams,
    xs: &[Var],
    init: &LstmState,
) -> Result<Vec<LstmState>> {
    if xs.is_empty() {
        return Err(Error::Empty("run_sequence"));
    }
    let mut states = Vec::with_capacity(xs.len());
    let mut prev = *init;
    for &x in xs {
        prev = lstm_step(tape, p, x, &prev)?;
        states.push(prev);
    }
    Ok(states)
}

#[derive(Clone, Debug)]
pub struct BiEncoding {
    /// `[final forward h; final backward h]`, length `2n`.
    pub e_raw: Var,
    /// Per-position `[forward h_t; backward h_t]`.
    pub hidden_seq: Vec<Var>,
}

pub fn encode_bidirectional(
    tape: &mut Tape<'_>,
    fwd: &LstmParams,
    bwd: &LstmParams,
    xs: &[Var],
) -> Result<BiEncoding> {
    if xs.is_empty() {
        return Err(Error::Empty("encode_bidirectional"));
    }
    let f0 = zero_state(tape, fwd.hidden);
    let fwd_states = run_sequence(tape, fwd, xs, &f0)?;
    let reversed: Vec<Var> = xs.iter().rev().copied().collect();
    let b0 = zero_state(tape, bwd.hidden);
    let bwd_states = run_sequence(tape, bwd, &reversed, &b0)?;

    let t = xs.len();
    let hidden_seq = (0..t)
        .map(|k| tape.concat(&[fwd_states[k].h, bwd_states[t - 1 - k].h]))
        .collect();
    let e_raw = tape.concat(&[fwd_states[t - 1].h, bwd_states[t - 1].h]);
    Ok(BiEncoding { e_raw, hidden_seq })
}
