//! Encoder, decoder step and teacher-forced loss for every variant.
//!
//! Decoder input per step:
//!
//! | variant        | input                             | initial state     |
//! |----------------|-----------------------------------|-------------------|
//! | `Full`         | `[e; emb(y_prev); emb(x_t)]`      | zeros             |
//! | `PlainEncDec`  | `emb(y_prev)`                     | `h = tanh(e)`     |
//! | `Attention`    | `[context_t; emb(y_prev)]`        | `h = tanh(e)`     |
//! | `NoEncoder`    | `[emb(y_prev); emb(x_t)]`         | zeros             |
//!
//! `x_t` is the lemma character at position `t`, or EPS past its end.

use std::sync::Arc;

use super::vocab::{BOS, EOS, EPS};
use super::{AttentionParams, HeadParams, InflectionModel, ModelVariant};
use crate::charlm::WittenBellLm;
use crate::error::{Error, Result};
use crate::lstm::{encode_bidirectional, lstm_step, zero_state, LstmState};
use crate::nn::{gradient_check, GradCheckReport, Tape, Var};

/// Per-lemma encoder output shared by every decoder step.
#[derive(Clone, Debug)]
pub struct Encoded {
    /// Transformed encoding `W_trans e_raw + b_trans`.
    pub e: Option<Var>,
    pub hidden_seq: Vec<Var>,
    pub lemma: Vec<usize>,
    pub mask: Arc<[bool]>,
}

impl Encoded {
    /// Lemma character consumed at decoder step `t` (0-based).
    pub fn input_at(&self, t: usize) -> usize {
        self.lemma.get(t).copied().unwrap_or(EPS)
    }
}

/// Additive attention: `score_t = v . tanh(W_enc h_t + W_dec s)`, weights are
/// the softmax of the scores. Returns `(context, weights)`.
pub fn attention_context(
    tape: &mut Tape<'_>,
    attn: &AttentionParams,
    hidden_seq: &[Var],
    s_prev: Var,
) -> Result<(Var, Var)> {
    if hidden_seq.is_empty() {
        return Err(Error::Empty("attention_context"));
    }
    let query = tape.affine(attn.w_dec, s_prev, None)?;
    let v = tape.param(attn.v);
    let mut scores = Vec::with_capacity(hidden_seq.len());
    for &h in hidden_seq {
        let key = tape.affine(attn.w_enc, h, None)?;
        let pre = tape.add(key, query)?;
        let act = tape.tanh(pre);
        scores.push(tape.dot(v, act)?);
    }
    let scores = tape.concat(&scores);
    let weights = tape.softmax(scores)?;
    let context = tape.weighted_sum(weights, hidden_seq)?;
    Ok((context, weights))
}

impl InflectionModel {
    pub fn encode(&self, tape: &mut Tape<'_>, tag: &str, lemma: &[usize]) -> Result<Encoded> {
        if lemma.is_empty() {
            return Err(Error::Empty("lemma"));
        }
        let head = self.head(tag)?;
        let mut xs = Vec::with_capacity(lemma.len());
        for &id in lemma {
            xs.push(tape.embed(self.embed, id)?);
        }
        let (e, hidden_seq) = match &self.encoder {
            Some(enc) => {
                let bi = encode_bidirectional(tape, &enc.fwd, &enc.bwd, &xs)?;
                let e = self.transform_encoding(tape, head, bi.e_raw)?;
                (Some(e), bi.hidden_seq)
            }
            None => (None, Vec::new()),
        };
        Ok(Encoded {
            e,
            hidden_seq,
            lemma: lemma.to_vec(),
            mask: self.vocab.output_mask(),
        })
    }

    /// `W_trans e_raw + b_trans`.
    pub fn transform_encoding(
        &self,
        tape: &mut Tape<'_>,
        head: &HeadParams,
        e_raw: Var,
    ) -> Result<Var> {
        let (w, b) = head
            .trans
            .ok_or_else(|| Error::invalid("variant has no encoding transform"))?;
        tape.affine(w, e_raw, Some(b))
    }

    pub fn initial_state(
        &self,
        tape: &mut Tape<'_>,
        tag: &str,
        enc: &Encoded,
    ) -> Result<LstmState> {
        let n = self.head(tag)?.decoder.hidden;
        let mut state = zero_state(tape, n);
        if matches!(
            self.variant,
            ModelVariant::PlainEncDec | ModelVariant::Attention
        ) {
            let e = enc.e.ok_or_else(|| Error::invalid("missing encoding"))?;
            state.h = tape.tanh(e);
        }
        Ok(state)
    }

    /// Attention context for a tag; fails for heads without attention weights.
    pub fn attention_context(
        &self,
        tape: &mut Tape<'_>,
        tag: &str,
        hidden_seq: &[Var],
        s_prev: Var,
    ) -> Result<(Var, Var)> {
        let attn = self.head(tag)?.attention.ok_or_else(|| {
            Error::invalid(format!(
                "attention_context needs the attention variant, model is `{}`",
                self.variant
            ))
        })?;
        attention_context(tape, &attn, hidden_seq, s_prev)
    }

    /// One decoder step. Returns the new state and the masked log-probability
    /// vector over the vocabulary (`-inf` at BOS and EPS).
    pub fn decoder_step(
        &self,
        tape: &mut Tape<'_>,
        tag: &str,
        enc: &Encoded,
        prev: &LstmState,
        y_prev: usize,
        x_t: usize,
    ) -> Result<(LstmState, Var)> {
        let head = self.head(tag)?;
        let y = tape.embed(self.embed, y_prev)?;
        let input = match self.variant {
            ModelVariant::Full => {
                let e = enc.e.ok_or_else(|| Error::invalid("missing encoding"))?;
                let x = tape.embed(self.embed, x_t)?;
                tape.concat(&[e, y, x])
            }
            ModelVariant::PlainEncDec => y,
            ModelVariant::Attention => {
                let attn = head
                    .attention
                    .ok_or_else(|| Error::invalid("missing attention weights"))?;
                let (ctx, _) = attention_context(tape, &attn, &enc.hidden_seq, prev.h)?;
                tape.concat(&[ctx, y])
            }
            ModelVariant::NoEncoder => {
                let x = tape.embed(self.embed, x_t)?;
                tape.concat(&[y, x])
            }
        };
        let state = lstm_step(tape, &head.decoder, input, prev)?;
        let logits = tape.affine(head.out_w, state.h, Some(head.out_b))?;
        let log_probs = tape.log_softmax(logits, Some(enc.mask.clone()))?;
        Ok((state, log_probs))
    }

    /// Combines a model log-distribution with LM log-probabilities:
    /// `log p ∝ log p_model + lambda * log p_lm`, renormalised.
    pub(crate) fn interpolate_on_tape(
        &self,
        tape: &mut Tape<'_>,
        log_probs: Var,
        lm_logs: Vec<f64>,
        lambda: Var,
        mask: &Arc<[bool]>,
    ) -> Result<Var> {
        let lm = tape.constant(lm_logs);
        let scaled = tape.mul_scalar(lm, lambda)?;
        let combined = tape.add(log_probs, scaled)?;
        tape.log_softmax(combined, Some(mask.clone()))
    }

    /// `softplus(lambda_hat)` for a head that carries an interpolation weight.
    pub(crate) fn lambda_on_tape(&self, tape: &mut Tape<'_>, tag: &str) -> Result<Var> {
        let id = self
            .head(tag)?
            .lambda_hat
            .ok_or_else(|| Error::invalid(format!("head `{tag}` has no interpolation weight")))?;
        let raw = tape.param(id);
        Ok(tape.softplus(raw))
    }

    /// Teacher-forced negative log-likelihood of `target` (plus EOS) given
    /// `lemma`. With `lm`, each step uses the renormalised product of the
    /// model distribution and the LM distribution raised to the head's learned
    /// exponent.
    pub fn sequence_loss(
        &self,
        tape: &mut Tape<'_>,
        tag: &str,
        lemma: &[usize],
        target: &[usize],
        lm: Option<&WittenBellLm>,
    ) -> Result<Var> {
        let enc = self.encode(tape, tag, lemma)?;
        let lambda = match lm {
            Some(lm) => {
                lm.check_compatible(&self.vocab)?;
                Some(self.lambda_on_tape(tape, tag)?)
            }
            None => None,
        };
        let mut state = self.initial_state(tape, tag, &enc)?;
        let mut y_prev = BOS;
        let mut prefix: Vec<char> = Vec::with_capacity(target.len());
        let mut terms = Vec::with_capacity(target.len() + 1);
        for t in 0..=target.len() {
            let gold = target.get(t).copied().unwrap_or(EOS);
            let (next, mut log_probs) =
                self.decoder_step(tape, tag, &enc, &state, y_prev, enc.input_at(t))?;
            if let (Some(lm), Some(lambda)) = (lm, lambda) {
                let lm_logs = lm.vocab_log_probs(&self.vocab, &prefix);
                log_probs =
                    self.interpolate_on_tape(tape, log_probs, lm_logs, lambda, &enc.mask)?;
            }
            terms.push(tape.pick(log_probs, gold)?);
            if let Some(c) = self.vocab.char_of(gold) {
                prefix.push(c);
            }
            state = next;
            y_prev = gold;
        }
        let total = tape.sum(&terms)?;
        Ok(tape.scale(total, -1.0))
    }

    /// Finite-difference check of [`InflectionModel::sequence_loss`] on one
    /// example, over every parameter.
    pub fn gradient_check(
        &self,
        tag: &str,
        lemma: &str,
        inflected: &str,
        h: f64,
    ) -> Result<GradCheckReport> {
        let (x, y) = (self.vocab.encode(lemma), self.vocab.encode(inflected));
        gradient_check(&self.store, h, |tape| {
            self.sequence_loss(tape, tag, &x, &y, None)
        })
    }

    /// Loss of one `(lemma, inflected)` pair under the tag's head.
    pub fn nll_loss(&self, tag: &str, lemma: &str, inflected: &str) -> Result<f64> {
        let mut tape = Tape::new(&self.store);
        let loss = self.sequence_loss(
            &mut tape,
            tag,
            &self.vocab.encode(lemma),
            &self.vocab.encode(inflected),
            None,
        )?;
        Ok(tape.scalar(loss))
    }
}
