//! Greedy and beam decoding over one model or a product-of-experts ensemble,
//! optionally interpolated with a character language model.

use std::cmp::Ordering;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::charlm::WittenBellLm;
use crate::error::{Error, Result};
use crate::lstm::LstmState;
use crate::model::vocab::{BOS, EOS};
use crate::model::{CharVocab, Encoded, InflectionModel};
use crate::nn::{log_softmax_kernel, Tape};

pub const DEFAULT_BEAM_WIDTH: usize = 20;
pub const DEFAULT_MAX_LEN_SLACK: usize = 10;

/// Default output length limit: `|x| + 10` characters.
pub fn default_max_len(lemma_len: usize) -> usize {
    lemma_len + DEFAULT_MAX_LEN_SLACK
}

/// Product of experts: `p(i) ∝ Π_j p_j(i)^(1/k)`.
pub fn ensemble_next_dist(dists: &[Vec<f64>]) -> Result<Vec<f64>> {
    let logs: Vec<Vec<f64>> = dists
        .iter()
        .map(|d| d.iter().map(|p| p.ln()).collect())
        .collect();
    Ok(exp_all(ensemble_log_dist(&logs)?))
}

/// `p(i) ∝ p_model(i) · p_lm(i)^λ`.
pub fn interpolated_next_dist(model: &[f64], lm: &[f64], lambda: f64) -> Result<Vec<f64>> {
    if lambda == 0.0 && model.len() == lm.len() {
        return Ok(model.to_vec());
    }
    let m: Vec<f64> = model.iter().map(|p| p.ln()).collect();
    let l: Vec<f64> = lm.iter().map(|p| p.ln()).collect();
    Ok(exp_all(interpolated_log_dist(&m, &l, lambda)?))
}

/// Log-domain [`ensemble_next_dist`].
pub fn ensemble_log_dist(logs: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = logs.first().ok_or(Error::Empty("ensemble_next_dist"))?;
    if logs.len() == 1 {
        return Ok(first.clone());
    }
    let k = logs.len() as f64;
    let mut acc = vec![0.0; first.len()];
    for d in logs {
        if d.len() != acc.len() {
            return Err(Error::Dimension {
                op: "ensemble_next_dist",
                left: vec![acc.len()],
                right: vec![d.len()],
            });
        }
        for (a, &x) in acc.iter_mut().zip(d) {
            *a += x;
        }
    }
    acc.iter_mut().for_each(|a| *a /= k);
    Ok(renormalize(&acc))
}

/// Log-domain [`interpolated_next_dist`].
pub fn interpolated_log_dist(model: &[f64], lm: &[f64], lambda: f64) -> Result<Vec<f64>> {
    if lambda.is_nan() || lambda < 0.0 {
        return Err(Error::invalid(format!(
            "interpolation weight must be >= 0, got {lambda}"
        )));
    }
    if model.len() != lm.len() {
        return Err(Error::Dimension {
            op: "interpolated_next_dist",
            left: vec![model.len()],
            right: vec![lm.len()],
        });
    }
    if lambda == 0.0 {
        return Ok(model.to_vec());
    }
    let combined: Vec<f64> = model
        .iter()
        .zip(lm)
        .map(|(&m, &l)| {
            if m == f64::NEG_INFINITY {
                m
            } else {
                m + lambda * l
            }
        })
        .collect();
    Ok(renormalize(&combined))
}

fn renormalize(logs: &[f64]) -> Vec<f64> {
    let mask: Vec<bool> = logs.iter().map(|x| *x == f64::NEG_INFINITY).collect();
    log_softmax_kernel(logs, Some(&mask))
}

fn exp_all(v: Vec<f64>) -> Vec<f64> {
    v.into_iter().map(f64::exp).collect()
}

/// A decoded output. `log_prob` includes the EOS step unless `truncated`.
#[derive(Clone, Debug, PartialEq)]
pub struct Candidate {
    pub ids: Vec<usize>,
    pub log_prob: f64,
    pub truncated: bool,
}

impl Candidate {
    pub fn text(&self, vocab: &CharVocab) -> String {
        vocab.decode(&self.ids)
    }
}

/// Higher score first, then lexicographically smaller ids.
fn rank(a_score: f64, a_ids: &[usize], b_score: f64, b_ids: &[usize]) -> Ordering {
    b_score.total_cmp(&a_score).then_with(|| a_ids.cmp(b_ids))
}

struct Member<'m> {
    model: &'m InflectionModel,
    tape: Tape<'m>,
    enc: Encoded,
    lambda: Option<f64>,
}

/// Step-wise next-character distribution of an ensemble for one input.
pub struct Scorer<'m> {
    members: Vec<Member<'m>>,
    tag: String,
    lm: Option<&'m WittenBellLm>,
    vocab: &'m CharVocab,
}

/// Per-hypothesis decoder state: one LSTM state per ensemble member.
#[derive(Clone, Debug)]
pub struct DecoderState {
    states: Vec<LstmState>,
    y_prev: usize,
    step: usize,
}

impl<'m> Scorer<'m> {
    /// Members must share a vocabulary and carry a head for `tag`. With `lm`,
    /// every member must have a learned interpolation weight for `tag`.
    pub fn new(
        models: &[&'m InflectionModel],
        tag: &str,
        lemma: &[usize],
        lm: Option<&'m WittenBellLm>,
    ) -> Result<Self> {
        let first = models.first().ok_or(Error::Empty("ensemble"))?;
        let vocab = first.vocab();
        if let Some(lm) = lm {
            lm.check_compatible(vocab)?;
        }
        let mut members = Vec::with_capacity(models.len());
        for &model in models {
            if model.vocab() != vocab {
                return Err(Error::invalid(
                    "ensemble members use different vocabularies",
                ));
            }
            let lambda = match lm {
                Some(_) => Some(model.lambda(tag)?.ok_or_else(|| {
                    Error::invalid(format!(
                        "a language model was given but head `{tag}` has no interpolation weight"
                    ))
                })?),
                None => None,
            };
            let mut tape = Tape::new(model.store());
            let enc = model.encode(&mut tape, tag, lemma)?;
            members.push(Member {
                model,
                tape,
                enc,
                lambda,
            });
        }
        Ok(Scorer {
            members,
            tag: tag.to_string(),
            lm,
            vocab,
        })
    }

    pub fn vocab(&self) -> &CharVocab {
        self.vocab
    }

    pub fn initial(&mut self) -> Result<DecoderState> {
        let mut states = Vec::with_capacity(self.members.len());
        for m in &mut self.members {
            states.push(m.model.initial_state(&mut m.tape, &self.tag, &m.enc)?);
        }
        Ok(DecoderState {
            states,
            y_prev: BOS,
            step: 0,
        })
    }

    /// Consumes `state.y_prev` and returns the successor state (awaiting the
    /// choice of the next character) with the log-distribution of that choice.
    pub fn step(
        &mut self,
        state: &DecoderState,
        prefix: &[usize],
    ) -> Result<(DecoderState, Vec<f64>)> {
        let lm_logs = match self.lm {
            Some(lm) => Some(lm.vocab_log_probs(
                self.vocab,
                &self.vocab.decode(prefix).chars().collect::<Vec<_>>(),
            )),
            None => None,
        };
        let mut next = Vec::with_capacity(self.members.len());
        let mut dists = Vec::with_capacity(self.members.len());
        for (m, prev) in self.members.iter_mut().zip(&state.states) {
            let x_t = m.enc.input_at(state.step);
            let (s, lp) =
                m.model
                    .decoder_step(&mut m.tape, &self.tag, &m.enc, prev, state.y_prev, x_t)?;
            let mut logs = m.tape.value(lp).to_vec();
            if let (Some(lm_logs), Some(lambda)) = (&lm_logs, m.lambda) {
                logs = interpolated_log_dist(&logs, lm_logs, lambda)?;
            }
            next.push(s);
            dists.push(logs);
        }
        let dist = ensemble_log_dist(&dists)?;
        Ok((
            DecoderState {
                states: next,
                y_prev: state.y_prev,
                step: state.step + 1,
            },
            dist,
        ))
    }

    /// Log-probability of emitting exactly `ids` (then EOS, unless
    /// `truncated`) under the scorer's step distributions.
    pub fn sequence_log_prob(&mut self, ids: &[usize], truncated: bool) -> Result<f64> {
        let mut state = self.initial()?;
        let mut total = 0.0;
        let steps = if truncated { ids.len() } else { ids.len() + 1 };
        for t in 0..steps {
            let (next, dist) = self.step(&state, &ids[..t])?;
            let y = ids.get(t).copied().unwrap_or(EOS);
            total += dist[y];
            state = next.with_prev(y);
        }
        Ok(total)
    }
}

impl DecoderState {
    /// The same state with `y` chosen as the next character.
    pub fn with_prev(mut self, y: usize) -> Self {
        self.y_prev = y;
        self
    }
}

/// Argmax decoding; ties go to the lowest id. Stops at EOS or after
/// `max_len` characters (then `truncated` is set).
pub fn greedy_decode(
    models: &[&InflectionModel],
    tag: &str,
    lemma: &[usize],
    max_len: usize,
    lm: Option<&WittenBellLm>,
) -> Result<Candidate> {
    if max_len == 0 {
        return Err(Error::invalid("max_len must be at least 1"));
    }
    let mut scorer = Scorer::new(models, tag, lemma, lm)?;
    let mut state = scorer.initial()?;
    let mut ids = Vec::new();
    let mut log_prob = 0.0;
    loop {
        let (next, dist) = scorer.step(&state, &ids)?;
        let best = argmax(&dist);
        log_prob += dist[best];
        if best == EOS {
            return Ok(Candidate {
                ids,
                log_prob,
                truncated: false,
            });
        }
        ids.push(best);
        if ids.len() == max_len {
            return Ok(Candidate {
                ids,
                log_prob,
                truncated: true,
            });
        }
        state = next.with_prev(best);
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

struct Live {
    ids: Vec<usize>,
    log_prob: f64,
    state: DecoderState,
}

/// Beam search. Every live hypothesis is expanded by every emittable id and
/// the best `width` expansions survive. EOS expansions and hypotheses that
/// reach `max_len` characters retire to the result pool. Returns up to
/// `width` candidates by descending log-probability, ties by ids.
pub fn beam_decode(
    models: &[&InflectionModel],
    tag: &str,
    lemma: &[usize],
    width: usize,
    max_len: usize,
    lm: Option<&WittenBellLm>,
) -> Result<Vec<Candidate>> {
    if width == 0 {
        return Err(Error::invalid("beam width must be at least 1"));
    }
    if max_len == 0 {
        return Err(Error::invalid("max_len must be at least 1"));
    }
    let mut scorer = Scorer::new(models, tag, lemma, lm)?;
    let mut live = vec![Live {
        ids: Vec::new(),
        log_prob: 0.0,
        state: scorer.initial()?,
    }];
    let mut pool: Vec<Candidate> = Vec::new();

    while !live.is_empty() {
        if pool.len() >= width {
            let best_live = live
                .iter()
                .map(|h| h.log_prob)
                .fold(f64::NEG_INFINITY, f64::max);
            if best_live < pool[width - 1].log_prob {
                break;
            }
        }
        // (parent, next id, score)
        let mut expansions: Vec<(usize, usize, f64)> = Vec::new();
        let mut stepped = Vec::with_capacity(live.len());
        for (p, hyp) in live.iter().enumerate() {
            let (next, dist) = scorer.step(&hyp.state, &hyp.ids)?;
            for (y, &lp) in dist.iter().enumerate() {
                if lp > f64::NEG_INFINITY {
                    expansions.push((p, y, hyp.log_prob + lp));
                }
            }
            stepped.push(next);
        }
        let key = |&(p, y, _): &(usize, usize, f64)| {
            let mut k = live[p].ids.clone();
            k.push(y);
            k
        };
        expansions.sort_by(|a, b| rank(a.2, &key(a), b.2, &key(b)));
        expansions.truncate(width);

        let mut next_live = Vec::with_capacity(expansions.len());
        for (p, y, score) in expansions {
            if y == EOS {
                pool.push(Candidate {
                    ids: live[p].ids.clone(),
                    log_prob: score,
                    truncated: false,
                });
                continue;
            }
            let mut ids = live[p].ids.clone();
            ids.push(y);
            if ids.len() == max_len {
                pool.push(Candidate {
                    ids,
                    log_prob: score,
                    truncated: true,
                });
            } else {
                next_live.push(Live {
                    ids,
                    log_prob: score,
                    state: stepped[p].clone().with_prev(y),
                });
            }
        }
        pool.sort_by(|a, b| rank(a.log_prob, &a.ids, b.log_prob, &b.ids));
        live = next_live;
    }
    pool.truncate(width);
    Ok(pool)
}

/// One source's beam output.
#[derive(Clone, Debug, PartialEq)]
pub struct NBest {
    pub source: String,
    pub tag: String,
    /// `(candidate, model log-probability)`, best first.
    pub candidates: Vec<(String, f64)>,
}

/// Beam-decodes many inputs in parallel. Output order follows `inputs`.
pub fn beam_decode_all(
    models: &[&InflectionModel],
    inputs: &[(String, String)],
    width: usize,
    max_len_slack: usize,
    lm: Option<&WittenBellLm>,
) -> Result<Vec<NBest>> {
    let vocab = models.first().ok_or(Error::Empty("ensemble"))?.vocab();
    inputs
        .par_iter()
        .map(|(source, tag)| {
            let x = vocab.encode(source);
            let max_len = x.len() + max_len_slack;
            let cands = beam_decode(models, tag, &x, width, max_len, lm)?;
            Ok(NBest {
                source: source.clone(),
                tag: tag.clone(),
                candidates: cands.iter().map(|c| (c.text(vocab), c.log_prob)).collect(),
            })
        })
        .collect()
}

pub fn write_nbest(path: &Path, groups: &[NBest]) -> Result<()> {
    let mut out = String::new();
    for g in groups {
        for (cand, lp) in &g.candidates {
            out.push_str(&format!("{}\t{}\t{}\t{}\n", g.source, g.tag, cand, lp));
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Reads an n-best file. Consecutive lines with the same source and tag form
/// one group.
pub fn read_nbest(path: &Path) -> Result<Vec<NBest>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut groups: Vec<NBest> = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 4 {
            return Err(parse_err(format!(
                "expected 4 columns, found {}",
                cols.len()
            )));
        }
        let lp: f64 = cols[3]
            .parse()
            .map_err(|_| parse_err(format!("bad log-probability `{}`", cols[3])))?;
        match groups.last_mut() {
            Some(g) if g.source == cols[0] && g.tag == cols[1] => {
                g.candidates.push((cols[2].to_string(), lp));
            }
            _ => groups.push(NBest {
                source: cols[0].to_string(),
                tag: cols[1].to_string(),
                candidates: vec![(cols[2].to_string(), lp)],
            }),
        }
    }
    Ok(groups)
}
