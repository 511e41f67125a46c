//! Prediction, accuracy reports, length and vowel-harmony analyses, and
//! embedding export.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::charlm::WittenBellLm;
use crate::data::Example;
use crate::error::{Error, Result};
use crate::model::InflectionModel;
use crate::rerank::RerankModel;
use crate::search::{beam_decode, greedy_decode, NBest, DEFAULT_MAX_LEN_SLACK};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DecodeConfig {
    /// 1 decodes greedily.
    pub beam_width: usize,
    pub max_len_slack: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            beam_width: 1,
            max_len_slack: DEFAULT_MAX_LEN_SLACK,
        }
    }
}

/// Routes each tag to the models that carry a head for it. Several models
/// with the same tag form a product-of-experts ensemble.
pub struct Predictor<'a> {
    models: Vec<&'a InflectionModel>,
    lm: Option<&'a WittenBellLm>,
    reranker: Option<&'a RerankModel>,
    config: DecodeConfig,
}

impl<'a> Predictor<'a> {
    pub fn new(models: Vec<&'a InflectionModel>, config: DecodeConfig) -> Result<Self> {
        if models.is_empty() {
            return Err(Error::Empty("model list"));
        }
        if config.beam_width == 0 {
            return Err(Error::invalid("beam width must be at least 1"));
        }
        Ok(Predictor {
            models,
            lm: None,
            reranker: None,
            config,
        })
    }

    /// Language model for interpolation (models with a learned weight) and
    /// for the reranker's LM feature.
    pub fn with_lm(mut self, lm: &'a WittenBellLm) -> Self {
        self.lm = Some(lm);
        self
    }

    /// Reranks the beam; needs [`Predictor::with_lm`].
    pub fn with_reranker(mut self, reranker: &'a RerankModel) -> Self {
        self.reranker = Some(reranker);
        self
    }

    fn members(&self, tag: &str) -> Result<Vec<&'a InflectionModel>> {
        let members: Vec<_> = self
            .models
            .iter()
            .copied()
            .filter(|m| m.has_tag(tag))
            .collect();
        if members.is_empty() {
            return Err(Error::MissingModel(tag.to_string()));
        }
        Ok(members)
    }

    fn interp_lm(&self, members: &[&InflectionModel], tag: &str) -> Option<&'a WittenBellLm> {
        let all = members.iter().all(|m| matches!(m.lambda(tag), Ok(Some(_))));
        self.lm.filter(|_| all)
    }

    /// The beam for one input, best first.
    pub fn nbest(&self, lemma: &str, tag: &str, width: usize) -> Result<NBest> {
        let members = self.members(tag)?;
        let vocab = members[0].vocab();
        let x = vocab.encode(lemma);
        let max_len = x.len() + self.config.max_len_slack;
        let cands = beam_decode(
            &members,
            tag,
            &x,
            width,
            max_len,
            self.interp_lm(&members, tag),
        )?;
        Ok(NBest {
            source: lemma.to_string(),
            tag: tag.to_string(),
            candidates: cands.iter().map(|c| (c.text(vocab), c.log_prob)).collect(),
        })
    }

    pub fn predict(&self, lemma: &str, tag: &str) -> Result<String> {
        if let Some(r) = self.reranker {
            let lm = self
                .lm
                .ok_or_else(|| Error::invalid("reranking needs a language model"))?;
            let nbest = self.nbest(lemma, tag, self.config.beam_width)?;
            let i = r.rerank(&nbest, lm)?;
            return Ok(nbest.candidates[i].0.clone());
        }
        if self.config.beam_width > 1 {
            let nbest = self.nbest(lemma, tag, self.config.beam_width)?;
            return Ok(nbest.candidates[0].0.clone());
        }
        let members = self.members(tag)?;
        let vocab = members[0].vocab();
        let x = vocab.encode(lemma);
        let max_len = x.len() + self.config.max_len_slack;
        let out = greedy_decode(&members, tag, &x, max_len, self.interp_lm(&members, tag))?;
        Ok(out.text(vocab))
    }

    /// Predictions for every example, in order, decoded in parallel.
    pub fn predict_all(&self, examples: &[Example]) -> Result<Vec<String>> {
        examples
            .par_iter()
            .map(|e| self.predict(&e.lemma, &e.tag))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Count {
    pub correct: usize,
    pub total: usize,
}

impl Count {
    pub fn accuracy(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub per_tag: BTreeMap<String, Count>,
    /// Mean of per-tag accuracies.
    pub macro_accuracy: f64,
    pub overall: Count,
}

impl EvalReport {
    /// Exact-match scores of `predictions` against the examples' gold forms.
    pub fn score(examples: &[Example], predictions: &[String]) -> Result<Self> {
        if examples.len() != predictions.len() {
            return Err(Error::Dimension {
                op: "evaluate",
                left: vec![examples.len()],
                right: vec![predictions.len()],
            });
        }
        if examples.is_empty() {
            return Err(Error::Empty("test set"));
        }
        let mut per_tag: BTreeMap<String, Count> = BTreeMap::new();
        for (e, p) in examples.iter().zip(predictions) {
            let c = per_tag.entry(e.tag.clone()).or_default();
            c.total += 1;
            c.correct += usize::from(*p == e.inflected);
        }
        let overall = Count {
            correct: per_tag.values().map(|c| c.correct).sum(),
            total: examples.len(),
        };
        let macro_accuracy =
            per_tag.values().map(Count::accuracy).sum::<f64>() / per_tag.len() as f64;
        Ok(EvalReport {
            per_tag,
            macro_accuracy,
            overall,
        })
    }

    /// Per-tag accuracy table in percent, ending with the average row.
    pub fn to_table(&self, title: &str) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{title}");
        let _ = writeln!(out, "tag\tcorrect\ttotal\taccuracy");
        for (tag, c) in &self.per_tag {
            let _ = writeln!(
                out,
                "{tag}\t{}\t{}\t{:.2}",
                c.correct,
                c.total,
                100.0 * c.accuracy()
            );
        }
        let _ = writeln!(
            out,
            "Avg.\t{}\t{}\t{:.2}",
            self.overall.correct,
            self.overall.total,
            100.0 * self.macro_accuracy
        );
        out
    }
}

/// Decodes every example and scores it.
pub fn evaluate_accuracy(predictor: &Predictor<'_>, examples: &[Example]) -> Result<EvalReport> {
    let predictions = predictor.predict_all(examples)?;
    EvalReport::score(examples, &predictions)
}

/// Gold-length bin edges: `<5`, `[5,10)`, `[10,15)`, `>=15`.
pub const LENGTH_BINS: [(usize, Option<usize>); 4] =
    [(0, Some(5)), (5, Some(10)), (10, Some(15)), (15, None)];

#[derive(Clone, Debug, PartialEq)]
pub struct LengthBin {
    pub index: usize,
    pub label: String,
    pub count: Count,
}

pub fn length_bin(len: usize) -> usize {
    LENGTH_BINS
        .iter()
        .position(|&(lo, hi)| len >= lo && hi.is_none_or(|h| len < h))
        .expect("bins cover all lengths")
}

fn bin_label(i: usize) -> String {
    match LENGTH_BINS[i] {
        (0, Some(h)) => format!("<{h}"),
        (lo, Some(h)) => format!("[{lo},{h})"),
        (lo, None) => format!(">={lo}"),
    }
}

/// Exact-match accuracy grouped by gold length in characters. Empty bins are
/// omitted.
pub fn accuracy_by_length(predictions: &[String], golds: &[String]) -> Result<Vec<LengthBin>> {
    if predictions.len() != golds.len() {
        return Err(Error::Dimension {
            op: "accuracy_by_length",
            left: vec![predictions.len()],
            right: vec![golds.len()],
        });
    }
    let mut counts = [Count::default(); LENGTH_BINS.len()];
    for (p, g) in predictions.iter().zip(golds) {
        let c = &mut counts[length_bin(g.chars().count())];
        c.total += 1;
        c.correct += usize::from(p == g);
    }
    Ok(counts
        .iter()
        .enumerate()
        .filter(|(_, c)| c.total > 0)
        .map(|(index, &count)| LengthBin {
            index,
            label: bin_label(index),
            count,
        })
        .collect())
}

pub const FRONT_VOWELS: [char; 3] = ['ä', 'ö', 'y'];
pub const BACK_VOWELS: [char; 3] = ['a', 'o', 'u'];

/// A word is harmonic unless it mixes front and back vowels. The whole word
/// is scanned; compounds are not segmented.
pub fn is_harmonic(word: &str) -> bool {
    let lower = word.to_lowercase();
    let front = lower.contains(FRONT_VOWELS);
    let back = lower.contains(BACK_VOWELS);
    !(front && back)
}

#[derive(Clone, Debug, PartialEq)]
pub struct HarmonyReport {
    /// Fraction of harmonic words; 1.0 for an empty list.
    pub fraction: f64,
    pub verdicts: Vec<bool>,
}

pub fn vowel_harmony_check<S: AsRef<str>>(words: &[S]) -> HarmonyReport {
    let verdicts: Vec<bool> = words.iter().map(|w| is_harmonic(w.as_ref())).collect();
    let fraction = if verdicts.is_empty() {
        1.0
    } else {
        verdicts.iter().filter(|&&v| v).count() as f64 / verdicts.len() as f64
    };
    HarmonyReport { fraction, verdicts }
}

/// `char TAB v1 TAB v2 ...` for each requested character.
pub fn embedding_lines(model: &InflectionModel, chars: &[char]) -> Result<String> {
    let mut out = String::new();
    for &c in chars {
        let id = model
            .vocab()
            .id(c)
            .ok_or_else(|| Error::invalid(format!("character `{c}` is not in the vocabulary")))?;
        out.push(c);
        for v in model.embedding(id)? {
            let _ = write!(out, "\t{v}");
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn export_embeddings(model: &InflectionModel, chars: &[char], path: &Path) -> Result<()> {
    let text = embedding_lines(model, chars)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Parses an embedding export back into `(char, vector)` rows.
pub fn parse_embeddings(text: &str) -> Result<Vec<(char, Vec<f64>)>> {
    text.lines()
        .filter(|l| !l.is_empty())
        .map(|line| {
            let mut cols = line.split('\t');
            let head = cols.next().unwrap_or_default();
            let mut chars = head.chars();
            let c = match (chars.next(), chars.next()) {
                (Some(c), None) => c,
                _ => return Err(Error::invalid(format!("bad embedding row `{line}`"))),
            };
            let v = cols
                .map(|x| {
                    x.parse::<f64>()
                        .map_err(|_| Error::invalid(format!("bad number `{x}`")))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((c, v))
        })
        .collect()
}
