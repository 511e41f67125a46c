//! Linear reranking of beam output with pairwise ranking optimisation (PRO).

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::charlm::WittenBellLm;
use crate::error::{Error, Result};
use crate::search::NBest;

pub const NUM_FEATURES: usize = 8;

pub const FEATURE_NAMES: [&str; NUM_FEATURES] = [
    "lm_logprob",
    "model_logprob",
    "length_diff",
    "levenshtein",
    "same_suffix",
    "same_prefix",
    "y_subseq_of_x",
    "x_subseq_of_y",
];

/// Shortest shared prefix or suffix that counts as "same".
pub const AFFIX_THRESHOLD: usize = 2;

/// Pairs drawn per group during training.
pub const PAIRS_PER_GROUP: usize = 50;

pub type FeatureVector = [f64; NUM_FEATURES];

/// `true` if `a` is a (not necessarily contiguous) subsequence of `b`.
pub fn is_subsequence(a: &[char], b: &[char]) -> bool {
    let mut it = b.iter();
    a.iter().all(|c| it.any(|d| d == c))
}

fn common_prefix(a: &[char], b: &[char]) -> usize {
    a.iter().zip(b).take_while(|(x, y)| x == y).count()
}

fn common_suffix(a: &[char], b: &[char]) -> usize {
    a.iter()
        .rev()
        .zip(b.iter().rev())
        .take_while(|(x, y)| x == y)
        .count()
}

fn flag(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

/// Features of candidate `y` for lemma `x`, in [`FEATURE_NAMES`] order.
pub fn extract_features(x: &str, y: &str, model_logprob: f64, lm: &WittenBellLm) -> FeatureVector {
    let xc: Vec<char> = x.chars().collect();
    let yc: Vec<char> = y.chars().collect();
    [
        lm.score_word(y),
        model_logprob,
        yc.len() as f64 - xc.len() as f64,
        strsim::levenshtein(x, y) as f64,
        flag(common_suffix(&xc, &yc) >= AFFIX_THRESHOLD),
        flag(common_prefix(&xc, &yc) >= AFFIX_THRESHOLD),
        flag(is_subsequence(&yc, &xc)),
        flag(is_subsequence(&xc, &yc)),
    ]
}

#[derive(Clone, Debug, PartialEq)]
pub struct RerankModel {
    pub weights: FeatureVector,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    /// L2 penalty on the (scaled) weights; keeps separable data finite.
    pub l2: f64,
    pub seed: u64,
}

impl Default for ProConfig {
    fn default() -> Self {
        ProConfig {
            iterations: 500,
            learning_rate: 1.0,
            l2: 1e-4,
            seed: 0,
        }
    }
}

/// Beam output for one source together with its gold inflection.
#[derive(Clone, Copy, Debug)]
pub struct TrainingGroup<'a> {
    pub nbest: &'a NBest,
    pub gold: &'a str,
}

fn dot(w: &FeatureVector, f: &FeatureVector) -> f64 {
    w.iter().zip(f).map(|(a, b)| a * b).sum()
}

/// Feature differences `f(better) - f(worse)` for the sampled pairs of every
/// group. Quality is the negated edit distance to gold.
pub fn training_pairs(
    groups: &[TrainingGroup<'_>],
    lm: &WittenBellLm,
    seed: u64,
) -> Vec<FeatureVector> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for g in groups {
        let feats: Vec<FeatureVector> = g
            .nbest
            .candidates
            .iter()
            .map(|(y, lp)| extract_features(&g.nbest.source, y, *lp, lm))
            .collect();
        let quality: Vec<i64> = g
            .nbest
            .candidates
            .iter()
            .map(|(y, _)| -(strsim::levenshtein(y, g.gold) as i64))
            .collect();
        let mut pairs = Vec::new();
        for i in 0..feats.len() {
            for j in i + 1..feats.len() {
                match quality[i] - quality[j] {
                    d if d >= 1 => pairs.push((i, j)),
                    d if d <= -1 => pairs.push((j, i)),
                    _ => {}
                }
            }
        }
        if pairs.len() > PAIRS_PER_GROUP {
            pairs.shuffle(&mut rng);
            pairs.truncate(PAIRS_PER_GROUP);
        }
        for (better, worse) in pairs {
            let mut d = [0.0; NUM_FEATURES];
            for k in 0..NUM_FEATURES {
                d[k] = feats[better][k] - feats[worse][k];
            }
            out.push(d);
        }
    }
    out
}

/// Fits a linear scorer so that better candidates score higher, by logistic
/// loss on feature differences. Each feature is scaled by the root mean
/// square of its differences before fitting and unscaled afterwards.
pub fn pro_train(
    groups: &[TrainingGroup<'_>],
    lm: &WittenBellLm,
    config: ProConfig,
) -> Result<RerankModel> {
    let pairs = training_pairs(groups, lm, config.seed);
    if pairs.is_empty() {
        return Err(Error::Rerank(
            "no candidate pairs differ in quality; nothing to learn from".into(),
        ));
    }
    let n = pairs.len() as f64;
    let mut scale = [1.0; NUM_FEATURES];
    for (k, s) in scale.iter_mut().enumerate() {
        let rms = (pairs.iter().map(|d| d[k] * d[k]).sum::<f64>() / n).sqrt();
        if rms > 0.0 {
            *s = rms;
        }
    }
    let scaled: Vec<FeatureVector> = pairs
        .iter()
        .map(|d| std::array::from_fn(|k| d[k] / scale[k]))
        .collect();

    // Minimise mean(log(1 + exp(-w.d))) + l2/2 |w|^2 by gradient descent.
    let mut w = [0.0; NUM_FEATURES];
    for _ in 0..config.iterations {
        let mut grad: FeatureVector = std::array::from_fn(|k| config.l2 * w[k]);
        for d in &scaled {
            // d/dw log(1 + e^{-m}) = -sigmoid(-m) d
            let m = dot(&w, d);
            let s = 1.0 / (1.0 + m.exp());
            for k in 0..NUM_FEATURES {
                grad[k] -= s * d[k] / n;
            }
        }
        for k in 0..NUM_FEATURES {
            w[k] -= config.learning_rate * grad[k];
        }
    }
    let weights: FeatureVector = std::array::from_fn(|k| w[k] / scale[k]);
    if weights.iter().any(|x| !x.is_finite()) {
        return Err(Error::Rerank("training produced non-finite weights".into()));
    }
    Ok(RerankModel { weights })
}

impl RerankModel {
    pub fn score(&self, features: &FeatureVector) -> f64 {
        dot(&self.weights, features)
    }

    /// Index of the best candidate; ties go to the earlier beam position.
    pub fn rerank(&self, nbest: &NBest, lm: &WittenBellLm) -> Result<usize> {
        if nbest.candidates.is_empty() {
            return Err(Error::Rerank(format!(
                "empty candidate list for `{}`",
                nbest.source
            )));
        }
        let mut best = (0, f64::NEG_INFINITY);
        for (i, (y, lp)) in nbest.candidates.iter().enumerate() {
            let s = self.score(&extract_features(&nbest.source, y, *lp, lm));
            if s > best.1 {
                best = (i, s);
            }
        }
        Ok(best.0)
    }

    /// Fraction of training pairs ordered correctly (strictly).
    pub fn pairwise_accuracy(&self, pairs: &[FeatureVector]) -> f64 {
        if pairs.is_empty() {
            return 0.0;
        }
        let ok = pairs.iter().filter(|d| self.score(d) > 0.0).count();
        ok as f64 / pairs.len() as f64
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (name, w) in FEATURE_NAMES.iter().zip(&self.weights) {
            let _ = writeln!(out, "{name}\t{w}");
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut weights = [f64::NAN; NUM_FEATURES];
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (name, value) = line
                .split_once('\t')
                .ok_or_else(|| Error::Rerank(format!("malformed weight line `{line}`")))?;
            let k = FEATURE_NAMES
                .iter()
                .position(|n| *n == name)
                .ok_or_else(|| Error::Rerank(format!("unknown feature `{name}`")))?;
            let w: f64 = value
                .trim()
                .parse()
                .map_err(|_| Error::Rerank(format!("bad weight `{value}` for `{name}`")))?;
            if !w.is_finite() {
                return Err(Error::Rerank(format!("non-finite weight for `{name}`")));
            }
            weights[k] = w;
        }
        if let Some(k) = weights.iter().position(|w| w.is_nan()) {
            return Err(Error::Rerank(format!(
                "missing weight for `{}`",
                FEATURE_NAMES[k]
            )));
        }
        Ok(RerankModel { weights })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}
