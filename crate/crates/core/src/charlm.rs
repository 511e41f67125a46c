//! Character n-gram language model with Witten-Bell smoothing.
//!
//! Every word is padded with `order - 1` start symbols and one end symbol.
//! Probabilities follow the interpolated recursion
//!
//! ```text
//! P(w | h) = (c(h, w) + T(h) * P(w | h')) / (c(h) + T(h))
//! ```
//!
//! where `h'` drops the oldest symbol of `h`, `T(h)` counts distinct
//! successors of `h`, and the recursion bottoms out in a uniform distribution
//! over the alphabet plus the end symbol. Histories never seen in training
//! pass the lower-order distribution through unchanged.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::vocab::{self, CharVocab};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Symbol {
    Start,
    End,
    Char(char),
}

impl Symbol {
    fn token(self) -> String {
        match self {
            Symbol::Start => "<s>".to_string(),
            Symbol::End => "</s>".to_string(),
            Symbol::Char(c) => c.to_string(),
        }
    }

    fn parse(tok: &str) -> Option<Symbol> {
        match tok {
            "<s>" => Some(Symbol::Start),
            "</s>" => Some(Symbol::End),
            _ => {
                let mut it = tok.chars();
                match (it.next(), it.next()) {
                    (Some(c), None) => Some(Symbol::Char(c)),
                    _ => None,
                }
            }
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
struct HistoryCounts {
    total: u64,
    successors: BTreeMap<Symbol, u64>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WittenBellLm {
    order: usize,
    alphabet: Vec<char>,
    index: HashMap<char, usize>,
    /// `tables[k]` maps histories of length `k` to successor counts.
    tables: Vec<HashMap<Vec<Symbol>, HistoryCounts>>,
}

/// Keeps the words whose characters all belong to the vocabulary.
pub fn filter_wordlist<S: AsRef<str>>(words: &[S], vocab: &CharVocab) -> Vec<String> {
    words
        .iter()
        .map(AsRef::as_ref)
        .filter(|w| w.chars().all(|c| vocab.contains(c)))
        .map(str::to_string)
        .collect()
}

/// One word per line; blank lines and lines with inner whitespace are skipped.
pub fn read_wordlist(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|w| !w.is_empty() && !w.chars().any(char::is_whitespace))
        .map(|w| unicode_normalization::UnicodeNormalization::nfc(w).collect())
        .collect())
}

impl WittenBellLm {
    fn empty(order: usize, alphabet: BTreeSet<char>) -> Result<Self> {
        if order == 0 {
            return Err(Error::invalid("n-gram order must be at least 1"));
        }
        if let Some(c) = alphabet.iter().find(|c| c.is_whitespace()) {
            return Err(Error::invalid(format!(
                "whitespace character {c:?} cannot be modelled"
            )));
        }
        let alphabet: Vec<char> = alphabet.into_iter().collect();
        let index = alphabet.iter().enumerate().map(|(i, &c)| (c, i)).collect();
        Ok(WittenBellLm {
            order,
            alphabet,
            index,
            tables: vec![HashMap::new(); order],
        })
    }

    /// Trains on the set of distinct words.
    pub fn train<S: AsRef<str>>(words: &[S], order: usize) -> Result<Self> {
        let types: BTreeSet<&str> = words.iter().map(AsRef::as_ref).collect();
        if types.is_empty() {
            return Err(Error::Empty("train_lm"));
        }
        let alphabet = types.iter().flat_map(|w| w.chars()).collect();
        let mut lm = Self::empty(order, alphabet)?;
        for w in &types {
            let mut padded = vec![Symbol::Start; order - 1];
            padded.extend(w.chars().map(Symbol::Char));
            padded.push(Symbol::End);
            for pos in order - 1..padded.len() {
                for k in 0..order {
                    let hist = padded[pos - k..pos].to_vec();
                    lm.add_count(hist, padded[pos], 1);
                }
            }
        }
        Ok(lm)
    }

    /// Builds a model from explicit `(history, successor, count)` entries.
    pub fn from_counts(
        order: usize,
        alphabet: impl IntoIterator<Item = char>,
        counts: impl IntoIterator<Item = (Vec<Symbol>, Symbol, u64)>,
    ) -> Result<Self> {
        let mut lm = Self::empty(order, alphabet.into_iter().collect())?;
        for (hist, sym, n) in counts {
            if hist.len() >= order {
                return Err(Error::invalid(format!(
                    "history of length {} exceeds order {order}",
                    hist.len()
                )));
            }
            if sym == Symbol::Start {
                return Err(Error::invalid("the start symbol cannot be predicted"));
            }
            if n > 0 {
                lm.add_count(hist, sym, n);
            }
        }
        Ok(lm)
    }

    fn add_count(&mut self, hist: Vec<Symbol>, sym: Symbol, n: u64) {
        let entry = self.tables[hist.len()].entry(hist).or_default();
        entry.total += n;
        *entry.successors.entry(sym).or_insert(0) += n;
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn alphabet(&self) -> &[char] {
        &self.alphabet
    }

    /// Number of predictable symbols: the alphabet plus the end symbol.
    pub fn outcomes(&self) -> usize {
        self.alphabet.len() + 1
    }

    /// `c(h, w)`.
    pub fn count(&self, hist: &[Symbol], sym: Symbol) -> u64 {
        self.tables
            .get(hist.len())
            .and_then(|t| t.get(hist))
            .and_then(|h| h.successors.get(&sym))
            .copied()
            .unwrap_or(0)
    }

    /// `c(h)`.
    pub fn history_count(&self, hist: &[Symbol]) -> u64 {
        self.tables
            .get(hist.len())
            .and_then(|t| t.get(hist))
            .map_or(0, |h| h.total)
    }

    /// `T(h)`.
    pub fn distinct_successors(&self, hist: &[Symbol]) -> usize {
        self.tables
            .get(hist.len())
            .and_then(|t| t.get(hist))
            .map_or(0, |h| h.successors.len())
    }

    fn outcome_index(&self, sym: Symbol) -> Option<usize> {
        match sym {
            Symbol::End => Some(self.alphabet.len()),
            Symbol::Char(c) => self.index.get(&c).copied(),
            Symbol::Start => None,
        }
    }

    /// Conditioning context for the next symbol after `prefix` within a word.
    fn context(&self, prefix: &[char]) -> Vec<Symbol> {
        let keep = self.order - 1;
        let mut ctx: Vec<Symbol> = prefix
            .iter()
            .rev()
            .take(keep)
            .map(|&c| Symbol::Char(c))
            .collect();
        while ctx.len() < keep {
            ctx.push(Symbol::Start);
        }
        ctx.reverse();
        ctx
    }

    /// Next-symbol distribution after the in-word prefix `prefix`, indexed by
    /// alphabet position with the end symbol last.
    pub fn next_distribution(&self, prefix: &[char]) -> Vec<f64> {
        let ctx = self.context(prefix);
        let n = self.outcomes();
        let mut p = vec![1.0 / n as f64; n];
        for k in 0..self.order {
            let hist = &ctx[ctx.len() - k..];
            let Some(hc) = self.tables[k].get(hist) else {
                continue;
            };
            let t = hc.successors.len() as f64;
            let denom = hc.total as f64 + t;
            let mut next: Vec<f64> = p.iter().map(|&lower| t * lower / denom).collect();
            for (&sym, &c) in &hc.successors {
                if let Some(i) = self.outcome_index(sym) {
                    next[i] += c as f64 / denom;
                }
            }
            p = next;
        }
        p
    }

    /// `P(next | prefix)`. Characters outside the alphabet get the uniform floor.
    pub fn prob(&self, prefix: &[char], next: Symbol) -> f64 {
        match self.outcome_index(next) {
            Some(i) => self.next_distribution(prefix)[i],
            None => self.floor(),
        }
    }

    pub fn floor(&self) -> f64 {
        1.0 / self.outcomes() as f64
    }

    /// Log-probability of a whole word including the end transition.
    pub fn score_word(&self, word: &str) -> f64 {
        let chars: Vec<char> = word.chars().collect();
        let mut total = 0.0;
        for i in 0..=chars.len() {
            let sym = chars.get(i).map_or(Symbol::End, |&c| Symbol::Char(c));
            total += self.prob(&chars[..i], sym).ln();
        }
        total
    }

    /// Log-probabilities over a model vocabulary. BOS and EPS get `0.0`
    /// placeholders; they are masked out of every output distribution.
    pub fn vocab_log_probs(&self, vocab: &CharVocab, prefix: &[char]) -> Vec<f64> {
        let dist = self.next_distribution(prefix);
        let floor = self.floor().ln();
        (0..vocab.len())
            .map(|id| match id {
                vocab::BOS | vocab::EPS => 0.0,
                vocab::EOS => dist[self.alphabet.len()].ln(),
                vocab::UNK => floor,
                _ => vocab
                    .char_of(id)
                    .and_then(|c| self.index.get(&c))
                    .map_or(floor, |&i| dist[i].ln()),
            })
            .collect()
    }

    /// Rejects a model whose alphabet has characters the vocabulary lacks.
    pub fn check_compatible(&self, vocab: &CharVocab) -> Result<()> {
        let foreign: String = self
            .alphabet
            .iter()
            .filter(|&&c| !vocab.contains(c))
            .collect();
        if foreign.is_empty() {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "language model alphabet has characters outside the model vocabulary: {foreign:?}"
            )))
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(out, "ngram-order {}", self.order).unwrap();
        writeln!(out, "alphabet {}", self.alphabet.iter().collect::<String>()).unwrap();
        for (k, table) in self.tables.iter().enumerate() {
            let mut hists: Vec<&Vec<Symbol>> = table.keys().collect();
            hists.sort();
            for h in hists {
                let hist: Vec<String> = h.iter().map(|s| s.token()).collect();
                let hist = hist.join(" ");
                for (sym, c) in &table[h].successors {
                    writeln!(out, "{}\t{}\t{}\t{}", k + 1, hist, sym.token(), c).unwrap();
                }
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |line: usize, msg: &str| Error::LmFormat(format!("line {line}: {msg}"));
        let mut lines = text.lines().enumerate();
        let order = match lines.next() {
            Some((_, l)) => l
                .strip_prefix("ngram-order ")
                .and_then(|v| v.trim().parse::<usize>().ok())
                .ok_or_else(|| bad(1, "expected `ngram-order N`"))?,
            None => return Err(bad(1, "empty file")),
        };
        let alphabet: Vec<char> = match lines.next() {
            Some((_, l)) => l
                .strip_prefix("alphabet ")
                .or_else(|| (l == "alphabet").then_some(""))
                .ok_or_else(|| bad(2, "expected `alphabet <chars>`"))?
                .chars()
                .collect(),
            None => return Err(bad(2, "missing alphabet line")),
        };
        let mut counts = Vec::new();
        for (i, line) in lines {
            if line.is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 4 {
                return Err(bad(i + 1, "expected 4 tab-separated columns"));
            }
            let n: usize = cols[0].parse().map_err(|_| bad(i + 1, "bad order"))?;
            let hist: Vec<Symbol> = if cols[1].is_empty() {
                Vec::new()
            } else {
                cols[1]
                    .split(' ')
                    .map(|t| Symbol::parse(t).ok_or_else(|| bad(i + 1, "bad history token")))
                    .collect::<Result<_>>()?
            };
            if n != hist.len() + 1 {
                return Err(bad(i + 1, "order does not match history length"));
            }
            let sym = Symbol::parse(cols[2]).ok_or_else(|| bad(i + 1, "bad symbol"))?;
            let c: u64 = cols[3].parse().map_err(|_| bad(i + 1, "bad count"))?;
            counts.push((hist, sym, c));
        }
        Self::from_counts(order, alphabet, counts)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}
