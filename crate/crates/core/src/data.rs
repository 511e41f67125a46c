//! Datasets: TSV ingestion, vocabulary, inflection tables, splits and a
//! synthetic vowel-harmony language for small-scale runs.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use unicode_normalization::UnicodeNormalization;

use crate::error::{Error, Result};
use crate::model::CharVocab;

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Example {
    pub lemma: String,
    pub tag: String,
    pub inflected: String,
}

impl Example {
    pub fn new(lemma: &str, tag: &str, inflected: &str) -> Self {
        Example {
            lemma: lemma.to_string(),
            tag: tag.to_string(),
            inflected: inflected.to_string(),
        }
    }
}

/// Parses `lemma TAB tag TAB inflected` lines. Blank lines and lines starting
/// with `#` are skipped; text is normalised to NFC. `path` is only used in
/// error messages.
pub fn parse_dataset_str(text: &str, path: &Path) -> Result<Vec<Example>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 3 {
            return Err(err(format!(
                "expected 3 tab-separated columns (lemma, tag, inflected), found {}",
                cols.len()
            )));
        }
        let [lemma, tag, inflected] =
            [cols[0], cols[1], cols[2]].map(|c| c.nfc().collect::<String>());
        if lemma.is_empty() || tag.is_empty() || inflected.is_empty() {
            return Err(err("empty field".into()));
        }
        out.push(Example {
            lemma,
            tag,
            inflected,
        });
    }
    Ok(out)
}

pub fn parse_dataset(path: &Path) -> Result<Vec<Example>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let text = String::from_utf8(bytes).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: 1 + e.as_bytes()[..e.utf8_error().valid_up_to()]
            .iter()
            .filter(|&&b| b == b'\n')
            .count(),
        msg: "invalid UTF-8".into(),
    })?;
    parse_dataset_str(&text, path)
}

pub fn serialize_dataset(examples: &[Example]) -> String {
    let mut out = String::new();
    for e in examples {
        out.push_str(&e.lemma);
        out.push('\t');
        out.push_str(&e.tag);
        out.push('\t');
        out.push_str(&e.inflected);
        out.push('\n');
    }
    out
}

pub fn write_dataset(path: &Path, examples: &[Example]) -> Result<()> {
    std::fs::write(path, serialize_dataset(examples)).map_err(|e| Error::io(path, e))
}

/// Specials plus every character of every lemma and inflected form.
pub fn build_vocab(examples: &[Example]) -> Result<CharVocab> {
    if examples.is_empty() {
        return Err(Error::Empty("build_vocab"));
    }
    Ok(CharVocab::from_chars(
        examples
            .iter()
            .flat_map(|e| e.lemma.chars().chain(e.inflected.chars())),
    ))
}

/// Distinct tags in sorted order.
pub fn tags_of(examples: &[Example]) -> Vec<String> {
    let set: BTreeSet<&str> = examples.iter().map(|e| e.tag.as_str()).collect();
    set.into_iter().map(str::to_string).collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InflectionTable {
    pub lemma: String,
    pub forms: BTreeMap<String, String>,
}

impl InflectionTable {
    pub fn examples(&self) -> impl Iterator<Item = Example> + '_ {
        self.forms
            .iter()
            .map(|(tag, form)| Example::new(&self.lemma, tag, form))
    }
}

/// Groups examples by lemma, in lemma order. Exact duplicate rows collapse; a
/// lemma with two different forms for one tag is an error.
pub fn group_tables(examples: &[Example]) -> Result<Vec<InflectionTable>> {
    let mut by_lemma: BTreeMap<&str, BTreeMap<String, String>> = BTreeMap::new();
    for e in examples {
        let forms = by_lemma.entry(&e.lemma).or_default();
        match forms.get(&e.tag) {
            Some(f) if *f != e.inflected => {
                return Err(Error::invalid(format!(
                    "lemma `{}` has two forms for tag `{}`: `{f}` and `{}`",
                    e.lemma, e.tag, e.inflected
                )))
            }
            _ => {
                forms.insert(e.tag.clone(), e.inflected.clone());
            }
        }
    }
    Ok(by_lemma
        .into_iter()
        .map(|(lemma, forms)| InflectionTable {
            lemma: lemma.to_string(),
            forms,
        })
        .collect())
}

pub fn flatten_tables(tables: &[InflectionTable]) -> Vec<Example> {
    tables.iter().flat_map(|t| t.examples()).collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetSplit {
    pub train: Vec<InflectionTable>,
    pub dev: Vec<InflectionTable>,
    pub test: Vec<InflectionTable>,
}

/// Seeded shuffle of whole tables into train/dev/test. Dev and test sizes are
/// `round(n * ratio)`; train takes the rest.
pub fn split_tables(
    tables: &[InflectionTable],
    ratios: [f64; 3],
    seed: u64,
) -> Result<DatasetSplit> {
    if ratios.iter().any(|r| !(0.0..=1.0).contains(r))
        || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9
    {
        return Err(Error::invalid(format!(
            "split ratios must be in [0, 1] and sum to 1, got {ratios:?}"
        )));
    }
    let n = tables.len();
    let n_dev = (n as f64 * ratios[1]).round() as usize;
    let n_test = (n as f64 * ratios[2]).round() as usize;
    let counts = [n.saturating_sub(n_dev + n_test), n_dev, n_test];
    if n_dev + n_test > n || counts.iter().zip(&ratios).any(|(&c, &r)| r > 0.0 && c == 0) {
        return Err(Error::invalid(format!(
            "{n} tables are too few for split ratios {ratios:?}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let pick = |range: std::ops::Range<usize>| -> Vec<InflectionTable> {
        order[range].iter().map(|&i| tables[i].clone()).collect()
    };
    Ok(DatasetSplit {
        train: pick(0..counts[0]),
        dev: pick(counts[0]..counts[0] + n_dev),
        test: pick(counts[0] + n_dev..n),
    })
}

/// Vowel class of a stem: back if it contains any back vowel, else front.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Harmony {
    Back,
    Front,
}

/// A tag realised by a suffix with back and front variants.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SuffixRule {
    pub tag: String,
    pub back: String,
    pub front: String,
}

/// Generator description for a synthetic harmony language.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SynthSpec {
    pub consonants: Vec<char>,
    pub back_vowels: Vec<char>,
    pub front_vowels: Vec<char>,
    pub neutral_vowels: Vec<char>,
    /// Inclusive stem length range.
    pub stem_len: (usize, usize),
    pub suffixes: Vec<SuffixRule>,
}

impl Default for SynthSpec {
    /// Finnish-like locative cases over a 12-letter alphabet.
    fn default() -> Self {
        let rule = |tag: &str, back: &str, front: &str| SuffixRule {
            tag: tag.into(),
            back: back.into(),
            front: front.into(),
        };
        SynthSpec {
            consonants: vec!['k', 'l', 's', 't'],
            back_vowels: vec!['a', 'o', 'u'],
            front_vowels: vec!['ä', 'ö', 'y'],
            neutral_vowels: vec!['e', 'i'],
            stem_len: (3, 8),
            suffixes: vec![
                rule("case=inessive", "ssa", "ssä"),
                rule("case=elative", "sta", "stä"),
                rule("case=adessive", "lla", "llä"),
                rule("case=ablative", "lta", "ltä"),
            ],
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::invalid(format!("invalid synthetic language: {m}")));
        if self.consonants.is_empty() || self.back_vowels.is_empty() || self.front_vowels.is_empty()
        {
            return bad("consonant, back and front vowel sets must be non-empty");
        }
        let all: Vec<char> = [
            &self.consonants,
            &self.back_vowels,
            &self.front_vowels,
            &self.neutral_vowels,
        ]
        .into_iter()
        .flatten()
        .copied()
        .collect();
        if all.iter().collect::<BTreeSet<_>>().len() != all.len() {
            return bad("letter classes overlap or repeat");
        }
        let (lo, hi) = self.stem_len;
        if lo < 2 || hi < lo {
            return bad("stem length range must satisfy 2 <= min <= max");
        }
        if self.suffixes.is_empty() {
            return bad("no suffix rules");
        }
        let tags: BTreeSet<&str> = self.suffixes.iter().map(|s| s.tag.as_str()).collect();
        if tags.len() != self.suffixes.len() {
            return bad("duplicate tag");
        }
        if self
            .suffixes
            .iter()
            .any(|s| s.tag.is_empty() || s.back.is_empty() || s.front.is_empty())
        {
            return bad("empty tag or suffix");
        }
        Ok(())
    }

    pub fn harmony(&self, stem: &str) -> Harmony {
        if stem.chars().any(|c| self.back_vowels.contains(&c)) {
            Harmony::Back
        } else {
            Harmony::Front
        }
    }

    pub fn inflect(&self, stem: &str, rule: &SuffixRule) -> String {
        let suffix = match self.harmony(stem) {
            Harmony::Back => &rule.back,
            Harmony::Front => &rule.front,
        };
        format!("{stem}{suffix}")
    }

    /// A random harmonic stem: alternating consonants and vowels, vowels
    /// drawn from one harmony class plus the neutral vowels.
    fn stem(&self, rng: &mut impl Rng) -> String {
        let len = rng.gen_range(self.stem_len.0..=self.stem_len.1);
        let class: Vec<char> = match rng.gen_range(0..5) {
            0 if !self.neutral_vowels.is_empty() => self.neutral_vowels.clone(),
            1 | 2 => [&self.back_vowels[..], &self.neutral_vowels[..]].concat(),
            _ => [&self.front_vowels[..], &self.neutral_vowels[..]].concat(),
        };
        let mut vowel = rng.gen_bool(0.3);
        (0..len)
            .map(|_| {
                let set = if vowel { &class } else { &self.consonants };
                vowel = !vowel;
                *set.choose(rng).expect("validated non-empty")
            })
            .collect()
    }
}

/// `size` distinct stems, each inflected for every tag of the spec.
pub fn synth_language(spec: &SynthSpec, size: usize, seed: u64) -> Result<Vec<Example>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = BTreeSet::new();
    let mut stems = Vec::with_capacity(size);
    let mut attempts = 0usize;
    while stems.len() < size {
        attempts += 1;
        if attempts > 1000 + 100 * size {
            return Err(Error::invalid(format!(
                "could not draw {size} distinct stems from this language"
            )));
        }
        let s = spec.stem(&mut rng);
        if seen.insert(s.clone()) {
            stems.push(s);
        }
    }
    Ok(stems
        .iter()
        .flat_map(|stem| {
            spec.suffixes
                .iter()
                .map(move |r| Example::new(stem, &r.tag, &spec.inflect(stem, r)))
        })
        .collect())
}

/// A synthetic dataset with an unlabeled word list for language modelling.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SynthCorpus {
    pub split: DatasetSplit,
    /// Lemmas and inflected forms of the training tables plus `unlabeled`
    /// further tables that appear in no split. Sorted, without duplicates.
    pub wordlist: Vec<String>,
}

/// Draws `labeled + unlabeled` tables, sets the unlabeled ones aside for the
/// word list and splits the rest by `ratios`.
pub fn synth_corpus(
    spec: &SynthSpec,
    labeled: usize,
    unlabeled: usize,
    ratios: [f64; 3],
    seed: u64,
) -> Result<SynthCorpus> {
    let examples = synth_language(spec, labeled + unlabeled, seed)?;
    let mut tables = group_tables(&examples)?;
    tables.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed));
    let extra = tables.split_off(labeled);
    let split = split_tables(&tables, ratios, seed)?;
    let words: BTreeSet<String> = split
        .train
        .iter()
        .chain(&extra)
        .flat_map(|t| std::iter::once(t.lemma.clone()).chain(t.forms.values().cloned()))
        .collect();
    Ok(SynthCorpus {
        split,
        wordlist: words.into_iter().collect(),
    })
}
