use std::collections::HashMap;
use std::sync::Arc;

pub const BOS: usize = 0;
pub const EOS: usize = 1;
pub const EPS: usize = 2;
pub const UNK: usize = 3;
pub const NUM_SPECIALS: usize = 4;

/// Bidirectional character/id map. Ids `0..4` are BOS, EOS, EPS and UNK; data
/// characters follow in codepoint order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CharVocab {
    chars: Vec<char>,
    index: HashMap<char, usize>,
}

impl CharVocab {
    pub fn from_chars(chars: impl IntoIterator<Item = char>) -> Self {
        let mut chars: Vec<char> = chars.into_iter().collect();
        chars.sort_unstable();
        chars.dedup();
        let index = chars
            .iter()
            .enumerate()
            .map(|(i, &c)| (c, i + NUM_SPECIALS))
            .collect();
        CharVocab { chars, index }
    }

    /// Size including the four special symbols.
    pub fn len(&self) -> usize {
        self.chars.len() + NUM_SPECIALS
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn data_chars(&self) -> &[char] {
        &self.chars
    }

    pub fn contains(&self, c: char) -> bool {
        self.index.contains_key(&c)
    }

    pub fn id(&self, c: char) -> Option<usize> {
        self.index.get(&c).copied()
    }

    pub fn id_or_unk(&self, c: char) -> usize {
        self.id(c).unwrap_or(UNK)
    }

    pub fn char_of(&self, id: usize) -> Option<char> {
        id.checked_sub(NUM_SPECIALS)
            .and_then(|i| self.chars.get(i))
            .copied()
    }

    pub fn encode(&self, s: &str) -> Vec<usize> {
        s.chars().map(|c| self.id_or_unk(c)).collect()
    }

    /// Decodes data characters; UNK becomes U+FFFD and other specials are dropped.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter_map(|&id| match id {
                UNK => Some('\u{FFFD}'),
                _ => self.char_of(id),
            })
            .collect()
    }

    /// `true` for ids that may never be emitted (BOS and EPS).
    pub fn output_mask(&self) -> Arc<[bool]> {
        let mut m = vec![false; self.len()];
        m[BOS] = true;
        m[EPS] = true;
        Arc::from(m)
    }

    pub fn special_name(id: usize) -> Option<&'static str> {
        match id {
            BOS => Some("<bos>"),
            EOS => Some("<eos>"),
            EPS => Some("<eps>"),
            UNK => Some("<unk>"),
            _ => None,
        }
    }
}
