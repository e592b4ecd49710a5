use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const MASK: &str = "[MASK]";

/// Ids of the reserved tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpecialIds {
    pub pad: u32,
    pub unk: u32,
    pub cls: u32,
    pub sep: u32,
    pub mask: u32,
}

impl Default for SpecialIds {
    fn default() -> Self {
        SpecialIds {
            pad: 0,
            unk: 1,
            cls: 2,
            sep: 3,
            mask: 4,
        }
    }
}

impl SpecialIds {
    pub fn all(&self) -> [u32; 5] {
        [self.pad, self.unk, self.cls, self.sep, self.mask]
    }

    pub fn is_reserved(&self, id: u32) -> bool {
        self.all().contains(&id)
    }
}

/// Token ids with sentence-type ids and an attention mask.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub token_types: Vec<u8>,
    pub attention: Vec<bool>,
}

impl TokenSequence {
    pub fn from_ids(ids: Vec<u32>) -> Self {
        let n = ids.len();
        TokenSequence {
            ids,
            token_types: vec![0; n],
            attention: vec![true; n],
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn validate(&self, max_len: usize) -> Result<()> {
        let n = self.ids.len();
        if self.token_types.len() != n || self.attention.len() != n {
            return Err(Error::Dimension {
                op: "token sequence",
                left: vec![n],
                right: vec![self.token_types.len(), self.attention.len()],
            });
        }
        if n > max_len {
            return Err(Error::contract(format!(
                "sequence length {n} exceeds max_seq_len {max_len}"
            )));
        }
        if let Some(&t) = self.token_types.iter().find(|&&t| t > 1) {
            return Err(Error::Index {
                what: "token type",
                index: t as usize,
                size: 2,
            });
        }
        Ok(())
    }

    /// Appends `pad` tokens (unattended) up to `len`.
    pub fn padded(mut self, len: usize, pad: u32) -> Self {
        while self.ids.len() < len {
            self.ids.push(pad);
            self.token_types.push(0);
            self.attention.push(false);
        }
        self
    }
}

/// Word-level vocabulary. The five reserved tokens always occupy ids 0–4.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    /// Vocabulary from an explicit word list (reserved tokens are prepended
    /// and duplicates ignored).
    pub fn from_words<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut v = Vocabulary {
            words: Vec::new(),
            index: HashMap::new(),
        };
        for w in [PAD, UNK, CLS, SEP, MASK] {
            v.push(w.to_string());
        }
        for w in words {
            let w = w.as_ref().to_lowercase();
            if !w.is_empty() && !v.index.contains_key(&w) {
                v.push(w);
            }
        }
        v
    }

    /// Most frequent tokens of `lines`, ties broken alphabetically, capped
    /// so that the vocabulary (including reserved tokens) has at most
    /// `max_size` entries.
    pub fn build<S: AsRef<str>>(lines: &[S], max_size: usize) -> Self {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for line in lines {
            for tok in split_words(line.as_ref()) {
                if let Piece::Word(w) = tok {
                    *counts.entry(w).or_default() += 1;
                }
            }
        }
        let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let room = max_size.saturating_sub(5);
        Vocabulary::from_words(ranked.into_iter().take(room).map(|(w, _)| w))
    }

    fn push(&mut self, w: String) {
        self.index.insert(w.clone(), self.words.len() as u32);
        self.words.push(w);
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn specials(&self) -> SpecialIds {
        SpecialIds::default()
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.index.get(&word.to_lowercase()).copied()
    }

    pub fn word(&self, id: u32) -> Option<&str> {
        self.words.get(id as usize).map(String::as_str)
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    /// Lowercased word/punctuation split; `[MASK]`-style markers map to
    /// their reserved ids and unknown words to `[UNK]`. No `[CLS]`/`[SEP]`.
    pub fn tokenize(&self, text: &str) -> TokenSequence {
        let sp = self.specials();
        let ids = split_words(text)
            .into_iter()
            .map(|piece| match piece {
                Piece::Special(s) => self.index[s],
                Piece::Word(w) => self.index.get(&w).copied().unwrap_or(sp.unk),
            })
            .collect();
        TokenSequence::from_ids(ids)
    }

    /// `[CLS] text [SEP]`.
    pub fn encode_single(&self, text: &str) -> TokenSequence {
        let sp = self.specials();
        let mut ids = vec![sp.cls];
        ids.extend(self.tokenize(text).ids);
        ids.push(sp.sep);
        TokenSequence::from_ids(ids)
    }

    /// `[CLS] a [SEP] b [SEP]` with type id 1 on the second segment.
    pub fn encode_pair(&self, a: &str, b: &str) -> TokenSequence {
        let mut seq = self.encode_single(a);
        let tail = self.tokenize(b).ids;
        let n_b = tail.len() + 1;
        seq.ids.extend(tail);
        seq.ids.push(self.specials().sep);
        seq.token_types.extend(std::iter::repeat(1).take(n_b));
        seq.attention.extend(std::iter::repeat(true).take(n_b));
        seq
    }
}

enum Piece {
    Special(&'static str),
    Word(String),
}

fn special_marker(inner: &str) -> Option<&'static str> {
    match inner.to_ascii_lowercase().as_str() {
        "mask" => Some(MASK),
        "unk" => Some(UNK),
        "cls" => Some(CLS),
        "sep" => Some(SEP),
        "pad" => Some(PAD),
        _ => None,
    }
}

fn split_words(text: &str) -> Vec<Piece> {
    let mut out = Vec::new();
    let mut word = String::new();
    let chars: Vec<char> = text.chars().collect();
    let flush = |word: &mut String, out: &mut Vec<Piece>| {
        if !word.is_empty() {
            out.push(Piece::Word(std::mem::take(word)));
        }
    };
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_alphanumeric() || c == '_' {
            word.extend(c.to_lowercase());
            i += 1;
            continue;
        }
        flush(&mut word, &mut out);
        if c == '[' {
            if let Some(end) = chars[i + 1..].iter().position(|&ch| ch == ']') {
                let inner: String = chars[i + 1..i + 1 + end].iter().collect();
                if let Some(sp) = special_marker(&inner) {
                    out.push(Piece::Special(sp));
                    i += end + 2;
                    continue;
                }
            }
        }
        if !c.is_whitespace() {
            out.push(Piece::Word(c.to_string()));
        }
        i += 1;
    }
    flush(&mut word, &mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_is_empty_sequence() {
        let v = Vocabulary::from_words(["red"]);
        assert!(v.tokenize("").is_empty());
        assert!(v.tokenize("   ").is_empty());
    }

    #[test]
    fn case_folding() {
        let v = Vocabulary::from_words(["red"]);
        let ids = v.tokenize("Red red RED").ids;
        assert_eq!(ids.len(), 3);
        assert!(ids.iter().all(|&i| i == v.id("red").unwrap()));
    }

    #[test]
    fn unknown_words_and_punctuation() {
        let v = Vocabulary::from_words(["the", "sky", "is", "."]);
        let seq = v.tokenize("The sky is teal.");
        let unk = v.specials().unk;
        assert_eq!(
            seq.ids,
            vec![
                v.id("the").unwrap(),
                v.id("sky").unwrap(),
                v.id("is").unwrap(),
                unk,
                v.id(".").unwrap()
            ]
        );
    }

    #[test]
    fn mask_marker_is_one_token() {
        let v = Vocabulary::from_words(["it", "is", "."]);
        let seq = v.tokenize("It is [MASK].");
        assert_eq!(seq.ids, vec![5, 6, v.specials().mask, 7]);
        // Unknown bracketed text is plain punctuation plus words.
        let seq = v.tokenize("[foo]");
        assert_eq!(seq.len(), 3);
    }

    #[test]
    fn twenty_word_line_matches_table_lookup() {
        let line = "a quick brown fox jumps over the lazy dog while seven red birds sing near an old stone bridge today";
        let words: Vec<&str> = line.split(' ').collect();
        assert_eq!(words.len(), 20);
        let vocab = Vocabulary::from_words(words.iter().copied());
        // Independent table: reserved ids first, then first occurrence order.
        let mut table: HashMap<&str, u32> = HashMap::new();
        let mut next = 5u32;
        for w in &words {
            table.entry(w).or_insert_with(|| {
                next += 1;
                next - 1
            });
        }
        let expect: Vec<u32> = words.iter().map(|w| table[w]).collect();
        assert_eq!(vocab.tokenize(line).ids, expect);
    }

    #[test]
    fn build_ranks_by_frequency_then_alphabet() {
        let v = Vocabulary::build(&["b a a", "c b a"], 7);
        assert_eq!(v.words()[5..], ["a".to_string(), "b".to_string()]);
    }

    #[test]
    fn pair_encoding_types() {
        let v = Vocabulary::from_words(["x", "y"]);
        let seq = v.encode_pair("x", "y y");
        assert_eq!(seq.ids, vec![2, 5, 3, 6, 6, 3]);
        assert_eq!(seq.token_types, vec![0, 0, 0, 1, 1, 1]);
        seq.validate(16).unwrap();
        assert!(seq.validate(4).is_err());
    }
}
