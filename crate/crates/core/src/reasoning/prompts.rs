use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::encoder::{TokenSequence, Vocabulary};
use crate::error::{Error, Result};

pub const ITEM_SLOT: &str = "[ITEM]";
pub const MASK_SLOT: &str = "[MASK]";

/// A prompt with one `[ITEM]` slot and one `[MASK]` slot.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct PromptTemplate {
    text: String,
}

impl TryFrom<String> for PromptTemplate {
    type Error = Error;

    fn try_from(text: String) -> Result<Self> {
        PromptTemplate::new(text)
    }
}

impl From<PromptTemplate> for String {
    fn from(t: PromptTemplate) -> String {
        t.text
    }
}

/// A template filled with an item, tokenized.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderedPrompt {
    pub text: String,
    pub seq: TokenSequence,
    /// Token index of `[MASK]` in `seq`.
    pub mask_index: usize,
}

impl PromptTemplate {
    pub fn new(text: impl Into<String>) -> Result<Self> {
        let text = text.into();
        for slot in [ITEM_SLOT, MASK_SLOT] {
            let n = text.matches(slot).count();
            if n != 1 {
                return Err(Error::Template(format!(
                    "{text:?} has {n} {slot} slots, expected 1"
                )));
            }
        }
        Ok(PromptTemplate { text })
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn render(&self, item: &str) -> Result<String> {
        let item = item.trim();
        if item.is_empty() {
            return Err(Error::Template("empty item".into()));
        }
        Ok(self.text.replacen(ITEM_SLOT, item, 1))
    }

    /// Rendered text, its `[CLS] … [SEP]` encoding and the mask position.
    pub fn render_prompt(&self, item: &str, vocab: &Vocabulary) -> Result<RenderedPrompt> {
        let text = self.render(item)?;
        let seq = vocab.encode_single(&text);
        let mask = vocab.specials().mask;
        let hits: Vec<usize> = (0..seq.len()).filter(|&i| seq.ids[i] == mask).collect();
        if hits.len() != 1 {
            return Err(Error::Template(format!(
                "rendered prompt {text:?} has {} [MASK] tokens",
                hits.len()
            )));
        }
        Ok(RenderedPrompt {
            text,
            seq,
            mask_index: hits[0],
        })
    }
}

/// The nine color prompts.
pub fn builtin_templates() -> Vec<PromptTemplate> {
    [
        "Q: What is the color of [ITEM]? A: It is [MASK].",
        "Q: What is the colour of [ITEM]? A: It is [MASK].",
        "What is the color of [ITEM]? It is [MASK].",
        "What is the colour of [ITEM]? [MASK].",
        "The color of [ITEM] is [MASK].",
        "The usual color of [ITEM] is [MASK].",
        "[ITEM] usually has the color of [MASK].",
        "What is the usual color of [ITEM]? [MASK].",
        "What is the typical color of [ITEM]? [MASK].",
    ]
    .into_iter()
    .map(|t| PromptTemplate::new(t).expect("built-in templates are valid"))
    .collect()
}

pub fn default_color_labels() -> Vec<&'static str> {
    vec![
        "blue", "white", "red", "yellow", "black", "green", "purple", "brown", "pink", "grey",
        "orange",
    ]
}

fn content_lines(text: &str) -> impl Iterator<Item = &str> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
}

/// One template per line; blank lines and `#` comments are skipped.
pub fn parse_prompt_pack(text: &str) -> Result<Vec<PromptTemplate>> {
    let out: Vec<PromptTemplate> = content_lines(text)
        .map(PromptTemplate::new)
        .collect::<Result<_>>()?;
    if out.is_empty() {
        return Err(Error::Template("prompt pack has no templates".into()));
    }
    Ok(out)
}

/// One label per line; blank lines and `#` comments are skipped.
pub fn parse_label_file(text: &str) -> Vec<String> {
    content_lines(text).map(str::to_string).collect()
}

/// Candidate answers, each a single vocabulary word.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelSet {
    labels: Vec<String>,
    ids: Vec<u32>,
}

impl LabelSet {
    pub fn new<S: AsRef<str>>(labels: &[S], vocab: &Vocabulary) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Config("label set is empty".into()));
        }
        let mut seen = HashSet::new();
        let mut out = LabelSet {
            labels: Vec::with_capacity(labels.len()),
            ids: Vec::with_capacity(labels.len()),
        };
        for l in labels {
            let l = l.as_ref().trim().to_lowercase();
            if !seen.insert(l.clone()) {
                return Err(Error::Config(format!("label {l:?} listed twice")));
            }
            let id = vocab
                .id(&l)
                .filter(|&id| !vocab.specials().is_reserved(id))
                .ok_or_else(|| Error::UnknownLabel(l.clone()))?;
            out.labels.push(l);
            out.ids.push(id);
        }
        Ok(out)
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn position(&self, label: &str) -> Option<usize> {
        let l = label.trim().to_lowercase();
        self.labels.iter().position(|x| *x == l)
    }
}
