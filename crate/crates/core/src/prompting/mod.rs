//! Hard-prompt rendering, word-level vocabulary and answer tokens.

use std::collections::{BTreeMap, HashMap};

use crate::data::{Behavior, Item};
use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const UNK: usize = 2;
pub const YES: usize = 3;
pub const NO: usize = 4;

const RESERVED: [&str; 5] = ["<pad>", "<bos>", "<unk>", "Yes", "No"];

/// One piece of a prompt template.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Segment {
    Literal(&'static str),
    /// History lines, or `None.` when the history is empty.
    History,
    /// `{title} ({attrs})` of the target item.
    Target,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub template_id: &'static str,
    pub segments: Vec<Segment>,
}

impl PromptTemplate {
    pub fn reference() -> Self {
        Self {
            template_id: "reference-v1",
            segments: vec![
                Segment::Literal("The user watched the following items in the past, with preferences:\n"),
                Segment::History,
                Segment::Literal("\nQuestion: Based on the history, will the user like the item \""),
                Segment::Target,
                Segment::Literal("\"? Answer with Yes or No.\nAnswer:"),
            ],
        }
    }

    pub fn render(&self, history: &[Behavior], target: &Item) -> String {
        let mut out = String::new();
        for seg in &self.segments {
            match seg {
                Segment::Literal(s) => out.push_str(s),
                Segment::History if history.is_empty() => out.push_str("None."),
                Segment::History => {
                    for (i, b) in history.iter().enumerate() {
                        if i > 0 {
                            out.push('\n');
                        }
                        out.push_str("- ");
                        out.push_str(&item_text(&b.item));
                        out.push_str(if b.label == 1 { ": liked" } else { ": disliked" });
                    }
                }
                Segment::Target => out.push_str(&item_text(target)),
            }
        }
        out
    }
}

/// `{title} ({attrs})`, attributes joined with `, `. Item ids never appear.
pub fn item_text(item: &Item) -> String {
    let attrs: Vec<&str> = item.descriptive_attrs().map(|(_, v)| v).collect();
    format!("{} ({})", item.title(), attrs.join(", "))
}

/// Renders with the reference template. `short_history` is the retrieved
/// history in relevance order; at most `k_short` entries are used.
pub fn render_prompt(short_history: &[Behavior], target: &Item, k_short: usize) -> String {
    let n = short_history.len().min(k_short);
    PromptTemplate::reference().render(&short_history[..n], target)
}

/// Word-level split: maximal runs of alphanumeric characters, and every other
/// non-whitespace character on its own.
pub fn split_words(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start: Option<usize> = None;
    for (i, c) in text.char_indices() {
        if c.is_alphanumeric() {
            start.get_or_insert(i);
            continue;
        }
        if let Some(s) = start.take() {
            out.push(&text[s..i]);
        }
        if !c.is_whitespace() {
            out.push(&text[i..i + c.len_utf8()]);
        }
    }
    if let Some(s) = start {
        out.push(&text[s..]);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocab {
    /// Reserved tokens first, then corpus words by descending frequency with
    /// lexicographic tie-break, keeping at most `max_size` corpus words.
    pub fn build<'a>(corpus: impl IntoIterator<Item = &'a str>, max_size: usize) -> Result<Self> {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        let mut any = false;
        for text in corpus {
            any = true;
            for w in split_words(text) {
                *counts.entry(w).or_default() += 1;
            }
        }
        if !any {
            return Err(Error::Domain("vocabulary corpus is empty".into()));
        }
        let mut ranked: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|(w, _)| !RESERVED.contains(w))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        ranked.truncate(max_size);
        Ok(Self::from_tokens(
            RESERVED
                .iter()
                .map(|s| s.to_string())
                .chain(ranked.into_iter().map(|(w, _)| w.to_string()))
                .collect(),
        ))
    }

    /// Rebuilds from an ordered token list whose first entries are the
    /// reserved tokens.
    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let ids = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, ids }
    }

    pub fn check_reserved(&self) -> Result<()> {
        if self.tokens.len() < RESERVED.len()
            || self.tokens.iter().zip(RESERVED).any(|(a, b)| a != b)
        {
            return Err(Error::Format("vocabulary does not start with the reserved tokens".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> usize {
        self.ids.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or("<unk>", String::as_str)
    }

    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        split_words(text).into_iter().map(|w| self.id(w)).collect()
    }

    /// Tokens joined by single spaces.
    pub fn detokenize(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&i| self.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// One token per line, in id order.
    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let v = Self::from_tokens(text.lines().map(str::to_string).collect());
        v.check_reserved()?;
        Ok(v)
    }
}

pub fn encode_label(label: u8) -> usize {
    if label == 1 {
        YES
    } else {
        NO
    }
}

/// A tokenized prompt. The model reads `token_ids`; the next-token prediction
/// at `answer_pos` (the last prompt position) is supervised with
/// `label_token`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TextSample {
    pub token_ids: Vec<usize>,
    pub answer_pos: usize,
    pub label_token: usize,
}

impl TextSample {
    pub fn encode(prompt: &str, vocab: &Vocab, label: u8) -> Self {
        let mut token_ids = Vec::with_capacity(64);
        token_ids.push(BOS);
        token_ids.extend(vocab.tokenize(prompt));
        Self {
            answer_pos: token_ids.len() - 1,
            token_ids,
            label_token: encode_label(label),
        }
    }

    /// Prompt followed by the answer token, as seen by teacher forcing.
    pub fn with_answer(&self) -> Vec<usize> {
        let mut v = self.token_ids.clone();
        v.push(self.label_token);
        v
    }
}
