//! Sentinel-interleaved seq2seq encoding of span-labelled token sequences.
//!
//! A sentence `x_1 .. x_L` becomes `s_0 x_1 s_1 .. x_L s_L` on the input side
//! and `s_0 t_1 s_1 .. t_L s_L` on the output side, where the `t_i` are
//! simplified-BIO tags: a type tag opens a span, an untyped `I` continues it
//! and `O` marks tokens outside any span.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const INSIDE: &str = "I";
pub const OUTSIDE: &str = "O";

/// Number of sentinel tokens in the T5 vocabulary.
pub const T5_SENTINEL_COUNT: usize = 100;

/// One simplified-BIO tag.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Tag {
    Outside,
    Inside,
    /// Starts a span of the given type.
    Type(String),
}

impl Tag {
    pub fn as_str(&self) -> &str {
        match self {
            Tag::Outside => OUTSIDE,
            Tag::Inside => INSIDE,
            Tag::Type(t) => t,
        }
    }

    pub fn type_name(&self) -> Option<&str> {
        match self {
            Tag::Type(t) => Some(t),
            _ => None,
        }
    }

    fn is_well_formed(&self) -> bool {
        match self {
            Tag::Type(t) => is_valid_type_symbol(t),
            _ => true,
        }
    }
}

fn is_valid_type_symbol(s: &str) -> bool {
    !s.is_empty() && s != INSIDE && s != OUTSIDE && !s.chars().any(char::is_whitespace)
}

impl FromStr for Tag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            OUTSIDE => Ok(Tag::Outside),
            INSIDE => Ok(Tag::Inside),
            t if is_valid_type_symbol(t) => Ok(Tag::Type(t.to_string())),
            other => Err(Error::InvalidLabel(format!("{other:?} is not a tag symbol"))),
        }
    }
}

impl TryFrom<String> for Tag {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Tag> for String {
    fn from(t: Tag) -> String {
        t.as_str().to_string()
    }
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Parses whitespace-separated tag symbols.
pub fn parse_tags(text: &str) -> Result<Vec<Tag>> {
    text.split_whitespace().map(str::parse).collect()
}

/// A labelled span over token indices `[start, end)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
    pub label: String,
}

impl Span {
    pub fn new(start: usize, end: usize, label: impl Into<String>) -> Self {
        Self { start, end, label: label.into() }
    }
}

/// Tokens with aligned tags for one example of one task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaggedSequence {
    pub tokens: Vec<String>,
    pub labels: Vec<Tag>,
    pub task: String,
}

impl TaggedSequence {
    pub fn new(tokens: Vec<String>, labels: Vec<Tag>, task: impl Into<String>) -> Result<Self> {
        if tokens.len() != labels.len() {
            return Err(Error::InvalidInput(format!(
                "{} tokens but {} labels",
                tokens.len(),
                labels.len()
            )));
        }
        if let Some(t) = tokens.iter().find(|t| t.is_empty() || t.chars().any(char::is_whitespace)) {
            return Err(Error::InvalidInput(format!("token {t:?} is empty or contains whitespace")));
        }
        Ok(Self { tokens, labels, task: task.into() })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn spans(&self) -> Vec<Span> {
        sbio_to_spans(&self.labels)
    }
}

/// Encoded input/output strings of one example.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentTPair {
    pub input_text: String,
    pub output_text: String,
}

/// The sentinel vocabulary: names for indices `0..capacity` and the inverse lookup.
#[derive(Debug, Clone)]
pub struct Sentinels {
    names: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for Sentinels {
    fn default() -> Self {
        Self::t5(T5_SENTINEL_COUNT)
    }
}

impl Sentinels {
    /// `<extra_id_N>` naming.
    pub fn t5(capacity: usize) -> Self {
        Self::from_fn(capacity, |i| format!("<extra_id_{i}>"))
    }

    pub fn from_fn(capacity: usize, namer: impl Fn(usize) -> String) -> Self {
        let names: Vec<String> = (0..capacity).map(namer).collect();
        let index = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        Self { names, index }
    }

    pub fn capacity(&self) -> usize {
        self.names.len()
    }

    pub fn name(&self, i: usize) -> Result<&str> {
        self.names
            .get(i)
            .map(String::as_str)
            .ok_or(Error::Capacity { needed: i + 1, capacity: self.names.len() })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn parse(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    fn ensure_capacity(&self, len: usize) -> Result<()> {
        if len + 1 > self.capacity() {
            return Err(Error::Capacity { needed: len + 1, capacity: self.capacity() });
        }
        Ok(())
    }

    fn interleave<'a>(&self, items: impl ExactSizeIterator<Item = &'a str>) -> Result<String> {
        self.ensure_capacity(items.len())?;
        let mut out = String::from(self.names[0].as_str());
        for (i, item) in items.enumerate() {
            out.push(' ');
            out.push_str(item);
            out.push(' ');
            out.push_str(&self.names[i + 1]);
        }
        Ok(out)
    }
}

/// `s_0 x_1 s_1 .. x_L s_L`.
pub fn encode_input<S: AsRef<str>>(tokens: &[S], sentinels: &Sentinels) -> Result<String> {
    if tokens.is_empty() {
        return Err(Error::InvalidInput("empty token list".into()));
    }
    for t in tokens {
        let t = t.as_ref();
        if t.is_empty() || t.chars().any(char::is_whitespace) {
            return Err(Error::InvalidInput(format!("token {t:?} is empty or contains whitespace")));
        }
    }
    sentinels.interleave(tokens.iter().map(AsRef::as_ref))
}

/// `s_0 t_1 s_1 .. t_L s_L`.
pub fn encode_output(labels: &[Tag], sentinels: &Sentinels) -> Result<String> {
    if labels.is_empty() {
        return Err(Error::InvalidInput("empty label list".into()));
    }
    for l in labels {
        if !l.is_well_formed() || sentinels.parse(l.as_str()).is_some() {
            return Err(Error::InvalidLabel(format!("{:?} is not a tag symbol", l.as_str())));
        }
    }
    sentinels.interleave(labels.iter().map(Tag::as_str))
}

pub fn encode_pair(seq: &TaggedSequence, sentinels: &Sentinels) -> Result<SentTPair> {
    Ok(SentTPair {
        input_text: encode_input(&seq.tokens, sentinels)?,
        output_text: encode_output(&seq.labels, sentinels)?,
    })
}

/// Renders spans as simplified-BIO tags over `length` tokens.
pub fn spans_to_sbio(spans: &[Span], length: usize) -> Result<Vec<Tag>> {
    let mut tags = vec![Tag::Outside; length];
    let mut taken = vec![false; length];
    for span in spans {
        if span.start >= span.end || span.end > length {
            return Err(Error::InvalidAnnotation(format!(
                "span [{}, {}) is empty or outside a sequence of length {length}",
                span.start, span.end
            )));
        }
        if !is_valid_type_symbol(&span.label) {
            return Err(Error::InvalidAnnotation(format!("span label {:?} is not a type tag", span.label)));
        }
        if taken[span.start..span.end].iter().any(|&t| t) {
            return Err(Error::InvalidAnnotation(format!(
                "span [{}, {}) {} overlaps another span",
                span.start, span.end, span.label
            )));
        }
        taken[span.start..span.end].iter_mut().for_each(|t| *t = true);
        tags[span.start] = Tag::Type(span.label.clone());
        for t in &mut tags[span.start + 1..span.end] {
            *t = Tag::Inside;
        }
    }
    Ok(tags)
}

/// Reads spans back from tags. A stray `I` with no open span counts as `O`.
pub fn sbio_to_spans(labels: &[Tag]) -> Vec<Span> {
    let mut spans = Vec::new();
    let mut open: Option<(usize, &str)> = None;
    for (i, tag) in labels.iter().enumerate() {
        match tag {
            Tag::Inside => {}
            Tag::Outside => {
                if let Some((start, label)) = open.take() {
                    spans.push(Span::new(start, i, label));
                }
            }
            Tag::Type(t) => {
                if let Some((start, label)) = open.take() {
                    spans.push(Span::new(start, i, label));
                }
                open = Some((i, t));
            }
        }
    }
    if let Some((start, label)) = open {
        spans.push(Span::new(start, labels.len(), label));
    }
    spans
}

/// Result of parsing a generated output string.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Decoded {
    pub labels: Vec<Tag>,
    /// Slots that fell back to `O`.
    pub malformed_slots: usize,
}

/// Parses generated text into exactly `expected_length` tags, T5 sentinels, any tag symbol.
pub fn decode_output(generated_text: &str, expected_length: usize) -> Vec<Tag> {
    decode_output_with(generated_text, expected_length, &Sentinels::default(), None).labels
}

/// Parses generated text into exactly `expected_length` tags.
///
/// The tag for position `p` is read after sentinel `s_p`. When `s_{p+1}`
/// directly follows, the slot must hold exactly one tag. When `s_{p+1}` is
/// missing or out of order, the first token after `s_p` is taken. A missing or
/// repeated `s_p`, or a token that is not an admissible tag, yields `O` and
/// counts as malformed. Never fails.
pub fn decode_output_with(
    generated_text: &str,
    expected_length: usize,
    sentinels: &Sentinels,
    label_set: Option<&BTreeSet<String>>,
) -> Decoded {
    let tokens: Vec<&str> = generated_text.split_whitespace().collect();
    let marks: Vec<Option<usize>> = tokens.iter().map(|t| sentinels.parse(t)).collect();
    let mut where_is: HashMap<usize, Vec<usize>> = HashMap::new();
    for (pos, m) in marks.iter().enumerate() {
        if let Some(s) = m {
            where_is.entry(*s).or_default().push(pos);
        }
    }
    let admissible = |tok: &str| -> Option<Tag> {
        let tag: Tag = tok.parse().ok()?;
        match (&tag, label_set) {
            (Tag::Type(t), Some(set)) if !set.contains(t) => None,
            _ => Some(tag),
        }
    };

    let mut labels = Vec::with_capacity(expected_length);
    let mut malformed = 0;
    for p in 0..expected_length {
        let slot = match where_is.get(&p).map(Vec::as_slice) {
            Some([at]) => {
                let body_start = at + 1;
                let body_end = (body_start..tokens.len()).find(|&i| marks[i].is_some()).unwrap_or(tokens.len());
                let body = &tokens[body_start..body_end];
                let closed_by_next = body_end < tokens.len() && marks[body_end] == Some(p + 1);
                match body {
                    [single] => admissible(single),
                    [first, ..] if !closed_by_next => admissible(first),
                    _ => None,
                }
            }
            _ => None,
        };
        match slot {
            Some(tag) => labels.push(tag),
            None => {
                labels.push(Tag::Outside);
                malformed += 1;
            }
        }
    }
    Decoded { labels, malformed_slots: malformed }
}
