//! Synthetic copy-tagging tasks for smoke tests and desk-scale training runs.
//!
//! Tags are a function of the word alone: filler words are outside, class
//! head words open a span of their class and tail words continue it. Tasks
//! share the input distribution and differ in label names and in how word
//! classes map to types, so one model can only solve several of them when it
//! knows which task it is working on.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{Tag, TaggedSequence};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_classes: usize,
    pub heads_per_class: usize,
    pub n_tail_words: usize,
    pub n_filler_words: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Chance that a position starts a span.
    pub span_rate: f64,
    pub max_span_len: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_classes: 3,
            heads_per_class: 4,
            n_tail_words: 4,
            n_filler_words: 12,
            min_len: 3,
            max_len: 8,
            span_rate: 0.3,
            max_span_len: 3,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes == 0 || self.heads_per_class == 0 || self.n_filler_words == 0 {
            return Err(Error::config("n_classes", "classes, head words and filler words must be non-empty"));
        }
        if self.max_span_len > 1 && self.n_tail_words == 0 {
            return Err(Error::config("n_tail_words", "multi-token spans need tail words"));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::config("min_len", "need 1 <= min_len <= max_len"));
        }
        if !(0.0..=1.0).contains(&self.span_rate) || self.max_span_len == 0 {
            return Err(Error::config("span_rate", "need a rate in [0, 1] and spans of at least one token"));
        }
        Ok(())
    }

    pub fn head_word(&self, class: usize, j: usize) -> String {
        format!("h{class}_{j}")
    }

    pub fn tail_word(&self, j: usize) -> String {
        format!("t{j}")
    }

    pub fn filler_word(&self, j: usize) -> String {
        format!("w{j}")
    }

    pub fn words(&self) -> Vec<String> {
        let mut out = Vec::new();
        for c in 0..self.n_classes {
            out.extend((0..self.heads_per_class).map(|j| self.head_word(c, j)));
        }
        out.extend((0..self.n_tail_words).map(|j| self.tail_word(j)));
        out.extend((0..self.n_filler_words).map(|j| self.filler_word(j)));
        out
    }
}

/// Labelling scheme of one task: class `c` is tagged `labels[c]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTask {
    pub name: String,
    pub labels: Vec<String>,
}

impl SyntheticTask {
    /// Labels `<PREFIX>_<k>` with class `c` mapped to `k = (c + shift) % n`.
    pub fn new(name: &str, prefix: &str, n_classes: usize, shift: usize) -> Self {
        let labels = (0..n_classes).map(|c| format!("{prefix}_{}", (c + shift) % n_classes)).collect();
        Self { name: name.to_string(), labels }
    }

    /// Every label a sequence of this task can carry.
    pub fn label_set(&self) -> Vec<String> {
        let mut v = self.labels.clone();
        v.sort();
        v
    }
}

/// Draws one unlabelled skeleton: (word, class-or-filler, is_head) per token.
fn skeleton<R: Rng>(spec: &SyntheticSpec, rng: &mut R) -> Vec<(String, Option<usize>, bool)> {
    let len = rng.gen_range(spec.min_len..=spec.max_len);
    let mut out = Vec::with_capacity(len);
    while out.len() < len {
        if rng.gen_bool(spec.span_rate) {
            let class = rng.gen_range(0..spec.n_classes);
            let span = rng.gen_range(1..=spec.max_span_len).min(len - out.len());
            out.push((spec.head_word(class, rng.gen_range(0..spec.heads_per_class)), Some(class), true));
            for _ in 1..span {
                out.push((spec.tail_word(rng.gen_range(0..spec.n_tail_words)), Some(class), false));
            }
        } else {
            out.push((spec.filler_word(rng.gen_range(0..spec.n_filler_words)), None, false));
        }
    }
    out
}

/// `n` sequences labelled under every task in `tasks` from the same skeletons.
pub fn generate(spec: &SyntheticSpec, tasks: &[SyntheticTask], n: usize, seed: u64) -> Result<Vec<Vec<TaggedSequence>>> {
    spec.validate()?;
    if let Some(t) = tasks.iter().find(|t| t.labels.len() != spec.n_classes) {
        return Err(Error::config("labels", format!("task {} needs {} labels", t.name, spec.n_classes)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<Vec<TaggedSequence>> = vec![Vec::with_capacity(n); tasks.len()];
    for _ in 0..n {
        let sk = skeleton(spec, &mut rng);
        let words: Vec<String> = sk.iter().map(|(w, _, _)| w.clone()).collect();
        for (t, task) in tasks.iter().enumerate() {
            let labels = sk
                .iter()
                .map(|(_, class, head)| match (class, head) {
                    (None, _) => Tag::Outside,
                    (Some(c), true) => Tag::Type(task.labels[*c].clone()),
                    (Some(_), false) => Tag::Inside,
                })
                .collect();
            out[t].push(TaggedSequence::new(words.clone(), labels, task.name.clone())?);
        }
    }
    Ok(out)
}

/// Two tasks over the same inputs with disjoint label names and shifted class maps.
pub fn two_task_pair(n_classes: usize) -> [SyntheticTask; 2] {
    [SyntheticTask::new("alpha", "ALPHA", n_classes, 0), SyntheticTask::new("beta", "BETA", n_classes, 1)]
}
