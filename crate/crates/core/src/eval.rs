//! Exact-match micro-F1 over decoded tag sequences.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use hyperpeft_tensor::Scalar;
use serde::{Deserialize, Serialize};

use crate::codec::{decode_output_with, encode_input, encode_output, sbio_to_spans, Sentinels, Span, Tag, TaggedSequence};
use crate::error::{Error, Result};
use crate::host::Vocab;
use crate::peft::InstrumentedModel;

/// Typed spans of a tag sequence.
pub fn extract_entities(labels: &[Tag]) -> BTreeSet<Span> {
    sbio_to_spans(labels).into_iter().collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub n_correct: usize,
    pub n_pred: usize,
    pub n_gold: usize,
}

impl Counts {
    pub fn of_sentence(pred: &[Tag], gold: &[Tag]) -> Self {
        let p = extract_entities(pred);
        let g = extract_entities(gold);
        Self { n_correct: p.intersection(&g).count(), n_pred: p.len(), n_gold: g.len() }
    }

    pub fn add(self, o: Self) -> Self {
        Self { n_correct: self.n_correct + o.n_correct, n_pred: self.n_pred + o.n_pred, n_gold: self.n_gold + o.n_gold }
    }

    pub fn prf(&self) -> Prf {
        if self.n_pred == 0 && self.n_gold == 0 {
            return Prf { precision: 1.0, recall: 1.0, f1: 1.0 };
        }
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(self.n_correct, self.n_pred);
        let recall = ratio(self.n_correct, self.n_gold);
        let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
        Prf { precision, recall, f1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

pub fn pooled_counts(preds: &[Vec<Tag>], golds: &[Vec<Tag>]) -> Result<Counts> {
    if preds.len() != golds.len() {
        return Err(Error::Contract(format!("{} predictions for {} gold sequences", preds.len(), golds.len())));
    }
    let mut total = Counts::default();
    for (i, (p, g)) in preds.iter().zip(golds).enumerate() {
        if p.len() != g.len() {
            return Err(Error::Contract(format!(
                "sequence {i}: prediction has {} tags, gold has {}",
                p.len(),
                g.len()
            )));
        }
        total = total.add(Counts::of_sentence(p, g));
    }
    Ok(total)
}

/// Micro-averaged (P, R, F1) with counts pooled over all sentences.
pub fn micro_f1(preds: &[Vec<Tag>], golds: &[Vec<Tag>]) -> Result<Prf> {
    Ok(pooled_counts(preds, golds)?.prf())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskReport {
    pub task: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub n_gold: usize,
    pub n_pred: usize,
    pub n_correct: usize,
    pub n_sentences: usize,
    pub malformed_slot_count: usize,
    pub total_slots: usize,
    /// Set when every slot of a non-empty test set was malformed.
    pub quality_alarm: bool,
}

impl TaskReport {
    pub fn from_counts(task: &str, c: Counts, n_sentences: usize, malformed: usize, total_slots: usize) -> Self {
        let prf = c.prf();
        Self {
            task: task.to_string(),
            precision: prf.precision,
            recall: prf.recall,
            f1: prf.f1,
            n_gold: c.n_gold,
            n_pred: c.n_pred,
            n_correct: c.n_correct,
            n_sentences,
            malformed_slot_count: malformed,
            total_slots,
            quality_alarm: total_slots > 0 && malformed == total_slots,
        }
    }

    pub fn counts(&self) -> Counts {
        Counts { n_correct: self.n_correct, n_pred: self.n_pred, n_gold: self.n_gold }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub tasks: Vec<TaskReport>,
    /// Arithmetic mean of per-task F1.
    pub average_f1: f64,
    /// F1 from counts pooled over every task.
    pub pooled_f1: f64,
}

impl EvalReport {
    pub fn new(model: impl Into<String>, tasks: Vec<TaskReport>) -> Self {
        let average_f1 = average_f1(&tasks.iter().map(|t| t.f1).collect::<Vec<_>>());
        let pooled = tasks.iter().fold(Counts::default(), |acc, t| acc.add(t.counts()));
        Self { model: model.into(), tasks, average_f1, pooled_f1: pooled.prf().f1 }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn any_alarm(&self) -> bool {
        self.tasks.iter().any(|t| t.quality_alarm)
    }

    /// Aligned text table: one column per task plus the average, F1 in percent.
    pub fn to_table(&self) -> String {
        let mut header = vec!["Model".to_string()];
        header.extend(self.tasks.iter().map(|t| t.task.clone()));
        header.push("Average".into());
        let mut row = vec![self.model.clone()];
        row.extend(self.tasks.iter().map(|t| format!("{:.2}", 100.0 * t.f1)));
        row.push(format!("{:.2}", 100.0 * self.average_f1));
        let widths: Vec<usize> = header.iter().zip(&row).map(|(a, b)| a.len().max(b.len())).collect();
        let mut out = String::new();
        for line in [&header, &row] {
            let cells: Vec<String> = line
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(i, (c, w))| if i == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
                .collect();
            let _ = writeln!(out, "{}", cells.join("  ").trim_end());
        }
        out
    }
}

/// Mean of per-task F1 values; 0 for an empty list.
pub fn average_f1(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

/// Produces output texts for framed inputs of one task.
pub trait Predictor {
    fn predict(&mut self, task_index: usize, inputs: &[String]) -> Result<Vec<String>>;
}

/// Replays gold outputs; a closed-loop check of the evaluation path.
#[derive(Debug, Clone, Default)]
pub struct GoldReplay {
    outputs: BTreeMap<String, String>,
}

impl GoldReplay {
    pub fn new(seqs: &[TaggedSequence], sentinels: &Sentinels) -> Result<Self> {
        let mut outputs = BTreeMap::new();
        for s in seqs {
            outputs.insert(encode_input(&s.tokens, sentinels)?, encode_output(&s.labels, sentinels)?);
        }
        Ok(Self { outputs })
    }
}

impl Predictor for GoldReplay {
    fn predict(&mut self, _task_index: usize, inputs: &[String]) -> Result<Vec<String>> {
        Ok(inputs.iter().map(|i| self.outputs.get(i).cloned().unwrap_or_default()).collect())
    }
}

/// Greedy decoding with an instrumented model.
pub struct ModelPredictor<'a, T: Scalar> {
    pub model: &'a mut InstrumentedModel<T>,
    pub vocab: &'a Vocab,
    pub batch_size: usize,
}

impl<T: Scalar> Predictor for ModelPredictor<'_, T> {
    fn predict(&mut self, task_index: usize, inputs: &[String]) -> Result<Vec<String>> {
        self.model.set_task(task_index)?;
        let mut out = Vec::with_capacity(inputs.len());
        for chunk in inputs.chunks(self.batch_size.max(1)) {
            let ids: Vec<Vec<usize>> = chunk.iter().map(|t| self.vocab.encode(t)).collect();
            let longest = ids.iter().map(Vec::len).max().unwrap_or(0);
            let decoded = self.model.greedy_decode(&ids, longest + 2)?;
            out.extend(decoded.iter().map(|d| self.vocab.decode(d)));
        }
        Ok(out)
    }
}

/// Decodes every test example and pools micro-F1 for one task.
pub fn evaluate_model(
    predictor: &mut dyn Predictor,
    task: &str,
    task_index: usize,
    test: &[TaggedSequence],
    sentinels: &Sentinels,
    label_set: Option<&BTreeSet<String>>,
) -> Result<TaskReport> {
    let inputs: Vec<String> = test.iter().map(|s| encode_input(&s.tokens, sentinels)).collect::<Result<_>>()?;
    let outputs = predictor.predict(task_index, &inputs)?;
    if outputs.len() != inputs.len() {
        return Err(Error::Contract(format!("predictor returned {} outputs for {} inputs", outputs.len(), inputs.len())));
    }
    let mut counts = Counts::default();
    let (mut malformed, mut slots) = (0, 0);
    for (s, text) in test.iter().zip(&outputs) {
        let d = decode_output_with(text, s.len(), sentinels, label_set);
        counts = counts.add(Counts::of_sentence(&d.labels, &s.labels));
        malformed += d.malformed_slots;
        slots += s.len();
    }
    Ok(TaskReport::from_counts(task, counts, test.len(), malformed, slots))
}
