//! Multi-task training: temperature sampling, weighted loss, checkpoints and
//! loss-based model selection.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use hyperpeft_tensor::{Adam, AdamConfig, ParamStore, Scalar, Tape};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::codec::{encode_pair, TaggedSequence};
use crate::error::{Error, Result};
use crate::host::{Seq2SeqBatch, ToyHost, Vocab};
use crate::hypernet::HyperNet;
use crate::peft::{instrument_host, FreezePolicy, InsertionPlan, InstrumentedModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainerConfig {
    #[serde(default = "d_lr")]
    pub learning_rate: f64,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_steps")]
    pub total_steps: u64,
    #[serde(default = "d_every")]
    pub checkpoint_every: u64,
    #[serde(default = "d_temperature")]
    pub temperature: f64,
    /// Loss weight per task name; missing tasks weigh 1.
    #[serde(default)]
    pub task_weights: BTreeMap<String, f64>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_fraction")]
    pub low_resource_fraction: f64,
    #[serde(default = "d_eval_batch")]
    pub eval_batch_size: usize,
}

fn d_lr() -> f64 {
    3e-4
}
fn d_batch() -> usize {
    32
}
fn d_steps() -> u64 {
    1 << 18
}
fn d_every() -> u64 {
    1000
}
fn d_temperature() -> f64 {
    10.0
}
fn d_fraction() -> f64 {
    1.0
}
fn d_eval_batch() -> usize {
    64
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            learning_rate: d_lr(),
            batch_size: d_batch(),
            total_steps: d_steps(),
            checkpoint_every: d_every(),
            temperature: d_temperature(),
            task_weights: BTreeMap::new(),
            seed: 0,
            low_resource_fraction: d_fraction(),
            eval_batch_size: d_eval_batch(),
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        if self.eval_batch_size == 0 {
            return Err(Error::config("eval_batch_size", "must be positive"));
        }
        if self.total_steps == 0 {
            return Err(Error::config("total_steps", "must be positive"));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::config("checkpoint_every", "must be positive"));
        }
        if !(self.temperature >= 1.0 && self.temperature.is_finite()) {
            return Err(Error::config("temperature", "must be >= 1"));
        }
        if let Some((task, w)) = self.task_weights.iter().find(|(_, w)| !(**w >= 0.0 && w.is_finite())) {
            return Err(Error::config(format!("task_weights.{task}"), format!("{w} is not a non-negative weight")));
        }
        if !crate::corpus::LOW_RESOURCE_FRACTIONS.contains(&self.low_resource_fraction) {
            return Err(Error::config("low_resource_fraction", "must be one of 0.1, 0.2, 1.0"));
        }
        Ok(())
    }

    pub fn weight(&self, task: &str) -> f64 {
        self.task_weights.get(task).copied().unwrap_or(1.0)
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.learning_rate, ..AdamConfig::default() }
    }
}

/// `q_i = p_i^(1/T) / sum_j p_j^(1/T)` with `p_i = N_i / sum N`.
pub fn sampling_probs(sizes: &[usize], temperature: f64) -> Result<Vec<f64>> {
    if sizes.is_empty() {
        return Err(Error::config("tasks", "no tasks to sample from"));
    }
    if !(temperature >= 1.0 && temperature.is_finite()) {
        return Err(Error::config("temperature", "must be >= 1"));
    }
    let total: usize = sizes.iter().sum();
    if total == 0 {
        return Err(Error::config("tasks", "every task is empty"));
    }
    let p: Vec<f64> = sizes.iter().map(|&n| n as f64 / total as f64).collect();
    if temperature == 1.0 {
        return Ok(p);
    }
    let scaled: Vec<f64> = p.iter().map(|x| x.powf(1.0 / temperature)).collect();
    let z: f64 = scaled.iter().sum();
    Ok(scaled.into_iter().map(|x| x / z).collect())
}

/// Shuffled index stream over one task's examples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stream {
    pub order: Vec<usize>,
    pub cursor: usize,
    pub epoch: u64,
}

/// Task draws plus per-task epoch streams; fully serializable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSampler {
    probs: Vec<f64>,
    batch_size: usize,
    rng: ChaCha8Rng,
    streams: Vec<Stream>,
}

impl TaskSampler {
    pub fn new(sizes: &[usize], temperature: f64, batch_size: usize, seed: u64) -> Result<Self> {
        let probs = sampling_probs(sizes, temperature)?;
        Self::with_probs(probs, sizes, batch_size, seed)
    }

    pub fn with_probs(probs: Vec<f64>, sizes: &[usize], batch_size: usize, seed: u64) -> Result<Self> {
        if probs.len() != sizes.len() {
            return Err(Error::Contract("one probability per task required".into()));
        }
        if let Some(i) = (0..sizes.len()).find(|&i| probs[i] > 0.0 && sizes[i] == 0) {
            return Err(Error::config("tasks", format!("task {i} has sampling mass but no examples")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let streams = sizes
            .iter()
            .map(|&n| {
                let mut order: Vec<usize> = (0..n).collect();
                order.shuffle(&mut rng);
                Stream { order, cursor: 0, epoch: 0 }
            })
            .collect();
        Ok(Self { probs, batch_size, rng, streams })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn draw_task(&mut self) -> usize {
        let u: f64 = self.rng.gen();
        let mut acc = 0.0;
        let mut last = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p <= 0.0 {
                continue;
            }
            acc += p;
            last = i;
            if u < acc {
                return i;
            }
        }
        last
    }

    /// A task and `batch_size` example indices from its stream.
    pub fn next_batch(&mut self) -> (usize, Vec<usize>) {
        let task = self.draw_task();
        let mut out = Vec::with_capacity(self.batch_size);
        while out.len() < self.batch_size {
            let s = &mut self.streams[task];
            if s.cursor == s.order.len() {
                s.order.shuffle(&mut self.rng);
                s.cursor = 0;
                s.epoch += 1;
            }
            out.push(s.order[s.cursor]);
            s.cursor += 1;
        }
        (task, out)
    }
}

/// Source and target ids of one framed example.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodedExample {
    pub src: Vec<usize>,
    pub tgt: Vec<usize>,
}

pub fn encode_sequences(seqs: &[TaggedSequence], vocab: &Vocab) -> Result<Vec<EncodedExample>> {
    let sentinels = vocab.sentinels();
    seqs.iter()
        .map(|s| {
            let pair = encode_pair(s, &sentinels)?;
            Ok(EncodedExample { src: vocab.encode(&pair.input_text), tgt: vocab.encode(&pair.output_text) })
        })
        .collect()
}

pub fn make_batch(examples: &[EncodedExample], indices: &[usize]) -> Seq2SeqBatch {
    let pairs: Vec<_> = indices.iter().map(|&i| (examples[i].src.clone(), examples[i].tgt.clone())).collect();
    Seq2SeqBatch::new(&pairs)
}

pub fn batch_hash(batch: &Seq2SeqBatch) -> String {
    let mut h = Sha256::new();
    for id in batch.src.iter().chain(&batch.tgt_in) {
        h.update((*id as u64).to_le_bytes());
    }
    hex::encode(&h.finalize()[..8])
}

/// Training and validation data of one task; its position is its task index.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskData {
    pub name: String,
    pub train: Vec<EncodedExample>,
    pub val: Vec<EncodedExample>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRecord {
    pub step: u64,
    pub val_loss: BTreeMap<String, f64>,
    pub mean_val_loss: f64,
    pub path: Option<PathBuf>,
}

/// Lowest mean validation loss; the earliest step wins ties.
pub fn select_best(records: &[CheckpointRecord]) -> Option<&CheckpointRecord> {
    records
        .iter()
        .filter(|r| r.mean_val_loss.is_finite())
        .min_by(|a, b| a.mean_val_loss.total_cmp(&b.mean_val_loss).then(a.step.cmp(&b.step)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub step: u64,
    pub task: usize,
    pub loss: f64,
}

/// Everything besides tensors that a resumed run needs.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct TrainerState {
    step: u64,
    adam: AdamConfig,
    adam_step: u64,
    sampler: TaskSampler,
}

/// Static description of a run, written once to `config.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunLayout {
    pub trainer: TrainerConfig,
    pub tasks: Vec<String>,
    pub plan: InsertionPlan,
    pub policy: FreezePolicy,
}

pub const CONFIG_FILE: &str = "config.json";
pub const RECORDS_FILE: &str = "records.jsonl";
pub const HOST_DIR: &str = "host";
pub const CHECKPOINT_DIR: &str = "checkpoints";

pub fn checkpoint_dir(out: &Path, step: u64) -> PathBuf {
    out.join(CHECKPOINT_DIR).join(format!("step-{step:08}"))
}

pub struct Trainer<T: Scalar> {
    cfg: TrainerConfig,
    model: InstrumentedModel<T>,
    tasks: Vec<TaskData>,
    sampler: TaskSampler,
    adam: Adam<T>,
    step: u64,
    records: Vec<CheckpointRecord>,
    out_dir: Option<PathBuf>,
    best_state: Option<(ParamStore<T>, ParamStore<T>)>,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(cfg: TrainerConfig, model: InstrumentedModel<T>, tasks: Vec<TaskData>) -> Result<Self> {
        cfg.validate()?;
        if tasks.is_empty() {
            return Err(Error::config("tasks", "no tasks to train on"));
        }
        let n_tasks = model.hypernet().config().n_tasks;
        if tasks.len() > n_tasks && n_tasks != 1 {
            return Err(Error::config(
                "n_tasks",
                format!("{} tasks but the hypernetwork has {n_tasks} task embeddings", tasks.len()),
            ));
        }
        if let Some(t) = tasks.iter().find(|t| t.val.is_empty()) {
            return Err(Error::config("tasks", format!("task {} has no validation examples", t.name)));
        }
        let sizes: Vec<usize> = tasks.iter().map(|t| t.train.len()).collect();
        let sampler = TaskSampler::new(&sizes, cfg.temperature, cfg.batch_size, cfg.seed)?;
        let adam = Adam::new(cfg.adam());
        Ok(Self { cfg, model, tasks, sampler, adam, step: 0, records: Vec::new(), out_dir: None, best_state: None })
    }

    /// Writes checkpoints under `dir`; the frozen host is written once.
    pub fn with_output(mut self, dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(dir.join(CHECKPOINT_DIR)).map_err(|e| Error::io(&dir, e))?;
        let host_dir = dir.join(HOST_DIR);
        if !host_dir.join("host.safetensors").exists() {
            atomic_dir(&host_dir, 0, |tmp| self.model.host().save(tmp))?;
        }
        let layout = RunLayout {
            trainer: self.cfg.clone(),
            tasks: self.tasks.iter().map(|t| t.name.clone()).collect(),
            plan: self.model.plan().clone(),
            policy: self.model.policy(),
        };
        write_atomic(&dir.join(CONFIG_FILE), serde_json::to_string_pretty(&layout)?.as_bytes(), 0)?;
        self.out_dir = Some(dir);
        Ok(self)
    }

    pub fn config(&self) -> &TrainerConfig {
        &self.cfg
    }

    pub fn model(&self) -> &InstrumentedModel<T> {
        &self.model
    }

    pub fn model_mut(&mut self) -> &mut InstrumentedModel<T> {
        &mut self.model
    }

    pub fn into_model(self) -> InstrumentedModel<T> {
        self.model
    }

    /// The model with the trainable tensors of the best checkpoint seen in
    /// this session (the current ones when none was recorded).
    pub fn into_best_model(mut self) -> Result<InstrumentedModel<T>> {
        if let Some((hn, ln)) = self.best_state.take() {
            let (host, hypernet) = self.model.param_stores_mut();
            hypernet.update_from(&hn)?;
            host.update_from(&ln)?;
        }
        Ok(self.model)
    }

    pub fn tasks(&self) -> &[TaskData] {
        &self.tasks
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn records(&self) -> &[CheckpointRecord] {
        &self.records
    }

    pub fn sampler(&self) -> &TaskSampler {
        &self.sampler
    }

    /// Index of the task embedding used for `task`. A hypernetwork with a
    /// single task embedding shares it across all tasks.
    pub fn routed_index(&self, task: usize) -> usize {
        if self.model.hypernet().config().n_tasks == 1 {
            0
        } else {
            task
        }
    }

    /// One update on `batch` for `task`, returning the weighted loss.
    pub fn train_step(&mut self, task: usize, batch: &Seq2SeqBatch) -> Result<f64> {
        let name = &self.tasks[task].name;
        let weight = self.cfg.weight(name);
        self.model.set_task(self.routed_index(task))?;
        let tape = Tape::new();
        let (host, hn) = self.model.bind(&tape, true);
        let loss = self.model.loss(&host, &hn, batch, T::of(weight))?;
        let value = loss.value().data()[0].as_f64();
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss { step: self.step, task, batch_hash: batch_hash(batch) });
        }
        if weight > 0.0 {
            let mut grads = tape.backward(loss);
            let mut all = host.collect_grads(&mut grads);
            all.extend(hn.collect_grads(&mut grads));
            drop((host, hn));
            let (h, n) = self.model.param_stores_mut();
            self.adam.step(&mut [h, n], &all)?;
        }
        Ok(value)
    }

    /// Draws a batch from the sampler and trains on it.
    pub fn next_step(&mut self) -> Result<StepOutcome> {
        let (task, idx) = self.sampler.next_batch();
        let batch = make_batch(&self.tasks[task].train, &idx);
        let loss = self.train_step(task, &batch)?;
        self.step += 1;
        Ok(StepOutcome { step: self.step, task, loss })
    }

    /// Token-averaged validation cross-entropy per task (unweighted).
    pub fn validation_losses(&mut self) -> Result<BTreeMap<String, f64>> {
        let mut out = BTreeMap::new();
        let prev = self.model.task();
        for t in 0..self.tasks.len() {
            self.model.set_task(self.routed_index(t))?;
            let val = &self.tasks[t].val;
            let (mut total, mut tokens) = (0.0, 0usize);
            for chunk in (0..val.len()).collect::<Vec<_>>().chunks(self.cfg.eval_batch_size) {
                let batch = make_batch(val, chunk);
                let tape = Tape::new();
                let (host, hn) = self.model.bind(&tape, false);
                let loss = self.model.loss(&host, &hn, &batch, T::one())?;
                let n = batch.token_count();
                total += loss.value().data()[0].as_f64() * n as f64;
                tokens += n;
            }
            out.insert(self.tasks[t].name.clone(), total / tokens.max(1) as f64);
        }
        self.model.set_task(prev)?;
        Ok(out)
    }

    /// Evaluates, records and (with an output directory) saves the current state.
    pub fn checkpoint(&mut self) -> Result<CheckpointRecord> {
        let val_loss = self.validation_losses()?;
        let mean_val_loss = val_loss.values().sum::<f64>() / val_loss.len() as f64;
        let mut record = CheckpointRecord { step: self.step, val_loss, mean_val_loss, path: None };
        if let Some(out) = self.out_dir.clone() {
            let dir = checkpoint_dir(&out, self.step);
            let state = TrainerState {
                step: self.step,
                adam: self.cfg.adam(),
                adam_step: self.adam.steps_taken(),
                sampler: self.sampler.clone(),
            };
            let step = self.step;
            atomic_dir(&dir, step, |tmp| {
                self.model.hypernet().save(tmp)?;
                self.model.host_trainable_params().save(&tmp.join("host_ln.safetensors"))?;
                self.adam.state_tensors().save(&tmp.join("optimizer.safetensors"))?;
                let json = serde_json::to_string(&state)?;
                fs::write(tmp.join("trainer_state.json"), json).map_err(|e| Error::io(tmp, e))
            })?;
            record.path = Some(dir);
            let mut line = serde_json::to_string(&record)?;
            line.push('\n');
            let path = out.join(RECORDS_FILE);
            let mut f = fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(&path)
                .map_err(|e| Error::Checkpoint { step, message: format!("{}: {e}", path.display()) })?;
            f.write_all(line.as_bytes())
                .map_err(|e| Error::Checkpoint { step, message: format!("{}: {e}", path.display()) })?;
        }
        self.records.push(record.clone());
        if self.best().map(|b| b.step) == Some(record.step) {
            let state = (self.model.hypernet().params().clone(), self.model.host_trainable_params());
            self.best_state = Some(state);
        }
        Ok(record)
    }

    /// Trains up to `total_steps`, checkpointing every `checkpoint_every`
    /// steps and at the end; returns the best record.
    pub fn fit(&mut self) -> Result<CheckpointRecord> {
        self.fit_with(|_| {})
    }

    pub fn fit_with(&mut self, mut on_step: impl FnMut(&StepOutcome)) -> Result<CheckpointRecord> {
        while self.step < self.cfg.total_steps {
            let outcome = self.next_step()?;
            on_step(&outcome);
            if self.step % self.cfg.checkpoint_every == 0 || self.step == self.cfg.total_steps {
                let r = self.checkpoint()?;
                log::info!("step {} mean validation loss {:.4}", r.step, r.mean_val_loss);
            }
        }
        self.best().cloned().ok_or_else(|| Error::Checkpoint {
            step: self.step,
            message: "no checkpoint with a finite validation loss".into(),
        })
    }

    pub fn best(&self) -> Option<&CheckpointRecord> {
        select_best(&self.records)
    }

    /// Reloads a run from `out` at `step` (latest when `None`).
    pub fn resume(out: &Path, step: Option<u64>, tasks: Vec<TaskData>) -> Result<Self> {
        let layout: RunLayout = read_json(&out.join(CONFIG_FILE))?;
        let names: Vec<&str> = tasks.iter().map(|t| t.name.as_str()).collect();
        if names != layout.tasks.iter().map(String::as_str).collect::<Vec<_>>() {
            return Err(Error::config("tasks", "resumed with a different task list"));
        }
        let records = read_records(&out.join(RECORDS_FILE))?;
        let step = match step {
            Some(s) => s,
            None => records.iter().map(|r| r.step).max().ok_or_else(|| Error::Checkpoint {
                step: 0,
                message: "no checkpoints to resume from".into(),
            })?,
        };
        let dir = checkpoint_dir(out, step);
        let host = ToyHost::<T>::load(&out.join(HOST_DIR))?;
        let model = load_checkpoint_model(host, &dir, layout.plan.clone(), layout.policy)?;
        let state: TrainerState = read_json(&dir.join("trainer_state.json"))?;
        let opt = ParamStore::<T>::load(&dir.join("optimizer.safetensors"))?;
        let mut trainer = Self::new(layout.trainer, model, tasks)?;
        trainer.adam = Adam::restore(state.adam, state.adam_step, &opt);
        trainer.sampler = state.sampler;
        trainer.step = state.step;
        trainer.records = records.into_iter().filter(|r| r.step <= step).collect();
        trainer.out_dir = Some(out.to_path_buf());
        // keep the on-disk log consistent with the resumed history
        let mut text = String::new();
        for r in &trainer.records {
            text.push_str(&serde_json::to_string(r)?);
            text.push('\n');
        }
        write_atomic(&out.join(RECORDS_FILE), text.as_bytes(), step)?;
        Ok(trainer)
    }
}

/// Rebuilds an instrumented model from a frozen host and a checkpoint directory.
pub fn load_checkpoint_model<T: Scalar>(
    mut host: ToyHost<T>,
    dir: &Path,
    plan: InsertionPlan,
    policy: FreezePolicy,
) -> Result<InstrumentedModel<T>> {
    let hypernet = HyperNet::<T>::load(dir)?;
    let ln = ParamStore::<T>::load(&dir.join("host_ln.safetensors"))?;
    host.params_mut().update_from(&ln)?;
    instrument_host(host, hypernet, plan, policy)
}

pub fn read_records(path: &Path) -> Result<Vec<CheckpointRecord>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse { path: path.to_path_buf(), line: i + 1, message: e.to_string() })
        })
        .collect()
}

fn read_json<D: serde::de::DeserializeOwned>(path: &Path) -> Result<D> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn write_atomic(path: &Path, bytes: &[u8], step: u64) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let fail = |e: std::io::Error| Error::Checkpoint { step, message: format!("{}: {e}", path.display()) };
    fs::write(&tmp, bytes).map_err(fail)?;
    fs::rename(&tmp, path).map_err(fail)
}

/// Fills a temporary sibling directory, then renames it into place.
fn atomic_dir(dir: &Path, step: u64, fill: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    let tmp = dir.with_extension("partial");
    let fail = |e: std::io::Error| Error::Checkpoint { step, message: format!("{}: {e}", dir.display()) };
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(fail)?;
    }
    fs::create_dir_all(&tmp).map_err(fail)?;
    fill(&tmp).map_err(|e| match e {
        e @ Error::Checkpoint { .. } => e,
        other => Error::Checkpoint { step, message: other.to_string() },
    })?;
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(fail)?;
    }
    fs::rename(&tmp, dir).map_err(fail)
}
