//! The prepare / train / eval pipeline behind the subcommands.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use hyperpeft::codec::{Sentinels, TaggedSequence};
use hyperpeft::corpus::{build_split, corpus_stats, load_task, to_conll, CorpusSplit, SplitManifest, TaskDescriptor};
use hyperpeft::eval::{evaluate_model, EvalReport, GoldReplay, ModelPredictor};
use hyperpeft::host::{pretrain_copy, ToyHost, ToyHostConfig, Vocab};
use hyperpeft::hypernet::HyperNet;
use hyperpeft::peft::{instrument_host, FreezePolicy, InsertionPlan};
use hyperpeft::trainer::{
    encode_sequences, load_checkpoint_model, read_records, select_best, CheckpointRecord, TaskData, Trainer, HOST_DIR,
    RECORDS_FILE,
};
use hyperpeft::{Error, Result, Scalar};
use serde::{Deserialize, Serialize};

use crate::config::{Precision, RunConfig};

pub const RUN_DIR: &str = "run";
pub const RESOLVED_CONFIG: &str = "run_config.json";
pub const VOCAB_FILE: &str = "vocab.json";
pub const TASKS_FILE: &str = "tasks.json";
pub const BEST_FILE: &str = "best.json";

pub fn data_dir(out: &Path, fraction: f64, seed: u64) -> PathBuf {
    out.join("data").join(format!("fraction-{fraction}")).join(format!("seed-{seed}"))
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Splits of every configured task at one fraction, in task-index order.
pub fn load_splits(cfg: &RunConfig, fraction: f64) -> Result<Vec<(CorpusSplit, SplitManifest)>> {
    cfg.check_files()?;
    let mut out = Vec::new();
    for source in &cfg.tasks {
        let raw = load_task(source)?;
        for w in &raw.warnings {
            log::warn!("{}: line {}: {}", source.name, w.line, w.message);
        }
        out.push(build_split(&raw, fraction, cfg.seed)?);
    }
    Ok(out)
}

/// Writes splits and manifests for each fraction; returns the task directories.
pub fn prepare(cfg: &RunConfig, fractions: &[f64]) -> Result<Vec<PathBuf>> {
    cfg.check_files()?;
    let mut written = Vec::new();
    for &fraction in fractions {
        let dir = data_dir(cfg.output_dir(), fraction, cfg.seed);
        let loaded = load_splits(cfg, fraction)?;
        for ((split, manifest), source) in loaded.iter().zip(&cfg.tasks) {
            let task_dir = dir.join(&split.task);
            write(&task_dir.join("manifest.json"), serde_json::to_string_pretty(manifest)?)?;
            write(&task_dir.join("train.conll"), to_conll(&split.train))?;
            write(&task_dir.join("val.conll"), to_conll(&split.val))?;
            let ext = source.test.extension().and_then(|e| e.to_str()).unwrap_or("conll");
            let test_copy = task_dir.join(format!("test.{ext}"));
            fs::copy(&source.test, &test_copy).map_err(|e| Error::io(&source.test, e))?;
            written.push(task_dir);
        }
        let splits: BTreeMap<String, CorpusSplit> = loaded.into_iter().map(|(s, _)| (s.task.clone(), s)).collect();
        write(&dir.join(TASKS_FILE), serde_json::to_string_pretty(&corpus_stats(&splits))?)?;
    }
    Ok(written)
}

/// Vocabulary over training and validation tokens plus every training label.
pub fn build_vocab(splits: &[CorpusSplit], n_sentinels: usize) -> Vocab {
    let mut tokens: BTreeSet<String> = ["O".to_string(), "I".to_string()].into();
    for s in splits {
        for seq in s.train.iter().chain(&s.val) {
            tokens.extend(seq.tokens.iter().cloned());
            tokens.extend(seq.labels.iter().map(|l| l.as_str().to_string()));
        }
    }
    Vocab::build(n_sentinels, tokens)
}

fn longest(splits: &[CorpusSplit]) -> usize {
    splits
        .iter()
        .flat_map(|s| s.train.iter().chain(&s.val).chain(&s.test))
        .map(TaggedSequence::len)
        .max()
        .unwrap_or(1)
}

/// Summary of a finished training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSummary {
    pub best: CheckpointRecord,
    pub run_dir: PathBuf,
    pub trainable_parameters: usize,
    pub trainable_names: Vec<String>,
}

pub fn train(cfg: &RunConfig, resume: bool) -> Result<TrainSummary> {
    match cfg.precision {
        Precision::F32 => train_with::<f32>(cfg, resume),
        Precision::F64 => train_with::<f64>(cfg, resume),
    }
}

fn train_with<T: Scalar>(cfg: &RunConfig, resume: bool) -> Result<TrainSummary> {
    let out = cfg.output_dir().to_path_buf();
    prepare(cfg, &[cfg.fraction])?;
    let splits: Vec<CorpusSplit> = load_splits(cfg, cfg.fraction)?.into_iter().map(|(s, _)| s).collect();
    let run = out.join(RUN_DIR);
    fs::create_dir_all(&run).map_err(|e| Error::io(&run, e))?;
    write(&out.join(RESOLVED_CONFIG), serde_json::to_string_pretty(cfg)?)?;

    let max_len = cfg.host.max_len.unwrap_or_else(|| longest(&splits));
    let vocab = build_vocab(&splits, max_len + 1);
    vocab.save(&run.join(VOCAB_FILE))?;
    let stats: Vec<TaskDescriptor> =
        corpus_stats(&splits.iter().map(|s| (s.task.clone(), s.clone())).collect::<BTreeMap<_, _>>());
    write(&run.join(TASKS_FILE), serde_json::to_string_pretty(&stats)?)?;

    let tasks: Vec<TaskData> = splits
        .iter()
        .map(|s| {
            Ok(TaskData {
                name: s.task.clone(),
                train: encode_sequences(&s.train, &vocab)?,
                val: encode_sequences(&s.val, &vocab)?,
            })
        })
        .collect::<Result<_>>()?;

    let mut trainer = if resume && run.join(RECORDS_FILE).exists() {
        Trainer::<T>::resume(&run, None, tasks)?
    } else {
        let host_cfg = ToyHostConfig {
            hidden_size: cfg.host.hidden_size,
            n_encoder_layers: cfg.host.n_encoder_layers,
            n_decoder_layers: cfg.host.n_decoder_layers,
            n_heads: cfg.host.n_heads,
            ff_width: cfg.host.ff_width,
            tie_embeddings: cfg.host.tie_embeddings,
            ..ToyHostConfig::new(vocab.len(), max_len, vocab.n_sentinels())
        };
        let mut host = ToyHost::<T>::new(host_cfg, cfg.seed)?;
        if cfg.pretrain.steps > 0 {
            let losses = pretrain_copy(&mut host, &vocab, &cfg.pretrain)?;
            log::info!("copy pretraining final loss {:.4}", losses.last().copied().unwrap_or(f64::NAN));
        }
        let hypernet = HyperNet::<T>::new(cfg.hypernet_config(splits.len()), cfg.seed)?;
        let plan = InsertionPlan::standard(
            cfg.host.n_encoder_layers,
            cfg.host.n_decoder_layers,
            cfg.enable_adapters,
            cfg.enable_lora,
        );
        let model = instrument_host(host, hypernet, plan, FreezePolicy::default())?;
        write(&run.join("site_manifest.json"), model.manifest().to_json()?)?;
        Trainer::new(cfg.trainer.clone(), model, tasks)?.with_output(&run)?
    };
    let best = trainer.fit_with(|o| {
        if o.step % 100 == 0 {
            log::info!("step {} task {} loss {:.4}", o.step, o.task, o.loss);
        }
    })?;
    write(&run.join(BEST_FILE), serde_json::to_string_pretty(&best)?)?;
    let model = trainer.model();
    let names: Vec<String> = model.trainable_names().into_iter().collect();
    let trainable_parameters = names
        .iter()
        .map(|n| model.hypernet().params().get(n).or_else(|| model.host().params().get(n)).map_or(0, |t| t.numel()))
        .sum();
    Ok(TrainSummary { best, run_dir: run, trainable_parameters, trainable_names: names })
}

/// Which checkpoint to evaluate.
#[derive(Debug, Clone, Copy)]
pub enum Which {
    Best,
    Step(u64),
}

pub fn evaluate(cfg: &RunConfig, which: Which, replay_gold: bool) -> Result<EvalReport> {
    match cfg.precision {
        Precision::F32 => evaluate_with::<f32>(cfg, which, replay_gold),
        Precision::F64 => evaluate_with::<f64>(cfg, which, replay_gold),
    }
}

fn evaluate_with<T: Scalar>(cfg: &RunConfig, which: Which, replay_gold: bool) -> Result<EvalReport> {
    let splits: Vec<CorpusSplit> = load_splits(cfg, cfg.fraction)?.into_iter().map(|(s, _)| s).collect();
    let out = cfg.output_dir();
    let rows = if replay_gold {
        let sentinels = Sentinels::t5(longest(&splits) + 1);
        let mut rows = Vec::new();
        for (i, s) in splits.iter().enumerate() {
            let mut oracle = GoldReplay::new(&s.test, &sentinels)?;
            rows.push(evaluate_model(&mut oracle, &s.task, i, &s.test, &sentinels, Some(&s.label_set()))?);
        }
        rows
    } else {
        let run = out.join(RUN_DIR);
        let vocab = Vocab::load(&run.join(VOCAB_FILE))?;
        let records = read_records(&run.join(RECORDS_FILE))?;
        let record = match which {
            Which::Best => select_best(&records).cloned(),
            Which::Step(s) => records.iter().find(|r| r.step == s).cloned(),
        }
        .ok_or_else(|| Error::Checkpoint { step: 0, message: format!("no usable checkpoint in {}", run.display()) })?;
        let dir = record.path.clone().ok_or_else(|| Error::Checkpoint {
            step: record.step,
            message: "record has no checkpoint directory".into(),
        })?;
        let host = ToyHost::<T>::load(&run.join(HOST_DIR))?;
        let plan = InsertionPlan::standard(
            host.config().n_encoder_layers,
            host.config().n_decoder_layers,
            cfg.enable_adapters,
            cfg.enable_lora,
        );
        let mut model = load_checkpoint_model(host, &dir, plan, FreezePolicy::default())?;
        let sentinels = vocab.sentinels();
        let mut rows = Vec::new();
        for (i, s) in splits.iter().enumerate() {
            let labels = s.label_set();
            let mut predictor =
                ModelPredictor { model: &mut model, vocab: &vocab, batch_size: cfg.trainer.eval_batch_size };
            rows.push(evaluate_model(&mut predictor, &s.task, i, &s.test, &sentinels, Some(&labels))?);
        }
        rows
    };
    let name = if replay_gold { "gold-replay" } else { cfg.model_name() };
    let report = EvalReport::new(name, rows);
    let eval_dir = out.join("eval");
    write(&eval_dir.join("report.json"), report.to_json()?)?;
    write(&eval_dir.join("report.txt"), report.to_table())?;
    Ok(report)
}
