#![allow(dead_code)]

use hyperpeft::codec::TaggedSequence;
use hyperpeft::corpus::make_validation_split;
use hyperpeft::host::{ToyHost, ToyHostConfig, Vocab};
use hyperpeft::hypernet::{HyperNet, HypernetConfig};
use hyperpeft::peft::{instrument_host, FreezePolicy, InsertionPlan, InstrumentedModel};
use hyperpeft::synthetic::{generate, two_task_pair, SyntheticSpec};
use hyperpeft::trainer::{encode_sequences, TaskData};
use hyperpeft::Scalar;

pub struct Toy<T: Scalar> {
    pub vocab: Vocab,
    pub model: InstrumentedModel<T>,
    pub tasks: Vec<TaskData>,
    pub test: Vec<Vec<TaggedSequence>>,
}

pub fn vocab(spec: &SyntheticSpec) -> Vocab {
    let mut toks = spec.words();
    toks.extend(["O".to_string(), "I".to_string()]);
    for t in two_task_pair(spec.n_classes) {
        toks.extend(t.labels);
    }
    Vocab::build(spec.max_len + 1, toks)
}

pub fn host_config(vocab: &Vocab, spec: &SyntheticSpec, hidden: usize, layers: usize) -> ToyHostConfig {
    ToyHostConfig {
        hidden_size: hidden,
        n_encoder_layers: layers,
        n_decoder_layers: layers,
        n_heads: 2,
        ff_width: 2 * hidden,
        ..ToyHostConfig::new(vocab.len(), spec.max_len, vocab.n_sentinels())
    }
}

pub fn hypernet_config(hidden: usize, n_tasks: usize, layers: usize) -> HypernetConfig {
    HypernetConfig {
        d_task: 12,
        d_layer_pos: 6,
        d_cond: 8,
        d_proj_hidden: 8,
        reduction_factor: 4,
        lora_rank: 2,
        ..HypernetConfig::new(hidden, n_tasks, layers, layers)
    }
}

pub fn task_data(vocab: &Vocab, data: &[Vec<TaggedSequence>]) -> Vec<TaskData> {
    two_task_pair(3)
        .iter()
        .zip(data)
        .map(|(t, seqs)| {
            let (train, val, _) = make_validation_split(seqs, 0.1, 3).unwrap();
            TaskData {
                name: t.name.clone(),
                train: encode_sequences(&train, vocab).unwrap(),
                val: encode_sequences(&val, vocab).unwrap(),
            }
        })
        .collect()
}

/// A small two-task model over the synthetic copy-tagging data.
pub fn toy<T: Scalar>(n_examples: usize, hidden: usize, layers: usize, seed: u64) -> Toy<T> {
    let spec = SyntheticSpec::default();
    let vocab = vocab(&spec);
    let tasks_def = two_task_pair(spec.n_classes);
    let data = generate(&spec, &tasks_def, n_examples, seed).unwrap();
    let test = generate(&spec, &tasks_def, 20, seed + 100).unwrap();
    let host = ToyHost::<T>::new(host_config(&vocab, &spec, hidden, layers), seed).unwrap();
    let hn = HyperNet::<T>::new(hypernet_config(hidden, 2, layers), seed + 1).unwrap();
    let plan = InsertionPlan::standard(layers, layers, true, true);
    let model = instrument_host(host, hn, plan, FreezePolicy::default()).unwrap();
    let tasks = task_data(&vocab, &data);
    Toy { vocab, model, tasks, test }
}
