//! The ten acceptance criteria, each reported as one PASS/FAIL line.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use clap::Parser;
use hyperpeft::codec::{decode_output, encode_input, encode_output, Sentinels, Tag, TaggedSequence};
use hyperpeft::corpus::{fraction_count, make_validation_split, to_conll, SplitManifest};
use hyperpeft::eval::{average_f1, evaluate_model, micro_f1, ModelPredictor};
use hyperpeft::host::{is_layer_norm_param, pretrain_copy, CopyPretrainConfig, Seq2SeqBatch, ToyHost, ToyHostConfig, Vocab};
use hyperpeft::hypernet::{
    trainable_parameter_count, AdapterVars, ConditioningInput, HyperNet, HypernetConfig, LoraPairVars, PositionId,
    LAYER_EMBEDDING, POSITION_EMBEDDING, PROJECTOR_HIDDEN_BIAS, PROJECTOR_HIDDEN_WEIGHT, PROJECTOR_OUT_BIAS,
    PROJECTOR_OUT_WEIGHT, TASK_EMBEDDING,
};
use hyperpeft::peft::{
    adapter_forward, conditional_layer_norm, instrument_host, lora_linear_forward, FreezePolicy, InsertionPlan,
    InstrumentedModel,
};
use hyperpeft::synthetic::{generate, two_task_pair, SyntheticSpec};
use hyperpeft::trainer::{encode_sequences, sampling_probs, TaskData, TaskSampler, Trainer, TrainerConfig};
use hyperpeft::Tensor;
use hyperpeft_cli::pipeline::data_dir;
use hyperpeft_cli::{execute, Cli};
use hyperpeft_tensor::{ParamStore, Tape, Var};
use num_bigint::BigUint;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within(start: Instant, limit: Duration) -> Result<(), String> {
    ensure(start.elapsed() < limit, format!("took {:?}, limit {limit:?}", start.elapsed()))
}

fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn c1_codec() -> Outcome {
    let start = Instant::now();
    let s = Sentinels::default();
    let tokens = ["play", "the", "song", "little", "robin", "redbreast"];
    let tags: Vec<Tag> = ["O", "O", "MUSIC_ITEM", "TRACK", "I", "I"].iter().map(|t| t.parse().unwrap()).collect();
    let input = encode_input(&tokens, &s).map_err(|e| e.to_string())?;
    let output = encode_output(&tags, &s).map_err(|e| e.to_string())?;
    ensure(
        input
            == "<extra_id_0> play <extra_id_1> the <extra_id_2> song <extra_id_3> little <extra_id_4> robin <extra_id_5> redbreast <extra_id_6>",
        format!("input {input:?}"),
    )?;
    ensure(
        output
            == "<extra_id_0> O <extra_id_1> O <extra_id_2> MUSIC_ITEM <extra_id_3> TRACK <extra_id_4> I <extra_id_5> I <extra_id_6>",
        format!("output {output:?}"),
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let alphabet = ["PER", "LOC", "ORG", "MUSIC_ITEM", "B-X", "time.start"];
    for k in 0..10_000 {
        let len = rng.gen_range(1..=99);
        let tags: Vec<Tag> = (0..len)
            .map(|_| match rng.gen_range(0..4) {
                0 => Tag::Outside,
                1 => Tag::Inside,
                _ => Tag::Type(alphabet.choose(&mut rng).unwrap().to_string()),
            })
            .collect();
        let words: Vec<String> = (0..len).map(|i| format!("w{}{}", rng.gen_range(0..50), ["", ",", "'s"][i % 3])).collect();
        let text = encode_output(&tags, &s).map_err(|e| e.to_string())?;
        ensure(decode_output(&text, len) == tags, format!("tag round trip failed on example {k}"))?;
        let framed = encode_input(&words, &s).map_err(|e| e.to_string())?;
        let back: Vec<&str> = framed.split(' ').skip(1).step_by(2).collect();
        ensure(back == words.iter().map(String::as_str).collect::<Vec<_>>(), format!("input round trip failed on {k}"))?;
    }
    within(start, Duration::from_secs(10))?;
    Ok(format!("reference example strings exact, 10000 round trips in {:?}", start.elapsed()))
}

fn c2_lora_identity() -> Outcome {
    let mut hn = HyperNet::<f32>::new(HypernetConfig::new(64, 2, 2, 2), 3).map_err(|e| e.to_string())?;
    hn.zero_delta_heads();
    let mut worst = 0.0f32;
    for (task, layer, pos) in [(0, 0, PositionId::LoraASelfAttn), (1, 3, PositionId::LoraACrossAttn)] {
        let c = ConditioningInput::new(task, layer, pos);
        let hyperpeft::hypernet::GeneratedParams::Lora(l) = hn.generate(&c).map_err(|e| e.to_string())? else {
            return Err("expected LoRA parameters".into());
        };
        for pair in [&l.query, &l.value] {
            let tape = Tape::<f32>::new();
            let x = tape.constant(rand_tensor(&[5, 64], 1).cast());
            let w0 = tape.constant(rand_tensor(&[64, 64], 2).cast());
            let p = LoraPairVars { a: tape.constant(pair.a.clone()), b: tape.constant(pair.b.clone()) };
            let out = lora_linear_forward(&x, &w0, &p).map_err(|e| e.to_string())?;
            worst = worst.max(out.value().max_abs_diff(&x.matmul(&w0, true).value()));
        }
    }
    ensure(worst < 1e-6, format!("max abs diff {worst}"))?;
    Ok(format!("max abs diff {worst:e}"))
}

fn fd_check<F>(inputs: Vec<Tensor<f64>>, f: F) -> f64
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Var<'t, f64>,
{
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.var(t.clone(), true)).collect();
    let grads = tape.backward(f(&tape, &vars));
    let eval = |ins: &[Tensor<f64>]| {
        let tape = Tape::new();
        let vars: Vec<_> = ins.iter().map(|t| tape.var(t.clone(), false)).collect();
        f(&tape, &vars).value().data()[0]
    };
    let mut worst = 0.0f64;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[i]).cloned().unwrap_or_else(|| Tensor::zeros(input.shape()));
        for j in 0..input.numel() {
            let (mut plus, mut minus) = (inputs.clone(), inputs.clone());
            plus[i].data_mut()[j] += 1e-6;
            minus[i].data_mut()[j] -= 1e-6;
            let numeric = (eval(&plus) - eval(&minus)) / 2e-6;
            let a = analytic.data()[j];
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3));
        }
    }
    worst
}

fn project<'t>(tape: &'t Tape<f64>, x: Var<'t, f64>, seed: u64) -> Var<'t, f64> {
    x.mul(&tape.constant(rand_tensor(&x.shape(), seed))).sum_all()
}

fn c3_gradients() -> Outcome {
    let start = Instant::now();
    let h = 16;
    let ln = fd_check(vec![rand_tensor(&[3, h], 1), rand_tensor(&[h], 2), rand_tensor(&[h], 3)], |t, v| {
        project(t, conditional_layer_norm(&v[0], &v[1], &v[2]).unwrap(), 4)
    });
    let adapter = fd_check(
        vec![rand_tensor(&[2, 3, h], 5), rand_tensor(&[4, h], 6), rand_tensor(&[h, 4], 7), rand_tensor(&[h], 8), rand_tensor(&[h], 9)],
        |t, v| project(t, adapter_forward(&v[0], &AdapterVars { down: v[1], up: v[2], gamma: v[3], beta: v[4] }).unwrap(), 10),
    );
    let lora = fd_check(
        vec![rand_tensor(&[4, h], 11), rand_tensor(&[h, h], 12), rand_tensor(&[2, h], 13), rand_tensor(&[h, 2], 14)],
        |t, v| project(t, lora_linear_forward(&v[0], &v[1], &LoraPairVars { a: v[2], b: v[3] }).unwrap(), 15),
    );
    let cond = conditioning_check()?;
    let worst = ln.max(adapter).max(lora).max(cond);
    ensure(worst < 1e-4, format!("ln {ln:e} adapter {adapter:e} lora {lora:e} conditioning {cond:e}"))?;
    within(start, Duration::from_secs(60))?;
    Ok(format!("worst relative error {worst:.2e} in {:?}", start.elapsed()))
}

/// Perturbs every conditioning-path entry of a small hypernetwork.
fn conditioning_check() -> Result<f64, String> {
    let cfg = HypernetConfig { d_task: 6, d_layer_pos: 4, d_cond: 5, d_proj_hidden: 7, reduction_factor: 4, ..HypernetConfig::new(16, 3, 1, 1) };
    let mut hn = HyperNet::<f64>::new(cfg, 4).map_err(|e| e.to_string())?;
    let inputs = [
        ConditioningInput::new(0, 0, PositionId::AdapterAfterSelfAttn),
        ConditioningInput::new(2, 1, PositionId::LoraBCrossAttn),
    ];
    let loss = |hn: &HyperNet<f64>| {
        let tape = Tape::new();
        let vars = hn.params().bind(&tape, |_| true);
        let c = hn.condition_batch(&vars, &inputs).unwrap();
        let out = project(&tape, c.scale(100.0), 16);
        let value = out.value().data()[0];
        let mut g = tape.backward(out);
        (value, vars.collect_grads(&mut g))
    };
    let (_, grads) = loss(&hn);
    let names = [TASK_EMBEDDING, LAYER_EMBEDDING, POSITION_EMBEDDING, PROJECTOR_HIDDEN_WEIGHT, PROJECTOR_HIDDEN_BIAS, PROJECTOR_OUT_WEIGHT, PROJECTOR_OUT_BIAS];
    let mut worst = 0.0f64;
    for name in names {
        let g = grads.get(name).cloned().ok_or(format!("no gradient for {name}"))?;
        for j in 0..g.numel() {
            let orig = hn.params().get(name).unwrap().data()[j];
            hn.params_mut().get_mut(name).unwrap().data_mut()[j] = orig + 1e-6;
            let plus = loss(&hn).0;
            hn.params_mut().get_mut(name).unwrap().data_mut()[j] = orig - 1e-6;
            let minus = loss(&hn).0;
            hn.params_mut().get_mut(name).unwrap().data_mut()[j] = orig;
            let numeric = (plus - minus) / 2e-6;
            let a = g.data()[j];
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3));
        }
    }
    Ok(worst)
}

fn toy_vocab(spec: &SyntheticSpec) -> Vocab {
    let mut toks = spec.words();
    toks.extend(["O".to_string(), "I".to_string()]);
    for t in two_task_pair(spec.n_classes) {
        toks.extend(t.labels);
    }
    Vocab::build(spec.max_len + 1, toks)
}

fn task_data(vocab: &Vocab, data: &[Vec<TaggedSequence>]) -> Vec<TaskData> {
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

fn hashes(store: &ParamStore<f32>) -> BTreeMap<String, String> {
    store.iter().map(|(n, t)| (n.to_string(), t.content_hash())).collect()
}

fn c4_freeze() -> Outcome {
    let start = Instant::now();
    let spec = SyntheticSpec::default();
    let vocab = toy_vocab(&spec);
    let data = generate(&spec, &two_task_pair(3), 400, 5).unwrap();
    let host = ToyHost::<f32>::new(ToyHostConfig::new(vocab.len(), spec.max_len, vocab.n_sentinels()), 1).unwrap();
    let hn = HyperNet::<f32>::new(HypernetConfig::new(64, 2, 2, 2), 2).unwrap();
    let model = instrument_host(host, hn, InsertionPlan::standard(2, 2, true, true), FreezePolicy::default())
        .map_err(|e| e.to_string())?;
    let host_before = hashes(model.host().params());
    let hn_before = hashes(model.hypernet().params());
    let cfg = TrainerConfig { total_steps: 100, checkpoint_every: 100, ..Default::default() };
    let mut tr = Trainer::new(cfg, model, task_data(&vocab, &data)).map_err(|e| e.to_string())?;
    tr.fit().map_err(|e| e.to_string())?;
    let host_after = hashes(tr.model().host().params());
    let hn_after = hashes(tr.model().hypernet().params());
    let (mut frozen, mut ln) = (0, 0);
    for (name, h) in &host_before {
        if is_layer_norm_param(name) {
            ensure(h != &host_after[name], format!("host layer norm {name} unchanged"))?;
            ln += 1;
        } else {
            ensure(h == &host_after[name], format!("frozen {name} changed"))?;
            frozen += 1;
        }
    }
    for (name, h) in &hn_before {
        ensure(h != &hn_after[name], format!("hypernetwork tensor {name} unchanged"))?;
    }
    within(start, Duration::from_secs(120))?;
    Ok(format!("{frozen} frozen tensors bit-identical, {ln} host LN and {} hypernetwork tensors moved", hn_before.len()))
}

const CORPUS_TRAIN_SIZES: [usize; 7] = [4478, 13084, 7034, 8797, 6894, 15667, 30521];

fn bigint_probs(sizes: &[usize], temperature: u32) -> Vec<f64> {
    let scale = BigUint::from(10u32).pow(40);
    let total = BigUint::from(sizes.iter().sum::<usize>());
    let roots: Vec<BigUint> =
        sizes.iter().map(|&n| (BigUint::from(n) * scale.pow(temperature) / &total).nth_root(temperature)).collect();
    let z: BigUint = roots.iter().sum();
    let unit = BigUint::from(10u32).pow(30);
    roots.iter().map(|r| (r * &unit / &z).to_string().parse::<f64>().unwrap() / 1e30).collect()
}

fn c5_sampler() -> Outcome {
    let oracle = bigint_probs(&CORPUS_TRAIN_SIZES, 10);
    let mut s = TaskSampler::new(&CORPUS_TRAIN_SIZES, 10.0, 1, 11).map_err(|e| e.to_string())?;
    let mut counts = [0usize; 7];
    for _ in 0..100_000 {
        counts[s.draw_task()] += 1;
    }
    let dev = counts.iter().zip(&oracle).map(|(c, q)| (*c as f64 / 1e5 - q).abs()).fold(0.0, f64::max);
    ensure(dev < 0.01, format!("max deviation {dev}"))?;
    let q1 = sampling_probs(&CORPUS_TRAIN_SIZES, 1.0).map_err(|e| e.to_string())?;
    let total: usize = CORPUS_TRAIN_SIZES.iter().sum();
    ensure(
        q1.iter().zip(CORPUS_TRAIN_SIZES).all(|(q, n)| *q == n as f64 / total as f64),
        "T=1 is not proportional",
    )?;
    Ok(format!("max |freq - q| = {dev:.4}; T=1 proportional"))
}

fn c6_budget() -> Outcome {
    let cfg = HypernetConfig::new(768, 7, 12, 12);
    let budget = trainable_parameter_count(&cfg);
    let mut host = ToyHostConfig::new(32, 16, 17);
    host.hidden_size = 768;
    host.n_encoder_layers = 12;
    host.n_decoder_layers = 12;
    host.n_heads = 12;
    host.ff_width = 3072;
    let walk: usize = cfg.tensor_shapes().values().map(|s| s.iter().product::<usize>()).sum::<usize>()
        + host
            .tensor_shapes()
            .iter()
            .filter(|(n, _)| is_layer_norm_param(n))
            .map(|(_, s)| s.iter().product::<usize>())
            .sum::<usize>();
    ensure(budget.total == walk, format!("closed form {} vs walk {walk}", budget.total))?;
    ensure((5_000_000..=7_000_000).contains(&budget.total), format!("{} outside [5M, 7M]", budget.total))?;
    Ok(format!("{} trainable parameters, equal to tensor walk", budget.total))
}

fn eval_tasks(model: &mut InstrumentedModel<f32>, vocab: &Vocab, test: &[Vec<TaggedSequence>], shared: bool) -> Vec<f64> {
    let sentinels = vocab.sentinels();
    two_task_pair(3)
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let labels: BTreeSet<String> = t.labels.iter().cloned().collect();
            let mut p = ModelPredictor { model, vocab, batch_size: 64 };
            let idx = if shared { 0 } else { i };
            evaluate_model(&mut p, &t.name, idx, &test[i], &sentinels, Some(&labels)).unwrap().f1
        })
        .collect()
}

fn c7_learnability() -> Outcome {
    let start = Instant::now();
    let spec = SyntheticSpec::default();
    let vocab = toy_vocab(&spec);
    let tasks = two_task_pair(spec.n_classes);
    let data = generate(&spec, &tasks, 2000, 1).unwrap();
    let test = generate(&spec, &tasks, 300, 2).unwrap();
    let mut host = ToyHost::<f32>::new(ToyHostConfig::new(vocab.len(), spec.max_len, vocab.n_sentinels()), 0).unwrap();
    pretrain_copy(&mut host, &vocab, &CopyPretrainConfig { steps: 300, ..Default::default() }).map_err(|e| e.to_string())?;

    let run = |n_tasks: usize| -> Result<(Vec<f64>, u64), String> {
        let hn_cfg = HypernetConfig { reduction_factor: 8, ..HypernetConfig::new(64, n_tasks, 2, 2) };
        let hn = HyperNet::<f32>::new(hn_cfg, 1).map_err(|e| e.to_string())?;
        let model = instrument_host(host.clone(), hn, InsertionPlan::standard(2, 2, true, true), FreezePolicy::default())
            .map_err(|e| e.to_string())?;
        let cfg = TrainerConfig { learning_rate: 1e-3, total_steps: 600, checkpoint_every: 100, ..Default::default() };
        let mut tr = Trainer::new(cfg, model, task_data(&vocab, &data)).map_err(|e| e.to_string())?;
        let best = tr.fit().map_err(|e| e.to_string())?;
        let mut model = tr.into_best_model().map_err(|e| e.to_string())?;
        Ok((eval_tasks(&mut model, &vocab, &test, n_tasks == 1), best.step))
    };
    let (full, best_step) = run(2)?;
    let (shared, _) = run(1)?;
    ensure(full.iter().all(|f| *f >= 0.95), format!("conditioned F1 {full:?}"))?;
    let drop = full.iter().zip(&shared).map(|(a, b)| a - b).fold(f64::MIN, f64::max);
    ensure(drop >= 0.1, format!("shared index F1 {shared:?} vs {full:?}"))?;
    within(start, Duration::from_secs(900))?;
    Ok(format!(
        "F1 {:.3}/{:.3} (best step {best_step} of 600); shared task index {:.3}/{:.3}; {:?}",
        full[0],
        full[1],
        shared[0],
        shared[1],
        start.elapsed()
    ))
}

fn brute_counts(pred: &[Tag], gold: &[Tag]) -> (usize, usize, usize) {
    let spans = |t: &[Tag]| {
        let mut out = Vec::new();
        let mut i = 0;
        while i < t.len() {
            if let Tag::Type(l) = &t[i] {
                let mut j = i + 1;
                while j < t.len() && t[j] == Tag::Inside {
                    j += 1;
                }
                out.push((i, j, l.clone()));
                i = j;
            } else {
                i += 1;
            }
        }
        out
    };
    let (p, g) = (spans(pred), spans(gold));
    (p.iter().filter(|s| g.contains(s)).count(), p.len(), g.len())
}

fn c8_metric() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let pick = |rng: &mut ChaCha8Rng| match rng.gen_range(0..4) {
        0 => Tag::Outside,
        1 => Tag::Inside,
        2 => Tag::Type("A".into()),
        _ => Tag::Type("B".into()),
    };
    for k in 0..200 {
        let n = rng.gen_range(1..5);
        let mut preds = Vec::new();
        let mut golds = Vec::new();
        for _ in 0..n {
            let len = rng.gen_range(1..8);
            preds.push((0..len).map(|_| pick(&mut rng)).collect::<Vec<_>>());
            golds.push((0..len).map(|_| pick(&mut rng)).collect::<Vec<_>>());
        }
        let (c, p, g) = preds.iter().zip(&golds).fold((0, 0, 0), |acc, (a, b)| {
            let x = brute_counts(a, b);
            (acc.0 + x.0, acc.1 + x.1, acc.2 + x.2)
        });
        let want = if p == 0 && g == 0 {
            1.0
        } else if c == 0 {
            0.0
        } else {
            let (pr, rc) = (c as f64 / p as f64, c as f64 / g as f64);
            2.0 * pr * rc / (pr + rc)
        };
        let got = micro_f1(&preds, &golds).map_err(|e| e.to_string())?.f1;
        ensure(got == want, format!("instance {k}: {got} vs {want}"))?;
    }
    let gold = vec![vec![Tag::Type("PER".into()), Tag::Outside, Tag::Type("LOC".into())]];
    let pred = vec![vec![Tag::Type("PER".into()), Tag::Type("ORG".into()), Tag::Outside]];
    let prf = micro_f1(&pred, &gold).map_err(|e| e.to_string())?;
    ensure((prf.precision, prf.recall, prf.f1) == (0.5, 0.5, 0.5), format!("fixture {prf:?}"))?;
    let avg = average_f1(&[0.7140, 0.8745, 0.7965, 0.9599, 0.9592, 0.8983, 0.9652]);
    ensure(format!("{avg:.4}") == "0.8811", format!("average {avg}"))?;
    Ok(format!("200 instances exact, fixture (0.5, 0.5, 0.5), average {avg:.4}"))
}

fn cli(args: &[&str]) -> Result<(), String> {
    let parsed = Cli::try_parse_from(std::iter::once("hyperpeft").chain(args.iter().copied())).map_err(|e| e.to_string())?;
    execute(parsed, &mut Vec::new()).map_err(|e| e.to_string())
}

fn snapshot(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().display().to_string(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn c9_low_resource() -> Outcome {
    let dir = TempDir::new().map_err(|e| e.to_string())?;
    let spec = SyntheticSpec::default();
    let tasks = two_task_pair(spec.n_classes);
    let train = generate(&spec, &tasks, 777, 1).unwrap();
    let val = generate(&spec, &tasks, 95, 3).unwrap();
    let test = generate(&spec, &tasks, 131, 2).unwrap();
    let p = |n: &str| dir.path().join(n);
    fs::write(p("alpha.train.conll"), to_conll(&train[0])).unwrap();
    fs::write(p("alpha.test.conll"), to_conll(&test[0])).unwrap();
    fs::write(p("beta.train.conll"), to_conll(&train[1])).unwrap();
    fs::write(p("beta.val.conll"), to_conll(&val[1])).unwrap();
    fs::write(p("beta.test.conll"), format!("{}\n\n", to_conll(&test[1]))).unwrap();
    let cfg = r#"{"output_dir": "out", "seed": 13, "tasks": [
        {"name": "alpha", "train": "alpha.train.conll", "test": "alpha.test.conll"},
        {"name": "beta", "train": "beta.train.conll", "val": "beta.val.conll", "test": "beta.test.conll"}]}"#;
    fs::write(p("run.json"), cfg).unwrap();
    let config = p("run.json");
    let out = p("out");
    let args = ["prepare", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()];
    cli(&args)?;
    let first = snapshot(&out);
    cli(&args)?;
    ensure(first == snapshot(&out), "rerun changed prepared files")?;
    let base = [("alpha", 777 - fraction_count(0.1, 777), fraction_count(0.1, 777)), ("beta", 777, 95)];
    let mut summary = Vec::new();
    for fraction in [0.1, 0.2] {
        for (task, n_train, n_val) in base {
            let d = data_dir(&out, fraction, 13).join(task);
            let m: SplitManifest =
                serde_json::from_slice(&fs::read(d.join("manifest.json")).unwrap()).map_err(|e| e.to_string())?;
            ensure(m.train_indices.len() == fraction_count(fraction, n_train), format!("{task}@{fraction} train size"))?;
            ensure(m.val_indices.len() == fraction_count(fraction, n_val), format!("{task}@{fraction} val size"))?;
            let written = fs::read_to_string(d.join("train.conll")).unwrap();
            ensure(written.split("\n\n").filter(|b| !b.trim().is_empty()).count() == m.train_indices.len(), "train file size")?;
            let raw_test = fs::read(p(&format!("{task}.test.conll"))).unwrap();
            let copied = fs::read(d.join("test.conll")).map_err(|e| e.to_string())?;
            ensure(copied == raw_test, format!("{task}@{fraction} test not byte-identical"))?;
            summary.push(format!("{task}@{fraction}={}", m.train_indices.len()));
        }
    }
    Ok(format!("train sizes {}; tests byte-identical; reruns identical", summary.join(" ")))
}

fn c10_baseline() -> Outcome {
    let spec = SyntheticSpec::default();
    let vocab = toy_vocab(&spec);
    let host = ToyHost::<f32>::new(ToyHostConfig::new(vocab.len(), spec.max_len, vocab.n_sentinels()), 9).unwrap();
    let mut hn = HyperNet::<f32>::new(HypernetConfig::new(64, 2, 2, 2), 10).unwrap();
    hn.zero_delta_heads();
    let mut model = instrument_host(host.clone(), hn, InsertionPlan::standard(2, 2, true, true), FreezePolicy::default())
        .map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let ids: Vec<usize> = vocab.content_ids().collect();
    let mut worst = 0.0f32;
    for _ in 0..5 {
        let pairs: Vec<(Vec<usize>, Vec<usize>)> = (0..4)
            .map(|_| {
                let a = rng.gen_range(1..12);
                let b = rng.gen_range(1..12);
                ((0..a).map(|_| *ids.choose(&mut rng).unwrap()).collect(), (0..b).map(|_| *ids.choose(&mut rng).unwrap()).collect())
            })
            .collect();
        let batch = Seq2SeqBatch::new(&pairs);
        let plain = host.logits(&batch).map_err(|e| e.to_string())?;
        for task in 0..2 {
            model.set_task(task).map_err(|e| e.to_string())?;
            worst = worst.max(model.logits(&batch).map_err(|e| e.to_string())?.max_abs_diff(&plain));
        }
    }
    ensure(worst < 1e-5, format!("max abs logit diff {worst}"))?;
    Ok(format!("max abs logit diff {worst:e}"))
}

/// Bypasses libtest's capture so the lines show up in ordinary runs.
fn report(line: &str) {
    let mut out = std::io::stdout().lock();
    writeln!(out, "{line}").and_then(|_| out.flush()).expect("stdout is writable");
}

#[test]
fn acceptance() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("1 codec fidelity", c1_codec),
        ("2 LoRA identity", c2_lora_identity),
        ("3 gradient correctness", c3_gradients),
        ("4 freeze policy", c4_freeze),
        ("5 sampler law", c5_sampler),
        ("6 parameter budget", c6_budget),
        ("7 end-to-end learnability", c7_learnability),
        ("8 metric oracle", c8_metric),
        ("9 low-resource protocol", c9_low_resource),
        ("10 baseline equivalence", c10_baseline),
    ];
    let mut failed = Vec::new();
    for (name, f) in criteria {
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        match outcome {
            Ok(detail) => report(&format!("PASS criterion {name}: {detail}")),
            Err(why) => {
                report(&format!("FAIL criterion {name}: {why}"));
                failed.push(name);
            }
        }
    }
    assert!(failed.is_empty(), "failed: {failed:?}");
}
