//! A small pre-LN encoder-decoder transformer used as the frozen host.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::rc::Rc;

use hyperpeft_tensor::{Adam, AdamConfig, AttnMask, Bound, ParamStore, Scalar, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::Sentinels;
use crate::error::{Error, Result};
use crate::peft::{adapter_forward, lora_linear_forward, SiteWeights, LN_EPS};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
const SPECIAL: [&str; 4] = ["<pad>", "<s>", "</s>", "<unk>"];

/// Word-level vocabulary: specials, then the sentinel block, then everything else.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: BTreeMap<String, usize>,
    n_sentinels: usize,
}

impl Vocab {
    pub fn build<I, S>(n_sentinels: usize, tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let sentinels = Sentinels::t5(n_sentinels);
        let mut list: Vec<String> = SPECIAL.iter().map(|s| s.to_string()).collect();
        list.extend(sentinels.names().iter().cloned());
        let mut seen: BTreeSet<String> = list.iter().cloned().collect();
        let mut rest: Vec<String> = Vec::new();
        for t in tokens {
            let t = t.as_ref();
            if seen.insert(t.to_string()) {
                rest.push(t.to_string());
            }
        }
        rest.sort();
        list.extend(rest);
        let index = list.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens: list, index, n_sentinels }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn n_sentinels(&self) -> usize {
        self.n_sentinels
    }

    pub fn sentinels(&self) -> Sentinels {
        Sentinels::t5(self.n_sentinels)
    }

    pub fn sentinel_id(&self, i: usize) -> usize {
        SPECIAL.len() + i
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map(String::as_str).unwrap_or(SPECIAL[UNK])
    }

    /// Ids of ordinary tokens (neither special nor sentinel).
    pub fn content_ids(&self) -> std::ops::Range<usize> {
        SPECIAL.len() + self.n_sentinels..self.tokens.len()
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        text.split_whitespace().map(|t| self.id(t)).collect()
    }

    /// Joins tokens with single spaces, dropping padding and the begin/end markers.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| i != PAD && i != BOS && i != EOS)
            .map(|&i| self.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn to_json(&self) -> Result<String> {
        let map: BTreeMap<&str, usize> = self.index.iter().map(|(k, v)| (k.as_str(), *v)).collect();
        Ok(serde_json::to_string_pretty(&map)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let map: BTreeMap<String, usize> = serde_json::from_str(text)?;
        let mut tokens = vec![String::new(); map.len()];
        for (t, &i) in &map {
            if i >= tokens.len() || !tokens[i].is_empty() {
                return Err(Error::InvalidInput(format!("vocabulary ids are not a permutation (token {t:?} -> {i})")));
            }
            tokens[i] = t.clone();
        }
        for (i, s) in SPECIAL.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*s) {
                return Err(Error::InvalidInput(format!("vocabulary id {i} must be {s}")));
            }
        }
        let n_sentinels = tokens[SPECIAL.len()..]
            .iter()
            .enumerate()
            .take_while(|(i, t)| **t == format!("<extra_id_{i}>"))
            .count();
        Ok(Self { index: map, tokens, n_sentinels })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyHostConfig {
    pub vocab_size: usize,
    pub hidden_size: usize,
    pub n_encoder_layers: usize,
    pub n_decoder_layers: usize,
    pub n_heads: usize,
    pub ff_width: usize,
    /// Longest labelled sequence, in words.
    pub max_len: usize,
    pub n_sentinels: usize,
    #[serde(default = "tied_default")]
    pub tie_embeddings: bool,
}

fn tied_default() -> bool {
    true
}

impl ToyHostConfig {
    pub fn new(vocab_size: usize, max_len: usize, n_sentinels: usize) -> Self {
        Self {
            vocab_size,
            hidden_size: 64,
            n_encoder_layers: 2,
            n_decoder_layers: 2,
            n_heads: 4,
            ff_width: 256,
            max_len,
            n_sentinels,
            tie_embeddings: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("hidden_size", self.hidden_size),
            ("n_heads", self.n_heads),
            ("ff_width", self.ff_width),
            ("max_len", self.max_len),
        ] {
            if v == 0 {
                return Err(Error::config(field, "must be >= 1"));
            }
        }
        if self.n_encoder_layers + self.n_decoder_layers == 0 || self.n_decoder_layers == 0 {
            return Err(Error::config("n_decoder_layers", "need at least one decoder block"));
        }
        if self.hidden_size % self.n_heads != 0 {
            return Err(Error::config(
                "n_heads",
                format!("hidden size {} is not divisible by {} heads", self.hidden_size, self.n_heads),
            ));
        }
        if self.n_sentinels < self.max_len + 1 {
            return Err(Error::config(
                "n_sentinels",
                format!("{} sentinels cannot frame sequences of {} words", self.n_sentinels, self.max_len),
            ));
        }
        if self.vocab_size < SPECIAL.len() + self.n_sentinels {
            return Err(Error::config("vocab_size", "smaller than the reserved special and sentinel block"));
        }
        Ok(())
    }

    /// Longest token sequence either stack sees: the framed text plus one marker.
    pub fn max_positions(&self) -> usize {
        2 * self.max_len + 2
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_size / self.n_heads
    }

    /// Every parameter name and shape.
    pub fn tensor_shapes(&self) -> BTreeMap<String, Vec<usize>> {
        let h = self.hidden_size;
        let mut s = BTreeMap::new();
        s.insert(EMBEDDING.to_string(), vec![self.vocab_size, h]);
        if !self.tie_embeddings {
            s.insert(LM_HEAD.to_string(), vec![self.vocab_size, h]);
        }
        for stack in ["encoder", "decoder"] {
            s.insert(format!("{stack}.position_embedding"), vec![self.max_positions(), h]);
            s.insert(format!("{stack}.final_ln/gamma"), vec![h]);
            s.insert(format!("{stack}.final_ln/beta"), vec![h]);
        }
        for b in self.blocks() {
            for attn in b.attention_modules() {
                for p in ["q", "k", "v", "o"] {
                    s.insert(format!("{attn}.{p}/weight"), vec![h, h]);
                }
            }
            for ln in b.layer_norms() {
                s.insert(format!("{ln}/gamma"), vec![h]);
                s.insert(format!("{ln}/beta"), vec![h]);
            }
            s.insert(format!("{}.wi/weight", b.ffn()), vec![self.ff_width, h]);
            s.insert(format!("{}.wo/weight", b.ffn()), vec![h, self.ff_width]);
        }
        s
    }

    pub fn blocks(&self) -> Vec<BlockNames> {
        let enc = (0..self.n_encoder_layers).map(|i| BlockNames { prefix: format!("encoder.block.{i}"), decoder: false });
        let dec = (0..self.n_decoder_layers).map(|i| BlockNames { prefix: format!("decoder.block.{i}"), decoder: true });
        enc.chain(dec).collect()
    }
}

/// Closed-form parameter count.
pub fn parameter_count(cfg: &ToyHostConfig) -> usize {
    let (h, v, f) = (cfg.hidden_size, cfg.vocab_size, cfg.ff_width);
    let embeddings = v * h * if cfg.tie_embeddings { 1 } else { 2 } + 2 * cfg.max_positions() * h;
    let enc_block = 4 * h * h + 2 * h * f + 2 * 2 * h;
    let dec_block = 8 * h * h + 2 * h * f + 3 * 2 * h;
    embeddings + cfg.n_encoder_layers * enc_block + cfg.n_decoder_layers * dec_block + 2 * 2 * h
}

pub const EMBEDDING: &str = "shared.embedding";
pub const LM_HEAD: &str = "lm_head/weight";

/// Module names of one block.
#[derive(Debug, Clone)]
pub struct BlockNames {
    pub prefix: String,
    pub decoder: bool,
}

impl BlockNames {
    pub fn self_attn(&self) -> String {
        format!("{}.self_attn", self.prefix)
    }
    pub fn cross_attn(&self) -> String {
        format!("{}.cross_attn", self.prefix)
    }
    pub fn ffn(&self) -> String {
        format!("{}.ffn", self.prefix)
    }
    pub fn attention_modules(&self) -> Vec<String> {
        if self.decoder {
            vec![self.self_attn(), self.cross_attn()]
        } else {
            vec![self.self_attn()]
        }
    }
    pub fn layer_norms(&self) -> Vec<String> {
        let mut v = vec![format!("{}_ln", self.self_attn())];
        if self.decoder {
            v.push(format!("{}_ln", self.cross_attn()));
        }
        v.push(format!("{}_ln", self.ffn()));
        v
    }
}

/// Whether a host parameter belongs to a layer norm.
pub fn is_layer_norm_param(name: &str) -> bool {
    name.ends_with("/gamma") || name.ends_with("/beta")
}

/// Padded source/target ids for one batch. Every sequence gets a trailing end
/// marker; decoder inputs are shifted right behind a begin marker.
#[derive(Debug, Clone, PartialEq)]
pub struct Seq2SeqBatch {
    pub batch: usize,
    pub src_len: usize,
    pub tgt_len: usize,
    pub src: Vec<usize>,
    pub src_valid: Vec<bool>,
    pub tgt_in: Vec<usize>,
    pub tgt_valid: Vec<bool>,
    pub labels: Vec<Option<usize>>,
}

impl Seq2SeqBatch {
    pub fn new(pairs: &[(Vec<usize>, Vec<usize>)]) -> Self {
        let batch = pairs.len();
        let src_len = pairs.iter().map(|(s, _)| s.len() + 1).max().unwrap_or(1);
        let tgt_len = pairs.iter().map(|(_, t)| t.len() + 1).max().unwrap_or(1);
        let mut out = Self {
            batch,
            src_len,
            tgt_len,
            src: vec![PAD; batch * src_len],
            src_valid: vec![false; batch * src_len],
            tgt_in: vec![PAD; batch * tgt_len],
            tgt_valid: vec![false; batch * tgt_len],
            labels: vec![None; batch * tgt_len],
        };
        for (b, (s, t)) in pairs.iter().enumerate() {
            for (i, &id) in s.iter().chain(std::iter::once(&EOS)).enumerate() {
                out.src[b * src_len + i] = id;
                out.src_valid[b * src_len + i] = true;
            }
            for (i, &id) in std::iter::once(&BOS).chain(t.iter()).enumerate() {
                out.tgt_in[b * tgt_len + i] = id;
                out.tgt_valid[b * tgt_len + i] = true;
            }
            for (i, &id) in t.iter().chain(std::iter::once(&EOS)).enumerate() {
                out.labels[b * tgt_len + i] = Some(id);
            }
        }
        out
    }

    pub fn token_count(&self) -> usize {
        self.labels.iter().filter(|l| l.is_some()).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyHost<T> {
    cfg: ToyHostConfig,
    params: ParamStore<T>,
    instrumented: bool,
}

impl<T: Scalar> ToyHost<T> {
    pub fn new(cfg: ToyHostConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for (name, shape) in cfg.tensor_shapes() {
            let t = if name.ends_with("/gamma") {
                Tensor::ones(&shape)
            } else if name.ends_with("/beta") {
                Tensor::zeros(&shape)
            } else if name == EMBEDDING || name == LM_HEAD || name.ends_with("position_embedding") {
                Tensor::randn(&shape, 1.0, &mut rng)
            } else {
                let fan_in = shape[1] as f64;
                Tensor::randn(&shape, fan_in.powf(-0.5), &mut rng)
            };
            params.insert(name, t);
        }
        Ok(Self { cfg, params, instrumented: false })
    }

    pub fn from_params(cfg: ToyHostConfig, params: ParamStore<T>) -> Result<Self> {
        cfg.validate()?;
        let shapes = cfg.tensor_shapes();
        for (name, shape) in &shapes {
            match params.get(name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => return Err(Error::Contract(format!("{name} has shape {:?}, expected {shape:?}", t.shape()))),
                None => return Err(Error::Tensor(hyperpeft_tensor::TensorError::MissingTensor(name.clone()))),
            }
        }
        if params.len() != shapes.len() {
            return Err(Error::Contract("host checkpoint has unexpected tensors".into()));
        }
        Ok(Self { cfg, params, instrumented: false })
    }

    pub fn config(&self) -> &ToyHostConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn is_instrumented(&self) -> bool {
        self.instrumented
    }

    pub(crate) fn mark_instrumented(&mut self) {
        self.instrumented = true;
    }

    pub(crate) fn clear_instrumented(&mut self) {
        self.instrumented = false;
    }

    /// Names of every addressable submodule.
    pub fn module_names(&self) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        for b in self.cfg.blocks() {
            for attn in b.attention_modules() {
                for p in ["q", "k", "v", "o"] {
                    out.insert(format!("{attn}.{p}"));
                }
                out.insert(attn);
            }
            out.extend(b.layer_norms());
            out.insert(format!("{}.wi", b.ffn()));
            out.insert(format!("{}.wo", b.ffn()));
            out.insert(b.ffn());
            out.insert(b.prefix.clone());
        }
        out.insert("encoder.final_ln".into());
        out.insert("decoder.final_ln".into());
        out
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.params.save(&dir.join("host.safetensors"))?;
        let cfg = serde_json::to_string_pretty(&self.cfg)?;
        std::fs::write(dir.join("host_config.json"), cfg).map_err(|e| Error::io(dir, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("host_config.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let cfg: ToyHostConfig = serde_json::from_str(&text)?;
        Self::from_params(cfg, ParamStore::load(&dir.join("host.safetensors"))?)
    }

    fn check_batch(&self, batch: &Seq2SeqBatch) -> Result<()> {
        let cap = self.cfg.max_positions();
        if batch.src_len > cap || batch.tgt_len > cap {
            return Err(Error::InvalidInput(format!(
                "sequence of {} tokens exceeds the host's {cap} positions",
                batch.src_len.max(batch.tgt_len)
            )));
        }
        let v = self.cfg.vocab_size;
        if let Some(&bad) = batch.src.iter().chain(&batch.tgt_in).find(|&&i| i >= v) {
            return Err(Error::Index { what: "token", index: bad, bound: v });
        }
        Ok(())
    }

    fn layer_norm<'t>(&self, vars: &Bound<'t, T>, name: &str, x: &Var<'t, T>) -> Var<'t, T> {
        x.layer_norm(&vars.get(&format!("{name}/gamma")), &vars.get(&format!("{name}/beta")), T::of(LN_EPS))
    }

    fn project<'t>(
        &self,
        vars: &Bound<'t, T>,
        sites: Option<&SiteWeights<'t, T>>,
        module: &str,
        x: &Var<'t, T>,
    ) -> Var<'t, T> {
        let w0 = vars.get(&format!("{module}/weight"));
        match sites.and_then(|s| s.lora(module)) {
            Some(l) => lora_linear_forward(x, &w0, l).expect("generated LoRA shapes follow the host config"),
            None => x.matmul(&w0, true),
        }
    }

    fn adapt<'t>(&self, sites: Option<&SiteWeights<'t, T>>, module: &str, y: Var<'t, T>) -> Var<'t, T> {
        match sites.and_then(|s| s.adapter(module)) {
            Some(a) => adapter_forward(&y, a).expect("generated adapter shapes follow the host config"),
            None => y,
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention<'t>(
        &self,
        vars: &Bound<'t, T>,
        sites: Option<&SiteWeights<'t, T>>,
        module: &str,
        xq: &Var<'t, T>,
        xkv: &Var<'t, T>,
        batch: usize,
        q_len: usize,
        k_len: usize,
        mask: Rc<AttnMask>,
    ) -> Var<'t, T> {
        let heads = self.cfg.n_heads;
        let scale = T::of((self.cfg.head_dim() as f64).powf(-0.5));
        let q = self.project(vars, sites, &format!("{module}.q"), xq).split_heads(batch, q_len, heads).scale(scale);
        let k = self.project(vars, sites, &format!("{module}.k"), xkv).split_heads(batch, k_len, heads);
        let v = self.project(vars, sites, &format!("{module}.v"), xkv).split_heads(batch, k_len, heads);
        let ctx = q.bmm(&k, true).masked_softmax(mask).bmm(&v, false).merge_heads(batch, q_len, heads);
        self.project(vars, sites, &format!("{module}.o"), &ctx)
    }

    fn ffn<'t>(&self, vars: &Bound<'t, T>, sites: Option<&SiteWeights<'t, T>>, module: &str, x: &Var<'t, T>) -> Var<'t, T> {
        let hidden = self.project(vars, sites, &format!("{module}.wi"), x).gelu();
        self.project(vars, sites, &format!("{module}.wo"), &hidden)
    }

    fn embed<'t>(&self, vars: &Bound<'t, T>, stack: &str, ids: &[usize], batch: usize, len: usize) -> Var<'t, T> {
        let positions: Vec<usize> = (0..batch).flat_map(|_| 0..len).collect();
        let tok = vars.get(EMBEDDING).gather(ids);
        tok.add(&vars.get(&format!("{stack}.position_embedding")).gather(&positions))
    }

    /// Encoder output `[batch * src_len, h]`.
    pub fn encode<'t>(
        &self,
        vars: &Bound<'t, T>,
        sites: Option<&SiteWeights<'t, T>>,
        src: &[usize],
        src_valid: &[bool],
        batch: usize,
        src_len: usize,
    ) -> Var<'t, T> {
        let mask = Rc::new(AttnMask {
            batch,
            heads: self.cfg.n_heads,
            q_len: src_len,
            k_len: src_len,
            key_valid: src_valid.to_vec(),
            causal: false,
        });
        let mut x = self.embed(vars, "encoder", src, batch, src_len);
        for b in self.cfg.blocks().iter().filter(|b| !b.decoder) {
            let sa = b.self_attn();
            let normed = self.layer_norm(vars, &format!("{sa}_ln"), &x);
            let a = self.attention(vars, sites, &sa, &normed, &normed, batch, src_len, src_len, mask.clone());
            x = x.add(&self.adapt(sites, &sa, a));
            let ff = b.ffn();
            let normed = self.layer_norm(vars, &format!("{ff}_ln"), &x);
            let f = self.ffn(vars, sites, &ff, &normed);
            x = x.add(&self.adapt(sites, &ff, f));
        }
        self.layer_norm(vars, "encoder.final_ln", &x)
    }

    /// Decoder logits `[batch * tgt_len, vocab]`.
    #[allow(clippy::too_many_arguments)]
    pub fn decode<'t>(
        &self,
        vars: &Bound<'t, T>,
        sites: Option<&SiteWeights<'t, T>>,
        memory: &Var<'t, T>,
        src_valid: &[bool],
        src_len: usize,
        tgt_in: &[usize],
        tgt_valid: &[bool],
        batch: usize,
        tgt_len: usize,
    ) -> Var<'t, T> {
        let heads = self.cfg.n_heads;
        let self_mask = Rc::new(AttnMask {
            batch,
            heads,
            q_len: tgt_len,
            k_len: tgt_len,
            key_valid: tgt_valid.to_vec(),
            causal: true,
        });
        let cross_mask = Rc::new(AttnMask {
            batch,
            heads,
            q_len: tgt_len,
            k_len: src_len,
            key_valid: src_valid.to_vec(),
            causal: false,
        });
        let mut y = self.embed(vars, "decoder", tgt_in, batch, tgt_len);
        for b in self.cfg.blocks().iter().filter(|b| b.decoder) {
            let sa = b.self_attn();
            let normed = self.layer_norm(vars, &format!("{sa}_ln"), &y);
            let a = self.attention(vars, sites, &sa, &normed, &normed, batch, tgt_len, tgt_len, self_mask.clone());
            y = y.add(&self.adapt(sites, &sa, a));
            let ca = b.cross_attn();
            let normed = self.layer_norm(vars, &format!("{ca}_ln"), &y);
            let c = self.attention(vars, sites, &ca, &normed, memory, batch, tgt_len, src_len, cross_mask.clone());
            y = y.add(&self.adapt(sites, &ca, c));
            let ff = b.ffn();
            let normed = self.layer_norm(vars, &format!("{ff}_ln"), &y);
            let f = self.ffn(vars, sites, &ff, &normed);
            y = y.add(&self.adapt(sites, &ff, f));
        }
        let y = self.layer_norm(vars, "decoder.final_ln", &y);
        let out = if self.cfg.tie_embeddings { EMBEDDING } else { LM_HEAD };
        y.matmul(&vars.get(out), true).scale(T::of((self.cfg.hidden_size as f64).powf(-0.5)))
    }

    /// Teacher-forced logits `[batch * tgt_len, vocab]`.
    pub fn forward<'t>(
        &self,
        vars: &Bound<'t, T>,
        sites: Option<&SiteWeights<'t, T>>,
        batch: &Seq2SeqBatch,
    ) -> Result<Var<'t, T>> {
        self.check_batch(batch)?;
        let memory = self.encode(vars, sites, &batch.src, &batch.src_valid, batch.batch, batch.src_len);
        Ok(self.decode(
            vars,
            sites,
            &memory,
            &batch.src_valid,
            batch.src_len,
            &batch.tgt_in,
            &batch.tgt_valid,
            batch.batch,
            batch.tgt_len,
        ))
    }

    /// Mean token cross-entropy over non-padding targets, times `scale`.
    pub fn loss<'t>(
        &self,
        vars: &Bound<'t, T>,
        sites: Option<&SiteWeights<'t, T>>,
        batch: &Seq2SeqBatch,
        scale: T,
    ) -> Result<Var<'t, T>> {
        Ok(self.forward(vars, sites, batch)?.cross_entropy(&batch.labels, scale))
    }

    /// Plain host logits with every parameter frozen.
    pub fn logits(&self, batch: &Seq2SeqBatch) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let vars = self.params.bind(&tape, |_| false);
        Ok((*self.forward(&vars, None, batch)?.value()).clone())
    }

    /// Argmax decoding of every source until the end marker or `max_len` tokens.
    pub fn greedy_decode(&self, sources: &[Vec<usize>], max_len: usize) -> Result<Vec<Vec<usize>>> {
        let tape = Tape::new();
        let vars = self.params.bind(&tape, |_| false);
        self.greedy_decode_with(&vars, None, sources, max_len)
    }

    /// Batched greedy decoding without a key/value cache.
    pub fn greedy_decode_with<'t>(
        &self,
        vars: &Bound<'t, T>,
        sites: Option<&SiteWeights<'t, T>>,
        sources: &[Vec<usize>],
        max_len: usize,
    ) -> Result<Vec<Vec<usize>>> {
        let n = sources.len();
        if n == 0 || max_len == 0 {
            return Ok(vec![Vec::new(); n]);
        }
        let max_len = max_len.min(self.cfg.max_positions() - 1);
        let probe = Seq2SeqBatch::new(&sources.iter().map(|s| (s.clone(), Vec::new())).collect::<Vec<_>>());
        self.check_batch(&probe)?;
        let memory = self.encode(vars, sites, &probe.src, &probe.src_valid, n, probe.src_len);
        let memory = vars_constant(&memory);
        let mut outputs: Vec<Vec<usize>> = vec![Vec::new(); n];
        let mut done = vec![false; n];
        let v = self.cfg.vocab_size;
        for step in 0..max_len {
            let len = step + 1;
            let mut tgt_in = vec![PAD; n * len];
            for (b, out) in outputs.iter().enumerate() {
                tgt_in[b * len] = BOS;
                for (i, &id) in out.iter().enumerate() {
                    tgt_in[b * len + 1 + i] = id;
                }
            }
            let valid = vec![true; n * len];
            let logits =
                self.decode(vars, sites, &memory, &probe.src_valid, probe.src_len, &tgt_in, &valid, n, len).value();
            for b in 0..n {
                if done[b] {
                    continue;
                }
                let row = &logits.data()[(b * len + step) * v..(b * len + step + 1) * v];
                let mut best = 0;
                for j in 1..v {
                    if row[j] > row[best] {
                        best = j;
                    }
                }
                if best == EOS {
                    done[b] = true;
                } else {
                    outputs[b].push(best);
                }
            }
            if done.iter().all(|&d| d) {
                break;
            }
            // Finished rows keep receiving padding ids past their end; causal
            // masking keeps that from touching earlier positions.
            for b in 0..n {
                if done[b] && outputs[b].len() < len {
                    outputs[b].push(PAD);
                }
            }
        }
        for (out, d) in outputs.iter_mut().zip(&done) {
            if *d {
                while out.last() == Some(&PAD) {
                    out.pop();
                }
            }
        }
        Ok(outputs)
    }
}

fn vars_constant<'t, T: Scalar>(v: &Var<'t, T>) -> Var<'t, T> {
    v.tape().constant((*v.value()).clone())
}

/// Settings for teaching a fresh host to reproduce framed token sequences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CopyPretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub min_len: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for CopyPretrainConfig {
    fn default() -> Self {
        Self {
            steps: 1500,
            batch_size: 32,
            min_len: 1,
            adam: AdamConfig { lr: 2e-3, ..AdamConfig::default() },
            seed: 0,
        }
    }
}

/// A framed copy example: `s_0 w_1 s_1 .. w_L s_L` on both sides.
pub fn copy_example<R: Rng + ?Sized>(vocab: &Vocab, len: usize, rng: &mut R) -> Vec<usize> {
    let content = vocab.content_ids();
    let mut ids = Vec::with_capacity(2 * len + 1);
    for i in 0..len {
        ids.push(vocab.sentinel_id(i));
        ids.push(rng.gen_range(content.clone()));
    }
    ids.push(vocab.sentinel_id(len));
    ids
}

/// Trains every host parameter on the copy task; returns the per-step losses.
pub fn pretrain_copy<T: Scalar>(host: &mut ToyHost<T>, vocab: &Vocab, cfg: &CopyPretrainConfig) -> Result<Vec<f64>> {
    if vocab.len() != host.cfg.vocab_size {
        return Err(Error::Contract(format!(
            "vocabulary has {} tokens, host expects {}",
            vocab.len(),
            host.cfg.vocab_size
        )));
    }
    if vocab.content_ids().is_empty() {
        return Err(Error::InvalidInput("vocabulary has no content tokens to copy".into()));
    }
    let max_len = host.cfg.max_len;
    let min_len = cfg.min_len.clamp(1, max_len);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(cfg.adam);
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut lengths: Vec<usize> = (min_len..=max_len).collect();
    for step in 0..cfg.steps {
        lengths.shuffle(&mut rng);
        let pairs: Vec<(Vec<usize>, Vec<usize>)> = (0..cfg.batch_size)
            .map(|i| {
                let ex = copy_example(vocab, lengths[i % lengths.len()], &mut rng);
                (ex.clone(), ex)
            })
            .collect();
        let batch = Seq2SeqBatch::new(&pairs);
        let tape = Tape::new();
        let vars = host.params.bind(&tape, |_| true);
        let loss = host.loss(&vars, None, &batch, T::one())?;
        let value = loss.value().data()[0].as_f64();
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss { step: step as u64, task: 0, batch_hash: "copy".into() });
        }
        losses.push(value);
        let mut grads = tape.backward(loss);
        let grads = vars.collect_grads(&mut grads);
        adam.step(&mut [&mut host.params], &grads)?;
    }
    Ok(losses)
}
