//! Generated adapters, conditional layer norm and LoRA, and the machinery that
//! splices them into a host.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use hyperpeft_tensor::{Bound, ParamStore, Scalar, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::host::{is_layer_norm_param, Seq2SeqBatch, ToyHost};
use crate::hypernet::{AdapterVars, ConditioningInput, HeadKind, HyperNet, LoraPairVars, PositionId};

pub const LN_EPS: f64 = 1e-6;

fn shape_error(what: &str, got: &[usize], want: &[usize]) -> Error {
    Error::Contract(format!("{what} has shape {got:?}, expected {want:?}"))
}

/// `gamma * (x - mean) / sqrt(var + eps) + beta` over the last axis.
pub fn conditional_layer_norm<'t, T: Scalar>(
    x: &Var<'t, T>,
    gamma: &Var<'t, T>,
    beta: &Var<'t, T>,
) -> Result<Var<'t, T>> {
    let h = *x.shape().last().unwrap_or(&0);
    for (what, v) in [("gamma", gamma), ("beta", beta)] {
        if v.shape() != [h] {
            return Err(shape_error(what, &v.shape(), &[h]));
        }
    }
    Ok(x.layer_norm(gamma, beta, T::of(LN_EPS)))
}

/// `x + LN(U gelu(D x))` with the generated layer norm.
pub fn adapter_forward<'t, T: Scalar>(x: &Var<'t, T>, p: &AdapterVars<'t, T>) -> Result<Var<'t, T>> {
    let h = *x.shape().last().unwrap_or(&0);
    let (down, up) = (p.down.shape(), p.up.shape());
    if down.len() != 2 || down[1] != h {
        return Err(shape_error("adapter down-projection", &down, &[down.first().copied().unwrap_or(0), h]));
    }
    if up != [h, down[0]] {
        return Err(shape_error("adapter up-projection", &up, &[h, down[0]]));
    }
    let branch = x.matmul(&p.down, true).gelu().matmul(&p.up, true);
    let branch = conditional_layer_norm(&branch, &p.gamma, &p.beta)?;
    Ok(x.add(&branch.reshape(&x.shape())))
}

/// `W0 x + B (A x)`; no scaling.
pub fn lora_linear_forward<'t, T: Scalar>(
    x: &Var<'t, T>,
    w0: &Var<'t, T>,
    p: &LoraPairVars<'t, T>,
) -> Result<Var<'t, T>> {
    let k = *x.shape().last().unwrap_or(&0);
    let w = w0.shape();
    if w.len() != 2 || w[1] != k {
        return Err(shape_error("frozen projection", &w, &[w.first().copied().unwrap_or(0), k]));
    }
    let (a, b) = (p.a.shape(), p.b.shape());
    if a.len() != 2 || a[1] != k {
        return Err(shape_error("LoRA A", &a, &[a.first().copied().unwrap_or(0), k]));
    }
    if b != [w[0], a[0]] {
        return Err(shape_error("LoRA B", &b, &[w[0], a[0]]));
    }
    let base = x.matmul(w0, true);
    Ok(base.add(&x.matmul(&p.a, true).matmul(&p.b, true)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SiteKind {
    /// Adapter applied to the output of the named sublayer, before its residual add.
    Adapter,
    LoraQuery,
    LoraValue,
}

/// One insertion site of a plan.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SiteEntry {
    pub kind: SiteKind,
    /// Host module the generated weights attach to.
    pub module: String,
    pub layer_index: usize,
    /// Adapter position, or the A-matrix position of a LoRA pair.
    pub position: PositionId,
}

impl SiteEntry {
    pub fn conditioning(&self, task_index: usize) -> ConditioningInput {
        ConditioningInput::new(task_index, self.layer_index, self.position)
    }

    /// Conditioning of the paired B matrix for LoRA sites.
    pub fn lora_b_conditioning(&self, task_index: usize) -> Option<ConditioningInput> {
        let position = match self.position {
            PositionId::LoraASelfAttn => PositionId::LoraBSelfAttn,
            PositionId::LoraACrossAttn => PositionId::LoraBCrossAttn,
            _ => return None,
        };
        Some(ConditioningInput::new(task_index, self.layer_index, position))
    }
}

/// Where generated modules go. Sites are keyed by a stable name.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InsertionPlan {
    pub sites: BTreeMap<String, SiteEntry>,
}

impl InsertionPlan {
    /// Adapters after every self-attention and feed-forward sublayer; LoRA on
    /// query and value of every self-attention and of decoder cross-attention.
    pub fn standard(n_encoder_layers: usize, n_decoder_layers: usize, adapters: bool, lora: bool) -> Self {
        let mut sites = BTreeMap::new();
        let mut add = |name: String, kind, module: String, layer_index, position| {
            sites.insert(name, SiteEntry { kind, module, layer_index, position });
        };
        for layer in 0..n_encoder_layers + n_decoder_layers {
            let decoder = layer >= n_encoder_layers;
            let prefix = if decoder {
                format!("decoder.block.{}", layer - n_encoder_layers)
            } else {
                format!("encoder.block.{layer}")
            };
            if adapters {
                for (sub, pos) in [("self_attn", PositionId::AdapterAfterSelfAttn), ("ffn", PositionId::AdapterAfterFfn)] {
                    let module = format!("{prefix}.{sub}");
                    add(format!("{module}.adapter"), SiteKind::Adapter, module, layer, pos);
                }
            }
            if lora {
                let mut attn = vec![("self_attn", PositionId::LoraASelfAttn)];
                if decoder {
                    attn.push(("cross_attn", PositionId::LoraACrossAttn));
                }
                for (sub, pos) in attn {
                    for (proj, kind) in [("q", SiteKind::LoraQuery), ("v", SiteKind::LoraValue)] {
                        let module = format!("{prefix}.{sub}.{proj}");
                        add(format!("{module}.lora"), kind, module, layer, pos);
                    }
                }
            }
        }
        Self { sites }
    }

    pub fn len(&self) -> usize {
        self.sites.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }

    pub fn count(&self, kind: SiteKind) -> usize {
        self.sites.values().filter(|s| s.kind == kind).count()
    }

    /// No module is instrumented twice and no two sites of one kind share a
    /// conditioning key. Query and value of one attention module share the
    /// key and take different halves of the generated output.
    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for (name, s) in &self.sites {
            if !seen.insert((s.module.clone(), s.kind)) {
                return Err(Error::Contract(format!("site {name} instruments {} twice", s.module)));
            }
            let ok = match s.kind {
                SiteKind::Adapter => s.position.is_adapter(),
                SiteKind::LoraQuery | SiteKind::LoraValue => s.position.is_lora_a(),
            };
            if !ok {
                return Err(Error::Contract(format!("site {name} has incompatible position {}", s.position)));
            }
        }
        let mut keys = BTreeMap::new();
        for (name, s) in &self.sites {
            if let Some(prev) = keys.insert((s.layer_index, s.position, s.kind), name) {
                return Err(Error::Contract(format!("sites {prev} and {name} share a conditioning key")));
            }
        }
        Ok(())
    }
}

/// Audit record: every site with its conditioning key for the current task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteManifest {
    pub block_layout: String,
    pub task_index: usize,
    pub sites: BTreeMap<String, ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub kind: SiteKind,
    pub module: String,
    pub conditioning: ConditioningInput,
}

impl SiteManifest {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Which parameters receive updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreezePolicy {
    pub train_host_layer_norms: bool,
}

impl Default for FreezePolicy {
    fn default() -> Self {
        Self { train_host_layer_norms: true }
    }
}

impl FreezePolicy {
    /// Hypernetwork tensors are always trainable; host tensors only if they
    /// belong to a layer norm.
    pub fn host_trainable(&self, name: &str) -> bool {
        self.train_host_layer_norms && is_layer_norm_param(name)
    }

    /// Splits host parameter names into (trainable, frozen).
    pub fn partition<'a>(&self, names: impl IntoIterator<Item = &'a str>) -> (BTreeSet<String>, BTreeSet<String>) {
        let (t, f): (Vec<&str>, Vec<&str>) = names.into_iter().partition(|n| self.host_trainable(n));
        (t.into_iter().map(String::from).collect(), f.into_iter().map(String::from).collect())
    }
}

/// Generated weights for every site of one task, living on a tape.
pub struct SiteWeights<'t, T: Scalar> {
    adapters: HashMap<String, AdapterVars<'t, T>>,
    lora: HashMap<String, LoraPairVars<'t, T>>,
}

impl<'t, T: Scalar> SiteWeights<'t, T> {
    pub fn adapter(&self, module: &str) -> Option<&AdapterVars<'t, T>> {
        self.adapters.get(module)
    }

    pub fn lora(&self, module: &str) -> Option<&LoraPairVars<'t, T>> {
        self.lora.get(module)
    }

    pub fn len(&self) -> usize {
        self.adapters.len() + self.lora.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Generates the weights of every site in `plan` for `task_index` in one batched pass.
pub fn generate_sites<'t, T: Scalar>(
    hypernet: &HyperNet<T>,
    vars: &Bound<'t, T>,
    plan: &InsertionPlan,
    task_index: usize,
) -> Result<SiteWeights<'t, T>> {
    let mut keys: Vec<ConditioningInput> = Vec::new();
    let mut row_of: BTreeMap<ConditioningInput, usize> = BTreeMap::new();
    let mut row = |c: ConditioningInput| {
        *row_of.entry(c).or_insert_with(|| {
            keys.push(c);
            keys.len() - 1
        })
    };
    // (site, head, row) triples, resolved after the batched projector pass.
    let mut wanted: Vec<(&str, &SiteEntry, Vec<(HeadKind, usize)>)> = Vec::new();
    for (name, s) in &plan.sites {
        let heads = match s.kind {
            SiteKind::Adapter => {
                let r = row(s.conditioning(task_index));
                let (d, u, ln) = hypernet.adapter_heads(s.layer_index);
                vec![(d, r), (u, r), (ln, r)]
            }
            SiteKind::LoraQuery | SiteKind::LoraValue => {
                let ra = row(s.conditioning(task_index));
                let rb = row(s.lora_b_conditioning(task_index).expect("validated LoRA position"));
                vec![(HeadKind::LoraA, ra), (HeadKind::LoraB, rb)]
            }
        };
        wanted.push((name, s, heads));
    }
    let mut out = SiteWeights { adapters: HashMap::new(), lora: HashMap::new() };
    if keys.is_empty() {
        return Ok(out);
    }
    let cond = hypernet.condition_batch(vars, &keys)?;
    // Each head runs once over the rows that need it.
    let mut head_rows: BTreeMap<HeadKind, Vec<usize>> = BTreeMap::new();
    for (_, _, heads) in &wanted {
        for &(h, r) in heads {
            let rows = head_rows.entry(h).or_default();
            if !rows.contains(&r) {
                rows.push(r);
            }
        }
    }
    let mut outputs: BTreeMap<HeadKind, (Var<'t, T>, Vec<usize>)> = BTreeMap::new();
    for (h, rows) in head_rows {
        let v = hypernet.head(vars, h, &cond.gather(&rows))?;
        outputs.insert(h, (v, rows));
    }
    let local = |h: HeadKind, r: usize| -> (Var<'t, T>, usize) {
        let (v, rows) = &outputs[&h];
        (*v, rows.iter().position(|&x| x == r).expect("row registered above"))
    };
    let cfg = hypernet.config();
    let (hdim, r) = (cfg.hidden_size, cfg.lora_rank);
    for (_, s, heads) in wanted {
        match s.kind {
            SiteKind::Adapter => {
                let (d, rd) = local(heads[0].0, heads[0].1);
                let (u, ru) = local(heads[1].0, heads[1].1);
                let (ln, rl) = local(heads[2].0, heads[2].1);
                let bottleneck = cfg.bottleneck();
                let a = AdapterVars {
                    down: d.row_as(rd, &[bottleneck, hdim]),
                    up: u.row_as(ru, &[hdim, bottleneck]),
                    gamma: ln.row_segment_as(rl, 0, &[hdim]),
                    beta: ln.row_segment_as(rl, hdim, &[hdim]),
                };
                out.adapters.insert(s.module.clone(), a);
            }
            SiteKind::LoraQuery | SiteKind::LoraValue => {
                let (a, ra) = local(HeadKind::LoraA, heads[0].1);
                let (b, rb) = local(HeadKind::LoraB, heads[1].1);
                let slot = usize::from(s.kind == SiteKind::LoraValue);
                let pair = LoraPairVars {
                    a: a.row_segment_as(ra, slot * r * hdim, &[r, hdim]),
                    b: b.row_segment_as(rb, slot * hdim * r, &[hdim, r]),
                };
                out.lora.insert(s.module.clone(), pair);
            }
        }
    }
    Ok(out)
}

/// A host wired to a hypernetwork, with a current task.
#[derive(Debug, Clone, PartialEq)]
pub struct InstrumentedModel<T> {
    host: ToyHost<T>,
    hypernet: HyperNet<T>,
    plan: InsertionPlan,
    policy: FreezePolicy,
    task: usize,
}

/// Checks that every site names an existing host module and takes ownership.
pub fn instrument_host<T: Scalar>(
    mut host: ToyHost<T>,
    hypernet: HyperNet<T>,
    plan: InsertionPlan,
    policy: FreezePolicy,
) -> Result<InstrumentedModel<T>> {
    if host.is_instrumented() {
        return Err(Error::AlreadyInstrumented);
    }
    plan.validate()?;
    let hcfg = host.config();
    let ncfg = hypernet.config();
    if hcfg.hidden_size != ncfg.hidden_size {
        return Err(Error::config(
            "hidden_size",
            format!("hypernetwork generates width {}, host has {}", ncfg.hidden_size, hcfg.hidden_size),
        ));
    }
    if hcfg.n_encoder_layers != ncfg.n_encoder_layers || hcfg.n_decoder_layers != ncfg.n_decoder_layers {
        return Err(Error::config("n_encoder_layers", "hypernetwork and host disagree on layer counts"));
    }
    let modules = host.module_names();
    let unmatched: Vec<String> = plan
        .sites
        .iter()
        .filter(|(_, s)| !modules.contains(&s.module) || s.layer_index >= ncfg.n_layers())
        .map(|(n, _)| n.clone())
        .collect();
    if !unmatched.is_empty() {
        return Err(Error::UnmatchedSites(unmatched));
    }
    let needs_adapters = plan.count(SiteKind::Adapter) > 0;
    let needs_lora = plan.len() > plan.count(SiteKind::Adapter);
    if (needs_adapters && !ncfg.enable_adapters) || (needs_lora && !ncfg.enable_lora) {
        return Err(Error::config("enable_adapters", "plan uses sites whose generator heads are disabled"));
    }
    host.mark_instrumented();
    Ok(InstrumentedModel { host, hypernet, plan, policy, task: 0 })
}

impl<T: Scalar> InstrumentedModel<T> {
    pub fn host(&self) -> &ToyHost<T> {
        &self.host
    }

    pub fn host_mut(&mut self) -> &mut ToyHost<T> {
        &mut self.host
    }

    pub fn hypernet(&self) -> &HyperNet<T> {
        &self.hypernet
    }

    pub fn hypernet_mut(&mut self) -> &mut HyperNet<T> {
        &mut self.hypernet
    }

    /// Host and hypernetwork stores, borrowed together for an optimizer step.
    pub fn param_stores_mut(&mut self) -> (&mut ParamStore<T>, &mut ParamStore<T>) {
        (self.host.params_mut(), self.hypernet.params_mut())
    }

    pub fn plan(&self) -> &InsertionPlan {
        &self.plan
    }

    pub fn policy(&self) -> FreezePolicy {
        self.policy
    }

    /// Detaches the hypernetwork; the returned host can be instrumented again.
    pub fn into_parts(mut self) -> (ToyHost<T>, HyperNet<T>) {
        self.host.clear_instrumented();
        (self.host, self.hypernet)
    }

    pub fn task(&self) -> usize {
        self.task
    }

    pub fn set_task(&mut self, task_index: usize) -> Result<()> {
        let n = self.hypernet.config().n_tasks;
        if task_index >= n {
            return Err(Error::Index { what: "task", index: task_index, bound: n });
        }
        self.task = task_index;
        Ok(())
    }

    pub fn manifest(&self) -> SiteManifest {
        SiteManifest {
            block_layout: "pre_ln: x + adapter(sublayer(ln(x)))".into(),
            task_index: self.task,
            sites: self
                .plan
                .sites
                .iter()
                .map(|(n, s)| {
                    (n.clone(), ManifestEntry { kind: s.kind, module: s.module.clone(), conditioning: s.conditioning(self.task) })
                })
                .collect(),
        }
    }

    /// Names of every tensor that receives updates.
    pub fn trainable_names(&self) -> BTreeSet<String> {
        let (host, _) = self.policy.partition(self.host.params().names());
        host.into_iter().chain(self.hypernet.params().names().map(String::from)).collect()
    }

    pub fn frozen_names(&self) -> BTreeSet<String> {
        self.policy.partition(self.host.params().names()).1
    }

    /// Host layer-norm tensors that the policy trains.
    pub fn host_trainable_params(&self) -> ParamStore<T> {
        self.host.params().subset(|n| self.policy.host_trainable(n))
    }

    /// Binds host and hypernetwork to `tape` under the freeze policy.
    pub fn bind<'t>(&self, tape: &'t Tape<T>, train: bool) -> (Bound<'t, T>, Bound<'t, T>) {
        let policy = self.policy;
        let host = self.host.params().bind(tape, |n| train && policy.host_trainable(n));
        let hn = self.hypernet.params().bind(tape, |_| train);
        (host, hn)
    }

    pub fn sites<'t>(&self, hn: &Bound<'t, T>) -> Result<SiteWeights<'t, T>> {
        generate_sites(&self.hypernet, hn, &self.plan, self.task)
    }

    /// Teacher-forced loss for the current task on a bound pair.
    pub fn loss<'t>(
        &self,
        host: &Bound<'t, T>,
        hn: &Bound<'t, T>,
        batch: &Seq2SeqBatch,
        scale: T,
    ) -> Result<Var<'t, T>> {
        let sites = self.sites(hn)?;
        self.host.loss(host, Some(&sites), batch, scale)
    }

    /// Inference logits for the current task.
    pub fn logits(&self, batch: &Seq2SeqBatch) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let (host, hn) = self.bind(&tape, false);
        let sites = self.sites(&hn)?;
        Ok((*self.host.forward(&host, Some(&sites), batch)?.value()).clone())
    }

    pub fn greedy_decode(&self, sources: &[Vec<usize>], max_len: usize) -> Result<Vec<Vec<usize>>> {
        let tape = Tape::new();
        let (host, hn) = self.bind(&tape, false);
        let sites = self.sites(&hn)?;
        self.host.greedy_decode_with(&host, Some(&sites), sources, max_len)
    }
}
