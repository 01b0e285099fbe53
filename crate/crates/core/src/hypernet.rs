//! The weight-generating hypernetwork.
//!
//! A conditioning vector is computed from three learned embeddings (task,
//! layer, insertion position) passed through a small projector. Affine
//! generator heads map that vector to flattened adapter, layer-norm and LoRA
//! tensors. Heads are shared by every layer and task; a layer only differs
//! through its embedding row.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use hyperpeft_tensor::{Bound, ParamStore, Scalar, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PREFIX: &str = "hypernet/";
pub const TASK_EMBEDDING: &str = "hypernet/task_embedding/weight";
pub const LAYER_EMBEDDING: &str = "hypernet/layer_embedding/weight";
pub const POSITION_EMBEDDING: &str = "hypernet/position_embedding/weight";
pub const PROJECTOR_HIDDEN_WEIGHT: &str = "hypernet/projector/hidden_weight";
pub const PROJECTOR_HIDDEN_BIAS: &str = "hypernet/projector/hidden_bias";
pub const PROJECTOR_OUT_WEIGHT: &str = "hypernet/projector/out_weight";
pub const PROJECTOR_OUT_BIAS: &str = "hypernet/projector/out_bias";

/// Insertion site kind inside a transformer layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PositionId {
    AdapterAfterSelfAttn,
    AdapterAfterFfn,
    LoraASelfAttn,
    LoraBSelfAttn,
    LoraACrossAttn,
    LoraBCrossAttn,
}

impl PositionId {
    pub const ALL: [PositionId; 6] = [
        PositionId::AdapterAfterSelfAttn,
        PositionId::AdapterAfterFfn,
        PositionId::LoraASelfAttn,
        PositionId::LoraBSelfAttn,
        PositionId::LoraACrossAttn,
        PositionId::LoraBCrossAttn,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn is_adapter(self) -> bool {
        matches!(self, PositionId::AdapterAfterSelfAttn | PositionId::AdapterAfterFfn)
    }

    pub fn is_lora_a(self) -> bool {
        matches!(self, PositionId::LoraASelfAttn | PositionId::LoraACrossAttn)
    }

    pub fn is_lora_b(self) -> bool {
        matches!(self, PositionId::LoraBSelfAttn | PositionId::LoraBCrossAttn)
    }
}

impl fmt::Display for PositionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            PositionId::AdapterAfterSelfAttn => "adapter_after_self_attn",
            PositionId::AdapterAfterFfn => "adapter_after_ffn",
            PositionId::LoraASelfAttn => "lora_a_self_attn",
            PositionId::LoraBSelfAttn => "lora_b_self_attn",
            PositionId::LoraACrossAttn => "lora_a_cross_attn",
            PositionId::LoraBCrossAttn => "lora_b_cross_attn",
        };
        f.write_str(s)
    }
}

/// `(task, layer, position)`: the key that selects generated weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ConditioningInput {
    pub task_index: usize,
    /// Global layer index: encoder layers first, then decoder layers.
    pub layer_index: usize,
    pub position: PositionId,
}

impl ConditioningInput {
    pub fn new(task_index: usize, layer_index: usize, position: PositionId) -> Self {
        Self { task_index, layer_index, position }
    }
}

/// Which transformer stack a layer index belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stack {
    Encoder,
    Decoder,
}

impl fmt::Display for Stack {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stack::Encoder => "encoder",
            Stack::Decoder => "decoder",
        })
    }
}

/// Generator heads. Adapter and layer-norm heads exist per stack (or once,
/// when stack heads are shared); LoRA heads exist once.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum HeadKind {
    AdapterDown(Option<Stack>),
    AdapterUp(Option<Stack>),
    LayerNorm(Option<Stack>),
    LoraA,
    LoraB,
}

impl HeadKind {
    pub fn name(self) -> String {
        let scoped = |stack: Option<Stack>, what: &str| match stack {
            Some(s) => format!("{s}_{what}"),
            None => format!("shared_{what}"),
        };
        match self {
            HeadKind::AdapterDown(s) => scoped(s, "adapter_down"),
            HeadKind::AdapterUp(s) => scoped(s, "adapter_up"),
            HeadKind::LayerNorm(s) => scoped(s, "layer_norm"),
            HeadKind::LoraA => "lora_a".into(),
            HeadKind::LoraB => "lora_b".into(),
        }
    }

    pub fn weight_name(self) -> String {
        format!("{PREFIX}{}/weight", self.name())
    }

    pub fn bias_name(self) -> String {
        format!("{PREFIX}{}/bias", self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HypernetConfig {
    #[serde(default = "default_d_task")]
    pub d_task: usize,
    #[serde(default = "default_64")]
    pub d_layer_pos: usize,
    #[serde(default = "default_64")]
    pub d_cond: usize,
    #[serde(default = "default_64")]
    pub d_proj_hidden: usize,
    /// Host hidden width `h`.
    pub hidden_size: usize,
    /// Adapter bottleneck is `hidden_size / reduction_factor`.
    #[serde(default = "default_reduction")]
    pub reduction_factor: usize,
    #[serde(default = "default_rank")]
    pub lora_rank: usize,
    pub n_tasks: usize,
    pub n_encoder_layers: usize,
    pub n_decoder_layers: usize,
    #[serde(default = "default_true")]
    pub enable_adapters: bool,
    #[serde(default = "default_true")]
    pub enable_lora: bool,
    /// Separate adapter/layer-norm heads for the encoder and the decoder stack.
    #[serde(default = "default_true")]
    pub separate_stack_heads: bool,
    /// Std of embeddings, projector and head weights at initialization.
    #[serde(default = "default_init_std")]
    pub init_std: f64,
    /// Initial generated layer-norm scale.
    #[serde(default = "default_gamma")]
    pub ln_gamma_init: f64,
}

fn default_d_task() -> usize {
    512
}
fn default_64() -> usize {
    64
}
fn default_reduction() -> usize {
    32
}
fn default_rank() -> usize {
    8
}
fn default_true() -> bool {
    true
}
fn default_init_std() -> f64 {
    0.01
}
fn default_gamma() -> f64 {
    1.0
}

impl HypernetConfig {
    /// Defaults for a host of width `hidden_size` with the given layer counts.
    pub fn new(hidden_size: usize, n_tasks: usize, n_encoder_layers: usize, n_decoder_layers: usize) -> Self {
        Self {
            d_task: default_d_task(),
            d_layer_pos: 64,
            d_cond: 64,
            d_proj_hidden: 64,
            hidden_size,
            reduction_factor: default_reduction(),
            lora_rank: default_rank(),
            n_tasks,
            n_encoder_layers,
            n_decoder_layers,
            enable_adapters: true,
            enable_lora: true,
            separate_stack_heads: true,
            init_std: default_init_std(),
            ln_gamma_init: default_gamma(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_task", self.d_task),
            ("d_layer_pos", self.d_layer_pos),
            ("d_cond", self.d_cond),
            ("d_proj_hidden", self.d_proj_hidden),
            ("hidden_size", self.hidden_size),
            ("reduction_factor", self.reduction_factor),
            ("lora_rank", self.lora_rank),
            ("n_tasks", self.n_tasks),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be >= 1"));
            }
        }
        if self.n_layers() == 0 {
            return Err(Error::config("n_encoder_layers", "host needs at least one layer"));
        }
        if self.hidden_size % self.reduction_factor != 0 {
            return Err(Error::config(
                "reduction_factor",
                format!("hidden size {} is not divisible by {}", self.hidden_size, self.reduction_factor),
            ));
        }
        if !self.enable_adapters && !self.enable_lora {
            return Err(Error::config("enable_lora", "at least one of adapters and LoRA must be enabled"));
        }
        if !(self.init_std >= 0.0) {
            return Err(Error::config("init_std", "must be non-negative"));
        }
        Ok(())
    }

    pub fn bottleneck(&self) -> usize {
        self.hidden_size / self.reduction_factor
    }

    pub fn n_layers(&self) -> usize {
        self.n_encoder_layers + self.n_decoder_layers
    }

    pub fn stack_of(&self, layer_index: usize) -> Stack {
        if layer_index < self.n_encoder_layers {
            Stack::Encoder
        } else {
            Stack::Decoder
        }
    }

    fn head_stack(&self, layer_index: usize) -> Option<Stack> {
        self.separate_stack_heads.then(|| self.stack_of(layer_index))
    }

    /// Width of the concatenated embedding fed to the projector.
    pub fn projector_input(&self) -> usize {
        self.d_task + 2 * self.d_layer_pos
    }

    /// Every generator head with its flattened output width.
    pub fn heads(&self) -> Vec<(HeadKind, usize)> {
        let h = self.hidden_size;
        let d = self.bottleneck();
        let r = self.lora_rank;
        let mut out = Vec::new();
        if self.enable_adapters {
            let stacks: Vec<Option<Stack>> = if self.separate_stack_heads {
                vec![Some(Stack::Encoder), Some(Stack::Decoder)]
            } else {
                vec![None]
            };
            for s in stacks {
                out.push((HeadKind::AdapterDown(s), d * h));
                out.push((HeadKind::AdapterUp(s), h * d));
                out.push((HeadKind::LayerNorm(s), 2 * h));
            }
        }
        if self.enable_lora {
            // query and value each get their own (A, B) pair
            out.push((HeadKind::LoraA, 2 * r * h));
            out.push((HeadKind::LoraB, 2 * h * r));
        }
        out
    }

    /// Shapes of every tensor the hypernetwork owns, by name.
    pub fn tensor_shapes(&self) -> BTreeMap<String, Vec<usize>> {
        let mut shapes = BTreeMap::new();
        shapes.insert(TASK_EMBEDDING.to_string(), vec![self.n_tasks, self.d_task]);
        shapes.insert(LAYER_EMBEDDING.to_string(), vec![self.n_layers(), self.d_layer_pos]);
        shapes.insert(POSITION_EMBEDDING.to_string(), vec![PositionId::ALL.len(), self.d_layer_pos]);
        shapes.insert(PROJECTOR_HIDDEN_WEIGHT.to_string(), vec![self.d_proj_hidden, self.projector_input()]);
        shapes.insert(PROJECTOR_HIDDEN_BIAS.to_string(), vec![self.d_proj_hidden]);
        shapes.insert(PROJECTOR_OUT_WEIGHT.to_string(), vec![self.d_cond, self.d_proj_hidden]);
        shapes.insert(PROJECTOR_OUT_BIAS.to_string(), vec![self.d_cond]);
        for (head, width) in self.heads() {
            shapes.insert(head.weight_name(), vec![width, self.d_cond]);
            shapes.insert(head.bias_name(), vec![width]);
        }
        shapes
    }
}

/// Trainable parameter counts by component.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ParameterBudget {
    pub task_embedding: usize,
    pub layer_embedding: usize,
    pub position_embedding: usize,
    pub projector: usize,
    pub heads: BTreeMap<String, usize>,
    /// Everything the hypernetwork owns.
    pub hypernet: usize,
    /// Host layer norms (scale and shift), which stay trainable but are not generated.
    pub host_layer_norm: usize,
    pub total: usize,
}

/// Closed-form parameter count. Host layer norms assume a pre-LN layout: two
/// per encoder block, three per decoder block and one final norm per stack.
pub fn trainable_parameter_count(cfg: &HypernetConfig) -> ParameterBudget {
    let task_embedding = cfg.n_tasks * cfg.d_task;
    let layer_embedding = cfg.n_layers() * cfg.d_layer_pos;
    let position_embedding = PositionId::ALL.len() * cfg.d_layer_pos;
    let projector = (cfg.projector_input() + 1) * cfg.d_proj_hidden + (cfg.d_proj_hidden + 1) * cfg.d_cond;
    let heads: BTreeMap<String, usize> =
        cfg.heads().into_iter().map(|(k, w)| (k.name(), (cfg.d_cond + 1) * w)).collect();
    let hypernet = task_embedding + layer_embedding + position_embedding + projector + heads.values().sum::<usize>();
    let n_norms = 2 * cfg.n_encoder_layers + 3 * cfg.n_decoder_layers + 2;
    let host_layer_norm = n_norms * 2 * cfg.hidden_size;
    ParameterBudget {
        task_embedding,
        layer_embedding,
        position_embedding,
        projector,
        heads,
        hypernet,
        host_layer_norm,
        total: hypernet + host_layer_norm,
    }
}

/// Generated adapter projections; `down` maps h to d, `up` maps d back to h.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterParams<T> {
    /// `[d, h]`
    pub down: Tensor<T>,
    /// `[h, d]`
    pub up: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

/// One low-rank update `B A` with `A: [r, k]` and `B: [d_out, r]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraPair<T> {
    pub a: Tensor<T>,
    pub b: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraParams<T> {
    pub query: LoraPair<T>,
    pub value: LoraPair<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum GeneratedParams<T> {
    Adapter(AdapterParams<T>),
    LayerNorm(LayerNormParams<T>),
    Lora(LoraParams<T>),
}

/// Graph-level adapter weights for one site.
#[derive(Debug, Clone, Copy)]
pub struct AdapterVars<'t, T: Scalar> {
    pub down: Var<'t, T>,
    pub up: Var<'t, T>,
    pub gamma: Var<'t, T>,
    pub beta: Var<'t, T>,
}

#[derive(Debug, Clone, Copy)]
pub struct LoraPairVars<'t, T: Scalar> {
    pub a: Var<'t, T>,
    pub b: Var<'t, T>,
}

/// Graph-level LoRA weights for one attention module.
#[derive(Debug, Clone, Copy)]
pub struct LoraVars<'t, T: Scalar> {
    pub query: LoraPairVars<'t, T>,
    pub value: LoraPairVars<'t, T>,
}

/// Hypernetwork parameters plus configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperNet<T> {
    cfg: HypernetConfig,
    params: ParamStore<T>,
}

impl<T: Scalar> HyperNet<T> {
    pub fn new(cfg: HypernetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let std = cfg.init_std;
        let h = cfg.hidden_size;
        // BTreeMap order keeps initialization independent of insertion order.
        for (name, shape) in cfg.tensor_shapes() {
            let t = if name.ends_with("/bias") && name.contains("/projector/") {
                Tensor::zeros(&shape)
            } else if name.ends_with("/weight") || name.contains("/projector/") {
                Tensor::randn(&shape, std, &mut rng)
            } else {
                Tensor::zeros(&shape)
            };
            params.insert(name, t);
        }
        // Head-specific starting points.
        for (head, width) in cfg.heads() {
            match head {
                HeadKind::AdapterDown(_) => {
                    let bias = Tensor::randn(&[width], 1.0 / (h as f64).sqrt(), &mut rng);
                    params.insert(head.bias_name(), bias);
                }
                HeadKind::AdapterUp(_) => {
                    params.insert(head.weight_name(), Tensor::randn(&[width, cfg.d_cond], std * 1e-2, &mut rng));
                }
                HeadKind::LayerNorm(_) => {
                    let gamma = T::of(cfg.ln_gamma_init);
                    params.insert(head.bias_name(), Tensor::from_fn(&[width], |i| if i < h { gamma } else { T::zero() }));
                }
                HeadKind::LoraA => {
                    let bias = Tensor::randn(&[width], 1.0 / (h as f64).sqrt(), &mut rng);
                    params.insert(head.bias_name(), bias);
                }
                HeadKind::LoraB => {
                    params.insert(head.weight_name(), Tensor::zeros(&[width, cfg.d_cond]));
                }
            }
        }
        Ok(Self { cfg, params })
    }

    /// Wraps existing tensors after checking names and shapes against `cfg`.
    pub fn from_params(cfg: HypernetConfig, params: ParamStore<T>) -> Result<Self> {
        cfg.validate()?;
        let shapes = cfg.tensor_shapes();
        for (name, shape) in &shapes {
            match params.get(name) {
                None => return Err(Error::Tensor(hyperpeft_tensor::TensorError::MissingTensor(name.clone()))),
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(Error::Contract(format!("{name} has shape {:?}, expected {shape:?}", t.shape())))
                }
                _ => {}
            }
        }
        if let Some(extra) = params.names().find(|n| !shapes.contains_key(*n)) {
            return Err(Error::Contract(format!("unexpected hypernetwork tensor {extra}")));
        }
        Ok(Self { cfg, params })
    }

    pub fn config(&self) -> &HypernetConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Zeroes the heads whose outputs are deltas (adapter up-projection,
    /// LoRA B, layer-norm shift), so every generated module is an identity.
    pub fn zero_delta_heads(&mut self) {
        let h = self.cfg.hidden_size;
        for (head, _) in self.cfg.heads() {
            let cols = match head {
                HeadKind::AdapterUp(_) | HeadKind::LoraB => 0,
                HeadKind::LayerNorm(_) => h,
                _ => continue,
            };
            for name in [head.weight_name(), head.bias_name()] {
                let t = self.params.get_mut(&name).expect("head tensors exist");
                let per_row = if t.shape().len() == 2 { t.shape()[1] } else { 1 };
                // rows below `cols` hold gamma and are left alone
                for v in t.data_mut().iter_mut().skip(cols * per_row) {
                    *v = T::zero();
                }
            }
        }
    }

    /// Stored as `hypernet.safetensors` plus `hypernet_config.json`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        self.params.save(&dir.join("hypernet.safetensors"))?;
        let cfg = serde_json::to_string_pretty(&self.cfg)?;
        std::fs::write(dir.join("hypernet_config.json"), cfg).map_err(|e| Error::io(dir, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("hypernet_config.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let cfg: HypernetConfig = serde_json::from_str(&text)?;
        let params = ParamStore::load(&dir.join("hypernet.safetensors"))?;
        Self::from_params(cfg, params)
    }

    fn check(&self, c: &ConditioningInput) -> Result<()> {
        if c.task_index >= self.cfg.n_tasks {
            return Err(Error::Index { what: "task", index: c.task_index, bound: self.cfg.n_tasks });
        }
        if c.layer_index >= self.cfg.n_layers() {
            return Err(Error::Index { what: "layer", index: c.layer_index, bound: self.cfg.n_layers() });
        }
        Ok(())
    }

    /// Conditioning vectors `[n, d_cond]` for a batch of inputs.
    pub fn condition_batch<'t>(&self, vars: &Bound<'t, T>, inputs: &[ConditioningInput]) -> Result<Var<'t, T>> {
        if inputs.is_empty() {
            return Err(Error::Contract("no conditioning inputs".into()));
        }
        for c in inputs {
            self.check(c)?;
        }
        let tasks: Vec<usize> = inputs.iter().map(|c| c.task_index).collect();
        let layers: Vec<usize> = inputs.iter().map(|c| c.layer_index).collect();
        let positions: Vec<usize> = inputs.iter().map(|c| c.position.index()).collect();
        let z = vars.get(TASK_EMBEDDING).gather(&tasks);
        let l = vars.get(LAYER_EMBEDDING).gather(&layers);
        let p = vars.get(POSITION_EMBEDDING).gather(&positions);
        let x = Var::concat_cols(&[z, l, p]);
        let hidden = x
            .matmul(&vars.get(PROJECTOR_HIDDEN_WEIGHT), true)
            .add_bias(&vars.get(PROJECTOR_HIDDEN_BIAS))
            .gelu();
        Ok(hidden.matmul(&vars.get(PROJECTOR_OUT_WEIGHT), true).add_bias(&vars.get(PROJECTOR_OUT_BIAS)))
    }

    /// Applies one generator head to conditioning rows: `[n, d_cond] -> [n, width]`.
    pub fn head<'t>(&self, vars: &Bound<'t, T>, head: HeadKind, cond: &Var<'t, T>) -> Result<Var<'t, T>> {
        let w = vars
            .try_get(&head.weight_name())
            .ok_or_else(|| Error::Contract(format!("generator head {} is disabled", head.name())))?;
        Ok(cond.matmul(&w, true).add_bias(&vars.get(&head.bias_name())))
    }

    pub fn adapter_heads(&self, layer_index: usize) -> (HeadKind, HeadKind, HeadKind) {
        let s = self.cfg.head_stack(layer_index);
        (HeadKind::AdapterDown(s), HeadKind::AdapterUp(s), HeadKind::LayerNorm(s))
    }

    /// Adapter weights and conditional layer-norm parameters at `row` of the head outputs.
    pub fn adapter_from_rows<'t>(
        &self,
        down: &Var<'t, T>,
        up: &Var<'t, T>,
        ln: &Var<'t, T>,
        row: usize,
    ) -> AdapterVars<'t, T> {
        let h = self.cfg.hidden_size;
        let d = self.cfg.bottleneck();
        AdapterVars {
            down: down.row_as(row, &[d, h]),
            up: up.row_as(row, &[h, d]),
            gamma: ln.row_segment_as(row, 0, &[h]),
            beta: ln.row_segment_as(row, h, &[h]),
        }
    }

    /// LoRA matrices from row `row_a` of the A-head output and `row_b` of the B-head output.
    pub fn lora_from_rows<'t>(&self, a: &Var<'t, T>, b: &Var<'t, T>, row_a: usize, row_b: usize) -> LoraVars<'t, T> {
        let h = self.cfg.hidden_size;
        let r = self.cfg.lora_rank;
        LoraVars {
            query: LoraPairVars { a: a.row_segment_as(row_a, 0, &[r, h]), b: b.row_segment_as(row_b, 0, &[h, r]) },
            value: LoraPairVars { a: a.row_segment_as(row_a, r * h, &[r, h]), b: b.row_segment_as(row_b, h * r, &[h, r]) },
        }
    }

    fn run<R>(&self, f: impl for<'t> FnOnce(&'t Tape<T>, &Bound<'t, T>) -> Result<R>) -> Result<R> {
        let tape = Tape::new();
        let vars = self.params.bind(&tape, |_| false);
        f(&tape, &vars)
    }

    /// The `d_cond` conditioning vector of one input.
    pub fn conditioning_embedding(&self, c: &ConditioningInput) -> Result<Tensor<T>> {
        self.run(|_, vars| {
            let v = self.condition_batch(vars, std::slice::from_ref(c))?;
            Ok((*v.value()).clone().reshape(&[self.cfg.d_cond])?)
        })
    }

    pub fn generate_adapter(&self, c: &ConditioningInput) -> Result<AdapterParams<T>> {
        if !c.position.is_adapter() {
            return Err(Error::Contract(format!("adapter generator called with position {}", c.position)));
        }
        self.run(|_, vars| {
            let cond = self.condition_batch(vars, std::slice::from_ref(c))?;
            let (down_h, up_h, ln_h) = self.adapter_heads(c.layer_index);
            let (down, up, ln) = (self.head(vars, down_h, &cond)?, self.head(vars, up_h, &cond)?, self.head(vars, ln_h, &cond)?);
            let a = self.adapter_from_rows(&down, &up, &ln, 0);
            Ok(AdapterParams { down: (*a.down.value()).clone(), up: (*a.up.value()).clone() })
        })
    }

    pub fn generate_layernorm(&self, c: &ConditioningInput) -> Result<LayerNormParams<T>> {
        if !c.position.is_adapter() {
            return Err(Error::Contract(format!("layer-norm generator called with position {}", c.position)));
        }
        self.run(|_, vars| {
            let cond = self.condition_batch(vars, std::slice::from_ref(c))?;
            let (_, _, ln_h) = self.adapter_heads(c.layer_index);
            let ln = self.head(vars, ln_h, &cond)?;
            let h = self.cfg.hidden_size;
            Ok(LayerNormParams {
                gamma: (*ln.row_segment_as(0, 0, &[h]).value()).clone(),
                beta: (*ln.row_segment_as(0, h, &[h]).value()).clone(),
            })
        })
    }

    /// `c_a` must be a LoRA-A position and `c_b` the matching LoRA-B position.
    pub fn generate_lora(&self, c_a: &ConditioningInput, c_b: &ConditioningInput) -> Result<LoraParams<T>> {
        let paired = matches!(
            (c_a.position, c_b.position),
            (PositionId::LoraASelfAttn, PositionId::LoraBSelfAttn) | (PositionId::LoraACrossAttn, PositionId::LoraBCrossAttn)
        );
        if !paired {
            return Err(Error::Contract(format!(
                "LoRA generator needs matching A/B positions, got {} and {}",
                c_a.position, c_b.position
            )));
        }
        self.run(|_, vars| {
            let cond = self.condition_batch(vars, &[*c_a, *c_b])?;
            let a = self.head(vars, HeadKind::LoraA, &cond)?;
            let b = self.head(vars, HeadKind::LoraB, &cond)?;
            let l = self.lora_from_rows(&a, &b, 0, 1);
            let get = |v: Var<'_, T>| (*v.value()).clone();
            Ok(LoraParams {
                query: LoraPair { a: get(l.query.a), b: get(l.query.b) },
                value: LoraPair { a: get(l.value.a), b: get(l.value.b) },
            })
        })
    }

    pub fn generate(&self, c: &ConditioningInput) -> Result<GeneratedParams<T>> {
        match c.position {
            PositionId::AdapterAfterSelfAttn | PositionId::AdapterAfterFfn => self.generate_adapter(c).map(GeneratedParams::Adapter),
            PositionId::LoraASelfAttn => {
                let b = ConditioningInput { position: PositionId::LoraBSelfAttn, ..*c };
                self.generate_lora(c, &b).map(GeneratedParams::Lora)
            }
            PositionId::LoraACrossAttn => {
                let b = ConditioningInput { position: PositionId::LoraBCrossAttn, ..*c };
                self.generate_lora(c, &b).map(GeneratedParams::Lora)
            }
            p => Err(Error::Contract(format!("generate expects an adapter or LoRA-A position, got {p}"))),
        }
    }
}
