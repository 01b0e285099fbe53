//! Run configuration: one JSON document with `${VAR}` interpolation.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use hyperpeft::corpus::{TaskSource, LOW_RESOURCE_FRACTIONS};
use hyperpeft::host::CopyPretrainConfig;
use hyperpeft::hypernet::HypernetConfig;
use hyperpeft::trainer::TrainerConfig;
use hyperpeft::{Error, Result};
use regex::Regex;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HostSection {
    #[serde(default = "d_hidden")]
    pub hidden_size: usize,
    #[serde(default = "d_layers")]
    pub n_encoder_layers: usize,
    #[serde(default = "d_layers")]
    pub n_decoder_layers: usize,
    #[serde(default = "d_heads")]
    pub n_heads: usize,
    #[serde(default = "d_ff")]
    pub ff_width: usize,
    /// Longest sequence in words; taken from the data when absent.
    #[serde(default)]
    pub max_len: Option<usize>,
    #[serde(default = "d_true")]
    pub tie_embeddings: bool,
}

fn d_hidden() -> usize {
    64
}
fn d_layers() -> usize {
    2
}
fn d_heads() -> usize {
    4
}
fn d_ff() -> usize {
    256
}
fn d_true() -> bool {
    true
}

impl Default for HostSection {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all host fields have defaults")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HypernetSection {
    #[serde(default = "d_task")]
    pub d_task: usize,
    #[serde(default = "d_64")]
    pub d_layer_pos: usize,
    #[serde(default = "d_64")]
    pub d_cond: usize,
    #[serde(default = "d_64")]
    pub d_proj_hidden: usize,
    #[serde(default = "d_reduction")]
    pub reduction_factor: usize,
    #[serde(default = "d_rank")]
    pub lora_rank: usize,
    #[serde(default = "d_true")]
    pub separate_stack_heads: bool,
    #[serde(default = "d_init")]
    pub init_std: f64,
    #[serde(default = "d_gamma")]
    pub ln_gamma_init: f64,
}

fn d_task() -> usize {
    512
}
fn d_64() -> usize {
    64
}
fn d_reduction() -> usize {
    32
}
fn d_rank() -> usize {
    8
}
fn d_init() -> f64 {
    0.01
}
fn d_gamma() -> f64 {
    1.0
}

impl Default for HypernetSection {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all hypernetwork fields have defaults")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_fraction")]
    pub fraction: f64,
    #[serde(default)]
    pub precision: Precision,
    pub tasks: Vec<TaskSource>,
    #[serde(default)]
    pub host: HostSection,
    /// Copy-task pretraining of the fresh host; skipped when `steps` is 0.
    #[serde(default)]
    pub pretrain: CopyPretrainConfig,
    #[serde(default)]
    pub hypernet: HypernetSection,
    #[serde(default)]
    pub trainer: TrainerConfig,
    #[serde(default = "d_true")]
    pub enable_lora: bool,
    #[serde(default = "d_true")]
    pub enable_adapters: bool,
}

fn d_fraction() -> f64 {
    1.0
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub fraction: Option<f64>,
    pub tasks: Option<Vec<String>>,
    pub no_lora: bool,
    pub no_adapters: bool,
    pub out: Option<PathBuf>,
}

/// Replaces every `${NAME}` using `lookup`; unset names are config errors.
pub fn interpolate(text: &str, lookup: impl Fn(&str) -> Option<String>) -> Result<String> {
    let re = Regex::new(r"\$\{([A-Za-z_][A-Za-z0-9_]*)\}").expect("static pattern");
    let mut missing = None;
    let out = re.replace_all(text, |c: &regex::Captures<'_>| match lookup(&c[1]) {
        Some(v) => v,
        None => {
            missing.get_or_insert_with(|| c[1].to_string());
            String::new()
        }
    });
    match missing {
        Some(name) => Err(Error::config(format!("${{{name}}}"), "environment variable is not set")),
        None => Ok(out.into_owned()),
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::config("config", e.to_string()))
    }

    /// Reads, interpolates from the environment and resolves relative paths
    /// against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let text = interpolate(&raw, |k| std::env::var(k).ok())?;
        let mut cfg = Self::from_json(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for t in &mut self.tasks {
            fix(&mut t.train);
            fix(&mut t.test);
            if let Some(v) = &mut t.val {
                fix(v);
            }
        }
        if let Some(o) = &mut self.output_dir {
            fix(o);
        }
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<()> {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(f) = o.fraction {
            self.fraction = f;
        }
        if let Some(names) = &o.tasks {
            let known: BTreeSet<&str> = self.tasks.iter().map(|t| t.name.as_str()).collect();
            if let Some(bad) = names.iter().find(|n| !known.contains(n.as_str())) {
                return Err(Error::config("tasks", format!("unknown task {bad:?}")));
            }
            self.tasks.retain(|t| names.contains(&t.name));
        }
        if o.no_lora {
            self.enable_lora = false;
        }
        if o.no_adapters {
            self.enable_adapters = false;
        }
        if let Some(out) = &o.out {
            self.output_dir = Some(out.clone());
        }
        self.trainer.seed = self.seed;
        self.trainer.low_resource_fraction = self.fraction;
        // lexicographic task order fixes task indices
        self.tasks.sort_by(|a, b| a.name.cmp(&b.name));
        Ok(())
    }

    /// Field-level checks; data files are checked separately so that every
    /// missing path can be listed at once.
    pub fn validate(&self) -> Result<()> {
        if self.tasks.is_empty() {
            return Err(Error::config("tasks", "at least one task is required"));
        }
        let mut names = BTreeSet::new();
        for t in &self.tasks {
            if t.name.is_empty() || t.name.contains(['/', '\\']) {
                return Err(Error::config("tasks.name", format!("{:?} is not a usable task name", t.name)));
            }
            if !names.insert(&t.name) {
                return Err(Error::config("tasks.name", format!("duplicate task {:?}", t.name)));
            }
        }
        if !LOW_RESOURCE_FRACTIONS.contains(&self.fraction) {
            return Err(Error::config("fraction", "must be one of 0.1, 0.2, 1.0"));
        }
        if !self.enable_lora && !self.enable_adapters {
            return Err(Error::config("enable_lora", "at least one of enable_lora and enable_adapters must be true"));
        }
        if self.output_dir.is_none() {
            return Err(Error::config("output_dir", "set it in the config or pass --out"));
        }
        self.trainer.validate()?;
        Ok(())
    }

    pub fn check_files(&self) -> Result<()> {
        let missing: Vec<PathBuf> = self
            .tasks
            .iter()
            .flat_map(|t| t.paths())
            .filter(|p| !p.exists())
            .map(Path::to_path_buf)
            .collect();
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::MissingFiles(missing))
        }
    }

    pub fn output_dir(&self) -> &Path {
        self.output_dir.as_deref().expect("validated config has an output directory")
    }

    pub fn hypernet_config(&self, n_tasks: usize) -> HypernetConfig {
        let h = &self.hypernet;
        HypernetConfig {
            d_task: h.d_task,
            d_layer_pos: h.d_layer_pos,
            d_cond: h.d_cond,
            d_proj_hidden: h.d_proj_hidden,
            reduction_factor: h.reduction_factor,
            lora_rank: h.lora_rank,
            separate_stack_heads: h.separate_stack_heads,
            init_std: h.init_std,
            ln_gamma_init: h.ln_gamma_init,
            enable_adapters: self.enable_adapters,
            enable_lora: self.enable_lora,
            ..HypernetConfig::new(self.host.hidden_size, n_tasks, self.host.n_encoder_layers, self.host.n_decoder_layers)
        }
    }

    pub fn model_name(&self) -> &'static str {
        match (self.enable_adapters, self.enable_lora) {
            (true, true) => "adapters+lora",
            (true, false) => "adapters",
            _ => "lora",
        }
    }
}
