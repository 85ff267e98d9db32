//! Plain-text `key = value` run configuration.
//!
//! One file describes the model, the synthetic domain, the tuning mode and
//! the optimiser. Lines starting with `#` are comments. `preset` and `domain`
//! are applied first, whatever their position; every other key is applied in
//! file order. Unknown and repeated keys are rejected.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::str::FromStr;

use sop2::backbone::{ModelConfig, PromptMode};
use sop2::pointcloud::{DomainParams, Extent, GridSize};
use sop2::tuner::{TrainConfig, TuningMode};
use sop2::{Error, Result};

/// Every accepted key with a one-line description.
pub const KEYS: &[(&str, &str)] = &[
    ("preset", "base model dimensions: full | desk"),
    ("domain", "base domain knobs: source | target"),
    ("mode", "tuning mode, e.g. sop2, head_finetune, from_scratch"),
    ("seed", "global seed for initialisation, shuffling and scene generation"),
    ("channels", "feature width C"),
    ("blocks", "transformer blocks; each runs an X and a Y partition"),
    ("set_size", "voxels per set n_s"),
    ("heads", "attention heads (must divide channels)"),
    ("windows", "window sizes per block, cycled, e.g. 12x12,24x24"),
    ("prompt_mode", "auto (from mode) | none | token | generator | pool | comma list, one per partition"),
    ("prompt_partitions", "all | comma list of 1-based partitions receiving prompts"),
    ("pool_size", "prompt pool entries M"),
    ("prompt_length", "tokens per pool entry n_P"),
    ("top_k", "pool entries selected per set K"),
    ("prompt_tokens", "prompt tokens per set n_T"),
    ("generated_prompts", "generated prompts per set n_G"),
    ("generator_layers", "prompt generator MLP depth"),
    ("vfe_layers", "point encoder depth"),
    ("ffn_hidden", "hidden width of the per-token feed-forward sublayer"),
    ("head_channels", "hidden width of the detection head"),
    ("grid", "voxel size dx,dy,dz in meters"),
    ("extent", "scene range x_min,x_max,y_min,y_max,z_min,z_max in meters"),
    ("max_points", "points kept per voxel"),
    ("ln_eps", "layer-norm epsilon"),
    ("cos_eps", "cosine-similarity epsilon"),
    ("key_pull", "train pool keys with the key-pull term: true | false"),
    ("key_pull_weight", "weight of the key-pull term"),
    ("lora", "wrap attention projections with LoRA adapters: true | false"),
    ("lora_rank", "LoRA rank r"),
    ("lora_alpha", "LoRA scale numerator (scale = alpha / r)"),
    ("density", "ground points per square meter"),
    ("height_offset", "sensor height above ground in meters"),
    ("intensity_bias", "additive intensity shift"),
    ("box_scale", "multiplier on object sizes"),
    ("class_mix", "car,pedestrian,cyclist probabilities"),
    ("epochs", "training epochs"),
    ("batch_size", "scenes per optimiser step"),
    ("lr", "peak learning rate"),
    ("prompt_lr", "peak learning rate of pool and prompt-token embeddings"),
    ("beta1", "Adam first-moment decay"),
    ("beta2", "Adam second-moment decay"),
    ("adam_eps", "Adam epsilon"),
    ("warmup_frac", "fraction of steps spent in linear warmup"),
    ("fraction", "fraction of the training scenes used"),
];

/// Keys written into a checkpoint's config snapshot, in order.
const MODEL_KEYS: &[&str] = &[
    "channels",
    "blocks",
    "set_size",
    "heads",
    "windows",
    "prompt_mode",
    "pool_size",
    "prompt_length",
    "top_k",
    "prompt_tokens",
    "generated_prompts",
    "generator_layers",
    "vfe_layers",
    "ffn_hidden",
    "head_channels",
    "grid",
    "extent",
    "max_points",
    "ln_eps",
    "cos_eps",
    "key_pull",
    "key_pull_weight",
    "lora",
    "lora_rank",
    "lora_alpha",
    "seed",
];

#[derive(Clone, Debug, PartialEq)]
pub enum PromptPlacement {
    /// Whatever the tuning mode tunes.
    Auto,
    Single(PromptMode),
    PerPartition(Vec<PromptMode>),
}

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub domain_name: String,
    pub domain: DomainParams,
    pub mode: TuningMode,
    pub train: TrainConfig,
    pub prompt_placement: PromptPlacement,
    /// 1-based partitions that receive prompts; `None` means all.
    pub prompt_partitions: Option<Vec<usize>>,
    /// Domain knobs set explicitly, kept so a different base domain can be
    /// swapped in underneath them.
    domain_overrides: Vec<(String, String)>,
}

/// Equal when every resolved setting is equal, however it was spelled.
impl PartialEq for RunConfig {
    fn eq(&self, o: &Self) -> bool {
        self.model == o.model
            && self.domain_name == o.domain_name
            && self.domain == o.domain
            && self.mode == o.mode
            && self.train == o.train
            && self.prompt_placement == o.prompt_placement
            && self.prompt_partitions == o.prompt_partitions
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::full(),
            domain_name: "source".into(),
            domain: DomainParams::source(),
            mode: TuningMode::FromScratch,
            train: TrainConfig::default(),
            prompt_placement: PromptPlacement::Auto,
            prompt_partitions: None,
            domain_overrides: Vec::new(),
        }
    }
}

fn bad(key: &str, value: &str, why: impl std::fmt::Display) -> Error {
    Error::Config(format!("`{key} = {value}`: {why}"))
}

fn num<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value.parse::<T>().map_err(|e| bad(key, value, e))
}

fn list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    value.split(',').map(|v| num(key, v.trim())).collect()
}

fn fixed<const N: usize>(key: &str, value: &str) -> Result<[f64; N]> {
    let v: Vec<f64> = list(key, value)?;
    v.try_into()
        .map_err(|v: Vec<f64>| bad(key, value, format!("expected {N} numbers, got {}", v.len())))
}

fn boolean(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(bad(key, value, "expected true or false")),
    }
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

pub fn domain_preset(name: &str) -> Result<DomainParams> {
    match name {
        "source" => Ok(DomainParams::source()),
        "target" => Ok(DomainParams::target()),
        other => Err(Error::Config(format!("unknown domain `{other}` (source | target)"))),
    }
}

fn split_line(raw: &str) -> Result<Option<(String, String)>> {
    let line = raw.trim();
    if line.is_empty() || line.starts_with('#') {
        return Ok(None);
    }
    let (k, v) = line
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("expected `key = value`, got `{line}`")))?;
    Ok(Some((k.trim().to_string(), v.trim().to_string())))
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        let mut seen = HashSet::new();
        for raw in text.lines() {
            let Some((k, v)) = split_line(raw)? else { continue };
            if !KEYS.iter().any(|(name, _)| *name == k) {
                return Err(Error::Config(format!("unknown key `{k}`")));
            }
            if !seen.insert(k.clone()) {
                return Err(Error::Config(format!("key `{k}` given twice")));
            }
            pairs.push((k, v));
        }
        let mut cfg = RunConfig::default();
        for first in ["preset", "domain"] {
            if let Some((k, v)) = pairs.iter().find(|(k, _)| k == first) {
                cfg.set(k, v)?;
            }
        }
        for (k, v) in pairs.iter().filter(|(k, _)| k != "preset" && k != "domain") {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.model;
        match key {
            "preset" => {
                self.model = match value {
                    "full" => ModelConfig::full(),
                    "desk" => ModelConfig::desk(),
                    _ => return Err(bad(key, value, "expected full or desk")),
                }
            }
            "domain" => {
                self.domain = domain_preset(value)?;
                self.domain_name = value.to_string();
            }
            "mode" => self.mode = value.parse()?,
            "seed" => {
                let s = num(key, value)?;
                m.seed = s;
                self.train.seed = s;
            }
            "channels" => m.channels = num(key, value)?,
            "blocks" => {
                m.blocks = num(key, value)?;
                // Placement is resolved later; keep the raw list consistent.
                m.prompt_modes = vec![PromptMode::None; m.num_partitions()];
            }
            "set_size" => m.set_size = num(key, value)?,
            "heads" => m.heads = num(key, value)?,
            "windows" => {
                m.windows = value
                    .split(',')
                    .map(|w| {
                        let (a, b) = w
                            .trim()
                            .split_once('x')
                            .ok_or_else(|| bad(key, value, "expected e.g. 12x12,24x24"))?;
                        Ok([num(key, a)?, num(key, b)?])
                    })
                    .collect::<Result<_>>()?
            }
            "prompt_mode" => {
                self.prompt_placement = if value == "auto" {
                    PromptPlacement::Auto
                } else if value.contains(',') {
                    PromptPlacement::PerPartition(list(key, value)?)
                } else {
                    PromptPlacement::Single(value.parse()?)
                }
            }
            "prompt_partitions" => {
                self.prompt_partitions = if value == "all" { None } else { Some(list(key, value)?) }
            }
            "pool_size" => m.pool.size = num(key, value)?,
            "prompt_length" => m.pool.length = num(key, value)?,
            "top_k" => m.pool.top_k = num(key, value)?,
            "prompt_tokens" => m.prompt_tokens = num(key, value)?,
            "generated_prompts" => m.generated_prompts = num(key, value)?,
            "generator_layers" => m.generator_layers = num(key, value)?,
            "vfe_layers" => m.vfe_layers = num(key, value)?,
            "ffn_hidden" => m.ffn_hidden = num(key, value)?,
            "head_channels" => m.head_channels = num(key, value)?,
            "grid" => {
                let [dx, dy, dz] = fixed(key, value)?;
                m.grid = GridSize { dx, dy, dz };
            }
            "extent" => {
                let [x_min, x_max, y_min, y_max, z_min, z_max] = fixed(key, value)?;
                m.extent = Extent {
                    x_min,
                    x_max,
                    y_min,
                    y_max,
                    z_min,
                    z_max,
                };
            }
            "max_points" => m.max_points = num(key, value)?,
            "ln_eps" => m.ln_eps = num(key, value)?,
            "cos_eps" => m.cos_eps = num(key, value)?,
            "key_pull" => m.key_pull = boolean(key, value)?,
            "key_pull_weight" => m.key_pull_weight = num(key, value)?,
            "lora" => m.lora = boolean(key, value)?,
            "lora_rank" => m.lora_rank = num(key, value)?,
            "lora_alpha" => m.lora_alpha = num(key, value)?,
            "density" | "height_offset" | "intensity_bias" | "box_scale" | "class_mix" => {
                let d = &mut self.domain;
                match key {
                    "density" => d.density = num(key, value)?,
                    "height_offset" => d.height_offset = num(key, value)?,
                    "intensity_bias" => d.intensity_bias = num(key, value)?,
                    "box_scale" => d.box_scale = num(key, value)?,
                    _ => d.class_mix = fixed(key, value)?,
                }
                self.domain_overrides.push((key.to_string(), value.to_string()));
            }
            "epochs" => self.train.epochs = num(key, value)?,
            "batch_size" => self.train.batch_size = num(key, value)?,
            "lr" => self.train.lr = num(key, value)?,
            "prompt_lr" => self.train.prompt_lr = num(key, value)?,
            "beta1" => self.train.beta1 = num(key, value)?,
            "beta2" => self.train.beta2 = num(key, value)?,
            "adam_eps" => self.train.adam_eps = num(key, value)?,
            "warmup_frac" => self.train.warmup_frac = num(key, value)?,
            "fraction" => self.train.fraction = num(key, value)?,
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Overrides the global seed everywhere it is threaded.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.model.seed = seed;
        self.train.seed = seed;
        self
    }

    /// Swaps the base domain, keeping explicitly set knobs on top.
    pub fn with_domain(mut self, name: &str) -> Result<Self> {
        self.domain = domain_preset(name)?;
        self.domain_name = name.to_string();
        for (k, v) in std::mem::take(&mut self.domain_overrides) {
            self.set(&k, &v)?;
        }
        self.domain.validate()?;
        Ok(self)
    }

    /// Model config with prompt placement and LoRA resolved for `self.mode`.
    pub fn model_config(&self) -> Result<ModelConfig> {
        let mut model = self.model.clone();
        let n = model.num_partitions();
        model.prompt_modes = match &self.prompt_placement {
            PromptPlacement::PerPartition(modes) => {
                if self.prompt_partitions.is_some() {
                    return Err(Error::Config(
                        "prompt_partitions cannot be combined with a per-partition prompt_mode list".into(),
                    ));
                }
                modes.clone()
            }
            placement => {
                let mode = match placement {
                    PromptPlacement::Single(m) => *m,
                    _ => self.mode.prompt_mode(),
                };
                let on = self.prompt_partitions.clone().unwrap_or_else(|| (1..=n).collect());
                if let Some(&j) = on.iter().find(|&&j| j == 0 || j > n) {
                    return Err(Error::Config(format!("prompt partition {j} outside 1..={n}")));
                }
                (1..=n).map(|j| if on.contains(&j) { mode } else { PromptMode::None }).collect()
            }
        };
        model.lora |= self.mode.uses_lora();
        model.validate()?;
        Ok(model)
    }

    /// Full config as text: every key, each preceded by its description.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let placement = match &self.prompt_placement {
            PromptPlacement::Auto => "auto".to_string(),
            PromptPlacement::Single(m) => m.to_string(),
            PromptPlacement::PerPartition(v) => join(v),
        };
        let partitions = self.prompt_partitions.as_deref().map_or("all".to_string(), join);
        let d = &self.domain;
        let t = &self.train;
        for (key, doc) in KEYS {
            let value = match *key {
                "preset" => continue,
                "domain" => self.domain_name.clone(),
                "mode" => self.mode.to_string(),
                "prompt_mode" => placement.clone(),
                "prompt_partitions" => partitions.clone(),
                "density" => d.density.to_string(),
                "height_offset" => d.height_offset.to_string(),
                "intensity_bias" => d.intensity_bias.to_string(),
                "box_scale" => d.box_scale.to_string(),
                "class_mix" => join(&d.class_mix),
                "epochs" => t.epochs.to_string(),
                "batch_size" => t.batch_size.to_string(),
                "lr" => t.lr.to_string(),
                "prompt_lr" => t.prompt_lr.to_string(),
                "beta1" => t.beta1.to_string(),
                "beta2" => t.beta2.to_string(),
                "adam_eps" => t.adam_eps.to_string(),
                "warmup_frac" => t.warmup_frac.to_string(),
                "fraction" => t.fraction.to_string(),
                k => model_value(&self.model, k),
            };
            let _ = writeln!(out, "# {doc}\n{key} = {value}");
        }
        out
    }
}

fn model_value(m: &ModelConfig, key: &str) -> String {
    let e = &m.extent;
    match key {
        "channels" => m.channels.to_string(),
        "blocks" => m.blocks.to_string(),
        "set_size" => m.set_size.to_string(),
        "heads" => m.heads.to_string(),
        "windows" => m.windows.iter().map(|[a, b]| format!("{a}x{b}")).collect::<Vec<_>>().join(","),
        "prompt_mode" => join(&m.prompt_modes),
        "pool_size" => m.pool.size.to_string(),
        "prompt_length" => m.pool.length.to_string(),
        "top_k" => m.pool.top_k.to_string(),
        "prompt_tokens" => m.prompt_tokens.to_string(),
        "generated_prompts" => m.generated_prompts.to_string(),
        "generator_layers" => m.generator_layers.to_string(),
        "vfe_layers" => m.vfe_layers.to_string(),
        "ffn_hidden" => m.ffn_hidden.to_string(),
        "head_channels" => m.head_channels.to_string(),
        "grid" => join(&[m.grid.dx, m.grid.dy, m.grid.dz]),
        "extent" => join(&[e.x_min, e.x_max, e.y_min, e.y_max, e.z_min, e.z_max]),
        "max_points" => m.max_points.to_string(),
        "ln_eps" => m.ln_eps.to_string(),
        "cos_eps" => m.cos_eps.to_string(),
        "key_pull" => m.key_pull.to_string(),
        "key_pull_weight" => m.key_pull_weight.to_string(),
        "lora" => m.lora.to_string(),
        "lora_rank" => m.lora_rank.to_string(),
        "lora_alpha" => m.lora_alpha.to_string(),
        "seed" => m.seed.to_string(),
        other => unreachable!("not a model key: {other}"),
    }
}

/// Canonical snapshot of a model config: fixed key order, every prompt
/// mode spelled out, shortest round-trip float formatting.
pub fn model_text(m: &ModelConfig) -> String {
    MODEL_KEYS.iter().map(|k| format!("{k} = {}\n", model_value(m, k))).collect()
}

/// Inverse of [`model_text`]; only model keys are accepted.
pub fn parse_model_text(text: &str) -> Result<ModelConfig> {
    for raw in text.lines() {
        if let Some((k, _)) = split_line(raw)? {
            if !MODEL_KEYS.contains(&k.as_str()) {
                return Err(Error::Format(format!("`{k}` is not a model config key")));
            }
        }
    }
    let rc = RunConfig::parse(text)?;
    let mut model = rc.model.clone();
    model.prompt_modes = match rc.prompt_placement {
        PromptPlacement::PerPartition(v) => v,
        PromptPlacement::Single(m) => vec![m; model.num_partitions()],
        PromptPlacement::Auto => vec![PromptMode::None; model.num_partitions()],
    };
    model.validate()?;
    Ok(model)
}
