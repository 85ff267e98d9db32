//! Pillar backbone: feature encoder → prompted set-attention blocks → BEV
//! scatter → per-cell detection head, plus the detection loss.
//!
//! Every block runs two partitions (X then Y). A partition attaches its
//! prompts, runs multi-head self-attention over each prompted set, discards
//! the prompt output rows, scatters the voxel rows back and applies the
//! post-norm residual sublayers.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numkernel::{mhsa, AttentionWeights, LinearVars, Tape, Tensor, Var};
use crate::params::{fan_in_weight, param_rng, uniform, Binder, ParamGroup, ParamStore};
use crate::partition::{scatter_back_var, set_partition, PartitionSchedule, SetPartition};
use crate::pointcloud::{voxelize, vfe_forward, Extent, GridSize, PointCloud, SceneLabel, VoxelGrid, NUM_CLASSES, POINT_FEATURES};
use crate::prompts::{
    attach_generated_prompts, attach_none, attach_pool_prompts, attach_prompt_tokens, PoolVars, PromptGenerator,
    PromptPool, PromptToken, PromptedSets,
};

/// Regression channels per cell: `(Δx, Δy, log l, log w, yaw)`.
pub const BOX_PARAMS: usize = 5;
pub const FOCAL_ALPHA: f64 = 0.25;
pub const FOCAL_GAMMA: f64 = 2.0;
/// Initial foreground probability of the class head.
const CLASS_PRIOR: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PromptMode {
    None,
    Token,
    Generator,
    Pool,
}

impl PromptMode {
    pub fn label(self) -> &'static str {
        match self {
            PromptMode::None => "none",
            PromptMode::Token => "token",
            PromptMode::Generator => "generator",
            PromptMode::Pool => "pool",
        }
    }
}

impl fmt::Display for PromptMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for PromptMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "none" => Ok(PromptMode::None),
            "token" => Ok(PromptMode::Token),
            "generator" => Ok(PromptMode::Generator),
            "pool" => Ok(PromptMode::Pool),
            other => Err(Error::config(format!("unknown prompt mode `{other}`"))),
        }
    }
}

/// Pool size `M`, prompt length `n_P` and selection count `K`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolConfig {
    pub size: usize,
    pub length: usize,
    pub top_k: usize,
}

impl Default for PoolConfig {
    fn default() -> Self {
        PoolConfig {
            size: 40,
            length: 5,
            top_k: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub channels: usize,
    pub blocks: usize,
    pub set_size: usize,
    pub heads: usize,
    /// Window `(wx, wy)` per block, cycled.
    pub windows: Vec<[usize; 2]>,
    /// One entry per partition `j = 1..=2·blocks`.
    pub prompt_modes: Vec<PromptMode>,
    pub pool: PoolConfig,
    pub prompt_tokens: usize,
    pub generated_prompts: usize,
    pub generator_layers: usize,
    pub vfe_layers: usize,
    pub ffn_hidden: usize,
    pub head_channels: usize,
    pub grid: GridSize,
    pub extent: Extent,
    pub max_points: usize,
    pub ln_eps: f64,
    pub cos_eps: f64,
    /// Include the key-pull term; keys stay frozen without it.
    pub key_pull: bool,
    pub key_pull_weight: f64,
    /// Wrap every attention projection with a LoRA adapter.
    pub lora: bool,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            channels: 192,
            blocks: 4,
            set_size: 36,
            heads: 8,
            windows: vec![[12, 12], [24, 24]],
            prompt_modes: vec![PromptMode::None; 8],
            pool: PoolConfig::default(),
            prompt_tokens: 1,
            generated_prompts: 1,
            generator_layers: 4,
            vfe_layers: 1,
            ffn_hidden: 384,
            head_channels: 64,
            grid: GridSize::default(),
            extent: Extent::default(),
            max_points: 32,
            ln_eps: 1e-5,
            cos_eps: 1e-8,
            key_pull: true,
            key_pull_weight: 0.1,
            lora: false,
            lora_rank: 4,
            lora_alpha: 8.0,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Published hyperparameters.
    pub fn full() -> Self {
        Self::default()
    }

    /// Laptop-sized variant on a 24×24 map.
    pub fn desk() -> Self {
        ModelConfig {
            channels: 32,
            blocks: 2,
            heads: 4,
            prompt_modes: vec![PromptMode::None; 4],
            ffn_hidden: 64,
            head_channels: 32,
            extent: Extent::square(7.68),
            ..Self::default()
        }
    }

    /// Same mechanism on every partition.
    pub fn with_prompt_mode(mut self, mode: PromptMode) -> Self {
        self.prompt_modes = vec![mode; self.num_partitions()];
        self
    }

    /// `mode` on partitions `js` (1-based) only.
    pub fn with_prompts_on(mut self, mode: PromptMode, js: &[usize]) -> Self {
        self.prompt_modes = (1..=self.num_partitions())
            .map(|j| if js.contains(&j) { mode } else { PromptMode::None })
            .collect();
        self
    }

    pub fn num_partitions(&self) -> usize {
        2 * self.blocks
    }

    pub fn prompt_mode(&self, j: usize) -> PromptMode {
        self.prompt_modes[j - 1]
    }

    pub fn uses(&self, mode: PromptMode) -> bool {
        self.prompt_modes.contains(&mode)
    }

    pub fn schedule(&self) -> PartitionSchedule {
        PartitionSchedule {
            blocks: self.blocks,
            windows: self.windows.clone(),
            set_size: self.set_size,
        }
    }

    pub fn map_dims(&self) -> [usize; 2] {
        self.grid.dims(&self.extent)
    }

    pub fn lora_scale(&self) -> f64 {
        self.lora_alpha / self.lora_rank as f64
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::config(m));
        if self.channels == 0 || self.heads == 0 || self.channels % self.heads != 0 {
            return fail(format!("{} heads must divide {} channels", self.heads, self.channels));
        }
        self.schedule().validate()?;
        if self.prompt_modes.len() != self.num_partitions() {
            return fail(format!(
                "{} prompt modes for {} partitions",
                self.prompt_modes.len(),
                self.num_partitions()
            ));
        }
        if self.uses(PromptMode::Pool) {
            let p = self.pool;
            if p.size == 0 || p.length == 0 || p.top_k == 0 || p.top_k > p.size {
                return fail(format!("pool needs M, n_P ≥ 1 and 1 ≤ K ≤ M, got {p:?}"));
            }
        }
        if self.uses(PromptMode::Generator) && self.generator_layers == 0 {
            return fail("generator needs ≥ 1 layer".into());
        }
        if self.vfe_layers == 0 || self.ffn_hidden == 0 || self.head_channels == 0 || self.max_points == 0 {
            return fail("vfe_layers, ffn_hidden, head_channels and max_points must be ≥ 1".into());
        }
        if self.extent.is_empty() {
            return fail(format!("empty extent {:?}", self.extent));
        }
        if !(self.grid.dx > 0.0 && self.grid.dy > 0.0 && self.grid.dz > 0.0) {
            return fail(format!("grid size must be positive: {:?}", self.grid));
        }
        if !(self.ln_eps > 0.0 && self.cos_eps > 0.0) || self.lora_rank == 0 || !self.lora_alpha.is_finite() {
            return fail("eps values and LoRA rank must be positive".into());
        }
        Ok(())
    }
}

/// Dense bird's-eye-view map `[H×W×C]` with `H` along x.
#[derive(Clone, Debug, PartialEq)]
pub struct BevMap {
    pub dims: [usize; 2],
    pub features: Tensor,
}

impl BevMap {
    pub fn from_voxels(vg: &VoxelGrid, voxel_features: &Tensor) -> Result<Self> {
        if voxel_features.rows() != vg.len() {
            return Err(Error::dim("bev scatter", voxel_features.shape(), &[vg.len()]));
        }
        let c = voxel_features.cols();
        let [h, w] = vg.dims;
        let mut features = Tensor::zeros(&[h, w, c]);
        for (v, cell) in vg.coords.iter().enumerate() {
            let r = cell[0] * w + cell[1];
            features.data_mut()[r * c..(r + 1) * c].copy_from_slice(voxel_features.row(v));
        }
        Ok(BevMap { dims: vg.dims, features })
    }

    pub fn cell(&self, ix: usize, iy: usize) -> &[f64] {
        let c = self.features.cols();
        let r = ix * self.dims[1] + iy;
        &self.features.data()[r * c..(r + 1) * c]
    }
}

/// Source voxel of every BEV cell, row-major `ix · W + iy`.
pub fn bev_index(vg: &VoxelGrid) -> Vec<Option<usize>> {
    let [h, w] = vg.dims;
    let mut index = vec![None; h * w];
    for (v, c) in vg.coords.iter().enumerate() {
        index[c[0] * w + c[1]] = Some(v);
    }
    index
}

/// `[H·W × C]` BEV rows on the tape; empty cells are zero.
pub fn scatter_bev(tape: &mut Tape, voxel_features: Var, vg: &VoxelGrid) -> Result<Var> {
    if tape.value(voxel_features).rows() != vg.len() {
        return Err(Error::dim("bev scatter", tape.value(voxel_features).shape(), &[vg.len()]));
    }
    tape.gather_rows(voxel_features, bev_index(vg).into())
}

/// Per-cell class logits `[H×W×3]` and box regression `[H×W×5]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Detections {
    pub dims: [usize; 2],
    pub logits: Tensor,
    pub regression: Tensor,
}

impl Detections {
    pub fn logit(&self, ix: usize, iy: usize, class: usize) -> f64 {
        self.logits.data()[(ix * self.dims[1] + iy) * NUM_CLASSES + class]
    }

    pub fn is_finite(&self) -> bool {
        self.logits.is_finite() && self.regression.is_finite()
    }
}

/// The two per-cell stacks: `C → h → 3` and `C → h → 5`, ReLU between.
#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    pub cls: [LinearVars; 2],
    pub reg: [LinearVars; 2],
}

/// Logits `[R×3]` and regression `[R×5]` for `R` BEV rows.
pub fn head_forward(tape: &mut Tape, bev: Var, head: &HeadVars) -> Result<(Var, Var)> {
    let mut stack = |layers: &[LinearVars; 2]| -> Result<Var> {
        let h = layers[0].apply(tape, bev)?;
        let h = tape.relu(h);
        layers[1].apply(tape, h)
    };
    let logits = stack(&head.cls)?;
    let regression = stack(&head.reg)?;
    Ok((logits, regression))
}

/// Labels rasterized to their center cells.
#[derive(Clone, Debug, PartialEq)]
pub struct Targets {
    /// `[H·W·3]` one-hot centers.
    pub heatmap: Arc<[f64]>,
    /// Cells holding at least one center, ascending.
    pub positive_cells: Arc<[usize]>,
    /// `BOX_PARAMS` targets per positive cell, taken from its first box.
    pub regression: Arc<[f64]>,
    /// `(cell, class)` of every center, deduplicated, ascending.
    pub centers: Vec<(usize, usize)>,
}

/// Center cell `(ix, iy)` of each box; the regression target is the
/// in-cell offset, log size and yaw.
pub fn rasterize(labels: &SceneLabel, grid: &GridSize, extent: &Extent) -> Targets {
    let [h, w] = grid.dims(extent);
    let mut heatmap = vec![0.0; h * w * NUM_CLASSES];
    let mut first: std::collections::BTreeMap<usize, [f64; BOX_PARAMS]> = Default::default();
    for b in &labels.boxes {
        let fx = (b.cx - extent.x_min) / grid.dx;
        let fy = (b.cy - extent.y_min) / grid.dy;
        if !(fx >= 0.0 && fy >= 0.0) || b.cx > extent.x_max || b.cy > extent.y_max {
            continue;
        }
        let ix = (fx.floor() as usize).min(h - 1);
        let iy = (fy.floor() as usize).min(w - 1);
        let cell = ix * w + iy;
        heatmap[cell * NUM_CLASSES + b.class] = 1.0;
        first
            .entry(cell)
            .or_insert([fx - ix as f64, fy - iy as f64, b.length.ln(), b.width.ln(), b.yaw]);
    }
    let centers = (0..h * w)
        .flat_map(|cell| (0..NUM_CLASSES).map(move |k| (cell, k)))
        .filter(|&(cell, k)| heatmap[cell * NUM_CLASSES + k] == 1.0)
        .collect();
    Targets {
        heatmap: heatmap.into(),
        positive_cells: first.keys().copied().collect(),
        regression: first.values().flatten().copied().collect(),
        centers,
    }
}

/// Focal classification over every cell plus L1 regression at positive
/// cells, both normalized by `max(1, positives)`.
pub fn detection_loss(tape: &mut Tape, logits: Var, regression: Var, targets: &Targets) -> Result<Var> {
    let norm = targets.positive_cells.len().max(1) as f64;
    let cls = tape.focal_loss(logits, targets.heatmap.clone(), FOCAL_ALPHA, FOCAL_GAMMA, norm)?;
    if targets.positive_cells.is_empty() {
        return Ok(cls);
    }
    let reg = tape.l1_rows(regression, targets.positive_cells.clone(), targets.regression.clone(), norm)?;
    tape.add(cls, reg)
}

/// Drop the first `p` rows of every prompted set, keeping `[N·n_s × C]`.
pub fn strip_prompts(tape: &mut Tape, outputs: Var, sets: &PromptedSets, p: usize) -> Result<Var> {
    if p != sets.prompt_rows {
        return Err(Error::wiring(format!(
            "stripping {p} prompt rows from sets carrying {}",
            sets.prompt_rows
        )));
    }
    if tape.value(outputs).rows() != sets.layout.rows() {
        return Err(Error::dim(
            "strip_prompts",
            tape.value(outputs).shape(),
            &[sets.layout.sets, sets.layout.len],
        ));
    }
    if p == 0 {
        return Ok(outputs);
    }
    let len = sets.layout.len;
    let index: Arc<[Option<usize>]> = (0..sets.layout.sets)
        .flat_map(|s| (p..len).map(move |r| Some(s * len + r)))
        .collect();
    tape.gather_rows(outputs, index)
}

/// Voxelized scene with its partitions and targets, reused across epochs.
#[derive(Clone, Debug)]
pub struct PreparedScene {
    pub voxels: VoxelGrid,
    pub partitions: Vec<SetPartition>,
    pub targets: Targets,
    pub labels: SceneLabel,
}

pub fn prepare_scene(config: &ModelConfig, pc: &PointCloud, labels: &SceneLabel) -> Result<PreparedScene> {
    if pc.extent != config.extent {
        return Err(Error::config(format!(
            "scene extent {:?} differs from model extent {:?}",
            pc.extent, config.extent
        )));
    }
    let voxels = voxelize(pc, &config.grid, config.max_points)?;
    let schedule = config.schedule();
    let partitions = (1..=config.num_partitions())
        .map(|j| {
            let spec = schedule.spec(j);
            set_partition(&voxels.coords, voxels.dims, spec.window, spec.axis, config.set_size, j)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PreparedScene {
        targets: rasterize(labels, &config.grid, &config.extent),
        voxels,
        partitions,
        labels: labels.clone(),
    })
}

#[derive(Clone, Debug)]
pub struct PartitionTrace {
    pub index: usize,
    pub output: Var,
    /// Pool entries chosen per set, for pool partitions.
    pub pool_indices: Option<Vec<Vec<usize>>>,
}

#[derive(Clone, Debug)]
pub struct Forward {
    pub voxel_features: Var,
    pub partitions: Vec<PartitionTrace>,
    pub logits: Var,
    pub regression: Var,
    pub key_pulls: Vec<Var>,
}

#[derive(Clone, Copy, Debug)]
pub struct SceneLoss {
    pub total: Var,
    pub detection: Var,
}

fn partition_prefix(j: usize) -> String {
    format!("partition.{j}")
}

pub const ATTENTION_PROJECTIONS: [&str; 4] = ["q", "k", "v", "o"];

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let c = config.channels;
        let seed = config.seed;
        let linear = |store: &mut ParamStore, prefix: &str, dout: usize, din: usize, head: bool| -> Result<()> {
            let mut rng = param_rng(seed, prefix);
            let w = fan_in_weight(dout, din, &mut rng);
            let b = uniform(&[dout], 1.0 / (din as f64).sqrt(), &mut rng);
            let (wg, bg) = if head {
                (ParamGroup::Head, ParamGroup::Head)
            } else {
                (ParamGroup::Backbone, ParamGroup::Bias)
            };
            store.insert(format!("{prefix}.weight"), w, wg)?;
            store.insert(format!("{prefix}.bias"), b, bg)
        };
        for l in 0..config.vfe_layers {
            let din = if l == 0 { POINT_FEATURES } else { c };
            linear(&mut params, &format!("vfe.{l}"), c, din, false)?;
        }
        for j in 1..=config.num_partitions() {
            let p = partition_prefix(j);
            for name in ATTENTION_PROJECTIONS {
                linear(&mut params, &format!("{p}.attn.{name}"), c, c, false)?;
            }
            for ln in ["ln1", "ln2"] {
                params.insert(format!("{p}.{ln}.gamma"), Tensor::ones(&[c]), ParamGroup::Backbone)?;
                params.insert(format!("{p}.{ln}.beta"), Tensor::zeros(&[c]), ParamGroup::Bias)?;
            }
            linear(&mut params, &format!("{p}.ffn.0"), config.ffn_hidden, c, false)?;
            linear(&mut params, &format!("{p}.ffn.1"), c, config.ffn_hidden, false)?;
            match config.prompt_mode(j) {
                PromptMode::None => {}
                PromptMode::Token => PromptToken::init(j, config.prompt_tokens, c, seed).register(&mut params)?,
                PromptMode::Generator => {
                    PromptGenerator::init(j, config.generator_layers, config.generated_prompts, c, seed)?
                        .register(&mut params)?
                }
                PromptMode::Pool => {
                    let pc = config.pool;
                    PromptPool::init(j, pc.size, pc.length, pc.top_k, c, seed)?.register(&mut params)?
                }
            }
        }
        let hc = config.head_channels;
        linear(&mut params, "head.cls.0", hc, c, true)?;
        linear(&mut params, "head.cls.1", NUM_CLASSES, hc, true)?;
        linear(&mut params, "head.reg.0", hc, c, true)?;
        linear(&mut params, "head.reg.1", BOX_PARAMS, hc, true)?;
        let prior = -((1.0 - CLASS_PRIOR) / CLASS_PRIOR).ln();
        params
            .get_mut("head.cls.1.bias")
            .expect("class bias")
            .value = Tensor::full(&[NUM_CLASSES], prior);
        let lora = config.lora;
        let mut model = Model { config, params };
        if lora {
            crate::tuner::wrap_attention(&mut model)?;
        }
        Ok(model)
    }

    /// Prefixes of every attention projection, e.g. `partition.3.attn.q`.
    pub fn attention_prefixes(&self) -> Vec<String> {
        (1..=self.config.num_partitions())
            .flat_map(|j| ATTENTION_PROJECTIONS.map(|n| format!("{}.attn.{n}", partition_prefix(j))))
            .collect()
    }

    /// Copy every same-named, same-shaped tensor from `source`; returns how
    /// many were taken.
    pub fn adopt(&mut self, source: &ParamStore) -> Result<usize> {
        let mut taken = 0;
        for (name, p) in self.params.iter_mut() {
            if let Some(src) = source.get(name) {
                if src.value.shape() != p.value.shape() {
                    return Err(Error::ConfigMismatch {
                        expected: format!("{name} {:?}", p.value.shape()),
                        found: format!("{name} {:?}", src.value.shape()),
                    });
                }
                p.value = src.value.clone();
                taken += 1;
            }
        }
        Ok(taken)
    }

    pub fn prepare(&self, pc: &PointCloud, labels: &SceneLabel) -> Result<PreparedScene> {
        prepare_scene(&self.config, pc, labels)
    }

    fn attach(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        x: Var,
        sp: &SetPartition,
        j: usize,
    ) -> Result<(PromptedSets, Option<Var>, Option<Vec<Vec<usize>>>)> {
        let cfg = &self.config;
        Ok(match cfg.prompt_mode(j) {
            PromptMode::None => (attach_none(tape, x, sp)?, None, None),
            PromptMode::Token => {
                let t = binder.bind(tape, &PromptToken::param_name(j))?;
                (attach_prompt_tokens(tape, x, sp, t, j)?, None, None)
            }
            PromptMode::Generator => {
                let layers = (0..cfg.generator_layers)
                    .map(|l| binder.linear(tape, &PromptGenerator::layer_prefix(j, l), cfg.lora_scale()))
                    .collect::<Result<Vec<_>>>()?;
                let sets = attach_generated_prompts(tape, x, sp, &layers, cfg.generated_prompts, j)?;
                (sets, None, None)
            }
            PromptMode::Pool => {
                let vars = PoolVars {
                    partition: j,
                    keys: binder.bind(tape, &PromptPool::keys_name(j))?,
                    values: binder.bind(tape, &PromptPool::values_name(j))?,
                    top_k: cfg.pool.top_k,
                };
                let att = attach_pool_prompts(tape, x, sp, &vars, cfg.cos_eps)?;
                (att.sets, att.key_pull, Some(att.indices))
            }
        })
    }

    /// One partition: prompts → MHSA → strip → scatter → add & norm → FFN →
    /// add & norm. Per-token sublayers run after the scatter, which leaves
    /// them unchanged since every voxel occupies exactly one slot.
    fn partition_forward(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        x: Var,
        sp: &SetPartition,
        j: usize,
    ) -> Result<(Var, Option<Var>, Option<Vec<Vec<usize>>>)> {
        let cfg = &self.config;
        let p = partition_prefix(j);
        let scale = cfg.lora_scale();
        let v = tape.value(x).rows();
        let (sets, pull, indices) = self.attach(tape, binder, x, sp, j)?;
        let weights = AttentionWeights {
            q: binder.linear(tape, &format!("{p}.attn.q"), scale)?,
            k: binder.linear(tape, &format!("{p}.attn.k"), scale)?,
            v: binder.linear(tape, &format!("{p}.attn.v"), scale)?,
            out: binder.linear(tape, &format!("{p}.attn.o"), scale)?,
        };
        let attended = mhsa(tape, sets.tokens, &sets.layout, &weights, cfg.heads)?;
        let stripped = strip_prompts(tape, attended, &sets, sets.prompt_rows)?;
        let a = scatter_back_var(tape, sp, stripped, v)?;
        let h = tape.add(x, a)?;
        let h = self.norm(tape, binder, h, &format!("{p}.ln1"))?;
        let f = binder.linear(tape, &format!("{p}.ffn.0"), scale)?.apply(tape, h)?;
        let f = tape.gelu(f);
        let f = binder.linear(tape, &format!("{p}.ffn.1"), scale)?.apply(tape, f)?;
        let out = tape.add(h, f)?;
        let out = self.norm(tape, binder, out, &format!("{p}.ln2"))?;
        Ok((out, pull, indices))
    }

    fn norm(&self, tape: &mut Tape, binder: &mut Binder, x: Var, prefix: &str) -> Result<Var> {
        let g = binder.bind(tape, &format!("{prefix}.gamma"))?;
        let b = binder.bind(tape, &format!("{prefix}.beta"))?;
        tape.layer_norm(x, g, b, self.config.ln_eps)
    }

    pub fn forward(&self, tape: &mut Tape, binder: &mut Binder, scene: &PreparedScene) -> Result<Forward> {
        let cfg = &self.config;
        if scene.partitions.len() != cfg.num_partitions() {
            return Err(Error::wiring(format!(
                "scene prepared for {} partitions, model has {}",
                scene.partitions.len(),
                cfg.num_partitions()
            )));
        }
        let vfe = (0..cfg.vfe_layers)
            .map(|l| binder.linear(tape, &format!("vfe.{l}"), cfg.lora_scale()))
            .collect::<Result<Vec<_>>>()?;
        let voxel_features = vfe_forward(tape, &scene.voxels, &vfe)?;
        let mut x = voxel_features;
        let mut partitions = Vec::with_capacity(cfg.num_partitions());
        let mut key_pulls = Vec::new();
        for (sp, j) in scene.partitions.iter().zip(1..) {
            let (out, pull, pool_indices) = self.partition_forward(tape, binder, x, sp, j)?;
            key_pulls.extend(pull);
            partitions.push(PartitionTrace {
                index: j,
                output: out,
                pool_indices,
            });
            x = out;
        }
        let bev = scatter_bev(tape, x, &scene.voxels)?;
        let mut layer = |name: &str| binder.linear(tape, name, cfg.lora_scale());
        let head = HeadVars {
            cls: [layer("head.cls.0")?, layer("head.cls.1")?],
            reg: [layer("head.reg.0")?, layer("head.reg.1")?],
        };
        let (logits, regression) = head_forward(tape, bev, &head)?;
        Ok(Forward {
            voxel_features,
            partitions,
            logits,
            regression,
            key_pulls,
        })
    }

    /// Detection loss plus `λ_key` times the mean key pull over pool
    /// partitions.
    pub fn scene_loss(&self, tape: &mut Tape, binder: &mut Binder, scene: &PreparedScene) -> Result<(Forward, SceneLoss)> {
        let fwd = self.forward(tape, binder, scene)?;
        let detection = detection_loss(tape, fwd.logits, fwd.regression, &scene.targets)?;
        let mut total = detection;
        if self.config.key_pull && !fwd.key_pulls.is_empty() {
            let mut pull = fwd.key_pulls[0];
            for &p in &fwd.key_pulls[1..] {
                pull = tape.add(pull, p)?;
            }
            let pull = tape.affine(pull, self.config.key_pull_weight / fwd.key_pulls.len() as f64, 0.0);
            total = tape.add(detection, pull)?;
        }
        Ok((fwd, SceneLoss { total, detection }))
    }

    pub fn detect(&self, scene: &PreparedScene) -> Result<Detections> {
        let mut tape = Tape::new();
        let mut binder = Binder::new(&self.params);
        let fwd = self.forward(&mut tape, &mut binder, scene)?;
        let [h, w] = scene.voxels.dims;
        Ok(Detections {
            dims: [h, w],
            logits: tape.value(fwd.logits).clone().reshape(&[h, w, NUM_CLASSES])?,
            regression: tape.value(fwd.regression).clone().reshape(&[h, w, BOX_PARAMS])?,
        })
    }

    /// Masked-mean output feature of every set, per partition `j`.
    pub fn set_embeddings(&self, scene: &PreparedScene) -> Result<Vec<(usize, Vec<Vec<f64>>)>> {
        let mut tape = Tape::new();
        let mut binder = Binder::new(&self.params);
        let fwd = self.forward(&mut tape, &mut binder, scene)?;
        Ok(fwd
            .partitions
            .iter()
            .zip(&scene.partitions)
            .map(|(trace, sp)| {
                let x = tape.value(trace.output);
                let sets = sp
                    .members()
                    .iter()
                    .map(|rows| {
                        let mut mean = vec![0.0; x.cols()];
                        for &r in rows {
                            for (m, v) in mean.iter_mut().zip(x.row(r)) {
                                *m += v;
                            }
                        }
                        let n = rows.len().max(1) as f64;
                        mean.iter_mut().for_each(|m| *m /= n);
                        mean
                    })
                    .collect();
                (trace.index, sets)
            })
            .collect())
    }
}
