//! Tuning modes, parameter freezing, LoRA injection, trainable-parameter
//! accounting, the Adam optimizer and the desk-scale train/evaluate loops.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{Detections, Model, PreparedScene, PromptMode, Targets};
use crate::error::{Error, Result};
use crate::numkernel::{Tape, Tensor};
use crate::par;
use crate::params::{fan_in_weight, param_rng, Binder, ParamGroup, ParamStore};
use crate::pointcloud::NUM_CLASSES;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TuningMode {
    FromScratch,
    HeadFinetune,
    FullFinetune,
    Bitfit,
    Lora,
    PromptToken,
    PromptGenerator,
    Sop2,
    Sop2PlusLora,
}

impl TuningMode {
    pub const ALL: [TuningMode; 9] = [
        TuningMode::FromScratch,
        TuningMode::HeadFinetune,
        TuningMode::FullFinetune,
        TuningMode::Bitfit,
        TuningMode::Lora,
        TuningMode::PromptToken,
        TuningMode::PromptGenerator,
        TuningMode::Sop2,
        TuningMode::Sop2PlusLora,
    ];

    pub fn label(self) -> &'static str {
        match self {
            TuningMode::FromScratch => "from_scratch",
            TuningMode::HeadFinetune => "head_finetune",
            TuningMode::FullFinetune => "full_finetune",
            TuningMode::Bitfit => "bitfit",
            TuningMode::Lora => "lora",
            TuningMode::PromptToken => "prompt_token",
            TuningMode::PromptGenerator => "prompt_generator",
            TuningMode::Sop2 => "sop2",
            TuningMode::Sop2PlusLora => "sop2_plus_lora",
        }
    }

    /// Prompt mechanism the mode tunes.
    pub fn prompt_mode(self) -> PromptMode {
        match self {
            TuningMode::PromptToken => PromptMode::Token,
            TuningMode::PromptGenerator => PromptMode::Generator,
            TuningMode::Sop2 | TuningMode::Sop2PlusLora => PromptMode::Pool,
            _ => PromptMode::None,
        }
    }

    pub fn uses_lora(self) -> bool {
        matches!(self, TuningMode::Lora | TuningMode::Sop2PlusLora)
    }

    /// Every mode except training from scratch starts from a source model.
    pub fn needs_pretrained(self) -> bool {
        self != TuningMode::FromScratch
    }

    pub fn trains_everything(self) -> bool {
        matches!(self, TuningMode::FromScratch | TuningMode::FullFinetune)
    }

    fn trains(self, group: ParamGroup) -> bool {
        use ParamGroup as G;
        if self.trains_everything() || group == G::Head {
            return true;
        }
        match self {
            TuningMode::Bitfit => group == G::Bias,
            TuningMode::Lora => group == G::Lora,
            TuningMode::PromptToken => group == G::PromptToken,
            TuningMode::PromptGenerator => group == G::Generator,
            TuningMode::Sop2 => group == G::Pool,
            TuningMode::Sop2PlusLora => matches!(group, G::Pool | G::Lora),
            _ => false,
        }
    }
}

impl fmt::Display for TuningMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for TuningMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        Self::ALL
            .into_iter()
            .find(|m| m.label() == s)
            .ok_or_else(|| Error::config(format!("unknown tuning mode `{s}`")))
    }
}

/// Flag which tensors receive gradients under `mode`.
pub fn set_trainable(model: &mut Model, mode: TuningMode) -> Result<()> {
    let required: &[(ParamGroup, &str)] = match mode {
        TuningMode::Lora => &[(ParamGroup::Lora, "LoRA adapters")],
        TuningMode::PromptToken => &[(ParamGroup::PromptToken, "prompt tokens")],
        TuningMode::PromptGenerator => &[(ParamGroup::Generator, "prompt generators")],
        TuningMode::Sop2 => &[(ParamGroup::Pool, "prompt pools")],
        TuningMode::Sop2PlusLora => &[(ParamGroup::Pool, "prompt pools"), (ParamGroup::Lora, "LoRA adapters")],
        _ => &[],
    };
    for (group, what) in required {
        if !model.params.iter().any(|(_, p)| p.group == *group) {
            return Err(Error::config(format!("mode {mode} needs {what}, but the model has none")));
        }
    }
    let freeze_keys = !model.config.key_pull;
    for (name, p) in model.params.iter_mut() {
        p.trainable = mode.trains(p.group) && !(freeze_keys && p.group == ParamGroup::Pool && name.ends_with(".keys"));
    }
    Ok(())
}

/// Add `{prefix}.lora_a` `[r×in]` and zero `{prefix}.lora_b` `[out×r]` next to
/// `{prefix}.weight`.
pub fn lora_wrap(store: &mut ParamStore, prefix: &str, rank: usize, seed: u64) -> Result<()> {
    let w = store.value(&format!("{prefix}.weight"))?;
    let (dout, din) = match w.shape() {
        [o, i] => (*o, *i),
        s => return Err(Error::dim("lora_wrap", s, &[0, 0])),
    };
    if rank == 0 || rank > dout.min(din) {
        return Err(Error::config(format!(
            "LoRA rank {rank} must lie in 1..={} for a {dout}×{din} layer",
            dout.min(din)
        )));
    }
    let a_name = format!("{prefix}.lora_a");
    let a = fan_in_weight(rank, din, &mut param_rng(seed, &a_name));
    store.insert(a_name, a, ParamGroup::Lora)?;
    store.insert(format!("{prefix}.lora_b"), Tensor::zeros(&[dout, rank]), ParamGroup::Lora)
}

/// Wrap the Q, K, V and output projections of every attention module.
pub fn wrap_attention(model: &mut Model) -> Result<()> {
    let (rank, seed) = (model.config.lora_rank, model.config.seed);
    for prefix in model.attention_prefixes() {
        lora_wrap(&mut model.params, &prefix, rank, seed)?;
    }
    Ok(())
}

/// Build the model a mode needs: the prompt mechanism on every partition
/// plus LoRA adapters where required.
pub fn build_model(mut config: crate::backbone::ModelConfig, mode: TuningMode) -> Result<Model> {
    if mode.prompt_mode() != PromptMode::None && !config.uses(mode.prompt_mode()) {
        config = config.with_prompt_mode(mode.prompt_mode());
    }
    config.lora |= mode.uses_lora();
    let mut model = Model::new(config)?;
    set_trainable(&mut model, mode)?;
    Ok(model)
}

/// Trainable scalars per group under one mode.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamReport {
    pub mode: TuningMode,
    pub groups: Vec<(ParamGroup, usize)>,
    pub trainable: usize,
    pub total: usize,
}

impl ParamReport {
    pub fn group(&self, g: ParamGroup) -> usize {
        self.groups.iter().find(|(k, _)| *k == g).map_or(0, |(_, n)| *n)
    }

    /// Fixed-order table for humans.
    pub fn table(&self) -> String {
        let mut s = format!("mode        {}\n", self.mode);
        for (g, n) in &self.groups {
            s.push_str(&format!("{:<11} {n:>12}\n", g.label()));
        }
        s.push_str(&format!("{:<11} {:>12}\n", "trainable", self.trainable));
        s.push_str(&format!("{:<11} {:>12}\n", "total", self.total));
        s
    }

    /// `key=value` lines in the same order.
    pub fn key_values(&self) -> String {
        let mut s = format!("mode={}\n", self.mode);
        for (g, n) in &self.groups {
            s.push_str(&format!("{}={n}\n", g.label()));
        }
        s.push_str(&format!("trainable={}\ntotal={}\n", self.trainable, self.total));
        s
    }
}

/// Count trainable scalars of `model` as flagged for `mode`.
pub fn count_params(model: &Model, mode: TuningMode) -> Result<ParamReport> {
    let mut flagged = Model {
        config: model.config.clone(),
        params: model.params.clone(),
    };
    set_trainable(&mut flagged, mode)?;
    let groups = ParamGroup::ALL
        .iter()
        .map(|&g| {
            let n = flagged
                .params
                .iter()
                .filter(|(_, p)| p.group == g && p.trainable)
                .map(|(_, p)| p.value.numel())
                .sum();
            (g, n)
        })
        .collect();
    Ok(ParamReport {
        mode,
        groups,
        trainable: flagged.params.trainable_numel(),
        total: flagged.params.iter().map(|(_, p)| p.value.numel()).sum(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Peak rate for free prompt embeddings (pool keys/values, prompt
    /// tokens); follows the same schedule as `lr`.
    pub prompt_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub warmup_frac: f64,
    pub fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 1,
            lr: 1e-3,
            prompt_lr: 5e-2,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            warmup_frac: 0.05,
            fraction: 1.0,
            seed: 0,
        }
    }
}

/// Linear warmup over the first `warmup_frac` of steps, then cosine decay
/// towards zero.
pub fn learning_rate(cfg: &TrainConfig, step: usize, total: usize) -> f64 {
    let warmup = (cfg.warmup_frac * total as f64).ceil() as usize;
    if step < warmup {
        return cfg.lr * (step + 1) as f64 / warmup as f64;
    }
    let span = (total - warmup).max(1) as f64;
    let progress = (step - warmup) as f64 / span;
    cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

fn is_prompt_embedding(group: ParamGroup) -> bool {
    matches!(group, ParamGroup::Pool | ParamGroup::PromptToken)
}

#[derive(Clone, Debug, Default)]
pub struct Adam {
    moments: HashMap<String, (Tensor, Tensor)>,
    steps: u64,
}

impl Adam {
    pub fn new() -> Self {
        Self::default()
    }

    /// One bias-corrected update of every tensor in `grads`; `lr` is the
    /// scheduled base rate, rescaled to `prompt_lr` for prompt embeddings.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(String, Tensor)], lr: f64, cfg: &TrainConfig) -> Result<()> {
        self.steps += 1;
        let t = self.steps as i32;
        let (c1, c2) = (1.0 - cfg.beta1.powi(t), 1.0 - cfg.beta2.powi(t));
        for (name, g) in grads {
            let p = store
                .get_mut(name)
                .ok_or_else(|| Error::wiring(format!("gradient for unknown tensor `{name}`")))?;
            if !p.trainable {
                return Err(Error::wiring(format!("gradient for frozen tensor `{name}`")));
            }
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (Tensor::zeros(g.shape()), Tensor::zeros(g.shape())));
            let lr = if is_prompt_embedding(p.group) { lr * cfg.prompt_lr / cfg.lr } else { lr };
            let params = p.value.data_mut();
            for (((w, &gi), mi), vi) in params.iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
                *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
                *w -= lr * (*mi / c1) / ((*vi / c2).sqrt() + cfg.adam_eps);
            }
        }
        Ok(())
    }
}

/// `ceil(fraction · n)` scene indices drawn by a seeded shuffle, ascending.
pub fn select_fraction(n: usize, fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::config(format!("fraction {fraction} must lie in (0, 1]")));
    }
    let k = ((fraction * n as f64) - 1e-9).ceil().max(0.0) as usize;
    let k = k.min(n);
    if k == 0 {
        return Err(Error::config("empty training subset"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut picked = order[..k].to_vec();
    picked.sort_unstable();
    Ok(picked)
}

/// Losses and gradients of one scene.
pub struct SceneGrad {
    pub total: f64,
    pub detection: f64,
    pub grads: Vec<(String, Tensor)>,
}

pub fn scene_gradients(model: &Model, scene: &PreparedScene) -> Result<SceneGrad> {
    let mut tape = Tape::new();
    let mut binder = Binder::new(&model.params);
    let (_, loss) = model.scene_loss(&mut tape, &mut binder, scene)?;
    let total = tape.value(loss.total).item();
    let detection = tape.value(loss.detection).item();
    if !total.is_finite() {
        return Err(Error::Numerical("loss".into()));
    }
    let mut grads = tape.backward(loss.total)?;
    Ok(SceneGrad {
        total,
        detection,
        grads: binder.collect(&mut grads),
    })
}

/// Mean `(total, detection)` loss over scenes, without updates.
pub fn mean_loss(model: &Model, scenes: &[&PreparedScene]) -> Result<(f64, f64)> {
    let losses = par::map_slice(scenes, |s| -> Result<(f64, f64)> {
        let mut tape = Tape::new();
        let mut binder = Binder::new(&model.params);
        let (_, loss) = model.scene_loss(&mut tape, &mut binder, s)?;
        Ok((tape.value(loss.total).item(), tape.value(loss.detection).item()))
    });
    let n = scenes.len().max(1) as f64;
    let (mut t, mut d) = (0.0, 0.0);
    for l in losses {
        let (a, b) = l?;
        t += a;
        d += b;
    }
    if !(t.is_finite() && d.is_finite()) {
        return Err(Error::Numerical("loss".into()));
    }
    Ok((t / n, d / n))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub detection: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainLog {
    pub mode: TuningMode,
    pub seed: u64,
    pub scenes: Vec<usize>,
    pub records: Vec<EpochRecord>,
    /// Mean detection loss over the subset before the first step.
    pub initial_loss: f64,
    pub final_loss: f64,
}

impl TrainLog {
    /// One line per epoch: `epoch loss lr mode seed`, tab-separated.
    pub fn lines(&self) -> String {
        self.records
            .iter()
            .map(|r| {
                format!(
                    "epoch={}\tloss={:.9}\tdetection={:.9}\tlr={:.6e}\tmode={}\tseed={}\n",
                    r.epoch, r.loss, r.detection, r.lr, self.mode, self.seed
                )
            })
            .collect()
    }
}

/// Train the tensors `mode` flags on a seeded `fraction` of `scenes`.
pub fn train(model: &mut Model, scenes: &[PreparedScene], mode: TuningMode, cfg: &TrainConfig) -> Result<TrainLog> {
    if cfg.batch_size == 0 {
        return Err(Error::config("batch size must be ≥ 1"));
    }
    let subset = select_fraction(scenes.len(), cfg.fraction, cfg.seed)?;
    set_trainable(model, mode)?;
    let chosen: Vec<&PreparedScene> = subset.iter().map(|&i| &scenes[i]).collect();
    let (_, initial_loss) = mean_loss(model, &chosen)?;
    let steps_per_epoch = chosen.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * steps_per_epoch;
    let mut adam = Adam::new();
    let mut records = Vec::with_capacity(cfg.epochs);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..chosen.len()).collect();
        order.shuffle(&mut rng);
        let (mut loss_sum, mut det_sum, mut lr) = (0.0, 0.0, 0.0);
        for batch in order.chunks(cfg.batch_size) {
            let members: Vec<&PreparedScene> = batch.iter().map(|&i| chosen[i]).collect();
            let results = par::map_slice(&members, |s| scene_gradients(model, s));
            let mut summed: IndexMap<String, Tensor> = IndexMap::new();
            for r in results {
                let r = r?;
                loss_sum += r.total;
                det_sum += r.detection;
                for (name, g) in r.grads {
                    match summed.get_mut(&name) {
                        Some(acc) => acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b),
                        None => {
                            summed.insert(name, g);
                        }
                    }
                }
            }
            let scale = 1.0 / batch.len() as f64;
            let summed: Vec<(String, Tensor)> = summed
                .into_iter()
                .map(|(name, mut g)| {
                    g.data_mut().iter_mut().for_each(|v| *v *= scale);
                    (name, g)
                })
                .collect();
            lr = learning_rate(cfg, step, total_steps);
            adam.step(&mut model.params, &summed, lr, cfg)?;
            if let Some(name) = model.params.find_non_finite() {
                return Err(Error::Numerical(name.to_string()));
            }
            step += 1;
        }
        let n = chosen.len() as f64;
        records.push(EpochRecord {
            epoch,
            loss: loss_sum / n,
            detection: det_sum / n,
            lr,
        });
    }
    let (_, final_loss) = mean_loss(model, &chosen)?;
    Ok(TrainLog {
        mode,
        seed: cfg.seed,
        scenes: subset,
        records,
        initial_loss,
        final_loss,
    })
}

/// Bytes of every frozen tensor, in store order.
pub fn frozen_bytes(store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::new();
    for (name, p) in store.iter().filter(|(_, p)| !p.trainable) {
        out.extend_from_slice(name.as_bytes());
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ClassMetrics {
    /// Predicted cells with a same-class center within one cell.
    pub true_positives: usize,
    pub predictions: usize,
    /// Centers with a same-class prediction within one cell.
    pub hits: usize,
    pub labels: usize,
}

impl ClassMetrics {
    /// 1 when nothing was predicted and nothing was expected.
    pub fn precision(&self) -> f64 {
        match self.predictions {
            0 => f64::from(u8::from(self.labels == 0)),
            p => self.true_positives as f64 / p as f64,
        }
    }

    pub fn recall(&self) -> f64 {
        match self.labels {
            0 => f64::from(u8::from(self.predictions == 0)),
            l => self.hits as f64 / l as f64,
        }
    }

    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Metrics {
    pub classes: [ClassMetrics; NUM_CLASSES],
}

impl Metrics {
    pub fn mean_f1(&self) -> f64 {
        self.classes.iter().map(ClassMetrics::f1).sum::<f64>() / NUM_CLASSES as f64
    }

    pub fn mean_precision(&self) -> f64 {
        self.classes.iter().map(ClassMetrics::precision).sum::<f64>() / NUM_CLASSES as f64
    }

    pub fn mean_recall(&self) -> f64 {
        self.classes.iter().map(ClassMetrics::recall).sum::<f64>() / NUM_CLASSES as f64
    }

    /// Accumulate one scene: a cell predicts class `k` when its logit is
    /// positive (σ > 0.5).
    pub fn add_scene(&mut self, det: &Detections, targets: &Targets) {
        let [h, w] = det.dims;
        let near = |a: usize, b: usize| {
            let (ax, ay, bx, by) = (a / w, a % w, b / w, b % w);
            ax.abs_diff(bx) <= 1 && ay.abs_diff(by) <= 1
        };
        for k in 0..NUM_CLASSES {
            let predicted: Vec<usize> = (0..h * w).filter(|&c| det.logits.data()[c * NUM_CLASSES + k] > 0.0).collect();
            let centers: Vec<usize> = targets.centers.iter().filter(|(_, c)| *c == k).map(|(cell, _)| *cell).collect();
            let m = &mut self.classes[k];
            m.predictions += predicted.len();
            m.labels += centers.len();
            m.true_positives += predicted.iter().filter(|&&p| centers.iter().any(|&c| near(p, c))).count();
            m.hits += centers.iter().filter(|&&c| predicted.iter().any(|&p| near(p, c))).count();
        }
    }

    pub fn table(&self) -> String {
        let mut s = String::from("class       precision  recall     f1\n");
        for (k, m) in self.classes.iter().enumerate() {
            s.push_str(&format!(
                "{:<11} {:<10.4} {:<10.4} {:.4}\n",
                crate::pointcloud::CLASS_NAMES[k],
                m.precision(),
                m.recall(),
                m.f1()
            ));
        }
        s.push_str(&format!(
            "{:<11} {:<10.4} {:<10.4} {:.4}\n",
            "mean",
            self.mean_precision(),
            self.mean_recall(),
            self.mean_f1()
        ));
        s
    }
}

pub fn evaluate(model: &Model, scenes: &[PreparedScene]) -> Result<Metrics> {
    let dets = par::map_slice(scenes, |s| model.detect(s));
    let mut metrics = Metrics::default();
    for (det, scene) in dets.into_iter().zip(scenes) {
        metrics.add_scene(&det?, &scene.targets);
    }
    Ok(metrics)
}
