use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use sop2::backbone::{Model, PreparedScene, PromptMode};
use sop2::numkernel::Tape;
use sop2::params::Binder;
use sop2::prompts::PromptPool;
use sop2::tuner::{build_model, count_params, evaluate, mean_loss, scene_gradients, train, TrainLog, TuningMode};
use sop2::{par, Error};

use crate::archive::SceneArchive;
use crate::checkpoint;
use crate::config::RunConfig;
use crate::Failure;

type Result<T> = std::result::Result<T, Failure>;

#[derive(Debug, Parser)]
#[command(name = "sop2", version, about = "Prompt-tuning toolkit for a sparse-voxel point-cloud detector")]
pub struct Cli {
    /// Global seed; overrides `seed` in the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic scene archive.
    GenData(GenData),
    /// Train or fine-tune a model on a scene archive.
    Train(TrainCmd),
    /// Detection metrics of a checkpoint on a scene archive.
    Eval(Eval),
    /// Trainable parameters per group under a tuning mode.
    CountParams(CountParams),
    /// Write per-set features or pool prompt values as CSV.
    ExportEmbeddings(Export),
    /// Train once per value of one hyperparameter and tabulate metrics.
    Sweep(Sweep),
    /// Time forward and training steps per tuning mode.
    Bench(Bench),
    /// Print the fully resolved configuration with every key documented.
    ShowConfig(ShowConfig),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    fn name(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }
}

#[derive(Debug, Args)]
pub struct GenData {
    #[arg(long, value_enum, default_value = "source")]
    pub domain: Domain,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub scenes: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Overwrite an existing file.
    #[arg(long)]
    pub force: bool,
    /// Supplies the extent and any explicit domain knobs.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainCmd {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub mode: Option<TuningMode>,
    /// Source checkpoint whose tensors initialise the model.
    #[arg(long)]
    pub pretrained: Option<PathBuf>,
    #[arg(long)]
    pub fraction: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the per-epoch log here.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct Eval {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
}

#[derive(Debug, Args)]
pub struct CountParams {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub mode: Option<TuningMode>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum What {
    Sets,
    Pools,
}

#[derive(Debug, Args)]
pub struct Export {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Required for `--what sets`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub what: What,
    /// Scene of the archive whose sets are exported.
    #[arg(long, default_value_t = 0)]
    pub scene: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SweepParam {
    #[value(name = "M")]
    M,
    #[value(name = "n_P")]
    NP,
    #[value(name = "K")]
    K,
    #[value(name = "fraction")]
    Fraction,
}

#[derive(Debug, Args)]
pub struct Sweep {
    #[arg(long, value_enum)]
    pub param: SweepParam,
    #[arg(long, value_delimiter = ',', required = true)]
    pub values: Vec<f64>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    /// Metrics are computed here; defaults to the training archive.
    #[arg(long)]
    pub eval_data: Option<PathBuf>,
    #[arg(long)]
    pub mode: Option<TuningMode>,
    #[arg(long)]
    pub pretrained: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct Bench {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Defaults to every mode.
    #[arg(long, value_delimiter = ',')]
    pub modes: Vec<TuningMode>,
    #[arg(long, default_value_t = 3)]
    pub iters: usize,
}

#[derive(Debug, Args)]
pub struct ShowConfig {
    #[arg(long)]
    pub config: Option<PathBuf>,
}

fn run_config(path: Option<&Path>, seed: Option<u64>) -> Result<RunConfig> {
    let rc = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    Ok(match seed {
        Some(s) => rc.with_seed(s),
        None => rc,
    })
}

fn prepare_all(model: &Model, archive: &SceneArchive) -> Result<Vec<PreparedScene>> {
    let scenes = par::map_slice(&archive.scenes, |(pc, labels)| model.prepare(pc, labels));
    Ok(scenes.into_iter().collect::<sop2::Result<_>>()?)
}

/// Builds the model for `rc.mode`, copies pretrained tensors in and trains.
fn fit(rc: &RunConfig, pretrained: Option<&Model>, archive: &SceneArchive) -> Result<(Model, TrainLog)> {
    if rc.mode.needs_pretrained() && pretrained.is_none() {
        return Err(Error::Config(format!(
            "mode {} tunes a frozen source model; pass --pretrained",
            rc.mode
        ))
        .into());
    }
    let mut model = build_model(rc.model_config()?, rc.mode)?;
    if let Some(pre) = pretrained {
        model.adopt(&pre.params)?;
    }
    let scenes = prepare_all(&model, archive)?;
    let log = train(&mut model, &scenes, rc.mode, &rc.train)?;
    Ok((model, log))
}

fn load_pretrained(path: Option<&Path>) -> Result<Option<Model>> {
    Ok(match path {
        Some(p) => Some(checkpoint::load(p, None)?),
        None => None,
    })
}

fn csv_row(out: &mut String, labels: &[usize], values: &[f64]) {
    let cells: Vec<String> = labels
        .iter()
        .map(ToString::to_string)
        .chain(values.iter().map(ToString::to_string))
        .collect();
    out.push_str(&cells.join(","));
    out.push('\n');
}

fn csv_header(labels: &[&str], channels: usize) -> String {
    let mut cols: Vec<String> = labels.iter().map(|s| s.to_string()).collect();
    cols.extend((0..channels).map(|c| format!("c_{c}")));
    cols.join(",") + "\n"
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    let seed = cli.seed;
    match cli.command {
        Command::GenData(a) => {
            if a.out.exists() && !a.force {
                return Err(Failure::Usage(format!(
                    "{} exists; pass --force to overwrite",
                    a.out.display()
                )));
            }
            let rc = run_config(a.config.as_deref(), seed)?.with_domain(a.domain.name())?;
            let archive =
                SceneArchive::generate(rc.model.seed, &rc.domain_name, rc.domain, rc.model.extent, a.scenes as usize)?;
            archive.write(&a.out)?;
            let points: usize = archive.scenes.iter().map(|(pc, _)| pc.points.len()).sum();
            let boxes: usize = archive.scenes.iter().map(|(_, l)| l.boxes.len()).sum();
            writeln!(
                out,
                "wrote {} {} scenes ({points} points, {boxes} boxes) to {}",
                a.scenes,
                rc.domain_name,
                a.out.display()
            )?;
        }
        Command::Train(a) => {
            let mut rc = run_config(a.config.as_deref(), seed)?;
            if let Some(m) = a.mode {
                rc.mode = m;
            }
            if let Some(f) = a.fraction {
                rc.train.fraction = f;
            }
            if let Some(e) = a.epochs {
                rc.train.epochs = e;
            }
            let pre = load_pretrained(a.pretrained.as_deref())?;
            let archive = SceneArchive::read(&a.data)?;
            let (model, log) = fit(&rc, pre.as_ref(), &archive)?;
            checkpoint::save(&model, &a.out)?;
            let text = log.lines();
            if let Some(p) = &a.log {
                std::fs::write(p, &text)?;
            }
            out.write_all(text.as_bytes())?;
            writeln!(
                out,
                "mode={} scenes={}/{} initial_loss={:.6} final_loss={:.6}",
                rc.mode,
                log.scenes.len(),
                archive.scenes.len(),
                log.initial_loss,
                log.final_loss
            )?;
        }
        Command::Eval(a) => {
            let model = checkpoint::load(&a.ckpt, None)?;
            let archive = SceneArchive::read(&a.data)?;
            let scenes = prepare_all(&model, &archive)?;
            let metrics = evaluate(&model, &scenes)?;
            let refs: Vec<&PreparedScene> = scenes.iter().collect();
            let (_, detection) = mean_loss(&model, &refs)?;
            if !detection.is_finite() {
                return Err(Error::Numerical("detection loss".into()).into());
            }
            write!(out, "{}", metrics.table())?;
            writeln!(out, "detection_loss={detection:.6}")?;
        }
        Command::CountParams(a) => {
            let mut rc = run_config(a.config.as_deref(), seed)?;
            if let Some(m) = a.mode {
                rc.mode = m;
            }
            let model = build_model(rc.model_config()?, rc.mode)?;
            write!(out, "{}", count_params(&model, rc.mode)?.table())?;
        }
        Command::ExportEmbeddings(a) => {
            let model = checkpoint::load(&a.ckpt, None)?;
            let c = model.config.channels;
            let text = match a.what {
                What::Sets => {
                    let data = a
                        .data
                        .as_deref()
                        .ok_or_else(|| Failure::Usage("--what sets needs --data".into()))?;
                    let archive = SceneArchive::read(data)?;
                    let (pc, labels) = archive.scenes.get(a.scene).ok_or_else(|| {
                        Failure::Usage(format!("scene {} outside 0..{}", a.scene, archive.scenes.len()))
                    })?;
                    let scene = model.prepare(pc, labels)?;
                    let mut s = csv_header(&["partition", "set"], c);
                    for (j, sets) in model.set_embeddings(&scene)? {
                        for (i, v) in sets.iter().enumerate() {
                            csv_row(&mut s, &[j, i], v);
                        }
                    }
                    s
                }
                What::Pools => {
                    let mut s = csv_header(&["partition", "entry", "slot"], c);
                    let pools: Vec<usize> = (1..=model.config.num_partitions())
                        .filter(|&j| model.config.prompt_mode(j) == PromptMode::Pool)
                        .collect();
                    if pools.is_empty() {
                        return Err(Error::Config("checkpoint has no prompt pools".into()).into());
                    }
                    for j in pools {
                        let values = model.params.value(&PromptPool::values_name(j))?;
                        let [m, n_p, _] = values.shape() else {
                            return Err(Error::Format(format!("pool {j} values are not rank 3")).into());
                        };
                        for e in 0..*m {
                            for slot in 0..*n_p {
                                let at = (e * n_p + slot) * c;
                                csv_row(&mut s, &[j, e, slot], &values.data()[at..at + c]);
                            }
                        }
                    }
                    s
                }
            };
            std::fs::write(&a.out, &text)?;
            writeln!(out, "wrote {} rows to {}", text.lines().count() - 1, a.out.display())?;
        }
        Command::Sweep(a) => {
            let mut rc = run_config(a.config.as_deref(), seed)?;
            if let Some(m) = a.mode {
                rc.mode = m;
            }
            if let Some(e) = a.epochs {
                rc.train.epochs = e;
            }
            let pre = load_pretrained(a.pretrained.as_deref())?;
            let archive = SceneArchive::read(&a.data)?;
            let eval_archive = match &a.eval_data {
                Some(p) => SceneArchive::read(p)?,
                None => archive.clone(),
            };
            let mut values = a.values.clone();
            values.sort_by(f64::total_cmp);
            values.dedup();
            let name = a.param.to_possible_value().expect("named").get_name().to_string();
            let mut report = format!(
                "{name},trainable,initial_loss,final_loss,eval_loss,mean_f1,mean_precision,mean_recall\n"
            );
            for v in values {
                let mut point = rc.clone();
                let count = || -> Result<usize> {
                    if v < 1.0 || v.fract() != 0.0 {
                        return Err(Failure::Usage(format!("{name} takes positive integers, got {v}")));
                    }
                    Ok(v as usize)
                };
                match a.param {
                    SweepParam::M => point.model.pool.size = count()?,
                    SweepParam::NP => point.model.pool.length = count()?,
                    SweepParam::K => point.model.pool.top_k = count()?,
                    SweepParam::Fraction => point.train.fraction = v,
                }
                let (model, log) = fit(&point, pre.as_ref(), &archive)?;
                let trainable = count_params(&model, point.mode)?.trainable;
                let scenes = prepare_all(&model, &eval_archive)?;
                let metrics = evaluate(&model, &scenes)?;
                let refs: Vec<&PreparedScene> = scenes.iter().collect();
                let (_, eval_loss) = mean_loss(&model, &refs)?;
                let _ = writeln!(
                    report,
                    "{v},{trainable},{:.6},{:.6},{eval_loss:.6},{:.6},{:.6},{:.6}",
                    log.initial_loss,
                    log.final_loss,
                    metrics.mean_f1(),
                    metrics.mean_precision(),
                    metrics.mean_recall()
                );
            }
            if let Some(p) = &a.out {
                std::fs::write(p, &report)?;
            }
            out.write_all(report.as_bytes())?;
        }
        Command::Bench(a) => {
            let rc = run_config(a.config.as_deref(), seed)?;
            let modes = if a.modes.is_empty() {
                TuningMode::ALL.to_vec()
            } else {
                a.modes.clone()
            };
            let (pc, labels) = sop2::pointcloud::gen_scene(rc.model.seed, &rc.domain, &rc.model.extent)?;
            let iters = a.iters.max(1);
            writeln!(
                out,
                "{:<18}{:>12}{:>14}{:>14}",
                "mode", "trainable", "forward_ms", "train_step_ms"
            )?;
            for mode in modes {
                let mut point = rc.clone();
                point.mode = mode;
                let model = build_model(point.model_config()?, mode)?;
                let scene = model.prepare(&pc, &labels)?;
                let t = Instant::now();
                for _ in 0..iters {
                    let mut tape = Tape::new();
                    let mut binder = Binder::new(&model.params);
                    model.scene_loss(&mut tape, &mut binder, &scene)?;
                }
                let forward = t.elapsed().as_secs_f64() * 1e3 / iters as f64;
                let t = Instant::now();
                for _ in 0..iters {
                    scene_gradients(&model, &scene)?;
                }
                let step = t.elapsed().as_secs_f64() * 1e3 / iters as f64;
                let trainable = count_params(&model, mode)?.trainable;
                writeln!(out, "{:<18}{trainable:>12}{forward:>14.2}{step:>14.2}", mode.label())?;
            }
        }
        Command::ShowConfig(a) => {
            let rc = run_config(a.config.as_deref(), seed)?;
            rc.model_config()?;
            out.write_all(rc.to_text().as_bytes())?;
        }
    }
    Ok(())
}

/// Parses a CSV written by `export-embeddings` back into label and value
/// columns.
pub fn parse_embedding_csv(text: &str, labels: usize) -> sop2::Result<Vec<(Vec<usize>, Vec<f64>)>> {
    let bad = |line: &str| Error::Format(format!("bad embedding row `{line}`"));
    text.lines()
        .skip(1)
        .map(|line| {
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() < labels {
                return Err(bad(line));
            }
            let l = cells[..labels]
                .iter()
                .map(|c| c.parse().map_err(|_| bad(line)))
                .collect::<sop2::Result<_>>()?;
            let v = cells[labels..]
                .iter()
                .map(|c| c.parse().map_err(|_| bad(line)))
                .collect::<sop2::Result<_>>()?;
            Ok((l, v))
        })
        .collect()
}

