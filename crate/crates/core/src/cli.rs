//! Command-line front end. Exit codes: 0 success, 1 usage error, 2 runtime
//! failure.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::error::{Error, Result};
use crate::fuser::{self, FuserParams, Stream, TokenSet};
use crate::geometry::{self, init_geometry, pretrain_geometry, PretrainOptions, ViewBatch};
use crate::harness::compare::{compare, evaluate, pooled_success, protocol};
use crate::harness::data::build_dataset;
use crate::harness::geodata::{constant_depth_l1, depth_l1, geo_samples, save_geo_sample};
use crate::harness::policy::VlaPolicy;
use crate::harness::report::Table;
use crate::harness::train::{train, LogRow};
use crate::harness::{TrainConfig, Variant, VlaModel};
use crate::numerics::rng::derive;
use crate::numerics::Checkpoint;
use crate::sim::demos::demo_stem;
use crate::sim::{generate_demo, generate_scene, load_demos, save_demo, Demo, Policy, RandomPolicy, ScriptedExpert, Task, World};

pub const SEED_ENV: &str = "GEOVLA_SEED";

#[derive(Parser, Debug)]
#[command(name = "geovla", version, about = "Geometry-fused VLA policy: data, training, evaluation and reports")]
#[command(arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Copy)]
struct SeedArg {
    /// Seed for every random choice; falls back to $GEOVLA_SEED, then 0.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render synthetic scenes and pretrain the geometry encoder on them.
    PretrainGeo {
        #[arg(long, default_value_t = 500)]
        scenes: usize,
        #[arg(long, default_value_t = 2000)]
        steps: usize,
        /// Extra scenes used only to measure held-out depth error.
        #[arg(long, default_value_t = 100)]
        held_out: usize,
        #[arg(long, default_value_t = 8)]
        batch: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        seed: SeedArg,
    },
    /// Record scripted demonstrations.
    GenDemos {
        /// Task id 1-5, a comma list, or `all`.
        #[arg(long, default_value = "all")]
        task: String,
        #[arg(long, default_value_t = 100)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        seed: SeedArg,
    },
    /// Train a baseline or fused policy on recorded demonstrations.
    Train {
        /// `key = value` file; flags below override it.
        #[arg(long)]
        config: Option<PathBuf>,
        /// `baseline` or `fused` [default: fused]
        #[arg(long, value_parser = parse_variant)]
        variant: Option<Variant>,
        /// Directory written by gen-demos.
        #[arg(long)]
        demos: PathBuf,
        /// Geometry checkpoint (stem or directory); required for `fused`.
        #[arg(long)]
        geo: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Total optimiser steps [default: 5000]
        #[arg(long)]
        steps: Option<usize>,
        /// Restrict training to these tasks (per-task mode).
        #[arg(long)]
        tasks: Option<String>,
        /// Let the optimiser update the geometry encoder too.
        #[arg(long)]
        unfreeze_geo: bool,
        /// Drop the residual around the fuser.
        #[arg(long)]
        no_residual: bool,
        #[command(flatten)]
        seed: SeedArg,
    },
    /// Run the evaluation protocol for one policy.
    Eval {
        /// Policy checkpoint (stem or directory).
        #[arg(long, required_unless_present = "policy")]
        checkpoint: Option<PathBuf>,
        /// Built-in policy instead of a checkpoint: `oracle`, `scripted` or `random`.
        #[arg(long, conflicts_with = "checkpoint")]
        policy: Option<String>,
        #[arg(long, default_value = "all")]
        task: String,
        /// Trials per task; defaults to the protocol counts (15/15/15/10/20).
        #[arg(long)]
        trials: Option<usize>,
        /// Output prefix for `<prefix>.csv` and `<prefix>.svg`.
        #[arg(long)]
        report: Option<PathBuf>,
        #[command(flatten)]
        seed: SeedArg,
    },
    /// Evaluate a baseline and a fused checkpoint on identical trials.
    Compare {
        #[arg(long)]
        baseline: PathBuf,
        #[arg(long)]
        fused: PathBuf,
        #[arg(long, default_value = "all")]
        tasks: String,
        #[arg(long)]
        trials: Option<usize>,
        /// Ring score counted as a task-1 success in the pooled figure.
        #[arg(long, default_value_t = 3)]
        min_ring: u8,
        /// Output prefix for `<prefix>.csv` and `<prefix>.svg`.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        seed: SeedArg,
    },
    /// Print and export the fuser's attention weights on one scene.
    InspectFuser {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 1)]
        task: u8,
        /// Stem for a manifest + blob dump of t2d, t3d, fused tokens and attention.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        seed: SeedArg,
    },
    /// Render a results CSV as an SVG bar chart.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        seed: SeedArg,
    },
}

fn parse_variant(s: &str) -> std::result::Result<Variant, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_tasks(s: &str) -> Result<Vec<Task>> {
    if s.trim() == "all" {
        return Ok(Task::ALL.to_vec());
    }
    let mut out = Vec::new();
    for part in s.split(',') {
        let id: u8 = part.trim().parse().map_err(|_| Error::Config(format!("`{part}` is not a task id")))?;
        out.push(Task::from_id(id)?);
    }
    out.sort();
    out.dedup();
    Ok(out)
}

/// `path` itself if it names a stem with a manifest, else `path/<name>`.
fn resolve_stem(path: &Path, name: &str) -> PathBuf {
    if path.is_dir() {
        path.join(name)
    } else {
        path.to_path_buf()
    }
}

fn with_ext(prefix: &Path, ext: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

fn resolve_seed(arg: SeedArg) -> std::result::Result<Option<u64>, Failure> {
    if arg.seed.is_some() {
        return Ok(arg.seed);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Failure::Usage(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

/// Runs the CLI on `args` (program name first) and returns the exit code.
pub fn run<I, S>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{text}");
                    0
                }
                _ => {
                    let _ = write!(err, "{text}");
                    1
                }
            };
        }
    };
    match dispatch(cli.command, out) {
        Ok(()) => 0,
        Err(Failure::Usage(msg)) => {
            let _ = writeln!(err, "error: {msg}");
            1
        }
        Err(Failure::Runtime(e)) => {
            let _ = writeln!(err, "error: {e}");
            2
        }
    }
}

type Outcome = std::result::Result<(), Failure>;

fn dispatch(cmd: Command, out: &mut dyn Write) -> Outcome {
    match cmd {
        Command::PretrainGeo { scenes, steps, held_out, batch, lr, out: dir, seed } => {
            let seed = resolve_seed(seed)?.unwrap_or(0);
            pretrain_geo(scenes, steps, held_out, batch, lr, &dir, seed, out)?
        }
        Command::GenDemos { task, count, out: dir, seed } => {
            let seed = resolve_seed(seed)?.unwrap_or(0);
            let tasks = parse_tasks(&task).map_err(|e| Failure::Usage(e.to_string()))?;
            gen_demos(&tasks, count, &dir, seed, out)?
        }
        Command::Train { config, variant, demos, geo, out: dir, steps, tasks, unfreeze_geo, no_residual, seed } => {
            let mut cfg = match &config {
                Some(p) => TrainConfig::parse_text(&fs::read_to_string(p)?)?,
                None => TrainConfig::default(),
            };
            if let Some(s) = resolve_seed(seed)? {
                cfg.seed = s;
            }
            if let Some(v) = variant {
                cfg.variant = v;
            }
            if let Some(s) = steps {
                cfg.total_steps = s;
                cfg.warmup_steps = cfg.warmup_steps.min(s.saturating_sub(1));
            }
            if let Some(t) = tasks {
                cfg.tasks = parse_tasks(&t).map_err(|e| Failure::Usage(e.to_string()))?;
            }
            cfg.unfreeze_geo |= unfreeze_geo;
            if no_residual {
                cfg.model.fuser_residual = false;
            }
            train_cmd(cfg, &demos, geo.as_deref(), &dir, out)?
        }
        Command::Eval { checkpoint, policy, task, trials, report, seed } => {
            let seed = resolve_seed(seed)?.unwrap_or(0);
            let tasks = parse_tasks(&task).map_err(|e| Failure::Usage(e.to_string()))?;
            let mut p: Box<dyn Policy> = match (checkpoint, policy.as_deref()) {
                (Some(c), _) => Box::new(load_policy(&c)?),
                (None, Some("oracle")) => Box::new(ScriptedExpert::oracle(8)),
                (None, Some("scripted")) => Box::new(ScriptedExpert::new(crate::sim::scripted::DEMO_JITTER, 8)),
                (None, Some("random")) => Box::new(RandomPolicy::new(8)),
                (None, other) => return Err(Failure::Usage(format!("unknown policy {other:?}"))),
            };
            let columns = protocol(&tasks, trials);
            let reports = evaluate(p.as_mut(), &columns, seed)?;
            let mut table = Table::new(columns);
            table.push_reports(&p.name(), &reports)?;
            for r in &reports {
                writeln!(out, "{}: rate {:.2}% mean score {:.3} over {} trials", r.task, r.rate(), r.mean_score(), r.trials())
                    ?;
            }
            emit_table(&table, report.as_deref(), out)?;
        }
        Command::Compare { baseline, fused, tasks, trials, min_ring, out: prefix, seed } => {
            let seed = resolve_seed(seed)?.unwrap_or(0);
            let tasks = parse_tasks(&tasks).map_err(|e| Failure::Usage(e.to_string()))?;
            let (b, _) = VlaModel::from_checkpoint(Checkpoint::load(&resolve_stem(&baseline, "policy"))?)?;
            let (f, _) = VlaModel::from_checkpoint(Checkpoint::load(&resolve_stem(&fused, "policy"))?)?;
            let c = compare(b, f, &protocol(&tasks, trials), seed)?;
            emit_table(&c.table, Some(&prefix), out)?;
            let (pb, pf) = (pooled_success(&c.baseline, min_ring), pooled_success(&c.fused, min_ring));
            writeln!(
                out,
                "pooled success on task1 (ring >= {min_ring}) and task2: baseline {pb:.2}% fused {pf:.2}% margin {:+.2} points",
                pf - pb
            )
            ?;
        }
        Command::InspectFuser { checkpoint, task, out: dump, seed } => {
            let seed = resolve_seed(seed)?.unwrap_or(0);
            let task = Task::from_id(task).map_err(|e| Failure::Usage(e.to_string()))?;
            inspect_fuser(&checkpoint, task, dump.as_deref(), seed, out)?
        }
        Command::Report { input, out: svg, seed } => {
            resolve_seed(seed)?;
            let table = Table::from_csv(&fs::read_to_string(&input)?)?;
            fs::write(&svg, table.to_svg())?;
            writeln!(out, "wrote {} ({} rows)", svg.display(), table.rows.len())?;
        }
    }
    Ok(())
}

fn emit_table(table: &Table, prefix: Option<&Path>, out: &mut dyn Write) -> Result<()> {
    let csv = table.to_csv()?;
    write!(out, "{csv}")?;
    if let Some(prefix) = prefix {
        if let Some(dir) = prefix.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        fs::write(with_ext(prefix, "csv"), &csv)?;
        fs::write(with_ext(prefix, "svg"), table.to_svg())?;
    }
    Ok(())
}

fn load_policy(path: &Path) -> Result<VlaPolicy> {
    let (model, cfg) = VlaModel::from_checkpoint(Checkpoint::load(&resolve_stem(path, "policy"))?)?;
    VlaPolicy::new(model, cfg.variant.to_string())
}

#[allow(clippy::too_many_arguments)]
fn pretrain_geo(
    scenes: usize,
    steps: usize,
    held_out: usize,
    batch: usize,
    lr: f64,
    dir: &Path,
    seed: u64,
    out: &mut dyn Write,
) -> Result<()> {
    let cfg = geometry::GeoConfig::default();
    let train_set = geo_samples(seed, 0..scenes, cfg.patch)?;
    let scene_dir = dir.join("scenes");
    fs::create_dir_all(&scene_dir)?;
    for (i, s) in train_set.iter().enumerate() {
        save_geo_sample(&scene_dir, i, s)?;
    }
    let opts = PretrainOptions { steps, batch, lr, warmup: (steps / 20).max(1), seed };
    let run = pretrain_geometry(&train_set, &cfg, init_geometry(&cfg, seed)?, &opts)?;
    let mut log = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::Format(e.to_string());
    log.write_record(["step", "loss"]).map_err(csv_err)?;
    for (i, l) in run.losses.iter().enumerate() {
        log.write_record([i.to_string(), l.to_string()]).map_err(csv_err)?;
    }
    fs::write(dir.join("pretrain_log.csv"), log.into_inner().map_err(|e| Error::Format(e.to_string()))?)?;
    let mut ckpt = run.checkpoint;
    for (k, v) in [
        ("geo.width", cfg.width),
        ("geo.blocks", cfg.blocks),
        ("geo.heads", cfg.heads),
        ("geo.mlp_hidden", cfg.mlp_hidden),
        ("geo.registers", cfg.registers),
        ("geo.extract_layer", cfg.extract_layer),
    ] {
        ckpt.set_meta(k, v);
    }
    ckpt.set_meta("seed", seed);
    ckpt.save(&dir.join("geometry"))?;
    if held_out > 0 {
        let held = geo_samples(seed, scenes..scenes + held_out, cfg.patch)?;
        let preds = held
            .iter()
            .map(|s| Ok(geometry::encode(&ViewBatch::new(s.images.clone())?, &ckpt, &cfg)?.1.depth))
            .collect::<Result<Vec<_>>>()?;
        let (l1, base) = (depth_l1(&preds, &held), constant_depth_l1(&train_set, &held));
        writeln!(out, "held-out patch depth L1 {l1:.5} vs constant-mean {base:.5} (ratio {:.3})", l1 / base)?;
    }
    if let Some(step) = run.diverged_at {
        return Err(Error::Diverged { step, reason: "non-finite pretraining loss".into() });
    }
    writeln!(out, "wrote {}", dir.join("geometry").display())?;
    Ok(())
}

fn gen_demos(tasks: &[Task], count: usize, dir: &Path, seed: u64, out: &mut dyn Write) -> Result<()> {
    fs::create_dir_all(dir)?;
    for &task in tasks {
        let mut steps = 0;
        for i in 0..count {
            let demo = Demo::from_episode(&generate_demo(task, seed, i, 8)?)?;
            steps += demo.len();
            save_demo(dir, i, &demo)?;
        }
        writeln!(out, "{task}: {count} demos, {steps} steps, last {}", demo_stem(dir, task, count.saturating_sub(1)).display())?;
    }
    Ok(())
}

fn train_cmd(mut cfg: TrainConfig, demos: &Path, geo: Option<&Path>, dir: &Path, out: &mut dyn Write) -> Result<()> {
    let geo_ckpt = match (cfg.variant, geo) {
        (Variant::Fused, None) => return Err(Error::Config("the fused variant needs --geo".into())),
        (Variant::Fused, Some(p)) => {
            let ckpt = Checkpoint::load(&resolve_stem(p, "geometry"))?;
            for (k, v) in ckpt.meta_entries() {
                if k.starts_with("geo.") {
                    cfg.set(k, v)?;
                }
            }
            Some(ckpt)
        }
        (Variant::Baseline, _) => None,
    };
    cfg.validate()?;
    let demos = load_demos(demos)?;
    let mut model = VlaModel::init(&cfg.model, cfg.variant, cfg.seed, geo_ckpt.as_ref())?;
    if cfg.variant == Variant::Fused {
        model.set_geometry_trainable(cfg.unfreeze_geo);
    }
    let data = build_dataset(&model, &demos, &cfg.tasks)?;
    writeln!(out, "{} variant: {} samples from {} demos", cfg.variant, data.len(), demos.len())?;
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.txt"), cfg.to_text())?;
    let mut log = csv::Writer::from_path(dir.join("train_log.csv")).map_err(|e| Error::Format(e.to_string()))?;
    log.write_record(LogRow::HEADER).map_err(|e| Error::Format(e.to_string()))?;
    let mut sink = |r: &LogRow| -> Result<()> {
        log.write_record(r.record()).map_err(|e| Error::Format(e.to_string()))?;
        log.flush()?;
        Ok(())
    };
    let outcome = train(&cfg, &data, model, &mut sink, None);
    log.flush()?;
    let outcome = outcome?;
    let stem = dir.join("policy");
    outcome.model.to_checkpoint(&cfg).save(&stem)?;
    if let Some(last) = outcome.log.rows.last() {
        writeln!(out, "step {} loss {:.5}", last.step, last.loss)?;
    }
    writeln!(out, "wall time {:.1}s", outcome.log.wall_seconds)?;
    if let Some(step) = outcome.diverged_at {
        return Err(Error::Diverged { step, reason: "non-finite loss; saved the last finite parameters".into() });
    }
    writeln!(out, "wrote {}", stem.display())?;
    Ok(())
}

fn inspect_fuser(path: &Path, task: Task, dump: Option<&Path>, seed: u64, out: &mut dyn Write) -> Result<()> {
    let (model, _) = VlaModel::from_checkpoint(Checkpoint::load(&resolve_stem(path, "policy"))?)?;
    if model.variant != Variant::Fused {
        return Err(Error::Config("inspect-fuser needs a fused checkpoint".into()));
    }
    let scene = generate_scene(task, derive(seed, "inspect-scene", &[task.id() as u64]));
    let obs = World::new(scene).observe(false)?;
    let feats = model.features(&obs.images, 1)?.remove(0);
    let views = model.cfg.backbone.views;
    let t3d = feats.t3d.clone().ok_or_else(|| Error::Config("geometry tokens unavailable".into()))?;
    let (d2, d3) = (feats.t2d.last_dim(), t3d.last_dim());
    let t2d = TokenSet::new(feats.t2d.clone().reshaped(&[views, feats.t2d.rows() / views, d2])?, Stream::Visual2D)?;
    let t3d = TokenSet::new(t3d.clone().reshaped(&[views, t3d.rows() / views, d3])?, Stream::Geo3D)?;
    let params = FuserParams::from_bundle(&model.params)?;
    let attn = fuser::attention_map(&t2d, &t3d, &params)?;
    let fused = fuser::fuse_with(&t2d, &t3d, &params, model.cfg.fuser_residual)?;
    let (m2, m3) = (t2d.tokens(), t3d.tokens());
    writeln!(out, "{task}: {views} views, {m2} visual x {m3} geometry tokens")?;
    writeln!(out, "|W_O| = {:.6}", params.w_o.norm_sq().sqrt())?;
    let uniform = (m3 as f64).ln();
    for v in 0..views {
        let a = &attn.data()[v * m2 * m3..(v + 1) * m2 * m3];
        let entropy: f64 =
            a.chunks(m3).map(|r| -r.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>()).sum::<f64>() / m2 as f64;
        let peak = a.chunks(m3).map(|r| r.iter().cloned().fold(0.0, f64::max)).sum::<f64>() / m2 as f64;
        let delta = fused.view(v).max_abs_diff(&t2d.view(v));
        writeln!(
            out,
            "view {v}: mean entropy {entropy:.4} (uniform {uniform:.4}), mean peak weight {peak:.4}, max token change {delta:.6}"
        )?;
    }
    if let Some(stem) = dump {
        let mut b = Checkpoint::new();
        b.set_meta("kind", "fuser-dump");
        b.set_meta("task", task.id());
        b.insert("t2d", t2d.values().clone(), false)?;
        b.insert("t3d", t3d.values().clone(), false)?;
        b.insert("fused", fused.values().clone(), false)?;
        b.insert("attention", attn, false)?;
        b.save(stem)?;
        writeln!(out, "wrote {}", stem.display())?;
    }
    Ok(())
}
