use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use hion_core::simulator::{self, HionPolicy, Metrics, Sampling, Scenario, Trajectory};
use hion_core::slmpc::{SlmpcConfig, SlmpcPolicy};
use hion_core::training::{self, write_loss_csv, TrainOutcome};
use hion_core::{Checkpoint, Plant, TmanoController};

use crate::config::{self, CompareFile, ControllerEntry, SimulateFile, TrainFile};
use crate::manifest::ManifestBuilder;
use crate::{Cli, CliError, Command, GlobalArgs};

type CmdResult = Result<(), CliError>;

pub fn run(cli: &Cli) -> CmdResult {
    let g = &cli.global;
    if let Some(n) = g.threads {
        if n == 0 {
            return Err(CliError::Usage(anyhow!("--threads must be at least 1")));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    match &cli.command {
        Command::Train => train(g),
        Command::Finetune { parent } => finetune(g, parent.as_deref()),
        Command::Tpbvp {
            checkpoint,
            x_o,
            x_r,
            n_points,
        } => tpbvp(g, checkpoint, x_o, x_r, *n_points),
        Command::Simulate { checkpoint } => simulate(g, checkpoint.as_deref()),
        Command::Compare => compare(g),
    }
}

fn require_config(g: &GlobalArgs, command: &str) -> Result<PathBuf, CliError> {
    g.config
        .clone()
        .ok_or_else(|| CliError::Usage(anyhow!("`{command}` needs a configuration file (-c/--config)")))
}

fn create_outdir(dir: &Path) -> CmdResult {
    std::fs::create_dir_all(dir)
        .with_context(|| format!("creating output directory {}", dir.display()))
        .map_err(CliError::Runtime)
}

/// Loads a training file and applies the `--seed` override.
fn load_train_file(g: &GlobalArgs, path: &Path) -> Result<TrainFile, CliError> {
    let mut file = config::load_train(path)?;
    if let Some(seed) = g.seed {
        file.train.seed = seed;
    }
    file.cost.validate()?;
    file.train.validate()?;
    Ok(file)
}

fn write_training_outputs(m: &mut ManifestBuilder, out: &TrainOutcome) -> CmdResult {
    out.checkpoint.save(&m.artifact("checkpoint.json"))?;
    write_loss_csv(&m.artifact("train.csv"), &out.history)?;
    if let Some(loss) = &out.checkpoint.final_loss {
        info!("final loss {:.6e}", loss.total);
    }
    Ok(())
}

fn train(g: &GlobalArgs) -> CmdResult {
    let path = require_config(g, "train")?;
    let file = load_train_file(g, &path)?;
    if file.train.finetune_from.is_some() {
        return Err(CliError::Usage(anyhow!(
            "train.finetune_from is set; use `hion finetune` to continue from a checkpoint"
        )));
    }
    let plant = Plant::new(file.system.id).with_terminal_time(file.system.t_f)?;
    let model = file.model.clone().unwrap_or_default();
    let mut rng = ChaCha8Rng::seed_from_u64(file.train.seed);
    let controller = TmanoController::init(plant, file.cost, &model.state_hidden, &model.costate_hidden, &mut rng)?;
    create_outdir(&g.outdir)?;
    let mut m = ManifestBuilder::new("train", Some(&path), &file, Some(file.train.seed), &g.outdir)?;
    info!(
        "training {} / {} with {} parameters for {} epochs",
        file.system.id,
        file.cost.id,
        controller.n_params(),
        file.train.n_epochs
    );
    let out = training::train(controller, &file.train)?;
    write_training_outputs(&mut m, &out)?;
    m.finish()?;
    Ok(())
}

fn finetune(g: &GlobalArgs, parent: Option<&Path>) -> CmdResult {
    let path = require_config(g, "finetune")?;
    let mut file = load_train_file(g, &path)?;
    let parent_path = match (parent, &file.train.finetune_from) {
        (Some(p), _) => p.to_path_buf(),
        (None, Some(p)) => config::resolve(&path, p),
        (None, None) => {
            return Err(CliError::Usage(anyhow!(
                "no parent checkpoint: pass --parent or set train.finetune_from"
            )))
        }
    };
    file.train.finetune_from = Some(parent_path.clone());
    if file.model.is_some() {
        warn!("[model] is ignored when fine-tuning; the parent's architecture is kept");
    }
    let parent_ck = Checkpoint::load(&parent_path)?;
    create_outdir(&g.outdir)?;
    let mut m = ManifestBuilder::new("finetune", Some(&path), &file, Some(file.train.seed), &g.outdir)?;
    let out = training::finetune(&parent_ck, file.system.id, file.cost, file.system.t_f, &file.train)?;
    write_training_outputs(&mut m, &out)?;
    m.finish()?;
    Ok(())
}

#[derive(Serialize)]
struct TpbvpArgs<'a> {
    checkpoint: &'a Path,
    x_o: &'a [f64],
    x_r: &'a [f64],
    n_points: usize,
}

fn tpbvp(g: &GlobalArgs, checkpoint: &Path, x_o: &[f64], x_r: &[f64], n_points: usize) -> CmdResult {
    let ck = Checkpoint::load(checkpoint)?;
    let controller = ck.to_controller()?;
    let traj = simulator::tpbvp(&controller, x_o, x_r, n_points)?;
    create_outdir(&g.outdir)?;
    let args = TpbvpArgs {
        checkpoint,
        x_o,
        x_r,
        n_points,
    };
    let mut m = ManifestBuilder::new("tpbvp", g.config.as_deref(), &args, None, &g.outdir)?;
    traj.write_csv(&m.artifact("tpbvp.csv"))?;
    m.finish()?;
    Ok(())
}

/// A controller ready to be run in closed loop.
enum Loaded {
    Hion(Box<TmanoController>),
    Slmpc(SlmpcConfig),
}

impl Loaded {
    fn from_entry(entry: &ControllerEntry, config_path: &Path) -> Result<Self, CliError> {
        match entry {
            ControllerEntry::Hion { checkpoint, .. } => {
                let ck = Checkpoint::load(&config::resolve(config_path, checkpoint))?;
                Ok(Loaded::Hion(Box::new(ck.to_controller()?)))
            }
            ControllerEntry::Slmpc { .. } => {
                let cfg = entry.slmpc_config().expect("slmpc variant");
                cfg.validate()?;
                Ok(Loaded::Slmpc(cfg))
            }
        }
    }

    fn run(&self, scenario: &Scenario) -> hion_core::Result<(Trajectory, Metrics)> {
        match self {
            Loaded::Hion(c) => simulator::run_closed_loop(&mut HionPolicy::new(c), scenario),
            Loaded::Slmpc(cfg) => simulator::run_closed_loop(&mut SlmpcPolicy::new(scenario.system, *cfg)?, scenario),
        }
    }
}

fn with_sampling(scenario: &Scenario, sampling: Sampling) -> Result<Scenario, CliError> {
    let sc = Scenario {
        sampling,
        ..scenario.clone()
    };
    sc.validate()?;
    Ok(sc)
}

fn simulate(g: &GlobalArgs, checkpoint: Option<&Path>) -> CmdResult {
    let path = require_config(g, "simulate")?;
    let mut file: SimulateFile = config::load(&path)?;
    if let Some(p) = checkpoint {
        match &mut file.controller {
            ControllerEntry::Hion { checkpoint, .. } => {
                *checkpoint = std::path::absolute(p).context("resolving --checkpoint")?;
            }
            ControllerEntry::Slmpc { .. } => {
                return Err(CliError::Usage(anyhow!("--checkpoint only applies to a hion controller")));
            }
        }
    }
    file.scenario.validate()?;
    let samplings = file.controller.samplings(&file.scenario);
    let scenarios = samplings
        .iter()
        .map(|s| with_sampling(&file.scenario, *s))
        .collect::<Result<Vec<_>, _>>()?;
    let loaded = Loaded::from_entry(&file.controller, &path)?;
    create_outdir(&g.outdir)?;
    let mut m = ManifestBuilder::new("simulate", Some(&path), &file, None, &g.outdir)?;
    let mut metrics = Vec::with_capacity(scenarios.len());
    for sc in &scenarios {
        let (traj, met) = loaded.run(sc)?;
        let name = if scenarios.len() == 1 {
            "trajectory.csv".to_string()
        } else {
            format!("trajectory_{}.csv", sc.sampling.label())
        };
        traj.write_csv(&m.artifact(&name))?;
        info!(
            "{} at {}: J = {:.6}, tracking = {:.6}",
            file.controller.label(),
            sc.sampling.label(),
            met.j,
            met.tracking
        );
        metrics.push((format!("{}_{}", file.controller.label(), sc.sampling.label()), met));
    }
    simulator::write_metrics_csv(&m.artifact("metrics.csv"), &metrics)?;
    m.finish()?;
    Ok(())
}

pub const COMPARISON_CSV_HEADER: &str = "label,controller,sampling,J,tracking";

struct ComparisonRow {
    label: String,
    kind: &'static str,
    sampling: String,
    metrics: Metrics,
}

fn compare(g: &GlobalArgs) -> CmdResult {
    let path = require_config(g, "compare")?;
    let file: CompareFile = config::load(&path)?;
    file.scenario.validate()?;
    if file.controllers.is_empty() {
        return Err(CliError::Usage(anyhow!("compare needs at least one [[controller]]")));
    }
    let mut jobs = Vec::new();
    for entry in &file.controllers {
        let loaded = Loaded::from_entry(entry, &path)?;
        let scenarios = entry
            .samplings(&file.scenario)
            .into_iter()
            .map(|s| with_sampling(&file.scenario, s))
            .collect::<Result<Vec<_>, _>>()?;
        jobs.push((entry, loaded, scenarios));
    }
    create_outdir(&g.outdir)?;
    let mut m = ManifestBuilder::new("compare", Some(&path), &file, None, &g.outdir)?;
    let mut rows = Vec::new();
    for (entry, loaded, scenarios) in &jobs {
        for sc in scenarios {
            let (_, metrics) = loaded.run(sc)?;
            rows.push(ComparisonRow {
                label: entry.label().to_string(),
                kind: entry.kind(),
                sampling: sc.sampling.label(),
                metrics,
            });
        }
    }
    rows.sort_by(|a, b| a.metrics.j.total_cmp(&b.metrics.j));

    let mut csv = String::new();
    writeln!(csv, "{COMPARISON_CSV_HEADER}").unwrap();
    for r in &rows {
        writeln!(
            csv,
            "{},{},{},{},{}",
            r.label,
            r.kind,
            r.sampling,
            hion_core::controller::format_f64(r.metrics.j),
            hion_core::controller::format_f64(r.metrics.tracking)
        )
        .unwrap();
    }
    let out = m.artifact("comparison.csv");
    std::fs::write(&out, csv).with_context(|| format!("writing {}", out.display()))?;
    println!("{:<16} {:<8} {:<10} {:>12} {:>12}", "label", "kind", "sampling", "J", "tracking");
    for r in &rows {
        println!(
            "{:<16} {:<8} {:<10} {:>12.6} {:>12.6}",
            r.label, r.kind, r.sampling, r.metrics.j, r.metrics.tracking
        );
    }
    m.finish()?;
    Ok(())
}
