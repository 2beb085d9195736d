//! Command-line entry points: demos, train, eval, report and serve.
//!
//! Every flag can also be given in a TOML config file under a table named
//! after the command, with the same kebab-case key. Flags win over the file.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::dataset::{generate_demonstrations, Dataset, SampleMode};
use crate::error::{Error, Result};
use crate::evaluation::{self, make_report, EvalReport, EvalRow, ModelPolicy, EVAL_SEED_BASE};
use crate::geometry::WorkspaceFrame;
use crate::model::{Checkpoint, ModelConfig};
use crate::service;
use crate::tasks::{Split, TaskName};
use crate::training::{self, Optimizer, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "tabletop", version, about = "Language-conditioned tabletop pick-and-place")]
pub struct Cli {
    /// TOML file with per-command tables of flag defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate expert demonstrations.
    Demos(DemosArgs),
    /// Train a model and select the best checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint.
    Eval(EvalArgs),
    /// Render report tables.
    Report(ReportArgs),
    /// Start the annotation service.
    Serve(ServeArgs),
}

#[derive(Debug, Clone, Default, clap::Args, Serialize, Deserialize)]
#[serde(default, rename_all = "kebab-case", deny_unknown_fields)]
pub struct DemosArgs {
    #[arg(long)]
    pub task: Option<String>,
    #[arg(long)]
    pub split: Option<String>,
    /// Number of demonstrations.
    #[arg(long)]
    pub n: Option<usize>,
    /// First episode seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Dataset directory; defaults to `data/<task>-<split>`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Pixels per side of the square workspace image.
    #[arg(long)]
    pub frame_size: Option<usize>,
}

#[derive(Debug, Clone, Default, clap::Args, Serialize, Deserialize)]
#[serde(default, rename_all = "kebab-case", deny_unknown_fields)]
pub struct TrainArgs {
    /// single or multi.
    #[arg(long)]
    pub mode: Option<String>,
    /// Comma-separated tasks, read from `<data-root>/<task>-<split>`.
    #[arg(long)]
    pub tasks: Option<String>,
    #[arg(long)]
    pub split: Option<String>,
    #[arg(long)]
    pub data_root: Option<PathBuf>,
    /// Comma-separated dataset directories, instead of --tasks.
    #[arg(long)]
    pub data: Option<String>,
    #[arg(long)]
    pub variant: Option<String>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub augment: Option<bool>,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    /// Validation rollouts per checkpoint and task.
    #[arg(long)]
    pub eval_episodes: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Model initialisation seed.
    #[arg(long)]
    pub model_seed: Option<u64>,
    /// sgd or adam.
    #[arg(long)]
    pub optimizer: Option<String>,
    /// Run directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, clap::Args, Serialize, Deserialize)]
#[serde(default, rename_all = "kebab-case", deny_unknown_fields)]
pub struct EvalArgs {
    /// Checkpoint file, or `best` to use the run directory's selection.
    #[arg(long)]
    pub checkpoint: Option<String>,
    #[arg(long)]
    pub run: Option<PathBuf>,
    #[arg(long)]
    pub task: Option<String>,
    #[arg(long)]
    pub split: Option<String>,
    #[arg(long)]
    pub episodes: Option<usize>,
    #[arg(long)]
    pub seed_base: Option<u64>,
    /// Row label; defaults to the checkpoint's variant.
    #[arg(long)]
    pub variant: Option<String>,
    #[arg(long)]
    pub n_demos: Option<usize>,
    /// Report file to append the row to.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, clap::Args, Serialize, Deserialize)]
#[serde(default, rename_all = "kebab-case", deny_unknown_fields)]
pub struct ReportArgs {
    /// Comma-separated report files.
    #[arg(long)]
    pub input: Option<String>,
    #[arg(long)]
    pub text: Option<PathBuf>,
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, clap::Args, Serialize, Deserialize)]
#[serde(default, rename_all = "kebab-case", deny_unknown_fields)]
pub struct ServeArgs {
    #[arg(long)]
    pub addr: Option<String>,
    /// Directory of `*.ckpt` files offered for overlays.
    #[arg(long)]
    pub checkpoints: Option<PathBuf>,
    /// Dataset directory for human episodes.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub frame_size: Option<usize>,
}

/// Fill unset flags from `table` of the config file.
pub fn merge<A: Serialize + DeserializeOwned>(flags: &A, file: Option<&toml::Table>) -> Result<A> {
    let mut v = serde_json::to_value(flags)?;
    if let (Some(obj), Some(table)) = (v.as_object_mut(), file) {
        let from_file = serde_json::to_value(table)?;
        for (k, x) in from_file.as_object().into_iter().flatten() {
            match obj.get(k) {
                Some(serde_json::Value::Null) => {
                    obj.insert(k.clone(), x.clone());
                }
                Some(_) => {}
                None => return Err(Error::Config(format!("unknown config key {k}"))),
            }
        }
    }
    Ok(serde_json::from_value(v).map_err(|e| Error::Config(e.to_string()))?)
}

fn load_config(path: Option<&Path>) -> Result<toml::Table> {
    match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            Ok(text.parse::<toml::Table>()?)
        }
        None => Ok(toml::Table::new()),
    }
}

fn section<'a>(cfg: &'a toml::Table, name: &str) -> Result<Option<&'a toml::Table>> {
    match cfg.get(name) {
        None => Ok(None),
        Some(toml::Value::Table(t)) => Ok(Some(t)),
        Some(_) => Err(Error::Config(format!("config entry {name} must be a table"))),
    }
}

fn need<T>(x: Option<T>, flag: &str) -> Result<T> {
    x.ok_or_else(|| Error::Config(format!("missing --{flag}")))
}

fn split_of(s: Option<&str>) -> Result<Split> {
    s.unwrap_or("seen").parse()
}

/// Default dataset directory of a task and split.
pub fn dataset_dir(root: &Path, task: TaskName, split: Split) -> PathBuf {
    root.join(format!("{task}-{split}"))
}

/// Parse arguments and run; returns the process exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

pub fn dispatch(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli.config.as_deref())?;
    match &cli.command {
        Command::Demos(a) => demos(&merge(a, section(&cfg, "demos")?)?),
        Command::Train(a) => train(&merge(a, section(&cfg, "train")?)?),
        Command::Eval(a) => eval(&merge(a, section(&cfg, "eval")?)?),
        Command::Report(a) => report(&merge(a, section(&cfg, "report")?)?),
        Command::Serve(a) => serve(&merge(a, section(&cfg, "serve")?)?),
    }
}

fn demos(a: &DemosArgs) -> Result<()> {
    let task: TaskName = need(a.task.as_deref(), "task")?.parse()?;
    let split = split_of(a.split.as_deref())?;
    let n = a.n.unwrap_or(10);
    let frame = WorkspaceFrame::square(a.frame_size.unwrap_or(128));
    let out = a.out.clone().unwrap_or_else(|| dataset_dir(Path::new("data"), task, split));
    let ds = generate_demonstrations(&out, task, split, n, a.seed.unwrap_or(0), &frame)?;
    println!("{} episodes of {task} ({split}) in {}", ds.episodes.len(), out.display());
    Ok(())
}

fn parse_mode(s: Option<&str>) -> Result<SampleMode> {
    match s.unwrap_or("single") {
        "single" => Ok(SampleMode::Single),
        "multi" => Ok(SampleMode::Multi),
        other => Err(Error::Config(format!("unknown mode {other}; expected single or multi"))),
    }
}

fn parse_optimizer(s: Option<&str>) -> Result<Optimizer> {
    match s.unwrap_or("sgd") {
        "sgd" => Ok(Optimizer::Sgd),
        "adam" => Ok(Optimizer::Adam),
        other => Err(Error::Config(format!("unknown optimizer {other}; expected sgd or adam"))),
    }
}

fn list(s: &str) -> Vec<&str> {
    s.split(',').map(str::trim).filter(|x| !x.is_empty()).collect()
}

fn train(a: &TrainArgs) -> Result<()> {
    let mode = parse_mode(a.mode.as_deref())?;
    let split = split_of(a.split.as_deref())?;
    let mut datasets = Vec::new();
    match (&a.tasks, &a.data) {
        (Some(tasks), None) => {
            let root = a.data_root.clone().unwrap_or_else(|| PathBuf::from("data"));
            for t in list(tasks) {
                let task: TaskName = t.parse()?;
                let dir = dataset_dir(&root, task, split);
                let ds = Dataset::load(&dir).map_err(|e| match e {
                    Error::NotFound(_) => Error::NotFound(format!("dataset for task {task} ({split}) at {}", dir.display())),
                    e => e,
                })?;
                datasets.push(ds);
            }
        }
        (None, Some(dirs)) => {
            for d in list(dirs) {
                datasets.push(Dataset::load(Path::new(d))?);
            }
        }
        _ => return Err(Error::Config("give exactly one of --tasks or --data".into())),
    }
    if mode == SampleMode::Single && datasets.len() > 1 {
        log::warn!("single mode over {} datasets samples pairs uniformly across all of them", datasets.len());
    }
    let d = TrainConfig::default();
    let tc = TrainConfig {
        mode,
        iterations: a.iterations.unwrap_or(d.iterations * if mode == SampleMode::Multi { 3 } else { 1 }),
        learning_rate: a.lr.unwrap_or(d.learning_rate),
        batch_size: a.batch_size.unwrap_or(d.batch_size),
        augment: a.augment.unwrap_or(d.augment),
        checkpoint_every: a.checkpoint_every.unwrap_or(d.checkpoint_every),
        eval_episodes: a.eval_episodes.unwrap_or(d.eval_episodes),
        seed: a.seed.unwrap_or(d.seed),
        optimizer: parse_optimizer(a.optimizer.as_deref())?,
    };
    let mut mc = ModelConfig::variant(a.variant.as_deref().unwrap_or("two-stream"))?;
    mc.seed = a.model_seed.unwrap_or(0);
    let out = a.out.clone().unwrap_or_else(|| PathBuf::from("runs/latest"));
    let result = training::train(&tc, &mc, &datasets, Some(&out))?;
    let mut tasks: Vec<(TaskName, Split)> = datasets
        .iter()
        .flat_map(|d| d.episodes.iter().map(|e| (e.task, e.split)))
        .collect();
    tasks.sort();
    tasks.dedup();
    let frame = datasets[0].episodes[0].frame()?;
    let sel = training::select_best_checkpoint(&result.checkpoints, &tasks, tc.eval_episodes.max(1), &frame)?;
    training::write_selection(&out, &result.checkpoints, &sel)?;
    for (task, i) in &sel.best {
        println!("{task}: best checkpoint at step {}", result.checkpoints[*i].step);
    }
    Ok(())
}

fn resolve_checkpoint(a: &EvalArgs, task: TaskName) -> Result<PathBuf> {
    let spec = need(a.checkpoint.as_deref(), "checkpoint")?;
    if spec != "best" {
        return Ok(PathBuf::from(spec));
    }
    let run = a.run.clone().unwrap_or_else(|| PathBuf::from("runs/latest"));
    let per_task = run.join(format!("best_{task}.ckpt"));
    if per_task.exists() {
        Ok(per_task)
    } else {
        Ok(run.join("best.ckpt"))
    }
}

fn eval(a: &EvalArgs) -> Result<()> {
    let task: TaskName = need(a.task.as_deref(), "task")?.parse()?;
    let split = split_of(a.split.as_deref())?;
    let ck = Checkpoint::load(&resolve_checkpoint(a, task)?)?;
    let model = ck.model(None)?;
    let frame = WorkspaceFrame::square(ck.frame.0);
    let variant = a.variant.clone().unwrap_or_else(|| variant_label(&ck.config));
    let row = evaluation::evaluate(
        &mut ModelPolicy { model: &model },
        task,
        split,
        a.episodes.unwrap_or(evaluation::DEFAULT_EPISODES),
        a.seed_base.unwrap_or(EVAL_SEED_BASE),
        &frame,
        &variant,
        a.n_demos.unwrap_or(0),
    )?;
    println!("{task} {split} {variant}: mean {:.1} over {} episodes", row.mean, row.episodes);
    if let Some(p) = &a.report {
        let mut rep = if p.exists() { EvalReport::load(p)? } else { EvalReport::new(Vec::new()) };
        rep.rows.push(row);
        rep.save(p)?;
    }
    Ok(())
}

/// Name of the variant a config came from, or `custom`.
pub fn variant_label(cfg: &ModelConfig) -> String {
    crate::model::VARIANTS
        .iter()
        .find(|v| ModelConfig::variant(v).is_ok_and(|c| ModelConfig { seed: cfg.seed, ..c } == *cfg))
        .map_or_else(|| "custom".to_string(), |v| v.to_string())
}

fn report(a: &ReportArgs) -> Result<()> {
    let mut rows: Vec<EvalRow> = Vec::new();
    for p in list(need(a.input.as_deref(), "input")?) {
        rows.extend(EvalReport::load(Path::new(p))?.rows);
    }
    let (text, json) = make_report(&rows)?;
    print!("{text}");
    if let Some(p) = &a.text {
        std::fs::write(p, &text).map_err(|e| Error::io(p, e))?;
    }
    if let Some(p) = &a.json {
        std::fs::write(p, &json).map_err(|e| Error::io(p, e))?;
    }
    Ok(())
}

fn serve(a: &ServeArgs) -> Result<()> {
    let svc = service::Service::new(
        a.checkpoints.clone().unwrap_or_else(|| PathBuf::from("runs/latest")),
        a.data.clone().unwrap_or_else(|| PathBuf::from("data/human")),
        WorkspaceFrame::square(a.frame_size.unwrap_or(128)),
    );
    service::serve(std::sync::Arc::new(svc), a.addr.as_deref().unwrap_or("127.0.0.1:8765"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_errors_exit_two() {
        assert_eq!(run(["tabletop", "fly"]), 2);
        assert_eq!(run(["tabletop", "demos", "--bogus", "1"]), 2);
    }

    #[test]
    fn flags_override_file() {
        let file: toml::Table = "task = \"towers-of-hanoi-seq\"\nn = 3\n".parse().unwrap();
        let flags = DemosArgs {
            n: Some(7),
            ..Default::default()
        };
        let m = merge(&flags, Some(&file)).unwrap();
        assert_eq!(m.n, Some(7));
        assert_eq!(m.task.as_deref(), Some("towers-of-hanoi-seq"));
        let bad: toml::Table = "colour = 1\n".parse().unwrap();
        assert!(merge(&flags, Some(&bad)).is_err());
    }

    #[test]
    fn variant_labels_round_trip() {
        for v in ["two-stream", "spatial-only", "no-skips"] {
            assert_eq!(variant_label(&ModelConfig::variant(v).unwrap()), v);
        }
    }
}
