use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use vispromo::experiments::{ablate, sweep, SweepParam};
use vispromo::report::write_report;
use vispromo::stages;
use vispromo::{RunConfig, RunDir};

#[derive(Parser)]
#[command(name = "vispromo", version, about = "Item-promotion attacks on visually-aware recommenders")]
struct Cli {
    /// Directory that holds named runs.
    #[arg(long, env = "VISPROMO_RUNS", default_value = "runs", global = true)]
    runs_root: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct RunArgs {
    /// Run name (under the runs root) or a path to a run directory.
    #[arg(long, default_value = "default")]
    run: String,
    /// TOML config; stored in the run directory. Defaults to the stored
    /// config, or built-in defaults for a new run.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for every random stream of the run.
    #[arg(long)]
    seed: Option<u64>,
    /// Override a config value, e.g. `--set attack.steps=30` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Build the dataset, split and target list.
    Prepare(RunArgs),
    /// Pretrain the feature extractor and train the recommenders.
    TrainRec {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        weight_decay: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
    },
    /// Train the denoising network on the clean item images.
    TrainDiffusion(RunArgs),
    /// Cluster item features for reference selection.
    Cluster(RunArgs),
    /// Generate AIP and IPDGI adversarial images for every target.
    Attack(RunArgs),
    /// Score all conditions and write the metrics report.
    Evaluate(RunArgs),
    /// Every stage followed by the report.
    Run(RunArgs),
    /// Vary one attack hyper-parameter with the others at their defaults.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_enum)]
        param: SweepParam,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
    },
    /// Compare full IPDGI with its two ablations.
    Ablate(RunArgs),
    /// Render Markdown tables and SVG figures from finished stages.
    Report(RunArgs),
}

fn apply_override(doc: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec.split_once('=').with_context(|| format!("override `{spec}` is not KEY=VALUE"))?;
    let value: toml::Value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let mut parts: Vec<&str> = key.trim().split('.').collect();
    let last = parts.pop().context("empty override key")?;
    let mut table = doc;
    for p in parts {
        table = table
            .entry(p)
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .with_context(|| format!("`{p}` is not a section"))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

fn open_run(root: &std::path::Path, args: &RunArgs, extra: &[String]) -> Result<RunDir> {
    let dir = if args.run.contains(std::path::MAIN_SEPARATOR) || args.run.starts_with('.') {
        PathBuf::from(&args.run)
    } else {
        root.join(&args.run)
    };
    let stored = dir.join(vispromo::rundir::CONFIG_FILE);
    let base = match (&args.config, stored.exists()) {
        (Some(path), _) => RunConfig::load(path)?,
        (None, true) => RunConfig::load(&stored)?,
        (None, false) => RunConfig::default(),
    };
    let mut doc: toml::Table = toml::from_str(&base.to_toml()?)?;
    for spec in args.overrides.iter().chain(extra) {
        apply_override(&mut doc, spec)?;
    }
    if let Some(seed) = args.seed {
        doc.insert("seed".into(), toml::Value::Integer(seed as i64));
    }
    let cfg = RunConfig::from_toml_str(&toml::to_string(&doc)?)?;
    RunDir::create(&dir, cfg)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn execute(cli: Cli) -> Result<()> {
    let root = cli.runs_root;
    match cli.command {
        Command::Prepare(a) => drop(stages::prepare(&mut open_run(&root, &a, &[])?)?),
        Command::TrainRec { run, epochs, lr, weight_decay, batch_size } => {
            let mut extra = Vec::new();
            if let Some(e) = epochs {
                for m in ["vbpr", "dvbpr", "amr"] {
                    extra.push(format!("recommender.{m}_epochs={e}"));
                }
            }
            if let Some(v) = lr {
                extra.push(format!("recommender.lr={v:e}"));
            }
            if let Some(v) = weight_decay {
                extra.push(format!("recommender.weight_decay={v:e}"));
            }
            if let Some(v) = batch_size {
                extra.push(format!("recommender.batch_size={v}"));
            }
            stages::train_rec(&mut open_run(&root, &run, &extra)?)?;
        }
        Command::TrainDiffusion(a) => drop(stages::train_diffusion(&mut open_run(&root, &a, &[])?)?),
        Command::Cluster(a) => drop(stages::cluster(&mut open_run(&root, &a, &[])?)?),
        Command::Attack(a) => drop(stages::attack(&mut open_run(&root, &a, &[])?)?),
        Command::Evaluate(a) => drop(stages::evaluate(&mut open_run(&root, &a, &[])?)?),
        Command::Run(a) => {
            let mut run = open_run(&root, &a, &[])?;
            stages::evaluate(&mut run)?;
            let files = write_report(&mut run)?;
            println!("report written: {}", files.join(", "));
        }
        Command::Sweep { run, param, values } => {
            let mut run = open_run(&root, &run, &[])?;
            let report = sweep(&mut run, param, &values)?;
            for p in &report.points {
                println!("{} = {}: mean ER@5 {:.5}, FID {:.4}", param.key(), p.value, p.mean_er, p.fid);
            }
        }
        Command::Ablate(a) => {
            let mut run = open_run(&root, &a, &[])?;
            let report = ablate(&mut run)?;
            for row in &report.rows {
                println!("{:<22} {:?}", row.setting, row.er);
            }
        }
        Command::Report(a) => {
            let mut run = open_run(&root, &a, &[])?;
            let files = write_report(&mut run)?;
            println!("report written: {}", files.join(", "));
        }
    }
    Ok(())
}
