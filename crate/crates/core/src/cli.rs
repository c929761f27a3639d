//! Command-line front end: `generate`, `train`, `evaluate`, `ablate`, `visualize`.
//!
//! Exit codes:
//!
//! | code | meaning |
//! |------|---------|
//! | 0 | success |
//! | 1 | internal or I/O error |
//! | 2 | usage error (unknown flag or subcommand) |
//! | 3 | invalid configuration |
//! | 4 | missing or malformed dataset |
//! | 5 | unreadable or incompatible checkpoint |
//! | 6 | training aborted on a non-finite loss |
//! | 7 | run directory locked by another process |
//!
//! Failures print exactly one line to stderr:
//! `error code=<n> kind=<kind> message="<text>"`.

use std::ffi::OsString;
use std::fs::OpenOptions;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::ablation::{self, AblationRow};
use crate::checkpoint::{self, RunConfigs};
use crate::config::{default_key_table, RunConfig};
use crate::data::{self, Dataset, DatasetManifest};
use crate::error::{Error, Result};
use crate::evaluation::{self, compute_iou, evaluate_segmentation, IouReport, ProjectionInput, ResultRow};
use crate::grouping::BnMode;
use crate::metrics::{truncate_metrics, MetricsRecord, MetricsWriter};
use crate::seg_model::{Domain, Image};
use crate::trainer::{self, TrainState};

#[derive(Debug, Parser)]
#[command(name = "cdga", version, about = "Cross-domain grouping and group-level alignment for segmentation")]
#[command(after_long_help = key_help())]
pub struct Cli {
    /// Config file with flat dotted keys.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override a config key, e.g. `--set K=8` or `--set train.lr_g=1e-3`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the synthetic two-domain dataset.
    Generate {
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Train G, C and D; writes config, metrics, checkpoints and a report.
    Train {
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long, value_name = "FILE")]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint on the validation splits.
    Evaluate(EvalArgs),
    /// Run a multi-seed grid and write a results table.
    Ablate {
        /// One key swept over values, e.g. `K=1,2,4,8`.
        #[arg(long, conflicts_with = "preset")]
        grid: Option<String>,
        /// Named grid; `table1` is the loss ablation.
        #[arg(long)]
        preset: Option<String>,
    },
    /// Render group maps, the output-space projection and group diagnostics.
    Visualize {
        #[command(flatten)]
        eval: EvalArgs,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Images per domain to render.
        #[arg(long, default_value_t = 4)]
        count: usize,
    },
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,
    /// Dataset root; defaults to the checkpoint's data config.
    #[arg(long, value_name = "DIR")]
    pub data: Option<PathBuf>,
}

fn key_help() -> String {
    let mut s = String::from("Config keys (default, provenance):\n");
    for (k, v, tag) in default_key_table() {
        s.push_str(&format!("  {k} = {v}  [{tag}]\n"));
    }
    s.push_str("\nAliases for --set: K, seed, iters, lr_G, lr_C, lr_D, lambda_*, tau, losses\n");
    s.push_str("Environment: CDGA_OUTPUT_ROOT overrides the default output_root.\n");
    s
}

fn exit_code(e: &Error) -> (i32, &'static str) {
    match e {
        Error::Config(_) | Error::Shape { .. } => (3, "config"),
        Error::Data { .. } | Error::Png { .. } | Error::EmptySupervision => (4, "data"),
        Error::Checkpoint(_) => (5, "checkpoint"),
        Error::NonFinite { .. } => (6, "non_finite"),
        Error::Locked(_) => (7, "locked"),
        Error::Io { .. } | Error::Undefined(_) | Error::Serde(_) => (1, "internal"),
    }
}

/// Parses `argv`, runs the command and returns the process exit code.
pub fn cli_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        // --help and --version arrive here too
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return 0;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or_default().trim_start_matches("error: ");
            report_failure(2, "usage", first);
            return 2;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            let (code, kind) = exit_code(&e);
            report_failure(code, kind, &e.to_string());
            code
        }
    }
}

fn report_failure(code: i32, kind: &str, message: &str) {
    let msg = message.replace('\\', "\\\\").replace('"', "\\\"").replace('\n', " ");
    eprintln!("error code={code} kind={kind} message=\"{msg}\"");
}

pub fn run(cli: Cli) -> Result<()> {
    let cfg = RunConfig::resolve(cli.config.as_deref(), &cli.overrides)?;
    match cli.command {
        Command::Generate { out } => generate(&cfg, &out),
        Command::Train { resume } => train(&cfg, resume.as_deref()),
        Command::Evaluate(args) => evaluate(&args),
        Command::Ablate { grid, preset } => ablate(&cfg, grid.as_deref(), preset.as_deref()),
        Command::Visualize { eval, out, count } => visualize(&eval, &out, count),
    }
}

fn generate(cfg: &RunConfig, out: &Path) -> Result<()> {
    let manifest = data::generate_synthetic(&cfg.data.synthetic, out)?;
    println!("wrote {} items to {}", manifest.items.len(), out.display());
    Ok(())
}

/// Loads the dataset named by `root`, falling back to the synthetic spec.
pub fn load_dataset(cfg: &RunConfig, root: Option<&Path>) -> Result<Dataset> {
    match root.or(cfg.data.root.as_deref()) {
        Some(root) => {
            if !root.is_dir() {
                return Err(Error::data(root, "dataset root does not exist"));
            }
            let manifest = if root.join(data::MANIFEST_FILE).is_file() {
                DatasetManifest::load(root)?
            } else {
                data::ingest_folder(root, &cfg.data.layout)?
            };
            if manifest.classes != cfg.model.classes() {
                return Err(Error::Config(format!(
                    "dataset has {} classes, model.seg.classes = {}",
                    manifest.classes,
                    cfg.model.classes()
                )));
            }
            Dataset::load(root, &manifest)
        }
        None => Dataset::synthetic(&cfg.data.synthetic),
    }
}

/// Exclusive lock on a run directory, released on drop.
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(".lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Self { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Locked(path)),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

#[derive(serde::Serialize, serde::Deserialize)]
struct Report {
    iteration: u64,
    source: IouReport,
    target: IouReport,
}

fn score(state: &TrainState, data: &Dataset) -> Result<(IouReport, IouReport)> {
    let s = compute_iou(&evaluate_segmentation(&state.seg, &data.source_val)?)?;
    let t = compute_iou(&evaluate_segmentation(&state.seg, &data.target_val)?)?;
    Ok((s, t))
}

fn print_scores(source: &IouReport, target: &IouReport, class_names: &[String]) {
    let rows = [ResultRow::from_report("source val", source), ResultRow::from_report("target val", target)];
    print!("{}", evaluation::format_table(&rows, class_names));
    println!("target mIoU {}", target.miou);
}

fn train(cfg: &RunConfig, resume: Option<&Path>) -> Result<()> {
    let dir = cfg.run_dir();
    let _lock = RunLock::acquire(&dir)?;
    let configs = RunConfigs {
        model: cfg.model.clone(),
        train: cfg.train.clone(),
    };
    let mut state = match resume {
        Some(path) => {
            let (state, saved) = checkpoint::load(path)?.into_state()?;
            if saved != configs {
                return Err(Error::Checkpoint(format!("{} was written with a different model/train config", path.display())));
            }
            state
        }
        None => TrainState::new(&cfg.model, &cfg.train)?,
    };
    std::fs::write(dir.join("config.toml"), cfg.to_dotted_toml()?).map_err(|e| Error::io(dir.join("config.toml"), e))?;
    let data = load_dataset(cfg, None)?;

    let metrics_path = dir.join("metrics.jsonl");
    let mut metrics = if resume.is_some() {
        truncate_metrics(&metrics_path, state.iteration)?;
        MetricsWriter::append(&metrics_path)?
    } else {
        MetricsWriter::create(&metrics_path)?
    };
    let ckpt_dir = dir.join("checkpoints");
    let every = cfg.run.checkpoint_every;
    let total = cfg.train.total_iters;
    trainer::train(&mut state, &data, &cfg.train, |st, report| {
        metrics.write(&MetricsRecord::from(report))?;
        if every > 0 && st.iteration % every == 0 && st.iteration < total {
            metrics.flush()?;
            checkpoint::save(&ckpt_dir.join(format!("iter_{:07}.ckpt", st.iteration)), st, &configs)?;
        }
        if st.iteration % 100 == 0 || st.iteration == total {
            eprintln!("iter {}/{} seg {:.4} total {:.4}", st.iteration, total, report.loss.seg, report.loss.total);
        }
        Ok(())
    })?;
    metrics.flush()?;
    checkpoint::save(&dir.join("final.ckpt"), &state, &configs)?;

    let (source, target) = score(&state, &data)?;
    let report = Report {
        iteration: state.iteration,
        source,
        target,
    };
    let path = dir.join("report.json");
    std::fs::write(&path, serde_json::to_string_pretty(&report)?).map_err(|e| Error::io(&path, e))?;
    let rows = [ResultRow::from_report("source val", &report.source), ResultRow::from_report("target val", &report.target)];
    let path = dir.join("report.txt");
    std::fs::write(&path, evaluation::format_table(&rows, &data.class_names)).map_err(|e| Error::io(&path, e))?;
    print_scores(&report.source, &report.target, &data.class_names);
    Ok(())
}

fn restore(args: &EvalArgs) -> Result<(TrainState, RunConfig, Dataset)> {
    let (state, configs) = checkpoint::load(&args.checkpoint)?.into_state()?;
    // the run directory's snapshot carries the data config; fall back to defaults
    let snapshot = args.checkpoint.parent().map(|d| {
        let d = if d.ends_with("checkpoints") { d.parent().unwrap_or(d) } else { d };
        d.join("config.toml")
    });
    let mut cfg = match snapshot.filter(|p| p.is_file()) {
        Some(p) => RunConfig::resolve(Some(&p), &[])?,
        None => RunConfig::default(),
    };
    cfg.model = configs.model;
    cfg.train = configs.train;
    let data = load_dataset(&cfg, args.data.as_deref())?;
    Ok((state, cfg, data))
}

fn evaluate(args: &EvalArgs) -> Result<()> {
    let (state, _, data) = restore(args)?;
    let (source, target) = score(&state, &data)?;
    print_scores(&source, &target, &data.class_names);
    Ok(())
}

fn ablate(cfg: &RunConfig, grid: Option<&str>, preset: Option<&str>) -> Result<()> {
    let rows: Vec<AblationRow> = match (grid, preset) {
        (Some(g), _) => ablation::parse_grid(g)?,
        (None, Some("table1")) => ablation::table1_rows(),
        (None, Some(other)) => return Err(Error::Config(format!("unknown preset {other:?}"))),
        (None, None) => return Err(Error::Config("ablate needs --grid or --preset".into())),
    };
    let dir = cfg.run_dir();
    let _lock = RunLock::acquire(&dir)?;
    std::fs::write(dir.join("config.toml"), cfg.to_dotted_toml()?).map_err(|e| Error::io(dir.join("config.toml"), e))?;
    let data = load_dataset(cfg, None)?;
    let results = ablation::run_ablation(cfg, &data, &rows, &cfg.run.seeds, |row, outcome| match &outcome.result {
        Ok(r) => eprintln!("{} seed {}: target mIoU {:.2}", row.name, outcome.seed, r.miou * 100.0),
        Err(e) => eprintln!("{} seed {}: failed: {e}", row.name, outcome.seed),
    })?;
    let table: Vec<ResultRow> = results.iter().map(|r| r.row.clone()).collect();
    evaluation::write_table_csv(&dir.join("results.csv"), &table, &data.class_names)?;
    let text = evaluation::format_table(&table, &data.class_names);
    std::fs::write(dir.join("results.txt"), &text).map_err(|e| Error::io(dir.join("results.txt"), e))?;
    let path = dir.join("results.json");
    std::fs::write(&path, serde_json::to_string_pretty(&results)?).map_err(|e| Error::io(&path, e))?;
    print!("{text}");
    Ok(())
}

fn visualize(args: &EvalArgs, out: &Path, count: usize) -> Result<()> {
    let (state, cfg, data) = restore(args)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut probs = Vec::new();
    for (domain, samples) in [(Domain::Source, &data.source_val), (Domain::Target, &data.target_val)] {
        let name = if domain == Domain::Source { "source" } else { "target" };
        for (i, s) in samples.iter().enumerate() {
            let score = state.seg.forward_segmentation(&Image::batch(&[&s.image])?)?;
            if i < count {
                let assign = state.group.group_assign(&score, BnMode::Eval)?;
                evaluation::render_group_map(&assign)?.save(&out.join(format!("groups_{name}_{i:03}.png")))?;
            }
            let label = s.label.clone().ok_or_else(|| Error::Config(format!("{name} validation image {i} has no label")))?;
            probs.push((score.prob().clone(), label, domain));
        }
    }
    let inputs: Vec<ProjectionInput> = probs
        .iter()
        .map(|(p, l, d)| ProjectionInput {
            prob: p,
            labels: l.labels(),
            domain: *d,
        })
        .collect();
    let projection = evaluation::project_outputs(&inputs, cfg.run.projection_pixels, cfg.train.seed)?;
    projection.write_csv(&out.join("projection.csv"))?;
    let palette = data::label_palette(data.classes);
    let svg = out.join("projection.svg");
    std::fs::write(&svg, projection.render_svg(&palette)).map_err(|e| Error::io(&svg, e))?;
    let diag = evaluation::collect_group_diagnostics(&state.seg, &state.group, &data.source_val, &data.target_val)?;
    let path = out.join("groups.json");
    std::fs::write(&path, serde_json::to_string_pretty(&diag)?).map_err(|e| Error::io(&path, e))?;
    println!("pixel share per group: {:?}", diag.pixel_share.iter().map(|s| (s * 1000.0).round() / 1000.0).collect::<Vec<_>>());
    if diag.collapsed {
        println!("warning: one group holds at least {:.0}% of the assignment mass", evaluation::COLLAPSE_SHARE * 100.0);
    }
    println!("wrote visualizations to {}", out.display());
    Ok(())
}
