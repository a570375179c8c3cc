use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use trajlab_core::runner::report::{export_report, render_text};
use trajlab_core::runner::{self, ExperimentConfig, MockSpec};
use trajlab_core::{samples, trajdata, trajgen, BackendConfig, BackendKind, DatasetSpec, Strategy, Task};

#[derive(Parser)]
#[command(name = "trajlab", version, about = "Spatial trajectory labeling benchmark harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the seeded 2D direction dataset.
    Gen2d(Gen2dArgs),
    /// Clean and normalize a 3D trajectory manifest.
    Ingest3d(Ingest3dArgs),
    /// Run or resume an experiment.
    Run(Box<RunArgs>),
    /// Compute metrics for a run directory.
    Report(ReportArgs),
    /// Serve the annotation API (and optionally the UI's static files).
    Serve(ServeArgs),
    /// Write the bundled synthetic sample datasets.
    Samples(SamplesArgs),
}

#[derive(Args)]
struct Gen2dArgs {
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 10)]
    n_short: usize,
    #[arg(long, default_value_t = 10)]
    n_long: usize,
    #[arg(long, default_value_t = 10)]
    n_float: usize,
    #[arg(long, default_value = "d2")]
    id_prefix: String,
}

#[derive(Args)]
struct Ingest3dArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Cleaning selections to apply before normalization.
    #[arg(long)]
    cleanings: Option<PathBuf>,
    /// Map every axis onto the integer grid [0, 300].
    #[arg(long)]
    normalize: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendArg {
    Http,
    Mock,
}

#[derive(Args)]
struct RunArgs {
    /// TOML experiment config; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    task: Option<String>,
    #[arg(long)]
    strategy: Option<String>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    cleanings: Option<PathBuf>,
    #[arg(long)]
    examples: Option<PathBuf>,
    #[arg(long)]
    example_count: Option<usize>,
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    run_id: Option<String>,
    #[arg(long)]
    dataset_label: Option<String>,
    #[arg(long, value_enum)]
    backend: Option<BackendArg>,
    #[arg(long)]
    base_url: Option<String>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    max_concurrency: Option<usize>,
    #[arg(long)]
    max_retries: Option<u32>,
    /// oracle | fixed:LABEL | scripted:PATH
    #[arg(long)]
    mock_policy: Option<String>,
    /// Dispatch at most N new instances, then stop.
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long)]
    human_review: bool,
    #[arg(long)]
    allow_any_strategy: bool,
    /// Also write the report after the run.
    #[arg(long)]
    report: bool,
}

#[derive(Args)]
struct ReportArgs {
    /// Run directory, e.g. out/runs/motion3d-zero-shot-0123456789ab.
    #[arg(long)]
    run: PathBuf,
    /// Reference table to compare against: table1, table2 or table3.
    #[arg(long)]
    compare: Option<String>,
    /// Print JSON instead of the text table.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long)]
    data_root: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    addr: SocketAddr,
    /// Directory of built UI assets.
    #[arg(long = "static")]
    static_dir: Option<PathBuf>,
}

#[derive(Args)]
struct SamplesArgs {
    #[arg(long)]
    out: PathBuf,
}

#[tokio::main]
async fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    match Cli::parse().command {
        Command::Gen2d(a) => gen2d(a),
        Command::Ingest3d(a) => ingest3d(a),
        Command::Run(a) => run(*a).await,
        Command::Report(a) => report(a),
        Command::Serve(a) => {
            if !a.data_root.is_dir() {
                bail!("data root {} does not exist", a.data_root.display());
            }
            runner::api::serve(&a.data_root, a.addr, a.static_dir.as_deref()).await?;
            Ok(())
        }
        Command::Samples(a) => {
            for f in samples::write_all(&a.out)? {
                println!("{}", a.out.join(f).display());
            }
            Ok(())
        }
    }
}

fn gen2d(a: Gen2dArgs) -> Result<()> {
    let spec = DatasetSpec {
        n_short: a.n_short,
        n_long: a.n_long,
        n_float: a.n_float,
        id_prefix: a.id_prefix,
        ..DatasetSpec::standard(a.seed)
    };
    let seqs = trajgen::generate_dataset(&spec)?;
    create_parent(&a.out)?;
    trajgen::write_dataset(&a.out, &seqs)?;
    println!("wrote {} sequences to {}", seqs.len(), a.out.display());
    Ok(())
}

fn ingest3d(a: Ingest3dArgs) -> Result<()> {
    let mut trajs = trajdata::load_trajectories(&a.input)?;
    if let Some(path) = &a.cleanings {
        let sels = trajdata::load_cleanings(path)?;
        trajs = trajdata::apply_cleanings(&trajs, &sels)?;
    }
    if a.normalize {
        trajs = trajs.iter().map(trajdata::normalize_grid).collect();
    }
    create_parent(&a.out)?;
    trajdata::write_trajectories(&a.out, &trajs)?;
    let cleaned = trajs.iter().filter(|t| t.cleaned).count();
    println!("wrote {} trajectories ({cleaned} cleaned) to {}", trajs.len(), a.out.display());
    Ok(())
}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    Ok(())
}

fn build_config(a: &RunArgs) -> Result<ExperimentConfig> {
    let mut cfg = match &a.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => {
            let (Some(task), Some(strategy), Some(data)) = (&a.task, &a.strategy, &a.data) else {
                bail!("without --config, --task, --strategy and --data are required");
            };
            ExperimentConfig {
                task: parse_task(task)?,
                strategy: parse_strategy(strategy)?,
                data: data.clone(),
                cleanings: None,
                examples: None,
                example_count: 3,
                prompts: None,
                vocabulary: None,
                backend: BackendConfig::mock("mock"),
                mock: None,
                output: PathBuf::from("out"),
                seed: 0,
                run_id: None,
                dataset_label: None,
                allow_any_strategy: false,
                human_review: false,
                limit: None,
            }
        }
    };
    if let Some(t) = &a.task {
        cfg.task = parse_task(t)?;
    }
    if let Some(s) = &a.strategy {
        cfg.strategy = parse_strategy(s)?;
    }
    macro_rules! set {
        ($field:ident) => {
            if let Some(v) = &a.$field {
                cfg.$field = v.clone();
            }
        };
        (opt $field:ident) => {
            if a.$field.is_some() {
                cfg.$field = a.$field.clone();
            }
        };
    }
    set!(data);
    set!(output);
    set!(seed);
    set!(example_count);
    set!(opt cleanings);
    set!(opt examples);
    set!(opt run_id);
    set!(opt dataset_label);
    set!(opt limit);
    cfg.human_review |= a.human_review;
    cfg.allow_any_strategy |= a.allow_any_strategy;

    match a.backend {
        Some(BackendArg::Http) => {
            cfg.backend.kind = BackendKind::Http;
        }
        Some(BackendArg::Mock) => cfg.backend.kind = BackendKind::Mock,
        None => {}
    }
    if let Some(url) = &a.base_url {
        cfg.backend.base_url = Some(url.clone());
    }
    if let Some(m) = &a.model {
        cfg.backend.model_name = m.clone();
    }
    if let Some(t) = a.temperature {
        cfg.backend.temperature = t;
    }
    if let Some(n) = a.max_concurrency {
        cfg.backend.max_concurrency = n;
    }
    if let Some(n) = a.max_retries {
        cfg.backend.max_retries = n;
    }
    if let Some(p) = &a.mock_policy {
        cfg.mock = Some(MockSpec::parse(p)?);
    }
    if cfg.backend.kind == BackendKind::Mock && cfg.mock.is_none() {
        bail!("the mock backend needs --mock-policy (oracle, fixed:LABEL or scripted:PATH)");
    }
    Ok(cfg)
}

fn parse_task(s: &str) -> Result<Task> {
    Task::parse(s).with_context(|| format!("unknown task `{s}` (direction2d, shape2d, motion3d, spartqa)"))
}

fn parse_strategy(s: &str) -> Result<Strategy> {
    Strategy::parse(s).with_context(|| {
        format!("unknown strategy `{s}` (zero-shot, in-context, chain-of-thought, spatial-prefix)")
    })
}

async fn run(a: RunArgs) -> Result<()> {
    let cfg = build_config(&a)?;
    let summary = runner::run_from_config(&cfg).await?;
    println!(
        "run {}: {} new records ({} errors), {} already done, {} remaining, {} backend calls",
        summary.run_id, summary.new_records, summary.errors, summary.skipped, summary.remaining, summary.backend_calls
    );
    println!("{}", summary.run_dir.display());
    if a.report {
        let (report, _) = export_report(&cfg.output.join("runs"), &summary.run_id, None)?;
        print!("{}", render_text(&report));
    }
    Ok(())
}

fn report(a: ReportArgs) -> Result<()> {
    let dir = a.run.canonicalize().with_context(|| format!("run directory {}", a.run.display()))?;
    let (Some(root), Some(id)) = (dir.parent(), dir.file_name().and_then(|n| n.to_str())) else {
        bail!("{} is not a run directory", a.run.display());
    };
    let (report, path) = export_report(root, id, a.compare.as_deref())?;
    if a.json {
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        print!("{}", render_text(&report));
        eprintln!("wrote {}", path.display());
    }
    Ok(())
}
