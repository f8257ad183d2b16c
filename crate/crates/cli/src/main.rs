use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use bugharvest_core::fixture::synthetic_corpus;
use bugharvest_core::pipeline::{emit_report, Pipeline, PipelineConfig, ReportFormat, Stage};
use bugharvest_core::runner::{ActBackend, ActConfig, ContainerBackend, SimulatedBackend};
use bugharvest_core::store::Mode;

#[derive(Parser)]
#[command(name = "bugharvest", version, about = "Mine CI-reproducible bug-fix pairs into an offline benchmark")]
struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Use the in-process simulated container backend.
    #[arg(long, global = true)]
    fake_runner: bool,
    /// Never contact the search API.
    #[arg(long, global = true)]
    offline_only: bool,
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[arg(long, global = true)]
    state_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    store_dir: Option<PathBuf>,
    /// Adapter id to use for every repository.
    #[arg(long, global = true)]
    adapter: Option<String>,
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Search for repositories and probe their head commit.
    CollectRepos,
    /// Mine bug-fix pairs from retained repositories.
    CollectBugs,
    /// Snapshot an offline environment for every candidate.
    Reproduce,
    /// Re-run candidates offline and store the stable ones.
    Verify,
    /// Print the pipeline funnel.
    Stats {
        #[arg(long, default_value = "text")]
        format: String,
    },
    /// Check out one version of a stored entry.
    Checkout {
        id: String,
        #[arg(long)]
        mode: Mode,
        /// Destination directory; defaults to `<id>-<mode>`.
        #[arg(long)]
        dest: Option<PathBuf>,
    },
    /// Run one version of a stored entry offline and compare outcomes.
    Run {
        id: String,
        #[arg(long)]
        mode: Mode,
    },
    /// Write the synthetic demo corpus and a configuration for it.
    MakeCorpus { dir: PathBuf },
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut c = match &cli.config {
        Some(p) => PipelineConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => PipelineConfig::default(),
    };
    if cli.offline_only {
        c.offline_only = true;
    }
    if let Some(w) = cli.workers {
        c.workers = w;
    }
    if let Some(d) = &cli.state_dir {
        c.state_dir = d.clone();
    }
    if let Some(d) = &cli.store_dir {
        c.store_dir = d.clone();
    }
    if let Some(a) = &cli.adapter {
        c.adapter = Some(a.clone());
    }
    c.validate()?;
    Ok(c)
}

fn backend(cli: &Cli) -> Result<Arc<dyn ContainerBackend>> {
    if cli.fake_runner {
        return Ok(Arc::new(SimulatedBackend::new()));
    }
    let act = ActBackend::new(ActConfig::default())
        .context("the real runner needs docker and act on PATH (use --fake-runner to simulate)")?;
    Ok(Arc::new(act))
}

fn make_corpus(dir: &PathBuf) -> Result<()> {
    if dir.exists() && dir.read_dir()?.next().is_some() {
        bail!("{} is not empty", dir.display());
    }
    let dir = std::path::absolute(dir)?;
    let corpus = synthetic_corpus(&dir.join("repos"))?;
    let config = PipelineConfig {
        workers: 4,
        state_dir: "state".into(),
        store_dir: "store".into(),
        cache_dir: "state/cache".into(),
        seed_repos: corpus.repos.clone(),
        offline_only: true,
        ..PipelineConfig::default()
    };
    let path = dir.join("bugharvest.toml");
    std::fs::write(&path, toml::to_string(&config)?)?;
    println!("{} repositories, {} commit pairs", corpus.repos.len(), corpus.pair_count());
    println!("config: {}", path.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    if let Command::MakeCorpus { dir } = &cli.command {
        return make_corpus(dir);
    }
    let config = load_config(&cli)?;
    let pipeline = Pipeline::new(config, backend(&cli)?)?;
    let stage = match &cli.command {
        Command::CollectRepos => Stage::CollectRepos,
        Command::CollectBugs => Stage::CollectBugs,
        Command::Reproduce => Stage::Reproduce,
        Command::Verify => Stage::Verify,
        Command::Stats { format } => {
            let format: ReportFormat = format.parse().map_err(anyhow::Error::msg)?;
            print!("{}", emit_report(&pipeline.run_stage(Stage::Stats)?, format));
            return Ok(());
        }
        Command::Checkout { id, mode, dest } => {
            let dest = dest.clone().unwrap_or_else(|| PathBuf::from(format!("{id}-{mode}")));
            let tree = pipeline.checkout(id, *mode, &dest)?;
            println!("{} {}", tree.dir.display(), tree.tree_hash);
            return Ok(());
        }
        Command::Run { id, mode } => {
            let run = pipeline.run_entry(id, *mode)?;
            let s = run.summary();
            println!(
                "{id} {mode}: matches expectations ({} passed, {} failed, {} skipped)",
                s.passed, s.failed, s.skipped
            );
            return Ok(());
        }
        Command::MakeCorpus { .. } => unreachable!("handled above"),
    };
    let delta = pipeline.run_stage(stage)?;
    println!("{stage}: done");
    print!("{}", emit_report(&delta, ReportFormat::Text));
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => tracing::Level::WARN,
        1 => tracing::Level::INFO,
        _ => tracing::Level::DEBUG,
    };
    tracing_subscriber::fmt()
        .with_max_level(level)
        .with_writer(std::io::stderr)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
