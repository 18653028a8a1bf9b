use std::path::PathBuf;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use chrono::{DateTime, Utc};
use clap::{Parser, Subcommand};
use serde_json::json;

use ilws_forge::config::ServiceConfig;
use ilws_forge::distill::{compile_dataset, export_dataset};
use ilws_forge::engine::{read_events, replay, sessions_from_events, EventLog};
use ilws_forge::knowledge::compose_prompt;
use ilws_forge::service::{start_from_config, StorageLayout};
use ilws_forge::sim::{run_scenario, Scenario};
use ilws_forge::store::{AuditLog, CommitStore};

#[derive(Parser)]
#[command(name = "ilws-forge", version, about = "Instruction-level weight shaping control plane")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Serve the /v1 API.
    Serve {
        #[arg(long)]
        config: PathBuf,
        /// How often veto windows and the distillation trigger are checked.
        #[arg(long, default_value_t = 5)]
        tick_secs: u64,
    },
    /// Replay an event log in memory and print the resulting trace.
    Replay {
        #[arg(long)]
        events: PathBuf,
        /// Must match the configuration the log was recorded under.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Export the rated sessions of a storage root as a weighted dataset.
    ExportDataset {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Only sessions served after this RFC 3339 time or commit.
        #[arg(long)]
        since: Option<String>,
    },
    /// Run a simulation scenario and write its report.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        /// Overrides the scenario's seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    match Cli::parse().command {
        Command::Serve { config, tick_secs } => serve(config, tick_secs),
        Command::Replay { events, config } => replay_log(events, config),
        Command::ExportDataset { config, out, since } => export(config, out, since),
        Command::Run { scenario, seed, out } => run(scenario, seed, out),
    }
}

fn serve(path: PathBuf, tick_secs: u64) -> Result<()> {
    let config = ServiceConfig::load(&path)?;
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(async {
        let service = start_from_config(&config)?;
        let listener = tokio::net::TcpListener::bind(&config.service.bind)
            .await
            .with_context(|| format!("bind {}", config.service.bind))?;
        tracing::info!(addr = %listener.local_addr()?, "serving");
        let ticker = service.spawn_ticker(Duration::from_secs(tick_secs.max(1)));
        service
            .serve(listener, async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await?;
        ticker.abort();
        Ok(())
    })
}

fn replay_log(events: PathBuf, config: Option<PathBuf>) -> Result<()> {
    let recorded = read_events(&events).with_context(|| format!("read {}", events.display()))?;
    let config = config.map(|p| ServiceConfig::load(&p)).transpose()?.map(|c| c.engine());
    let engine = replay(
        &recorded,
        config,
        CommitStore::in_memory(),
        AuditLog::discard(),
        EventLog::discard(),
    )?;
    let trace = engine.trace();
    let out = json!({
        "events": recorded.len(),
        "commits": trace.commits,
        "decisions": engine.decisions().len(),
        "budget": engine.budget().value(),
        "serving_commit": engine.serving_commit(),
        "trace_fingerprint": trace.fingerprint(),
    });
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(())
}

fn export(path: PathBuf, out: PathBuf, since: Option<String>) -> Result<()> {
    let config = ServiceConfig::load(&path)?;
    let layout = StorageLayout::new(&config.storage.root);
    let store = CommitStore::open(&layout.store)?;
    let cut: Option<DateTime<Utc>> = match since {
        None => None,
        Some(s) => match DateTime::parse_from_rfc3339(&s) {
            Ok(t) => Some(t.with_timezone(&Utc)),
            Err(_) => Some(store.resolve(&s)?.meta.timestamp),
        },
    };
    let recorded = read_events(&layout.events).with_context(|| format!("read {}", layout.events.display()))?;
    let sessions = sessions_from_events(&recorded);
    let mut rows = compile_dataset(&sessions, cut, |c| store.get(c).is_some())?;
    if rows.is_empty() {
        bail!("no rated sessions to export");
    }
    if config.distill.inline_prompts {
        let budget = config.prompt.budget_tokens;
        for r in &mut rows {
            r.prompt = store.state(&r.state_commit).map(|s| compose_prompt(&s, budget).text);
        }
    }
    let manifest = export_dataset(&rows, &out, serde_json::to_value(config.engine())?, Utc::now())?;
    println!("{}", serde_json::to_string_pretty(&manifest)?);
    Ok(())
}

fn run(path: PathBuf, seed: Option<u64>, out: PathBuf) -> Result<()> {
    let text = std::fs::read_to_string(&path).with_context(|| format!("read {}", path.display()))?;
    let mut scenario = Scenario::from_toml(&text)?;
    if let Some(seed) = seed {
        scenario.seed = seed;
    }
    let report = run_scenario(&scenario)?;
    report.emit(&out)?;
    print!("{}", report.summary());
    Ok(())
}
