//! `surgeflow` command line: run the engine, drive the wildfire demo, and
//! inspect incidents through the HTTP API.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{anyhow, bail, Context as _};
use clap::{Args, Parser, Subcommand};
use serde_json::Value;
use surgeflow::demo_wildfire::{self, ForecastKind, HotspotSource, WildfireConfig};
use surgeflow::service::{Engine, EngineConfig, HttpServer, TaskGraph};
use surgeflow::statestore::{StateStore, StatsScope};
use tracing_subscriber::EnvFilter;

#[derive(Parser)]
#[command(name = "surgeflow", version, about = "Data-driven workflow engine for urgent computing")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// TOML configuration file; flags below override its values.
    #[arg(long, global = true, env = "SURGEFLOW_CONFIG")]
    config: Option<PathBuf>,
    /// Port the API listens on (and that client commands connect to).
    #[arg(long, global = true)]
    port: Option<u16>,
    /// Worker threads in the task farm [default: 4].
    #[arg(long, global = true, env = "SURGEFLOW_WORKERS")]
    workers: Option<usize>,
    /// Directory for queues, state and simulated data [default: ./data].
    #[arg(long, global = true, env = "SURGEFLOW_DATA_DIR")]
    data_dir: Option<PathBuf>,
    /// Base URL of a running engine for client commands.
    #[arg(long, global = true, env = "SURGEFLOW_SERVER")]
    server: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Start the engine and serve the HTTP API until interrupted.
    Serve,
    /// Run a bundled demo end to end in this process.
    #[command(subcommand)]
    Demo(Demo),
    /// Inspect or cancel incidents on a running engine.
    #[command(subcommand)]
    Incidents(Incidents),
    /// Per-stage timing statistics of a workflow kind, read from the data dir.
    Stats {
        kind: String,
    },
}

#[derive(Subcommand)]
enum Demo {
    /// Wildfire forecasting: push one hotspot observation and wait for all forecasts.
    Wildfire {
        #[arg(long, default_value_t = HotspotSource::Modis)]
        hotspot_source: HotspotSource,
        #[arg(long, default_value_t = ForecastKind::Perimeter)]
        forecast_kind: ForecastKind,
        /// Give up after this many seconds.
        #[arg(long, default_value_t = 60)]
        timeout: u64,
    },
}

#[derive(Subcommand)]
enum Incidents {
    List,
    Show { id: String },
    Cancel { id: String },
}

impl Global {
    fn engine_config(&self) -> anyhow::Result<EngineConfig> {
        let mut config = match &self.config {
            Some(path) => EngineConfig::load(path)?,
            None => EngineConfig::default(),
        };
        if let Some(dir) = &self.data_dir {
            config.data_dir = dir.clone();
        }
        if let Some(workers) = self.workers {
            config.workers = workers;
        }
        if let Some(port) = self.port {
            config.port = port;
        }
        config.validate()?;
        Ok(config)
    }

    fn server_url(&self) -> anyhow::Result<String> {
        if let Some(url) = &self.server {
            return Ok(url.trim_end_matches('/').to_owned());
        }
        let config = self.engine_config()?;
        Ok(format!("http://{}:{}", config.bind, config.port))
    }
}

/// Failure with a message for the user and a specific exit code.
#[derive(Debug)]
struct Exit(u8, String);

impl std::fmt::Display for Exit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.1)
    }
}

impl std::error::Error for Exit {}

fn serve(global: &Global) -> anyhow::Result<()> {
    let config = global.engine_config()?;
    let addr: SocketAddr = format!("{}:{}", config.bind, config.port)
        .parse()
        .with_context(|| format!("invalid bind address {:?}", config.bind))?;
    let engine = Engine::start(config)?;
    let server = HttpServer::start(engine.clone(), addr, true).with_context(|| format!("binding {addr}"))?;
    eprintln!("surgeflow listening on {}", server.url());
    let result = server.wait();
    engine.shutdown();
    Ok(result?)
}

fn demo_wildfire(
    global: &Global,
    hotspot_source: HotspotSource,
    forecast_kind: ForecastKind,
    timeout: Duration,
) -> anyhow::Result<()> {
    let engine = Engine::start(global.engine_config()?)?;
    let config = WildfireConfig {
        hotspot_source,
        forecast_kind,
        ..WildfireConfig::default()
    };
    let run = engine.run_wildfire_demo(config, &format!("wildfire demo ({hotspot_source})"), timeout)?;
    let results = demo_wildfire::recorded_results(engine.simenv(), run.incident_id)?;
    engine.shutdown();
    let status = serde_json::to_value(run.record.status)?;
    println!(
        "incident {} {} in {:.2?}: {} tasks, {} {} forecasts",
        run.incident_id,
        status.as_str().unwrap_or("?"),
        run.elapsed,
        run.graph.nodes.len(),
        results.len(),
        forecast_kind.output_mode(),
    );
    print!("{}", run.graph.render_text());
    Ok(())
}

struct Client {
    base: String,
    agent: ureq::Agent,
}

impl Client {
    fn new(base: String) -> Self {
        let agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(30)))
            .build()
            .into();
        Self { base, agent }
    }

    fn call(&self, method: &str, path: &str) -> anyhow::Result<Value> {
        let url = format!("{}{path}", self.base);
        let response = match method {
            "POST" => self.agent.post(&url).send_empty(),
            _ => self.agent.get(&url).call(),
        };
        let mut response = response.with_context(|| format!("cannot reach {}", self.base))?;
        let status = response.status().as_u16();
        let text = response.body_mut().read_to_string().unwrap_or_default();
        let body: Value = serde_json::from_str(&text).unwrap_or(Value::Null);
        let message = body["error"].as_str().map_or_else(|| text.clone(), str::to_owned);
        match status {
            200..=299 => Ok(body),
            404 => Err(Exit(1, message).into()),
            _ => Err(Exit(1, format!("server answered {status}: {message}")).into()),
        }
    }
}

fn incidents(global: &Global, cmd: &Incidents) -> anyhow::Result<()> {
    let client = Client::new(global.server_url()?);
    match cmd {
        Incidents::List => {
            let list = client.call("GET", "/api/incidents")?;
            let rows = list.as_array().ok_or_else(|| anyhow!("unexpected response: {list}"))?;
            println!("{:<36}  {:<12} {:<10} {:>11}  LABEL", "INCIDENT", "KIND", "STATUS", "OUTSTANDING");
            for r in rows {
                println!(
                    "{:<36}  {:<12} {:<10} {:>11}  {}",
                    r["incident_id"].as_str().unwrap_or("?"),
                    r["workflow_kind"].as_str().unwrap_or("?"),
                    r["status"].as_str().unwrap_or("?"),
                    r["outstanding_messages"],
                    r["label"].as_str().unwrap_or(""),
                );
            }
        }
        Incidents::Show { id } => {
            let detail = client.call("GET", &format!("/api/incidents/{id}"))?;
            let incident = &detail["incident"];
            println!(
                "incident {}  kind {}  status {}  outstanding {}",
                incident["incident_id"].as_str().unwrap_or(id),
                incident["workflow_kind"].as_str().unwrap_or("?"),
                incident["status"].as_str().unwrap_or("?"),
                incident["outstanding_messages"],
            );
            let graph: TaskGraph =
                serde_json::from_value(detail["task_graph"].clone()).context("malformed task graph")?;
            print!("{}", graph.render_text());
            if let Some(endpoints) = detail["endpoints"].as_array().filter(|e| !e.is_empty()) {
                println!("endpoints:");
                for e in endpoints {
                    let target = e["path"].as_str().unwrap_or("?");
                    println!("  {} {} -> {}", e["kind"].as_str().unwrap_or("?"), target, e["target_queue"]);
                }
            }
        }
        Incidents::Cancel { id } => {
            client.call("POST", &format!("/api/incidents/{id}/cancel"))?;
            println!("incident {id} cancelled");
        }
    }
    Ok(())
}

fn stats(global: &Global, kind: &str) -> anyhow::Result<()> {
    let config = global.engine_config()?;
    if !config.data_dir.exists() {
        bail!(Exit(1, format!("data dir {} does not exist", config.data_dir.display())));
    }
    let store = StateStore::open_read_only(&config.data_dir)?;
    let stats = store.stage_statistics(&StatsScope::WorkflowKind(kind.to_owned()))?;
    if stats.is_empty() {
        bail!(Exit(1, format!("no recorded tasks for workflow kind {kind:?}")));
    }
    println!(
        "{:<24} {:>6} {:>14} {:>14} {:>14} {:>14}",
        "STAGE", "COUNT", "MEAN WAIT ms", "MAX WAIT ms", "MEAN PROC ms", "MAX PROC ms"
    );
    for s in stats {
        println!(
            "{:<24} {:>6} {:>14.1} {:>14.1} {:>14.1} {:>14.1}",
            s.queue, s.count, s.mean_queue_wait_ms, s.max_queue_wait_ms, s.mean_processing_ms, s.max_processing_ms
        );
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let default_level = if matches!(cli.command, Command::Serve) { "info" } else { "warn" };
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new(default_level)))
        .with_writer(std::io::stderr)
        .init();

    let result = match &cli.command {
        Command::Serve => serve(&cli.global),
        Command::Demo(Demo::Wildfire {
            hotspot_source,
            forecast_kind,
            timeout,
        }) => demo_wildfire(&cli.global, *hotspot_source, *forecast_kind, Duration::from_secs(*timeout)),
        Command::Incidents(cmd) => incidents(&cli.global, cmd),
        Command::Stats { kind } => stats(&cli.global, kind),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = e.downcast_ref::<Exit>().map_or(1, |x| x.0);
            eprintln!("error: {e:#}");
            ExitCode::from(code)
        }
    }
}
