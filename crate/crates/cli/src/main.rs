//! `oprc`: operator CLI for the object runtime.
//!
//! Exit codes: 0 ok, 1 assertion or request failure, 2 infrastructure
//! failure.

mod runtime;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use oprc_core::cluster::{Cluster, ClusterConfig};
use oprc_core::engine::EngineKind;
use oprc_core::fault::parse_scenario;
use oprc_core::log::{dump_partition_file, LogConfig};
use oprc_core::scenario::{self, Workload, DEMO_PACKAGE};
use oprc_net::client::{ClientError, OprcClient};
use oprc_net::harness::{HttpCluster, HttpClusterConfig, DEFAULT_BASE_PORT};
use oprc_net::wire::InvokeRequest;

#[derive(Parser)]
#[command(name = "oprc", version, about = "Object runtime CLI")]
struct Cli {
    /// Control-plane URL.
    #[arg(long, global = true, env = "OPRC_CONTROL", default_value = "http://127.0.0.1:17400")]
    control: String,
    /// Ingress URL.
    #[arg(long, global = true, env = "OPRC_INGRESS", default_value = "http://127.0.0.1:17401")]
    ingress: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Package operations.
    #[command(subcommand)]
    Pkg(PkgCmd),
    /// Object operations.
    #[command(subcommand)]
    Obj(ObjCmd),
    /// Invokes a binding on an object.
    Invoke(InvokeArgs),
    /// Fetches the result of an invocation.
    Result { invocation_id: String },
    /// Prints the current hash ring.
    Ring,
    /// Message-log tools.
    #[command(subcommand)]
    Log(LogCmd),
    /// Blob garbage collection.
    #[command(subcommand)]
    Gc(GcCmd),
    /// Fault-injection scenarios.
    #[command(subcommand)]
    Scenario(ScenarioCmd),
    /// Local test cluster.
    #[command(subcommand)]
    Cluster(ClusterCmd),
    /// Function runtimes speaking the task protocol.
    #[command(subcommand)]
    Runtime(RuntimeCmd),
}

#[derive(Subcommand)]
enum PkgCmd {
    /// Registers or replaces a package from a YAML file.
    Apply { file: PathBuf },
}

#[derive(Subcommand)]
enum ObjCmd {
    /// Creates an object of the given class.
    New {
        object: String,
        #[arg(long)]
        class: String,
        /// Initial document fields as key=value.
        #[arg(long = "arg", value_parser = key_value)]
        args: Vec<(String, String)>,
    },
}

#[derive(Args)]
struct InvokeArgs {
    object: String,
    binding: String,
    #[arg(long = "arg", value_parser = key_value)]
    args: Vec<(String, String)>,
    /// Objects passed as inputs.
    #[arg(long = "input")]
    inputs: Vec<String>,
    /// Invocation id; a fresh one is generated when absent.
    #[arg(long)]
    id: Option<String>,
    /// Queue the call and print its invocation id.
    #[arg(long = "async")]
    asynchronous: bool,
}

#[derive(Subcommand)]
enum LogCmd {
    /// Prints the entries of a partition file, or of every partition in a
    /// log directory.
    Dump {
        path: PathBuf,
        /// Print payloads as JSON instead of their length.
        #[arg(long)]
        payloads: bool,
    },
}

#[derive(Subcommand)]
enum GcCmd {
    /// Purges unreferenced blob versions.
    Run,
}

#[derive(Subcommand)]
enum ScenarioCmd {
    /// Runs a scenario file against an in-process cluster.
    Run(ScenarioArgs),
}

#[derive(Args)]
struct ScenarioArgs {
    file: PathBuf,
    #[arg(long, default_value_t = 3)]
    invokers: usize,
    #[arg(long, default_value_t = 50)]
    objects: usize,
    #[arg(long, default_value_t = 1000)]
    invocations: usize,
    #[arg(long, default_value_t = 0.1)]
    duplicate_rate: f64,
    /// Seeds both the workload and probabilistic faults.
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Keep cluster data here instead of a temporary directory.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Print the event trace.
    #[arg(long)]
    trace: bool,
}

#[derive(Subcommand)]
enum ClusterCmd {
    /// Starts a cluster and serves until Ctrl-C or a shutdown request.
    Up(UpArgs),
    /// Asks a running cluster to shut down. Succeeds if none is running.
    Down,
}

#[derive(Args)]
struct UpArgs {
    #[arg(short = 'n', long, default_value_t = 3)]
    invokers: usize,
    #[arg(long, default_value_t = DEFAULT_BASE_PORT)]
    base_port: u16,
    #[arg(long, default_value = "oprc-data")]
    data_dir: PathBuf,
    /// Default engine for non-inline functions: inline, local-process.
    #[arg(long, default_value = "inline")]
    engine: EngineKind,
    /// Packages to apply once the cluster is up.
    #[arg(long = "package")]
    packages: Vec<PathBuf>,
    #[arg(long)]
    fault_seed: Option<u64>,
}

#[derive(Subcommand)]
enum RuntimeCmd {
    /// Serves an echo function on $PORT: the new document is the task args.
    Echo {
        #[arg(long, env = "PORT")]
        port: u16,
    },
}

fn key_value(s: &str) -> Result<(String, String), String> {
    s.split_once('=')
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .ok_or_else(|| format!("expected key=value, got {s:?}"))
}

/// A command failure with the exit code it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn assert(message: impl Into<String>) -> Self {
        Self {
            code: 1,
            message: message.into(),
        }
    }

    fn infra(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }
}

impl From<ClientError> for Failure {
    fn from(e: ClientError) -> Self {
        if e.is_infra() {
            Failure::infra(e.to_string())
        } else {
            Failure::assert(e.to_string())
        }
    }
}

fn print_json(v: &impl serde::Serialize) {
    match serde_json::to_string_pretty(v) {
        Ok(s) => println!("{s}"),
        Err(e) => eprintln!("cannot render output: {e}"),
    }
}

fn read_file(path: &Path) -> Result<String, Failure> {
    std::fs::read_to_string(path).map_err(|e| Failure::assert(format!("{}: {e}", path.display())))
}

fn fresh_id() -> String {
    let nanos = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_nanos())
        .unwrap_or_default();
    format!("cli-{nanos:x}-{}", std::process::id())
}

async fn invoke(client: &OprcClient, a: InvokeArgs) -> Result<(), Failure> {
    let req = InvokeRequest {
        invocation_id: Some(a.id.unwrap_or_else(fresh_id).parse().map_err(|e| Failure::assert(format!("{e}")))?),
        args: a.args.into_iter().collect(),
        input_refs: a
            .inputs
            .iter()
            .map(|s| s.parse())
            .collect::<Result<_, _>>()
            .map_err(|e| Failure::assert(format!("{e}")))?,
        ..InvokeRequest::default()
    };
    if a.asynchronous {
        let id = client.invoke_async(&a.object, &a.binding, &req).await?;
        print_json(&json!({ "invocationId": id }));
    } else {
        print_json(&client.invoke(&a.object, &a.binding, &req).await?);
    }
    Ok(())
}

fn log_dump(path: &Path, payloads: bool) -> Result<(), Failure> {
    let files: Vec<PathBuf> = if path.is_dir() {
        let mut v: Vec<PathBuf> = std::fs::read_dir(path)
            .map_err(|e| Failure::infra(e.to_string()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "log"))
            .collect();
        v.sort();
        v
    } else {
        vec![path.to_path_buf()]
    };
    for f in files {
        let dump = dump_partition_file(&f).map_err(|e| Failure::infra(format!("{}: {e}", f.display())))?;
        println!(
            "# partition {} version {} entries {} torn_tail_bytes {}",
            dump.partition,
            dump.version,
            dump.entries.len(),
            dump.torn_tail_bytes
        );
        for e in &dump.entries {
            if payloads {
                let body = serde_json::from_slice::<Value>(&e.payload)
                    .unwrap_or_else(|_| Value::String(String::from_utf8_lossy(&e.payload).into_owned()));
                println!("{}\t{}\t{}", e.offset, e.dedupe_key, body);
            } else {
                println!("{}\t{}\t{} bytes", e.offset, e.dedupe_key, e.payload.len());
            }
        }
    }
    Ok(())
}

async fn scenario_run(a: ScenarioArgs) -> Result<(), Failure> {
    let specs = parse_scenario(&read_file(&a.file)?).map_err(|e| Failure::assert(e.to_string()))?;
    let tmp;
    let dir = match a.data_dir {
        Some(d) => d,
        None => {
            tmp = TempDir::new()?;
            tmp.path().to_path_buf()
        }
    };
    let mut config = ClusterConfig::new(a.invokers, dir);
    config.fault_seed = a.seed;
    config.log = LogConfig {
        fsync: false,
        ..LogConfig::default()
    };
    let cluster = Cluster::start(config).map_err(|e| Failure::infra(e.to_string()))?;
    cluster
        .apply(DEMO_PACKAGE)
        .await
        .map_err(|e| Failure::infra(e.to_string()))?;
    let workload = Workload {
        objects: a.objects,
        invocations: a.invocations,
        duplicate_rate: a.duplicate_rate,
        seed: a.seed,
        ..Workload::default()
    };
    let outcome = scenario::run(&cluster, specs, &workload).await;
    cluster.shutdown().await;
    let report = outcome.map_err(|e| {
        if e.is_infra() {
            Failure::infra(e.to_string())
        } else {
            Failure::assert(e.to_string())
        }
    })?;
    if a.trace {
        for line in &report.trace {
            println!("{line}");
        }
    }
    let mismatches = report.mismatches();
    print_json(&json!({
        "passed": report.passed(),
        "invocations": workload.invocations,
        "duplicatesSubmitted": report.duplicates,
        "restarts": report.restarts,
        "mismatches": mismatches.iter().map(|(o, want, got)| json!({"object": o, "expected": want, "actual": got})).collect::<Vec<_>>(),
        "elapsedMs": report.elapsed.as_millis() as u64,
    }));
    if report.passed() {
        Ok(())
    } else {
        Err(Failure::assert(format!("{} counters differ from the oracle", mismatches.len())))
    }
}

/// Temporary directory removed on drop.
struct TempDir(PathBuf);

impl TempDir {
    fn new() -> Result<Self, Failure> {
        let p = std::env::temp_dir().join(format!("oprc-scenario-{}", fresh_id()));
        std::fs::create_dir_all(&p).map_err(|e| Failure::infra(e.to_string()))?;
        Ok(Self(p))
    }

    fn path(&self) -> &Path {
        &self.0
    }
}

impl Drop for TempDir {
    fn drop(&mut self) {
        let _ = std::fs::remove_dir_all(&self.0);
    }
}

async fn cluster_up(a: UpArgs) -> Result<(), Failure> {
    let mut config = HttpClusterConfig::new(a.invokers, a.base_port, a.data_dir);
    config.engine.default_engine = a.engine;
    if let Some(seed) = a.fault_seed {
        config.fault_seed = seed;
    }
    let cluster = HttpCluster::up(config).await.map_err(|e| Failure::infra(e.to_string()))?;
    let client = cluster.client();
    for p in &a.packages {
        let report = client.apply_package(&read_file(p)?).await;
        match report {
            Ok(r) => eprintln!("applied package {}", r.package),
            Err(e) => {
                cluster.down().await;
                return Err(e.into());
            }
        }
    }
    print_json(&json!({
        "control": cluster.control_url(),
        "ingress": cluster.ingress_url(),
        "gateway": cluster.gateway_url(),
        "invokers": (0..a.invokers).map(|i| cluster.invoker_url(i)).collect::<Vec<_>>(),
    }));
    tokio::select! {
        _ = tokio::signal::ctrl_c() => {}
        _ = cluster.wait_for_shutdown_request() => {}
    }
    cluster.down().await;
    Ok(())
}

async fn cluster_down(client: &OprcClient) -> Result<(), Failure> {
    match client.shutdown().await {
        Ok(()) => Ok(()),
        // nothing listening: already down
        Err(ClientError::Transport(_)) => Ok(()),
        Err(e) => Err(e.into()),
    }
}

async fn run(cli: Cli) -> Result<(), Failure> {
    let client = OprcClient::new(cli.control, cli.ingress);
    match cli.command {
        Command::Pkg(PkgCmd::Apply { file }) => print_json(&client.apply_package(&read_file(&file)?).await?),
        Command::Obj(ObjCmd::New { object, class, args }) => {
            let req = InvokeRequest {
                invocation_id: Some(format!("new-{object}").parse().map_err(|e| Failure::assert(format!("{e}")))?),
                args: args.into_iter().collect::<BTreeMap<_, _>>(),
                class_ref: Some(class),
                ..InvokeRequest::default()
            };
            print_json(&client.invoke(&object, "new", &req).await?);
        }
        Command::Invoke(a) => invoke(&client, a).await?,
        Command::Result { invocation_id } => print_json(&client.result(&invocation_id).await?),
        Command::Ring => print_json(&client.ring().await?),
        Command::Log(LogCmd::Dump { path, payloads }) => log_dump(&path, payloads)?,
        Command::Gc(GcCmd::Run) => print_json(&client.gc().await?),
        Command::Scenario(ScenarioCmd::Run(a)) => scenario_run(a).await?,
        Command::Cluster(ClusterCmd::Up(a)) => cluster_up(a).await?,
        Command::Cluster(ClusterCmd::Down) => cluster_down(&client).await?,
        Command::Runtime(RuntimeCmd::Echo { port }) => runtime::serve_echo(port)
            .await
            .map_err(|e| Failure::infra(e.to_string()))?,
    }
    Ok(())
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_env("OPRC_LOG"))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    // scenarios need a single-threaded runtime for a reproducible trace
    let rt = match &cli.command {
        Command::Scenario(_) => tokio::runtime::Builder::new_current_thread().enable_all().build(),
        _ => tokio::runtime::Builder::new_multi_thread().enable_all().build(),
    };
    let rt = match rt {
        Ok(rt) => rt,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    match rt.block_on(run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
