//! `trialmesh` subcommands: init, serve, train, export.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::algorithms::train::curve_to_csv;
use crate::algorithms::{train_loop, train_offline, Algorithm, AlgoError, Hyperparams, TrainConfig, TrainOutcome};
use crate::datastore::{self, DataError};
use crate::orchestrator::server::{ServeError, ServeOptions, Server};
use crate::orchestrator::{OrchestratedDriver, RemoteDriver, TrialConfig};

pub const MANIFEST_FILE: &str = "trialmesh.json";
pub const DATA_DIR_ENV: &str = "TRIALMESH_DATA_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingDefaults {
    pub episodes: u64,
    pub seed: u64,
    /// Same target layout every episode.
    pub fixed_layout: bool,
}

impl Default for TrainingDefaults {
    fn default() -> Self {
        Self {
            episodes: 200,
            seed: 0,
            fixed_layout: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProjectManifest {
    pub name: String,
    pub trial: TrialConfig,
    pub algorithm: Algorithm,
    pub hyperparams: Hyperparams,
    pub training: TrainingDefaults,
}

impl Default for ProjectManifest {
    fn default() -> Self {
        Self {
            name: "trialmesh-project".into(),
            trial: TrialConfig::default(),
            algorithm: Algorithm::D3maddpg,
            hyperparams: Hyperparams::default(),
            training: TrainingDefaults::default(),
        }
    }
}

/// A failed command: one `error: <Kind>: <message>` line on stderr.
#[derive(Debug, Clone, PartialEq)]
pub struct CliError {
    pub kind: &'static str,
    pub message: String,
}

impl CliError {
    fn new(kind: &'static str, message: impl Into<String>) -> Self {
        Self {
            kind,
            message: message.into().replace('\n', " "),
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "error: {}: {}", self.kind, self.message)
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::new("Io", format!("{}: {e}", path.display()))
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        let kind = match &e {
            DataError::OutOfOrder { .. } => "OutOfOrder",
            DataError::StreamClosed(_) => "StreamClosed",
            DataError::TrialNotEnded(_) => "TrialNotEnded",
            DataError::UnknownTrial(_) => "UnknownTrial",
            DataError::TrialExists(_) => "TrialExists",
            DataError::Corrupt { .. } => "CorruptLog",
            DataError::BadDataset(_) => "BadDataset",
            DataError::Io(_) => "Io",
        };
        CliError::new(kind, e.to_string())
    }
}

impl From<AlgoError> for CliError {
    fn from(e: AlgoError) -> Self {
        CliError::new("TrainingFailed", e.to_string())
    }
}

impl From<ServeError> for CliError {
    fn from(e: ServeError) -> Self {
        match e {
            ServeError::PortInUse(p) => CliError::new("PortInUse", format!("port {p} is already in use")),
            ServeError::Io(m) => CliError::new("Io", m),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "trialmesh", version, about = "Human-in-the-loop multi-agent RL trials")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Create a project directory with a trialmesh.json manifest
    Init {
        /// Directory to create (must be absent or empty)
        name: PathBuf,
    },
    /// Run the orchestrator on TCP and WebSocket ports until interrupted
    Serve(ServeArgs),
    /// Train a learner through the orchestrator, or offline from a dataset
    Train(TrainArgs),
    /// Export ended trials as a transition dataset
    Export(ExportArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// Project manifest or bare trial config (JSON)
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Trial log root; overrides TRIALMESH_DATA_DIR
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, default_value_t = 9000)]
    pub port: u16,
    #[arg(long, default_value_t = 9001)]
    pub ws_port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    /// Seed of the first trial; later trials count up from it
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub episodes: Option<u64>,
    /// Train from an exported dataset instead of live trials
    #[arg(long, conflicts_with = "connect")]
    pub offline: Option<PathBuf>,
    /// Join a running orchestrator at host:port instead of hosting trials in process
    #[arg(long)]
    pub connect: Option<String>,
    #[arg(long)]
    pub algorithm: Option<Algorithm>,
    /// Where curve.csv and checkpoints/ go [default: <project>/runs/seed-<seed>]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    /// Trial ids, in output order
    pub trial_ids: Vec<String>,
    /// Export every ended trial under the data directory
    #[arg(long, conflicts_with = "trial_ids")]
    pub all: bool,
    #[arg(long, default_value = "dataset.jsonl")]
    pub out: PathBuf,
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
}

impl std::str::FromStr for ProjectManifest {
    type Err = CliError;

    /// Accepts a full manifest or a bare trial config.
    fn from_str(text: &str) -> Result<Self, CliError> {
        match serde_json::from_str::<ProjectManifest>(text) {
            Ok(m) => Ok(m),
            Err(manifest_err) => match serde_json::from_str::<TrialConfig>(text) {
                Ok(trial) => Ok(ProjectManifest {
                    trial,
                    ..ProjectManifest::default()
                }),
                Err(_) => Err(CliError::new("InvalidConfig", manifest_err.to_string())),
            },
        }
    }
}

/// Manifest plus the directory it belongs to.
fn load(config: Option<&Path>) -> Result<(ProjectManifest, PathBuf), CliError> {
    let cwd = PathBuf::from(".");
    let path = match config {
        Some(p) => p.to_path_buf(),
        None if Path::new(MANIFEST_FILE).is_file() => PathBuf::from(MANIFEST_FILE),
        None => return Ok((ProjectManifest::default(), cwd)),
    };
    let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    let manifest: ProjectManifest = text.parse()?;
    manifest
        .trial
        .validate()
        .map_err(|e| CliError::new("InvalidConfig", e.to_string()))?;
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).map_or(cwd, Path::to_path_buf);
    Ok((manifest, dir))
}

fn data_dir(flag: Option<&Path>, project: &Path) -> PathBuf {
    flag.map(Path::to_path_buf)
        .or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| project.join("data"))
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Init { name } => cmd_init(&name),
        Command::Serve(args) => cmd_serve(args),
        Command::Train(args) => cmd_train(args),
        Command::Export(args) => cmd_export(args),
    }
}

pub fn cmd_init(dir: &Path) -> Result<(), CliError> {
    if dir.exists() {
        let mut entries = fs::read_dir(dir).map_err(|e| io_err(dir, e))?;
        if entries.next().is_some() {
            return Err(CliError::new("DirectoryNotEmpty", dir.display().to_string()));
        }
    }
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let name = dir
        .file_name()
        .map_or_else(|| "trialmesh-project".into(), |n| n.to_string_lossy().into_owned());
    let manifest = ProjectManifest {
        name: name.clone(),
        ..ProjectManifest::default()
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, json + "\n").map_err(|e| io_err(&path, e))?;
    let readme = dir.join("README.md");
    fs::write(&readme, readme_stub(&name)).map_err(|e| io_err(&readme, e))?;
    println!("created {}", path.display());
    Ok(())
}

fn readme_stub(name: &str) -> String {
    format!(
        "# {name}

A trialmesh project. `trialmesh.json` holds the settings:

- `trial`: roster (`n_agents`, `include_human`), `max_ticks`, `tick_deadline_ms`,
  the grid in `env_spec`, and the environment `seed`.
- `algorithm`: `dqn`, `ddqn`, `d3maddpg` or `mixed-critic`.
- `hyperparams`: learner settings (learning rates, exploration schedule, replay).
- `training`: default `episodes`, `seed` and `fixed_layout` for `trialmesh train`.

```
trialmesh serve --config trialmesh.json
trialmesh train --config trialmesh.json --seed 1
trialmesh export --all --out dataset.jsonl
```

Trial logs go to `data/` unless `--data-dir` or `TRIALMESH_DATA_DIR` says otherwise.
"
    )
}

pub fn cmd_serve(args: ServeArgs) -> Result<(), CliError> {
    let (manifest, project) = load(args.common.config.as_deref())?;
    let mut config = manifest.trial;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    let opts = ServeOptions {
        config,
        host: args.host,
        port: args.port,
        ws_port: args.ws_port,
        data_dir: data_dir(args.common.data_dir.as_deref(), &project),
    };
    let server = Server::bind(opts, |line| {
        let mut out = std::io::stdout().lock();
        let _ = writeln!(out, "{line}");
        let _ = out.flush();
    })?;
    let flag = server.shutdown_flag();
    ctrlc::set_handler(move || flag.store(true, std::sync::atomic::Ordering::SeqCst))
        .map_err(|e| CliError::new("Io", e.to_string()))?;
    println!("listening tcp={} ws={}", server.tcp_addr(), server.ws_addr());
    let _ = std::io::stdout().flush();
    let summaries = server.run()?;
    println!("shutdown: {} trials drained", summaries.len());
    Ok(())
}

fn free_prefix(root: &Path, seed: u64) -> String {
    let base = format!("train-s{seed}");
    let taken = |p: &str| root.join(format!("{p}-00000")).exists();
    if !taken(&base) {
        return base;
    }
    (2..).map(|k| format!("{base}-r{k}")).find(|p| !taken(p)).expect("unbounded")
}

pub fn cmd_train(args: TrainArgs) -> Result<(), CliError> {
    let (manifest, project) = load(args.common.config.as_deref())?;
    let seed = args.seed.unwrap_or(manifest.training.seed);
    let mut config = TrainConfig {
        algorithm: args.algorithm.unwrap_or(manifest.algorithm),
        hyper: manifest.hyperparams.clone(),
        episodes: args.episodes.unwrap_or(manifest.training.episodes),
        seed,
        n_agents: manifest.trial.n_agents,
        env: manifest.trial.env_spec.clone(),
        fixed_layout: manifest.training.fixed_layout,
        max_env_steps: None,
    };
    let out_dir = args
        .out
        .clone()
        .unwrap_or_else(|| project.join("runs").join(format!("seed-{seed}")));
    let outcome: TrainOutcome = if let Some(dataset) = &args.offline {
        let trials = datastore::read_dataset(dataset)?;
        let episodes: Vec<_> = trials.into_iter().map(|t| t.transitions).collect();
        if args.episodes.is_none() {
            config.episodes = episodes.len() as u64;
        }
        train_offline(&config, &episodes).map_err(|e| match e {
            AlgoError::Shape(m) => CliError::new("BadDataset", m),
            other => other.into(),
        })?
    } else if let Some(addr) = &args.connect {
        let mut driver = RemoteDriver::connect(addr, config.n_agents)
            .map_err(|e| CliError::new("OrchestratorUnreachable", format!("{addr}: {e}")))?;
        train_loop(&config, &mut driver)?
    } else {
        let root = data_dir(args.common.data_dir.as_deref(), &project);
        fs::create_dir_all(&root).map_err(|e| io_err(&root, e))?;
        let prefix = free_prefix(&root, seed);
        let mut driver =
            OrchestratedDriver::new(manifest.trial.clone(), Some(root.clone()), seed, config.fixed_layout, &prefix);
        let outcome = train_loop(&config, &mut driver)?;
        driver.finish()?;
        println!("{} trials logged under {} as {prefix}-*", driver.summaries().len(), root.display());
        outcome
    };
    let ckpt = out_dir.join("checkpoints");
    fs::create_dir_all(&ckpt).map_err(|e| io_err(&ckpt, e))?;
    let curve = out_dir.join("curve.csv");
    fs::write(&curve, curve_to_csv(&outcome.curve)).map_err(|e| io_err(&curve, e))?;
    outcome.learner.save(&ckpt)?;
    println!(
        "{} episodes, {} steps, {} updates; curve {}",
        outcome.curve.len(),
        outcome.env_steps,
        outcome.updates,
        curve.display()
    );
    Ok(())
}

pub fn cmd_export(args: ExportArgs) -> Result<(), CliError> {
    let root = data_dir(args.data_dir.as_deref(), Path::new("."));
    let ids = if args.all {
        let mut ended = Vec::new();
        for id in datastore::list_trials(&root)? {
            if datastore::read_log(&root, &id)?.ended() {
                ended.push(id);
            }
        }
        ended
    } else {
        args.trial_ids
    };
    if ids.is_empty() {
        return Err(CliError::new("NoTrials", "name trial ids or pass --all"));
    }
    let n = datastore::export_dataset(&root, &ids, &args.out)?;
    println!("{n} records");
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_round_trips() {
        let m = ProjectManifest::default();
        let text = serde_json::to_string_pretty(&m).unwrap();
        let back: ProjectManifest = text.parse().unwrap();
        assert_eq!(back, m);
        assert_eq!(serde_json::to_string_pretty(&back).unwrap(), text);
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = "{\"name\": \"x\", \"colour\": 3}".parse::<ProjectManifest>().unwrap_err();
        assert_eq!(err.kind, "InvalidConfig");
    }

    #[test]
    fn bare_trial_config_accepted() {
        let m: ProjectManifest = "{\"n_agents\": 1, \"max_ticks\": 5}".parse().unwrap();
        assert_eq!((m.trial.n_agents, m.trial.max_ticks), (1, 5));
        assert_eq!(m.name, ProjectManifest::default().name);
    }

    #[test]
    fn init_refuses_nonempty_directory() {
        let dir = tempfile::tempdir().unwrap();
        let project = dir.path().join("demo");
        cmd_init(&project).unwrap();
        let text = fs::read_to_string(project.join(MANIFEST_FILE)).unwrap();
        let m: ProjectManifest = text.parse().unwrap();
        assert_eq!(m.name, "demo");
        assert_eq!(cmd_init(&project).unwrap_err().kind, "DirectoryNotEmpty");
    }

    #[test]
    fn error_line_is_single_line() {
        let e = CliError::new("Io", "a\nb");
        assert_eq!(e.to_string(), "error: Io: a b");
    }
}
