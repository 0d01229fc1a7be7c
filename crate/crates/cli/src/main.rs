use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use stancefact_cli::app::{build_retriever, load_config, AppOptions, BackendChoice};
use stancefact_cli::commands::{self, StanceChoice};
use stancefact_cli::ApiError;
use stancefact_core::tree::NodeId;

#[derive(Parser)]
#[command(name = "stancefact", version, about = "Retrieve data facts that support or oppose a statement")]
struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Persistent dataset store directory.
    #[arg(long, global = true, default_value = ".stancefact/store")]
    store: PathBuf,
    /// CSV file or directory of CSV files to load in memory (repeatable).
    #[arg(long, global = true)]
    csv: Vec<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Default)]
struct BackendArgs {
    /// Answer model prompts from a recorded transcript.
    #[arg(long, conflicts_with = "script")]
    replay: Option<PathBuf>,
    /// Answer model prompts from a rule file of canned responses.
    #[arg(long)]
    script: Option<PathBuf>,
    /// Append every model answer to this transcript.
    #[arg(long)]
    record: Option<PathBuf>,
}

impl BackendArgs {
    fn choice(&self) -> BackendChoice {
        match (&self.replay, &self.script) {
            (Some(p), _) => BackendChoice::Replay(p.clone()),
            (None, Some(p)) => BackendChoice::Script(p.clone()),
            (None, None) => BackendChoice::Live,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Add a CSV file to the dataset store.
    Ingest {
        path: PathBuf,
        /// The file is a wide indicator export with one column per year.
        #[arg(long)]
        wide_wdi: bool,
    },
    /// Run the HTTP API.
    Serve {
        #[arg(long)]
        port: Option<u16>,
        #[arg(long)]
        bind: Option<String>,
        #[command(flatten)]
        backend: BackendArgs,
    },
    /// Build a retrieval tree for a statement and save it.
    Retrieve {
        #[arg(long)]
        statement: String,
        /// both, support or oppose.
        #[arg(long, default_value = "both")]
        stance: StanceChoice,
        /// Expansions of the recommended node after the initial one.
        #[arg(long, default_value_t = 0)]
        depth: usize,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        backend: BackendArgs,
    },
    /// Rebuild a saved session from a transcript and verify it is identical.
    Replay { blob: PathBuf, transcript: PathBuf },
    /// Write the chart specifications of a node's facts.
    Facts {
        tree: PathBuf,
        #[arg(long)]
        node: NodeId,
        #[arg(long = "emit-charts")]
        emit_charts: PathBuf,
    },
}

fn options(cli: &Cli, backend: BackendChoice, record: Option<PathBuf>) -> Result<AppOptions, ApiError> {
    Ok(AppOptions {
        config: load_config(cli.config.as_deref())?,
        store: Some(cli.store.clone()),
        csv: cli.csv.clone(),
        backend,
        record,
    })
}

fn print_json(v: &impl serde::Serialize) -> anyhow::Result<()> {
    use std::io::Write;
    let text = serde_json::to_string_pretty(v).context("serializing output")?;
    match writeln!(std::io::stdout().lock(), "{text}") {
        // A closed pipe (e.g. `| head`) is not an error.
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        r => r.context("writing output"),
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match &cli.command {
        Command::Ingest { path, wide_wdi } => print_json(&commands::ingest(&cli.store, path, *wide_wdi)?),
        Command::Serve { port, bind, backend } => {
            let opts = options(&cli, backend.choice(), backend.record.clone())?;
            let bind = bind.clone().unwrap_or_else(|| opts.config.server.bind.clone());
            let port = port.unwrap_or(opts.config.server.port);
            let retriever = Arc::new(build_retriever(&opts)?);
            let rt = tokio::runtime::Runtime::new().context("starting runtime")?;
            rt.block_on(commands::serve(retriever.clone(), &bind, port))?;
            drop(rt);
            drop(retriever);
            Ok(())
        }
        Command::Retrieve { statement, stance, depth, out, backend } => {
            let opts = options(&cli, backend.choice(), backend.record.clone())?;
            print_json(&commands::retrieve(&opts, statement, *stance, *depth, out)?)
        }
        Command::Replay { blob, transcript } => {
            let opts = options(&cli, BackendChoice::Replay(transcript.clone()), None)?;
            commands::replay(&opts, blob)?;
            println!("identical");
            Ok(())
        }
        Command::Facts { tree, node, emit_charts } => {
            print_json(&commands::emit_charts(tree, *node, emit_charts)?)
        }
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()),
        )
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let api = match e.downcast::<ApiError>() {
                Ok(api) => api,
                Err(other) => ApiError::internal(format!("{other:#}")),
            };
            eprintln!("{}", api.to_json());
            ExitCode::FAILURE
        }
    }
}
