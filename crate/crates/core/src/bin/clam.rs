use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Parser, Subcommand};

use clam::corpus::{parse_claqua, parse_clariq, parse_pairs, ClaquaVariant};
use clam::runner::{self, BackendSpec, RunConfig, SweepParam};
use clam::service::{self, AppState, ServiceConfig};
use clam::DatasetKind;

#[derive(Parser)]
#[command(name = "clam", version, about = "Selective clarification for ambiguous questions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a corpus file and print a summary.
    Validate {
        path: PathBuf,
        /// ambig_trivia, clariq, claqua_single or claqua_multi; guessed if omitted.
        #[arg(long)]
        kind: Option<DatasetKind>,
    },
    /// Run (or resume) an experiment.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, allow_hyphen_values = true)]
        tau: Option<f64>,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// scripted:<path>, openai or openai:<model>
        #[arg(long)]
        backend: Option<BackendSpec>,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Vary λ or τ over a finished (or resumable) run.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        param: SweepParam,
        /// Comma-separated values, e.g. 0.5,0.6,0.7 or -inf,-1,-0.3,0
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true, required = true)]
        values: Vec<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write report tables for a run directory.
    Report { run_dir: PathBuf },
    /// Serve the HTTP session API.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: IpAddr,
        /// Without a backend the service answers session requests with 503.
        #[arg(long)]
        backend: Option<BackendSpec>,
        #[arg(long, allow_hyphen_values = true)]
        tau: Option<f64>,
        /// Append finished dialogues to this JSONL file.
        #[arg(long)]
        snapshot: Option<PathBuf>,
        #[arg(long)]
        cors_origin: Option<String>,
        #[arg(long, default_value_t = 600)]
        clarification_timeout_secs: u64,
    },
}

fn main() -> ExitCode {
    tracing_subscriber::fmt().with_writer(std::io::stderr).init();
    match dispatch(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

type BoxError = Box<dyn std::error::Error + Send + Sync>;

fn dispatch(command: Command) -> Result<(), BoxError> {
    match command {
        Command::Validate { path, kind } => validate(&path, kind),
        Command::Run {
            config,
            tau,
            lambda,
            seed,
            out,
            backend,
            workers,
        } => {
            let mut config = RunConfig::load(&config)?;
            if let Some(t) = tau {
                config.classifier.tau = t;
            }
            if let Some(l) = lambda {
                config.metrics.lambda = l;
            }
            if let Some(s) = seed {
                config.seed = s;
            }
            if let Some(o) = out {
                config.out_dir = o;
            }
            if let Some(b) = backend {
                config.backend = b;
            }
            if let Some(w) = workers {
                config.workers = w;
            }
            let run = runner::run_experiment(&config)?;
            println!("{}", serde_json::to_string_pretty(&run.metrics)?);
            println!("artifacts in {}", config.out_dir.display());
            Ok(())
        }
        Command::Sweep {
            config,
            param,
            values,
            out,
        } => {
            let mut config = RunConfig::load(&config)?;
            if let Some(o) = out {
                config.out_dir = o;
            }
            let table = runner::sweep(&config, param, &values)?;
            for row in &table.rows {
                let acc = row.report.as_ref().map(|r| r.adjusted_accuracy);
                println!(
                    "{}\t{}\t{}",
                    row.value,
                    row.policy,
                    acc.map_or("n/a".into(), |a| format!("{a:.4}"))
                );
            }
            Ok(())
        }
        Command::Report { run_dir } => {
            for path in runner::report(&run_dir)? {
                println!("{}", path.display());
            }
            Ok(())
        }
        Command::Serve {
            port,
            host,
            backend,
            tau,
            snapshot,
            cors_origin,
            clarification_timeout_secs,
        } => {
            let backend = backend.map(|b| b.build()).transpose()?;
            let mut config = ServiceConfig {
                snapshot_path: snapshot,
                cors_origin,
                clarification_timeout: Duration::from_secs(clarification_timeout_secs),
                ..ServiceConfig::default()
            };
            if let Some(t) = tau {
                config.pipeline.classifier.tau = t;
            }
            let app = AppState::new(backend, config);
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(service::serve(SocketAddr::new(host, port), app))?;
            Ok(())
        }
    }
}

fn guess_kind(path: &Path, text: &str) -> DatasetKind {
    if path.extension().is_some_and(|e| e == "tsv") {
        return DatasetKind::ClariQ;
    }
    let first = text.lines().find(|l| !l.trim().is_empty()).unwrap_or_default();
    match serde_json::from_str::<serde_json::Value>(first)
        .ok()
        .and_then(|v| v.get("variant").and_then(|v| v.as_str().map(str::to_string)))
        .as_deref()
    {
        Some("single") => DatasetKind::ClaquaSingle,
        Some("multi") => DatasetKind::ClaquaMulti,
        _ => DatasetKind::AmbigTrivia,
    }
}

fn validate(path: &Path, kind: Option<DatasetKind>) -> Result<(), BoxError> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let kind = kind.unwrap_or_else(|| guess_kind(path, &text));
    let (total, ambiguous) = match kind {
        DatasetKind::AmbigTrivia => {
            let pairs = parse_pairs(&text)?;
            (pairs.len() * 2, pairs.len())
        }
        DatasetKind::ClariQ => {
            let qs = parse_clariq(text.as_bytes())?;
            (qs.len(), qs.iter().filter(|q| q.ambiguous).count())
        }
        DatasetKind::ClaquaSingle | DatasetKind::ClaquaMulti => {
            let variant = if kind == DatasetKind::ClaquaSingle {
                ClaquaVariant::Single
            } else {
                ClaquaVariant::Multi
            };
            let qs = parse_claqua(&text, variant)?;
            (qs.len(), qs.iter().filter(|q| q.ambiguous).count())
        }
    };
    println!(
        "{}: valid {kind} corpus, {total} questions ({ambiguous} ambiguous)",
        path.display()
    );
    Ok(())
}
