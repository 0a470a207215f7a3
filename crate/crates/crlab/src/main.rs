//! `crlab run <config.json> [--out DIR] [--seed N]`
//!
//! Exit status: 0 success, 1 I/O failure, 2 invalid config, 3 numerical
//! failure (domain exit, blow-up, failed solve). Failures print one JSON
//! error record on stdout.

mod config;
mod output;
mod tasks;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;

use config::ConfigError;
use output::{Provenance, Writer};
use tasks::RunError;

#[derive(Parser)]
#[command(name = "crlab", version, about = "Pseudohermitian geometry experiments on CR chart models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the task described by a JSON config.
    Run {
        config: PathBuf,
        /// Output directory (overrides `output.dir`; default: current directory).
        #[arg(long)]
        out: Option<PathBuf>,
        /// RNG seed for sweeps and loops (overrides `seed`; default 0).
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Serialize)]
struct ErrorRecord<'a> {
    error: &'a str,
    field: Option<&'a str>,
    message: &'a str,
    exit_code: i32,
    #[serde(skip_serializing_if = "Option::is_none")]
    #[serde(flatten)]
    provenance: Option<&'a Provenance>,
}

fn report(err: &RunError, writer: Option<&mut Writer>, task: &str) -> ExitCode {
    let code = err.exit_code();
    let (kind, field, message) = match err {
        RunError::Validation(e) => ("validation", Some(e.field.as_str()), e.message.as_str()),
        RunError::Numerical(m) => ("numerical", None, m.as_str()),
        RunError::Io(m) => ("io", None, m.as_str()),
    };
    let provenance = writer.as_ref().map(|w| w.provenance().clone());
    let rec = ErrorRecord { error: kind, field, message, exit_code: code, provenance: provenance.as_ref() };
    println!("{}", serde_json::to_string(&rec).expect("error record serializes"));
    if let Some(w) = writer {
        if !matches!(err, RunError::Io(_)) {
            // the envelope carries the provenance
            let _ = w.json("_error", task, &ErrorRecord { provenance: None, ..rec });
        }
    }
    ExitCode::from(code as u8)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let Command::Run { config, out, seed } = cli.command;
    let bytes = match std::fs::read(&config) {
        Ok(b) => b,
        Err(e) => return report(&RunError::Io(format!("{}: {e}", config.display())), None, ""),
    };
    let text = match String::from_utf8(bytes.clone()) {
        Ok(t) => t,
        Err(_) => {
            let e = ConfigError { field: String::new(), message: "config is not valid UTF-8".into() };
            return report(&RunError::Validation(e), None, "");
        }
    };
    let cfg = match config::parse(&text) {
        Ok(c) => c,
        Err(e) => return report(&RunError::Validation(e), None, ""),
    };
    let seed = seed.or(cfg.seed).unwrap_or(0);
    let dir = out.or_else(|| cfg.output.dir.as_ref().map(PathBuf::from)).unwrap_or_else(|| PathBuf::from("."));
    let task = cfg.task.as_str();
    let prefix = cfg.output.prefix.clone().unwrap_or_else(|| task.to_string());
    let mut writer = match Writer::new(&dir, &prefix, Provenance::new(&bytes, seed)) {
        Ok(w) => w,
        Err(e) => return report(&RunError::Io(format!("{}: {e}", dir.display())), None, task),
    };
    match tasks::run(&cfg, &mut writer) {
        Ok(()) => {
            for p in writer.written() {
                eprintln!("wrote {}", p.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => report(&e, Some(&mut writer), task),
    }
}
