use clap::{Parser, Subcommand};
use cnslab::config::Kind;
use cnslab::error::CliError;
use cnslab::{run_batch, run_config, update_goldens, RunOptions};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "cnslab", version, about = "Run compressible Navier-Stokes maximal-regularity experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario file.
    Run {
        config: PathBuf,
        /// Output directory (default: the scenario's `output.dir`).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Compare the summary against `<dir>/<scenario>.json`.
        #[arg(long)]
        goldens: Option<PathBuf>,
        /// Exit with 1 when a check or golden fails.
        #[arg(long)]
        strict: bool,
    },
    /// Run every `*.toml` scenario in a directory concurrently
    /// (worker count from CNSLAB_WORKERS).
    Batch {
        dir: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        goldens: Option<PathBuf>,
        #[arg(long)]
        strict: bool,
    },
    /// Check scenarios against frozen goldens, or refreeze them with --update.
    Goldens {
        #[arg(long)]
        update: bool,
        #[arg(long, default_value = "scenarios")]
        scenarios: PathBuf,
        #[arg(long, default_value = "goldens")]
        dir: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// List the scenario kinds.
    ListKinds,
}

/// `println!` that tolerates a closed stdout (e.g. piped into `head`).
macro_rules! out {
    ($($t:tt)*) => {{
        use std::io::Write;
        let _ = writeln!(std::io::stdout(), $($t)*);
    }};
}

fn fail(e: CliError) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(e.exit_code() as u8)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run { config, out, goldens, strict } => match run_config(&config, &RunOptions { out, goldens }) {
            Ok(o) => {
                for c in &o.report.checks {
                    out!("{} {}", if c.passed { "PASS" } else { "FAIL" }, c.name);
                }
                if let Some(g) = &o.report.goldens {
                    out!("{} goldens ({} values)", if g.passed() { "PASS" } else { "FAIL" }, g.entries.len());
                }
                for f in &o.files {
                    out!("wrote {}", f.display());
                }
                if strict && !o.passed() {
                    ExitCode::from(1)
                } else {
                    ExitCode::SUCCESS
                }
            }
            Err(e) => fail(e),
        },
        Command::Batch { dir, out, goldens, strict } => {
            let summary_dir = out.clone().unwrap_or_else(|| dir.join("out"));
            match run_batch(&dir, &RunOptions { out, goldens }, &summary_dir) {
                Ok(s) => {
                    for e in &s.entries {
                        let status = match (&e.error, e.checks_passed, e.goldens_passed) {
                            (Some(msg), _, _) => format!("ERROR({}) {msg}", e.exit_code),
                            (None, Some(true), Some(false)) => "FAIL goldens".into(),
                            (None, Some(true), _) => "PASS".into(),
                            _ => "FAIL checks".into(),
                        };
                        out!("{}: {status}", e.config);
                    }
                    ExitCode::from(s.exit_code(strict) as u8)
                }
                Err(e) => fail(e),
            }
        }
        Command::Goldens { update, scenarios, dir, out } => {
            if update {
                match update_goldens(&scenarios, &dir) {
                    Ok(files) => {
                        for f in files {
                            out!("froze {}", f.display());
                        }
                        ExitCode::SUCCESS
                    }
                    Err(e) => fail(e),
                }
            } else {
                let summary_dir = out.clone().unwrap_or_else(|| scenarios.join("out"));
                match run_batch(&scenarios, &RunOptions { out, goldens: Some(dir) }, &summary_dir) {
                    Ok(s) => {
                        for e in &s.entries {
                            let ok = e.exit_code == 0 && e.goldens_passed == Some(true);
                            out!("{} {}", if ok { "PASS" } else { "FAIL" }, e.config);
                        }
                        let all = s.entries.iter().all(|e| e.exit_code == 0 && e.goldens_passed == Some(true));
                        if all {
                            ExitCode::SUCCESS
                        } else {
                            ExitCode::from(s.exit_code(true).max(1) as u8)
                        }
                    }
                    Err(e) => fail(e),
                }
            }
        }
        Command::ListKinds => {
            for k in Kind::ALL {
                out!("{:<16} {}", k.name(), k.describe());
            }
            ExitCode::SUCCESS
        }
    }
}
