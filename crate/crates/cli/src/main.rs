use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tdrift_cli::{cmd_drift, cmd_report, cmd_run, cmd_split, fsutil::write_atomic, CliError, Overrides};

#[derive(Parser)]
#[command(name = "tdrift", version, about = "Temporal drift experiments for multi-label classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print document counts per bucket and period.
    Split(Overrides),
    /// Print vocabulary divergence between training halves and test data.
    Drift {
        #[command(flatten)]
        overrides: Overrides,
        /// Also write the divergences as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Train and evaluate every method and seed; resumes unfinished runs.
    Run(Overrides),
    /// Summarize a finished run directory as a markdown table.
    Report { dir: PathBuf },
}

fn json(value: &impl serde::Serialize) -> String {
    serde_json::to_string_pretty(value).expect("output serializes") + "\n"
}

/// Writes to stdout; a closed pipe (`tdrift drift | head`) is not an error.
fn emit(text: &str) -> Result<(), CliError> {
    match std::io::stdout().lock().write_all(text.as_bytes()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(CliError::io("writing output", e)),
        _ => Ok(()),
    }
}

fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Split(o) => emit(&json(&cmd_split(&o.resolve()?)?))?,
        Command::Drift { overrides, csv } => {
            let out = cmd_drift(&overrides.resolve()?)?;
            for w in &out.warnings {
                eprintln!("warning: {w}");
            }
            if let Some(path) = csv {
                write_atomic(&path, out.to_csv().as_bytes())?;
            }
            emit(&json(&out))?;
        }
        Command::Run(o) => {
            let outcome = cmd_run(&o.resolve()?)?;
            eprintln!(
                "{}: {} cells trained, {} resumed",
                outcome.dir.display(),
                outcome.computed,
                outcome.resumed
            );
            emit(&cmd_report(&outcome.dir)?)?;
        }
        Command::Report { dir } => emit(&cmd_report(&dir)?)?,
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // Usage errors are bad input like any other.
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
