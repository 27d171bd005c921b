//! `probgeo` command-line driver. [`run`] is the whole program; the binary
//! only forwards its exit code.

pub mod args;
pub mod commands;
pub mod document;
pub mod input;

use std::ffi::OsString;
use std::io::Write;

use clap::Parser;

use args::{Cli, Command, OutputArgs};
use document::{ErrorBody, ErrorDocument, RESULT_SCHEMA_VERSION};

pub const EXIT_OK: i32 = 0;
pub const EXIT_NUMERICAL: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Clone, PartialEq)]
pub enum CliError {
    /// Bad flags, unreadable or malformed input.
    Usage(String),
    /// The numerics failed on valid input.
    Failure { kind: String, message: String },
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        CliError::Usage(msg.into())
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Failure { .. } => EXIT_NUMERICAL,
        }
    }

    fn kind(&self) -> &str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Failure { kind, .. } => kind,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Failure { message, .. } => write!(f, "{message}"),
        }
    }
}

impl From<probgeo::Error> for CliError {
    fn from(e: probgeo::Error) -> Self {
        use probgeo::Error as E;
        let kind = match &e {
            // Broken preconditions and too-small datasets are input problems.
            E::Contract(_) | E::InsufficientData(_) => return CliError::Usage(e.to_string()),
            E::IllConditioned { .. } => "ill_conditioned",
            E::RhsEvaluation { .. } => "rhs_evaluation",
            E::SingularMetric { .. } => "singular_metric",
            E::OptimizationFailed { .. } => "optimization_failed",
            E::DegenerateGeodesic(_) => "degenerate_geodesic",
            E::OracleFailure(_) => "oracle_failure",
        };
        CliError::Failure { kind: kind.into(), message: e.to_string() }
    }
}

fn emit(out: &OutputArgs, outcome: &commands::Outcome) -> Result<(), CliError> {
    match &out.out {
        Some(path) => {
            std::fs::write(path, &outcome.json).map_err(|e| CliError::usage(format!("cannot write {}: {e}", path.display())))?;
            print!("{}", outcome.summary);
        }
        None => {
            print!("{}", outcome.json);
            eprint!("{}", outcome.summary);
        }
    }
    Ok(())
}

/// Parses `argv` (including the program name), runs the command and returns
/// the process exit code. Failures print a JSON error object on stdout.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let result = match &cli.command {
        Command::FitMetric(a) => commands::fit_metric(a).and_then(|o| emit(&a.output, &o).map(|_| o.failed)),
        Command::Solve(a) => commands::solve_cmd(a).and_then(|o| emit(&a.output, &o).map(|_| o.failed)),
        Command::Mean(a) => commands::mean_cmd(a).and_then(|o| emit(&a.output, &o).map(|_| o.failed)),
        Command::Pga(a) => commands::pga_cmd(a).and_then(|o| emit(&a.output, &o).map(|_| o.failed)),
        Command::Compare(a) => commands::compare_cmd(a).and_then(|o| emit(&a.output, &o).map(|_| o.failed)),
    };
    match result {
        Ok(false) => EXIT_OK,
        Ok(true) => EXIT_NUMERICAL,
        Err(e) => {
            log::error!("{e}");
            let doc = ErrorDocument {
                schema_version: RESULT_SCHEMA_VERSION,
                error: ErrorBody { kind: e.kind().to_string(), message: e.to_string(), exit_code: e.exit_code() },
            };
            let mut stdout = std::io::stdout().lock();
            let _ = writeln!(stdout, "{}", serde_json::to_string_pretty(&doc).expect("error documents serialize"));
            e.exit_code()
        }
    }
}
