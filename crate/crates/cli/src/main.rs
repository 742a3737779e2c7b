//! `pmm-synth` command-line entry point.
//!
//! Exit codes: 0 success, 2 invalid input, 3 failure while working.
//! Errors are printed to stderr as one JSON object.

mod commands;

use std::process::ExitCode;

use clap::Parser;

use commands::Command;

#[derive(Parser)]
#[command(name = "pmm-synth", version, about = "Multi-dataset, multi-modal MRI synthesis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

const EXIT_VALIDATION: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

fn error_record(err: &anyhow::Error) -> (u8, serde_json::Value) {
    let core = err.chain().find_map(|e| e.downcast_ref::<pmm_synth::Error>());
    let (code, kind, field) = match core {
        Some(e) if e.is_validation() => (EXIT_VALIDATION, e.kind(), e.field_name()),
        Some(e) => (EXIT_RUNTIME, e.kind(), None),
        None => (EXIT_RUNTIME, "runtime", None),
    };
    let mut record = serde_json::json!({
        "error": {
            "kind": kind,
            "message": format!("{err:#}"),
            "exit_code": code,
        }
    });
    if let Some(field) = field {
        record["error"]["field"] = field.into();
    }
    (code, record)
}

fn usage_error(err: &clap::Error) -> ExitCode {
    let record = serde_json::json!({
        "error": {
            "kind": "usage",
            "message": err.kind().to_string(),
            "exit_code": EXIT_VALIDATION,
        }
    });
    eprint!("{}", err.render());
    eprintln!("{record}");
    ExitCode::from(EXIT_VALIDATION)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) if !err.use_stderr() => {
            // --help / --version
            let _ = err.print();
            return ExitCode::SUCCESS;
        }
        Err(err) => return usage_error(&err),
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let (code, record) = error_record(&err);
            eprintln!("{record}");
            ExitCode::from(code)
        }
    }
}
