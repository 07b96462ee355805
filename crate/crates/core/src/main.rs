use std::process::ExitCode;

use clap::Parser;
use plnfit::cli::{self, Cli, ErrorReport};

fn main() -> ExitCode {
    let args = Cli::parse();
    let level = match args.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let result = cli::resolve_threads(args.threads).and_then(|threads| {
        #[cfg(feature = "parallel")]
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| plnfit::PlnError::Config(format!("thread pool: {e}")))?;
        cli::run(&args.command, threads)
    });
    match result {
        Ok(summary) => {
            if let Some(q) = summary.chosen_rank {
                println!("rank {q}");
            }
            println!("wrote {} files to {}", summary.artifacts.len(), summary.out.display());
            ExitCode::SUCCESS
        }
        Err(err) => {
            let report = serde_json::json!({ "error": ErrorReport::from(&err) });
            eprintln!("{report}");
            ExitCode::from(if err.is_usage() { 2 } else { 1 })
        }
    }
}
