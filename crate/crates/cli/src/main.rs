use std::process::ExitCode;

use clap::Parser;
use reside_cli::Cli;

fn configure_threads() {
    #[cfg(feature = "parallel")]
    if let Ok(raw) = std::env::var("RESIDE_THREADS") {
        match raw.parse::<usize>() {
            Ok(n) if n > 0 => {
                if let Err(err) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                    log::warn!("could not size the thread pool: {err}");
                }
            }
            _ => log::warn!("ignoring RESIDE_THREADS={raw:?}, expected a positive integer"),
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    configure_threads();
    match reside_cli::run(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
