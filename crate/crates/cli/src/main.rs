use std::panic;
use std::process::ExitCode;

use clap::Parser;
use spatter_cli::{run, Cli, EXIT_INTERNAL, EXIT_OK, EXIT_USAGE};

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    let code = match panic::catch_unwind(|| run(&cli)) {
        Ok(Ok(())) => EXIT_OK,
        Ok(Err(e)) => {
            log::error!("{e}");
            e.exit_code()
        }
        Err(_) => EXIT_INTERNAL,
    };
    ExitCode::from(code as u8)
}
