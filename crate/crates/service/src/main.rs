use std::io::Write;

use clap::Parser;
use threadmem_service::cli::{self, Cli};

fn main() {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    let result = cli::run(cli, &mut out);
    let _ = out.flush();
    if let Err(e) = result {
        eprintln!("error: {e:#}");
        std::process::exit(cli::exit_code(&e));
    }
}
