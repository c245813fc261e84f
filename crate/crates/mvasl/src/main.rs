use clap::Parser;

use mvasl::cli::{report_error, run, Cli};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MVASL_LOG", "info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    if let Err(err) = run(cli) {
        std::process::exit(report_error(&err));
    }
}
