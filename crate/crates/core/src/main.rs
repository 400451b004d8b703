use clap::Parser;
use mehtc::cli::{main_with, Cli};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MEHTC_LOG", "info").write_style("MEHTC_LOG_STYLE")).init();
    std::process::exit(main_with(Cli::parse()));
}
