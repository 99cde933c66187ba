use clap::Parser;

use promptlens_server::cli::{execute, Cli};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let args = cli.gateway.clone();
    let build = move || args.build();
    if let Err(e) = execute(cli, &build, &mut std::io::stdout().lock()) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
