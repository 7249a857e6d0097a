use clap::Parser;

use moe_surgery::cli::{init_threads, run, Cli};

fn main() {
    let cli = Cli::parse();
    init_threads();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
