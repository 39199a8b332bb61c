use clap::Parser;
use cocoa_continual::cli::{run, Cli};

fn main() {
    std::process::exit(run(Cli::parse()));
}
