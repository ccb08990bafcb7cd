use clap::Parser;
use dbkaunet::cli::{run, Cli};

fn main() {
    std::process::exit(run(Cli::parse()));
}
