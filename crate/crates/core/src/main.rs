use clap::Parser;

use dipole_rg::cli::{run, Cli};

fn main() {
    std::process::exit(run(Cli::parse()));
}
