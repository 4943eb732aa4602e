use clap::Parser;

fn main() {
    std::process::exit(minesim::cli::run(minesim::cli::Cli::parse()));
}
