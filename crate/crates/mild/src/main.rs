use clap::Parser;

fn main() {
    let cli = mild::cli::Cli::parse();
    std::process::exit(mild::cli::run(cli));
}
