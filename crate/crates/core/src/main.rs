use clap::Parser;

fn main() {
    let cli = tidalfarm::cli::Cli::parse();
    std::process::exit(tidalfarm::cli::main_with(cli));
}
