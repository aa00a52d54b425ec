use clap::Parser;

fn main() {
    let cli = trifield::cli::Cli::parse();
    std::process::exit(trifield::cli::run(cli));
}
