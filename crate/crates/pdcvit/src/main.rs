use clap::Parser;

fn main() {
    let cli = pdcvit::cli::Cli::parse();
    if let Err(err) = pdcvit::cli::run(cli) {
        eprintln!("error: {err}");
        std::process::exit(err.exit_code());
    }
}
