use clap::Parser;

fn main() {
    let cli = lfsod::cli::Cli::parse();
    if let Err(e) = lfsod::cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
