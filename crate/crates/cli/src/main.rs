use clap::Parser;

fn main() {
    let cli = rcm_cli::Cli::parse();
    if let Err(e) = rcm_cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
