use clap::Parser;

fn main() {
    let cli = qsr_cli::Cli::parse();
    if let Err(e) = qsr_cli::run(&cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
