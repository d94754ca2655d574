use clap::Parser;

fn main() {
    let cli = subop_cli::Cli::parse();
    if let Err(e) = subop_cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
