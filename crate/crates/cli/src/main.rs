use clap::Parser;

fn main() {
    let cli = afn_cli::commands::Cli::parse();
    if let Err(e) = afn_cli::commands::run(cli) {
        eprintln!("{}", e.to_json());
        std::process::exit(e.exit_code());
    }
}
