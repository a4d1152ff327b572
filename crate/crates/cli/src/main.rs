use clap::Parser;

fn main() {
    let cli = cryoplan_cli::Cli::parse();
    if let Err(e) = cryoplan_cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
