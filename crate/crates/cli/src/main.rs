use clap::Parser;

fn main() {
    let cli = sghmm_cli::Cli::parse();
    if let Err(e) = sghmm_cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(sghmm_cli::exit_code(&e));
    }
}
