use clap::Parser;

fn main() {
    let cli = mmdfr_cli::Cli::parse();
    if let Err(err) = mmdfr_cli::run(cli) {
        eprintln!("error: {err:#}");
        std::process::exit(mmdfr_cli::exit_code(&err));
    }
}
