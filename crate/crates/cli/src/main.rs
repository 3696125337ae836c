use clap::Parser;

fn main() {
    let cli = depthgrow_cli::Cli::parse();
    if let Err(e) = depthgrow_cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
