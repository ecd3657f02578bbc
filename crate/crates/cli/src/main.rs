use clap::Parser;

fn main() {
    let cli = act2g::Cli::parse();
    if let Err(e) = act2g::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
