use clap::Parser;
use highlight_tta::cli::{run, Cli};

fn main() {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error code={} msg={}", e.exit_code(), e);
            std::process::exit(e.exit_code());
        }
    }
}
