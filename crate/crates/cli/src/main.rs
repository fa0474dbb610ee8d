use std::process::ExitCode;

use clap::Parser;

use seqint::{run, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok((primary, companion, summary)) => {
            print!("{summary}");
            println!("wrote {} and {}", primary.display(), companion.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
