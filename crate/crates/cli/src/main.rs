use clap::Parser;
use kroa::app::{run, summary, Cli};

fn main() {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(session) => println!("{}", summary(&session)),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
