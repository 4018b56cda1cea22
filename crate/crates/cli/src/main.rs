use clap::Parser;
use tumorsynth_cli::app::{run, Cli};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(m) => {
            println!("{}", serde_json::to_string_pretty(&m).expect("manifest serializes"));
        }
        Err(e) => {
            eprintln!("tumorsynth {}: {e}", cli.command.name());
            std::process::exit(e.exit_code());
        }
    }
}
