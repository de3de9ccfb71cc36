use clap::Parser;
use mcmap_cli::{run, Cli, Error};

fn main() {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let err = Error::Validation(e.kind().to_string() + ": " + e.to_string().lines().next().unwrap_or(""));
            eprintln!("{}", err.to_json());
            std::process::exit(err.exit_code());
        }
    };
    match run(&cli) {
        Ok(()) => println!("{}", serde_json::json!({ "status": "ok", "stage": format!("{:?}", cli.command).to_lowercase() })),
        Err(e) => {
            eprintln!("{}", e.to_json());
            std::process::exit(e.exit_code());
        }
    }
}
