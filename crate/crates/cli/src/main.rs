use clap::Parser;

fn main() {
    let cli = accentkit_cli::Cli::parse();
    match accentkit_cli::run(&cli) {
        Ok(text) => println!("{text}"),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
