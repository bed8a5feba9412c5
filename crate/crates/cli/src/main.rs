use clap::Parser;

fn main() {
    let cli = capgen_cli::Cli::parse();
    match capgen_cli::run(cli) {
        Ok(out) => print!("{out}"),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.code);
        }
    }
}
