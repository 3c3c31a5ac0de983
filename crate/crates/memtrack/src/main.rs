use clap::Parser;

fn main() {
    let cli = memtrack::cli::Cli::parse();
    if let Err(err) = memtrack::cli::run(cli) {
        eprintln!("error: {err}");
        std::process::exit(1);
    }
}
