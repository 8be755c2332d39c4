use clap::Parser;

fn main() {
    let cli = hdconv::cli::Cli::parse();
    if let Err(e) = hdconv::cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(hdconv::cli::exit_code(&e));
    }
}
