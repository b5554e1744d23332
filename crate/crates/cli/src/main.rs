use clap::Parser;

fn main() {
    let cli = teamlora_cli::Cli::parse();
    std::process::exit(teamlora_cli::run(&cli));
}
