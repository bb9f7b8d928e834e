use clap::Parser;

fn main() {
    let cli = mrbsde::cli::Cli::parse();
    std::process::exit(mrbsde::cli::main_with(cli));
}
