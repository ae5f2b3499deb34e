use clap::Parser;

fn main() {
    let args = spde_lyap::cli::Args::parse();
    std::process::exit(spde_lyap::cli::run(args));
}
