fn main() {
    std::process::exit(lmscnet_cli::run_args(std::env::args().collect()));
}
