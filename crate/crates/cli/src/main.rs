fn main() {
    std::process::exit(spoofnet_cli::run(std::env::args().skip(1)));
}
