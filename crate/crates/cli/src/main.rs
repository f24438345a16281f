fn main() {
    std::process::exit(la_cli::run(std::env::args().collect()));
}
