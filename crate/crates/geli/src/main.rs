fn main() {
    std::process::exit(geli::cli::run(std::env::args_os().collect()));
}
