fn main() {
    std::process::exit(dtdy::cli::run());
}
