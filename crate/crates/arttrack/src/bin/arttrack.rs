fn main() {
    std::process::exit(arttrack::cli::run_from_env());
}
