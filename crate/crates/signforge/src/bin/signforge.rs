fn main() {
    std::process::exit(signforge::cli::run());
}
