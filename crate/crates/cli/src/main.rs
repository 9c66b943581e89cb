fn main() {
    std::process::exit(uwm_cli::run());
}
