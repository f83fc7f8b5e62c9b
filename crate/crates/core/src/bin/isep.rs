fn main() {
    std::process::exit(isep_core::cli::run(std::env::args_os()));
}
