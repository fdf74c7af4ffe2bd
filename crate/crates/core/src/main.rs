fn main() {
    std::process::exit(scaler::cli::run_from(std::env::args_os()));
}
