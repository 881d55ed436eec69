fn main() {
    std::process::exit(subzero::cli::run(std::env::args_os()));
}
