fn main() {
    std::process::exit(dress::cli::run(std::env::args_os()));
}
