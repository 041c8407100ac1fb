fn main() {
    std::process::exit(lochead::cli::run(std::env::args_os()));
}
