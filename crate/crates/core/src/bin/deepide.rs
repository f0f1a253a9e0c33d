fn main() {
    std::process::exit(deepide::cli::run(std::env::args_os()));
}
