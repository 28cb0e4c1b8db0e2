fn main() {
    std::process::exit(dhim::cli::run(std::env::args_os()));
}
