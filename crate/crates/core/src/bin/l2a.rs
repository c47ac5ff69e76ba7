fn main() {
    l2a::cli::init_logging();
    std::process::exit(l2a::cli::run(std::env::args_os()));
}
