fn main() {
    std::process::exit(rdnn::cli::run(std::env::args_os()));
}
