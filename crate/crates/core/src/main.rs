fn main() {
    std::process::exit(compressnet::cli::run(std::env::args_os()));
}
