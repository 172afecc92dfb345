fn main() {
    std::process::exit(iiht::cli::run(std::env::args_os()));
}
