fn main() {
    std::process::exit(anonygan::cli::run(std::env::args_os()));
}
