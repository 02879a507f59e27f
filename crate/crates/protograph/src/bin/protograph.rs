fn main() {
    std::process::exit(protograph::cli::run(std::env::args_os()));
}
