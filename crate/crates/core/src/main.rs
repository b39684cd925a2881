fn main() {
    std::process::exit(mmaml::cli::run(std::env::args_os()));
}
