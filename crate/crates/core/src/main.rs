fn main() {
    std::process::exit(kare::cli::run(std::env::args_os()));
}
