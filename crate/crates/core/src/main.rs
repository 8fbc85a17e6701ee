fn main() {
    std::process::exit(seenet::cli::run(std::env::args_os()));
}
