fn main() {
    std::process::exit(supcon::cli::run(std::env::args_os()));
}
