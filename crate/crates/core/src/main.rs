fn main() {
    std::process::exit(dynid::cli::run(std::env::args_os()));
}
