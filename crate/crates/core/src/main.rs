fn main() {
    std::process::exit(nircal::cli::main_with_args(std::env::args_os()));
}
