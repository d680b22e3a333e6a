fn main() {
    std::process::exit(magsr::cli::main_with_args(std::env::args_os()));
}
