fn main() {
    std::process::exit(polar_kit::cli::main_with_args(std::env::args_os()));
}
