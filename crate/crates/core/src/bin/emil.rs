fn main() {
    std::process::exit(emil::harness::cli::main_with_args(std::env::args_os()));
}
