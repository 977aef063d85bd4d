fn main() {
    std::process::exit(djet_core::cli::main_with_args(std::env::args_os()));
}
