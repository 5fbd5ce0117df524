fn main() {
    std::process::exit(sgmc::cli::main_with_args(std::env::args_os()));
}
