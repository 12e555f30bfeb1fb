fn main() {
    std::process::exit(ivcr::cli::main_with_args(std::env::args_os()));
}
