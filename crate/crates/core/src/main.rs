fn main() {
    std::process::exit(sirenpose::cli::main_with_args(std::env::args_os()));
}
