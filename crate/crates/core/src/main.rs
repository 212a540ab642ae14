fn main() {
    std::process::exit(dualprompt::cli::main_with_args(std::env::args_os()));
}
