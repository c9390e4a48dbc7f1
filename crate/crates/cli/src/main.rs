fn main() {
    std::process::exit(capsib_cli::main_with_args(std::env::args_os()));
}
