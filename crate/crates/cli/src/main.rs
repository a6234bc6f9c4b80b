fn main() {
    std::process::exit(gramophone_cli::main_with_args(std::env::args_os()));
}
