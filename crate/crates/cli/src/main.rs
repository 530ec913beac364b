fn main() {
    std::process::exit(retflip_cli::main_with_args(std::env::args_os()));
}
