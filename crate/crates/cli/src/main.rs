fn main() {
    std::process::exit(ddbrink_cli::main_with_args(std::env::args_os()));
}
