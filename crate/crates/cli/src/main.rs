fn main() {
    std::process::exit(closshare_cli::main_with_args(std::env::args_os()));
}
