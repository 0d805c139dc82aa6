fn main() {
    std::process::exit(tfec::cli::main_with_args(std::env::args_os()));
}
