fn main() {
    std::process::exit(maat::cli::main_with_args(std::env::args_os()));
}
