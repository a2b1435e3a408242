fn main() {
    std::process::exit(im2latex_cli::main_with_args(std::env::args_os()));
}
