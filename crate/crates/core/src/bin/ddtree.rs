fn main() {
    std::process::exit(ddtree::cli::main_with_args(std::env::args_os()));
}
