fn main() {
    std::process::exit(distcausal::cli::main_with_args(std::env::args_os()));
}
