fn main() {
    std::process::exit(backdoor_lab::cli::main_with_args(std::env::args_os()));
}
