fn main() {
    std::process::exit(tatonnement::cli::main_with_args(std::env::args_os()));
}
