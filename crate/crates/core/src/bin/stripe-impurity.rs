fn main() {
    std::process::exit(stripe_impurity::cli::main_with(std::env::args_os()));
}
