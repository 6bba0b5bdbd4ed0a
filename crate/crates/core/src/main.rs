fn main() {
    std::process::exit(goalcomp::cli::main_with_args());
}
