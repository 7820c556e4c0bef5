fn main() {
    std::process::exit(ienv::cli::main());
}
